"""Pure-Python BPE kernels.

Reference implementation of the hot loops used by tokenizer training and
encoding. ``_bpe_core`` (Cython) mirrors these functions exactly; the
tokenizer selects whichever is importable. Both must stay behaviorally
identical: tests compare their outputs token for token.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

BACKEND_NAME = "pure-python"


def pair_counts(seq: np.ndarray) -> dict[tuple[int, int], int]:
    """Count adjacent token-id pairs in one sequence."""
    counts: Counter[tuple[int, int]] = Counter()
    toks = seq.tolist()
    for i in range(len(toks) - 1):
        counts[(toks[i], toks[i + 1])] += 1
    return dict(counts)


def merge_pair(
    seq: np.ndarray, a: int, b: int, new_id: int
) -> tuple[np.ndarray | None, list[tuple[tuple[int, int], int]]]:
    """Greedily replace left-to-right occurrences of (a, b) with new_id.

    Returns (new_seq, pair-count deltas), or (None, []) when the pair does
    not occur. Deltas are new-minus-old adjacent pair counts.
    """
    toks = seq.tolist()
    n = len(toks)
    out: list[int] = []
    i = 0
    changed = False
    while i < n:
        if i + 1 < n and toks[i] == a and toks[i + 1] == b:
            out.append(new_id)
            i += 2
            changed = True
        else:
            out.append(toks[i])
            i += 1
    if not changed:
        return None, []

    delta: Counter[tuple[int, int]] = Counter()
    for j in range(len(out) - 1):
        delta[(out[j], out[j + 1])] += 1
    for j in range(n - 1):
        delta[(toks[j], toks[j + 1])] -= 1
    return (
        np.asarray(out, dtype=np.int32),
        [(p, d) for p, d in delta.items() if d != 0],
    )


def apply_merges(seq: np.ndarray, rules: np.ndarray) -> np.ndarray:
    """Apply merge rules in training order, each one globally.

    ``rules`` is an (n, 3) array of (left_id, right_id, new_id) rows.
    """
    cur = seq.tolist()
    present = set(cur)
    for k in range(rules.shape[0]):
        a, b, nid = int(rules[k, 0]), int(rules[k, 1]), int(rules[k, 2])
        if a not in present or b not in present:
            continue
        n = len(cur)
        out: list[int] = []
        i = 0
        changed = False
        while i < n:
            if i + 1 < n and cur[i] == a and cur[i + 1] == b:
                out.append(nid)
                i += 2
                changed = True
            else:
                out.append(cur[i])
                i += 1
        if changed:
            cur = out
            present.add(nid)
    return np.asarray(cur, dtype=np.int32)
