"""Byte-pair-encoding tokenizer over ACGT text with reserved special tokens.

Vocabulary layout is fixed: ids 0-4 are the special tokens, ids 5-8 the four
bases, merged tokens follow. Training repeatedly merges the globally most
frequent adjacent pair (ties: lexicographically smallest merged string, then
smallest left string) until the target vocabulary size is reached or no pair
occurs at least twice.

The scan-heavy inner loops live in a backend module: a compiled Cython
extension when available, otherwise a pure-Python twin with identical
behavior. Set GENOJEPA_PURE_PYTHON=1 to force the fallback.
"""

from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Literal, Sequence

import numpy as np

from .sequences import Chunk

if os.environ.get("GENOJEPA_PURE_PYTHON") == "1":
    from . import _bpe_pure as _default_backend
else:
    try:
        from . import _bpe_core as _default_backend  # type: ignore[no-redef]
    except ImportError:
        from . import _bpe_pure as _default_backend  # type: ignore[no-redef]

Objective = Literal["mlm", "ntp"]

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[EOS]", "[MASK]", "[UNK]")
BASE_TOKENS = ("A", "C", "G", "T")
PAD_ID, CLS_ID, EOS_ID, MASK_ID, UNK_ID = range(5)
N_RESERVED = len(SPECIAL_TOKENS) + len(BASE_TOKENS)  # 9

_BASE_ID = {ch: N_RESERVED - 4 + i for i, ch in enumerate(BASE_TOKENS)}


class VocabTooSmallError(ValueError):
    """vocab_size below the 9 reserved entries (5 specials + 4 bases)."""


class InvalidBaseError(ValueError):
    """Input text contains a character outside {A, C, G, T}."""


class UnknownIdError(ValueError):
    """Token id outside the trained vocabulary."""


def bpe_backend_name() -> str:
    return _default_backend.BACKEND_NAME


@dataclass
class TokenizerModel:
    """Trained BPE vocabulary plus ordered merge rules.

    ``merges`` rows are (left_id, right_id, new_id); ``id_to_str`` maps ids
    back to token strings (specials included).
    """

    id_to_str: list[str]
    merges: list[tuple[int, int, int]]
    pad_id: int = PAD_ID
    cls_id: int = CLS_ID
    eos_id: int = EOS_ID
    mask_id: int = MASK_ID
    unk_id: int = UNK_ID
    _rules: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._rules = (
            np.asarray(self.merges, dtype=np.int32).reshape(-1, 3)
            if self.merges
            else np.zeros((0, 3), dtype=np.int32)
        )

    @property
    def vocab(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.id_to_str)}

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_str)


@dataclass(frozen=True)
class TokenizedSample:
    """Token ids plus per-token (start, end) offsets into the source chunk.

    Special tokens carry zero-width offsets. Offsets tile the source string
    exactly whenever no truncation occurred.
    """

    ids: list[int]
    offsets: list[tuple[int, int]]


def _to_base_ids(text: str) -> np.ndarray:
    try:
        return np.fromiter((_BASE_ID[ch] for ch in text), dtype=np.int32, count=len(text))
    except KeyError as exc:
        raise InvalidBaseError(f"invalid base {exc.args[0]!r} in input") from None


def train_bpe(
    corpus: Sequence[Chunk] | Sequence[str],
    vocab_size: int,
    seed: int = 0,
    backend=None,
) -> TokenizerModel:
    """Train a BPE tokenizer on a chunk corpus.

    Fully deterministic: the pair-selection order is a total order, so
    ``seed`` does not influence the result (kept for interface stability).

    Raises:
        VocabTooSmallError: vocab_size < 9.
    """
    del seed
    bk = backend if backend is not None else _default_backend
    if vocab_size < N_RESERVED:
        raise VocabTooSmallError(f"vocab_size must be >= {N_RESERVED}, got {vocab_size}")
    texts = [c.seq if isinstance(c, Chunk) else c for c in corpus]
    if not texts:
        raise ValueError("corpus is empty")

    id_to_str = list(SPECIAL_TOKENS) + list(BASE_TOKENS)
    str_to_id = {s: i for i, s in enumerate(id_to_str)}
    seqs = [_to_base_ids(t) for t in texts]

    counts: dict[tuple[int, int], int] = defaultdict(int)
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for i, s in enumerate(seqs):
        for p, c in bk.pair_counts(s).items():
            counts[p] += c
            where[p].add(i)

    merges: list[tuple[int, int, int]] = []
    while len(id_to_str) < vocab_size:
        best: tuple[int, int] | None = None
        best_key = None
        for (a, b), c in counts.items():
            if c < 2:
                continue
            key = (-c, id_to_str[a] + id_to_str[b], id_to_str[a])
            if best_key is None or key < best_key:
                best_key, best = key, (a, b)
        if best is None:
            break
        a, b = best
        new_str = id_to_str[a] + id_to_str[b]
        nid = str_to_id.get(new_str)
        if nid is None:
            nid = len(id_to_str)
            id_to_str.append(new_str)
            str_to_id[new_str] = nid
        merges.append((a, b, nid))
        # ``where`` may hold stale entries; merge_pair returns None for those.
        for i in sorted(where.get((a, b), ())):
            new_seq, deltas = bk.merge_pair(seqs[i], a, b, nid)
            if new_seq is None:
                continue
            seqs[i] = new_seq
            for p, d in deltas:
                counts[p] += d
                if d > 0:
                    where[p].add(i)

    return TokenizerModel(id_to_str=id_to_str, merges=merges)


def encode(
    model: TokenizerModel,
    chunk: str,
    objective: Objective,
    max_tokens: int,
    backend=None,
) -> TokenizedSample:
    """Tokenize one ACGT chunk, truncate centrally, attach the special token.

    Over-long token sequences keep their central region (excess dropped from
    the right first); [CLS] (mlm) or [EOS] (ntp) is attached after
    truncation so the aggregate token is always present and the total length
    never exceeds ``max_tokens``.

    Raises:
        InvalidBaseError: characters outside ACGT.
    """
    bk = backend if backend is not None else _default_backend
    if max_tokens < 2:
        raise ValueError(f"max_tokens must be >= 2, got {max_tokens}")
    if objective not in ("mlm", "ntp"):
        raise ValueError(f"objective must be 'mlm' or 'ntp', got {objective!r}")

    ids = bk.apply_merges(_to_base_ids(chunk), model._rules).tolist()
    starts = [0]
    for tid in ids:
        starts.append(starts[-1] + len(model.id_to_str[tid]))
    offsets = list(zip(starts[:-1], starts[1:]))

    budget = max_tokens - 1
    excess = len(ids) - budget
    if excess > 0:
        drop_left = excess // 2
        drop_right = excess - drop_left  # odd excess drops from the right first
        ids = ids[drop_left : len(ids) - drop_right]
        offsets = offsets[drop_left : len(offsets) - drop_right]

    if objective == "mlm":
        return TokenizedSample(ids=[model.cls_id] + ids, offsets=[(0, 0)] + offsets)
    end = len(chunk)
    return TokenizedSample(ids=ids + [model.eos_id], offsets=offsets + [(end, end)])


def decode(model: TokenizerModel, ids: Iterable[int]) -> str:
    """Concatenate token strings, skipping special tokens.

    Raises:
        UnknownIdError: id outside the vocabulary.
    """
    parts: list[str] = []
    n = len(model.id_to_str)
    for tid in ids:
        if not 0 <= tid < n:
            raise UnknownIdError(f"token id {tid} outside vocab of size {n}")
        if tid < len(SPECIAL_TOKENS):
            continue
        parts.append(model.id_to_str[tid])
    return "".join(parts)


def save_tokenizer(model: TokenizerModel, handle: IO[str]) -> None:
    """Serialize as versioned text: header, merge rules, special-id lines."""
    handle.write(f"bpe-v1 {model.vocab_size}\n")
    for a, b, _ in model.merges:
        handle.write(f"{model.id_to_str[a]}\t{model.id_to_str[b]}\n")
    for i, name in enumerate(SPECIAL_TOKENS):
        handle.write(f"{name}\t{i}\n")


def load_tokenizer(handle: Iterable[str]) -> TokenizerModel:
    """Rebuild a TokenizerModel by replaying the serialized merge rules."""
    lines = [ln.rstrip("\n") for ln in handle]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError("empty tokenizer file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "bpe-v1":
        raise ValueError(f"unsupported tokenizer header {lines[0]!r}")
    declared_size = int(head[1])

    if len(lines) < 6:
        raise ValueError("tokenizer file truncated (missing special-token lines)")
    body, specials = lines[1:-5], lines[-5:]
    for i, ln in enumerate(specials):
        fields = ln.split("\t")
        if len(fields) != 2 or fields[0] != SPECIAL_TOKENS[i] or int(fields[1]) != i:
            raise ValueError(f"unexpected special-token line {ln!r}")

    id_to_str = list(SPECIAL_TOKENS) + list(BASE_TOKENS)
    str_to_id = {s: i for i, s in enumerate(id_to_str)}
    merges: list[tuple[int, int, int]] = []
    for ln in body:
        fields = ln.split("\t")
        if len(fields) != 2:
            raise ValueError(f"bad merge line {ln!r}")
        left, right = fields
        if left not in str_to_id or right not in str_to_id:
            raise ValueError(f"merge {ln!r} references unknown token")
        new_str = left + right
        nid = str_to_id.get(new_str)
        if nid is None:
            nid = len(id_to_str)
            id_to_str.append(new_str)
            str_to_id[new_str] = nid
        merges.append((str_to_id[left], str_to_id[right], nid))

    if len(id_to_str) != declared_size:
        raise ValueError(
            f"vocab size mismatch: header says {declared_size}, rebuilt {len(id_to_str)}"
        )
    return TokenizerModel(id_to_str=id_to_str, merges=merges)
