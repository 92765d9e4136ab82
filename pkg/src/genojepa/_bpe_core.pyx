# cython: language_level=3
"""Cython BPE kernels: drop-in replacements for ``_bpe_pure``.

Same contracts, typed inner loops. Keep in lockstep with the pure module;
the test suite asserts identical outputs from both backends.
"""

import numpy as np

BACKEND_NAME = "cython"


def pair_counts(seq):
    """Count adjacent token-id pairs in one sequence."""
    cdef int[::1] toks = np.ascontiguousarray(seq, dtype=np.int32)
    cdef Py_ssize_t i, n = toks.shape[0]
    counts = {}
    for i in range(n - 1):
        key = (toks[i], toks[i + 1])
        counts[key] = counts.get(key, 0) + 1
    return counts


def merge_pair(seq, int a, int b, int new_id):
    """Greedily replace left-to-right occurrences of (a, b) with new_id.

    Returns (new_seq, pair-count deltas), or (None, []) when the pair does
    not occur. Deltas are new-minus-old adjacent pair counts.
    """
    cdef int[::1] toks = np.ascontiguousarray(seq, dtype=np.int32)
    cdef Py_ssize_t n = toks.shape[0]
    out_arr = np.empty(n, dtype=np.int32)
    cdef int[::1] out = out_arr
    cdef Py_ssize_t i = 0, m = 0
    cdef bint changed = False
    while i < n:
        if i + 1 < n and toks[i] == a and toks[i + 1] == b:
            out[m] = new_id
            m += 1
            i += 2
            changed = True
        else:
            out[m] = toks[i]
            m += 1
            i += 1
    if not changed:
        return None, []
    out_arr = out_arr[:m]

    delta = {}
    cdef int[::1] new_toks = out_arr
    for i in range(m - 1):
        key = (new_toks[i], new_toks[i + 1])
        delta[key] = delta.get(key, 0) + 1
    for i in range(n - 1):
        key = (toks[i], toks[i + 1])
        delta[key] = delta.get(key, 0) - 1
    return out_arr, [(p, d) for p, d in delta.items() if d != 0]


def apply_merges(seq, rules):
    """Apply merge rules in training order, each one globally."""
    cdef int[::1] cur = np.ascontiguousarray(seq, dtype=np.int32).copy()
    cdef int[:, ::1] r = np.ascontiguousarray(rules, dtype=np.int32)
    cdef Py_ssize_t n = cur.shape[0], n_rules = r.shape[0]
    cdef Py_ssize_t k, i, m
    cdef int a, b, nid
    cdef bint changed
    scratch_arr = np.empty(n, dtype=np.int32)
    cdef int[::1] scratch = scratch_arr
    present = set(np.asarray(cur).tolist())
    for k in range(n_rules):
        a, b, nid = r[k, 0], r[k, 1], r[k, 2]
        if a not in present or b not in present:
            continue
        i = 0
        m = 0
        changed = False
        while i < n:
            if i + 1 < n and cur[i] == a and cur[i + 1] == b:
                scratch[m] = nid
                m += 1
                i += 2
                changed = True
            else:
                scratch[m] = cur[i]
                m += 1
                i += 1
        if changed:
            cur[:m] = scratch[:m]
            n = m
            present.add(nid)
    return np.asarray(cur[:n]).copy()
