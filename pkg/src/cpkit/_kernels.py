"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The numba path is used whenever numba imports cleanly; set the environment
variable ``CPKIT_NO_NUMBA=1`` to force the numpy fallback (useful for
debugging and for the backend benchmark). Within either backend, batched
kernels evaluate each row independently and in the same accumulation order
as the scalar path, so matrix results are bitwise identical to row-by-row
evaluation regardless of parallelism.
"""

from __future__ import annotations

import math
import os

import numpy as np


def _numpy_softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    # cumsum keeps the left-to-right accumulation order of the numba kernel
    denom = np.cumsum(e, axis=1)[:, -1:]
    return e / denom


def _numpy_aps_rank_matrix(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, k = probs.shape
    # descending by probability, ties broken by ascending class index
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=1)
    csum = np.cumsum(sorted_p, axis=1)
    scores = np.empty_like(probs)
    ranks = np.empty((n, k), dtype=np.int64)
    np.put_along_axis(scores, order, csum, axis=1)
    rank_row = np.arange(1, k + 1, dtype=np.int64)
    np.put_along_axis(ranks, order, np.broadcast_to(rank_row, (n, k)), axis=1)
    return scores, ranks


_HAVE_NUMBA = False
if not os.environ.get("CPKIT_NO_NUMBA"):
    # the default TBB probe emits a version warning on some installs
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
    try:
        from numba import njit, prange

        _HAVE_NUMBA = True
    except ImportError:
        _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _numba_softmax_rows(logits):
        n, k = logits.shape
        out = np.empty((n, k), dtype=np.float64)
        for i in prange(n):
            m = logits[i, 0]
            for j in range(1, k):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(k):
                v = math.exp(logits[i, j] - m)
                out[i, j] = v
                s += v
            for j in range(k):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _argsort_desc_stable(p, order, buf):
        # iterative mergesort: descending by value, ties keep ascending index
        k = p.shape[0]
        for i in range(k):
            order[i] = i
        width = 1
        while width < k:
            lo = 0
            while lo < k:
                mid = min(lo + width, k)
                hi = min(lo + 2 * width, k)
                i = lo
                j = mid
                t = lo
                while i < mid and j < hi:
                    if p[order[i]] >= p[order[j]]:
                        buf[t] = order[i]
                        i += 1
                    else:
                        buf[t] = order[j]
                        j += 1
                    t += 1
                while i < mid:
                    buf[t] = order[i]
                    i += 1
                    t += 1
                while j < hi:
                    buf[t] = order[j]
                    j += 1
                    t += 1
                for x in range(lo, hi):
                    order[x] = buf[x]
                lo += 2 * width
            width *= 2

    @njit(cache=True, parallel=True)
    def _numba_aps_rank_matrix(probs):
        n, k = probs.shape
        scores = np.empty((n, k), dtype=np.float64)
        ranks = np.empty((n, k), dtype=np.int64)
        for i in prange(n):
            order = np.empty(k, dtype=np.int64)
            buf = np.empty(k, dtype=np.int64)
            _argsort_desc_stable(probs[i], order, buf)
            c = 0.0
            for r in range(k):
                j = order[r]
                c += probs[i, j]
                scores[i, j] = c
                ranks[i, j] = r + 1
        return scores, ranks

    softmax_rows = _numba_softmax_rows
    aps_rank_matrix = _numba_aps_rank_matrix
    BACKEND = "numba"
else:
    softmax_rows = _numpy_softmax_rows
    aps_rank_matrix = _numpy_aps_rank_matrix
    BACKEND = "numpy"


def backend_name() -> str:
    """Name of the kernel backend selected at import time."""
    return BACKEND
