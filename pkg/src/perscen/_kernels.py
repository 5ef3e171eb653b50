"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel here has two implementations that produce bitwise-identical
results: the numpy versions accumulate in exactly the same order as the
compiled loops. Set ``PERSCEN_DISABLE_NUMBA=1`` to force the numpy path.

The matmul kernel exists because BLAS results depend on the batch size
(different blocking for different row counts), which would break the
guarantee that an item vector computed inside a large batch equals the same
vector computed alone.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("PERSCEN_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def matmul_np(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-invariant ``x @ w`` for 2-D inputs, accumulating over k in order."""
    out = np.zeros((x.shape[0], w.shape[1]))
    for k in range(x.shape[1]):
        out += x[:, k, None] * w[k]
    return out


def topk_mask_np(a: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask keeping the k largest entries of each row (ties -> lower column)."""
    n = a.shape[1]
    if k >= n:
        return np.ones(a.shape, dtype=np.bool_)
    order = np.argsort(-a, axis=1, kind="stable")[:, :k]
    mask = np.zeros(a.shape, dtype=np.bool_)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def nearest_code_np(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the closest code (squared L2) per row of z; ties -> lowest index."""
    dist = np.zeros((z.shape[0], codes.shape[0]))
    for j in range(z.shape[1]):
        diff = z[:, j, None] - codes[None, :, j]
        dist += diff * diff
    return np.argmin(dist, axis=1)


def topk_scores_np(scores: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k best scores per row, ordered by (-score, index)."""
    k = min(k, scores.shape[1])
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def matmul_nb(x, w):
        n, kdim = x.shape
        m = w.shape[1]
        out = np.zeros((n, m))
        for i in range(n):
            for k in range(kdim):
                xik = x[i, k]
                for j in range(m):
                    out[i, j] += xik * w[k, j]
        return out

    @njit(cache=True)
    def topk_mask_nb(a, k):
        rows, n = a.shape
        mask = np.zeros((rows, n), dtype=np.bool_)
        if k >= n:
            mask[:, :] = True
            return mask
        for r in range(rows):
            for _ in range(k):
                best = -1
                for c in range(n):
                    if mask[r, c]:
                        continue
                    if best < 0 or a[r, c] > a[r, best]:
                        best = c
                mask[r, best] = True
        return mask

    @njit(cache=True)
    def nearest_code_nb(z, codes):
        b, dim = z.shape
        c = codes.shape[0]
        out = np.empty(b, dtype=np.int64)
        for i in range(b):
            best = 0
            best_d = np.inf
            for q in range(c):
                d = 0.0
                for j in range(dim):
                    diff = z[i, j] - codes[q, j]
                    d += diff * diff
                if d < best_d:
                    best_d = d
                    best = q
            out[i] = best
        return out

    @njit(cache=True)
    def _heap_worse(s, i, hs, hi):
        # True if (s, i) ranks strictly worse than the heap entry (hs, hi)
        return s < hs or (s == hs and i > hi)

    @njit(cache=True)
    def _sift_down(hs, hi, pos, size):
        while True:
            left = 2 * pos + 1
            if left >= size:
                return
            worst = left
            right = left + 1
            if right < size and _heap_worse(hs[right], hi[right], hs[left], hi[left]):
                worst = right
            if _heap_worse(hs[worst], hi[worst], hs[pos], hi[pos]):
                hs[worst], hs[pos] = hs[pos], hs[worst]
                hi[worst], hi[pos] = hi[pos], hi[worst]
                pos = worst
            else:
                return

    @njit(cache=True)
    def topk_scores_nb(scores, k):
        q, n = scores.shape
        if k > n:
            k = n
        out = np.empty((q, k), dtype=np.int64)
        if 4 * k >= n:
            for r in range(q):
                order = np.argsort(-scores[r], kind="mergesort")
                out[r, :] = order[:k]
            return out
        hs = np.empty(k)
        hi = np.empty(k, dtype=np.int64)
        for r in range(q):
            # min-heap on rank: root holds the worst kept entry
            for j in range(k):
                hs[j] = scores[r, j]
                hi[j] = j
            for pos in range(k // 2 - 1, -1, -1):
                _sift_down(hs, hi, pos, k)
            for j in range(k, n):
                s = scores[r, j]
                if _heap_worse(hs[0], hi[0], s, j):
                    hs[0] = s
                    hi[0] = j
                    _sift_down(hs, hi, 0, k)
            # pop worst-first into the tail
            size = k
            while size > 0:
                out[r, size - 1] = hi[0]
                size -= 1
                hs[0] = hs[size]
                hi[0] = hi[size]
                _sift_down(hs, hi, 0, size)
        return out


_NUMPY = {
    "matmul": matmul_np,
    "topk_mask": topk_mask_np,
    "nearest_code": nearest_code_np,
    "topk_scores": topk_scores_np,
}
_NUMBA = (
    {
        "matmul": matmul_nb,
        "topk_mask": topk_mask_nb,
        "nearest_code": nearest_code_nb,
        "topk_scores": topk_scores_nb,
    }
    if _HAVE_NUMBA
    else dict(_NUMPY)
)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def implementations(name: str) -> dict:
    """Both implementations of a kernel, for benchmarks and parity tests."""
    return {"numpy": _NUMPY[name], "numba": _NUMBA[name]}


def _impl(name):
    return (_NUMBA if USE_NUMBA else _NUMPY)[name]


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    return _impl("matmul")(x, w)


def topk_mask(a: np.ndarray, k: int) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return _impl("topk_mask")(a, int(k))


def nearest_code(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    z = np.ascontiguousarray(z, dtype=np.float64)
    codes = np.ascontiguousarray(codes, dtype=np.float64)
    if codes.shape[0] == 0:
        raise ValueError("empty codebook")
    return _impl("nearest_code")(z, codes)


def topk_scores(scores: np.ndarray, k: int) -> np.ndarray:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    return _impl("topk_scores")(scores, int(k))
