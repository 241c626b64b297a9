"""Hot inner loops, compiled with numba when available.

Each kernel has a numba implementation and a pure-numpy fallback with the
same signature.  Set ``BDPL_DISABLE_NUMBA=1`` in the environment (before
import) to force the numpy path; the module-level names then point at the
fallbacks.  Both paths stay importable as ``<name>_numba`` / ``<name>_numpy``
so tests and the benchmark can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import sparse

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = NUMBA_AVAILABLE and not _flag("BDPL_DISABLE_NUMBA")


# ---------------------------------------------------------------------------
# CSR sparse @ dense


@njit(cache=True)
def _csr_matmul_nb(indptr, indices, data, dense):
    n_rows = indptr.shape[0] - 1
    d = dense.shape[1]
    out = np.zeros((n_rows, d), dtype=dense.dtype)
    for i in range(n_rows):
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            w = data[k]
            for c in range(d):
                out[i, c] += w * dense[j, c]
    return out


def csr_matmul_numba(indptr, indices, data, dense):
    return _csr_matmul_nb(indptr, indices, data.astype(dense.dtype), np.ascontiguousarray(dense))


def csr_matmul_numpy(indptr, indices, data, dense):
    n_rows = indptr.shape[0] - 1
    mat = sparse.csr_matrix((data.astype(dense.dtype), indices, indptr), shape=(n_rows, dense.shape[0]))
    return np.asarray(mat @ dense)


# ---------------------------------------------------------------------------
# row scatter-add (embedding backward)


@njit(cache=True)
def _scatter_add_rows_nb(target, index, rows):
    d = rows.shape[1]
    for k in range(index.shape[0]):
        r = index[k]
        for c in range(d):
            target[r, c] += rows[k, c]


def scatter_add_rows_numba(target, index, rows):
    """In place: ``target[index[k]] += rows[k]`` for every k (duplicates add)."""
    _scatter_add_rows_nb(target, np.ascontiguousarray(index, dtype=np.int64),
                         np.ascontiguousarray(rows, dtype=target.dtype))


def scatter_add_rows_numpy(target, index, rows):
    np.add.at(target, index, rows)


# ---------------------------------------------------------------------------
# full-ranking rank counting


@njit(cache=True)
def _rank_rows_nb(scores, targets):
    n, m = scores.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        t = targets[i]
        s = scores[i, t]
        rank = 1
        for j in range(m):
            v = scores[i, j]
            if v > s or (v == s and j < t):
                rank += 1
        out[i] = rank
    return out


def rank_rows_numba(scores, targets):
    """1-based ranks of ``scores[i, targets[i]]``; ties go to the lower column."""
    return _rank_rows_nb(np.ascontiguousarray(scores), np.ascontiguousarray(targets, dtype=np.int64))


def rank_rows_numpy(scores, targets):
    targets = np.asarray(targets, dtype=np.int64)
    s = scores[np.arange(scores.shape[0]), targets][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > s) | ((scores == s) & (cols < targets[:, None]))
    return 1 + ahead.sum(axis=1).astype(np.int64)


if USE_NUMBA:
    csr_matmul = csr_matmul_numba
    scatter_add_rows = scatter_add_rows_numba
    rank_rows = rank_rows_numba
else:
    csr_matmul = csr_matmul_numpy
    scatter_add_rows = scatter_add_rows_numpy
    rank_rows = rank_rows_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
