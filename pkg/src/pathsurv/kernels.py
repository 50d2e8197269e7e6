"""Segment scatter/gather kernels.

Once matrix products are delegated to BLAS, these row-indexed accumulation
loops dominate forward/backward time. Each kernel exists in two versions: a
numba-compiled one and a pure-numpy fallback. Both iterate elements in the
same order, so results are bit-identical across backends.

Backend selection: numba is used when importable unless the environment
variable ``PATHSURV_NO_NUMBA`` is set to 1/true/yes. ``active_backend()``
reports which path is live. ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

import numpy as np

__all__ = [
    "active_backend",
    "scatter_add_rows",
    "scatter_max_rows",
    "segment_sum",
    "segment_mean",
    "segment_max",
    "segment_counts",
]


def _scatter_add_rows_numpy(out, index, values):
    np.add.at(out, index, values)
    return out


def _scatter_max_rows_numpy(out, index, values):
    np.maximum.at(out, index, values)
    return out


def _env_disabled() -> bool:
    return os.environ.get("PATHSURV_NO_NUMBA", "").strip().lower() in (
        "1",
        "true",
        "yes",
    )


_scatter_add_rows_numba = None
_scatter_max_rows_numba = None

try:
    from numba import njit as _njit

    @_njit(cache=True)
    def _scatter_add_rows_numba(out, index, values):  # pragma: no cover - jit
        for e in range(index.shape[0]):
            s = index[e]
            for j in range(values.shape[1]):
                out[s, j] += values[e, j]
        return out

    @_njit(cache=True)
    def _scatter_max_rows_numba(out, index, values):  # pragma: no cover - jit
        for e in range(index.shape[0]):
            s = index[e]
            for j in range(values.shape[1]):
                if values[e, j] > out[s, j]:
                    out[s, j] = values[e, j]
        return out

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

_USE_NUMBA = _HAVE_NUMBA and not _env_disabled()

if _USE_NUMBA:
    scatter_add_rows = _scatter_add_rows_numba
    scatter_max_rows = _scatter_max_rows_numba
else:
    scatter_add_rows = _scatter_add_rows_numpy
    scatter_max_rows = _scatter_max_rows_numpy


def active_backend() -> str:
    """Name of the kernel backend in use: 'numba' or 'numpy'."""
    return "numba" if _USE_NUMBA else "numpy"


def segment_counts(index: np.ndarray, n_segments: int) -> np.ndarray:
    """Number of elements mapped to each segment, as float64."""
    return np.bincount(index, minlength=n_segments).astype(np.float64)


def segment_sum(values: np.ndarray, index: np.ndarray, n_segments: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n_segments`` buckets given by ``index``.

    Empty segments yield zero rows.
    """
    out = np.zeros((n_segments, values.shape[1]), dtype=np.float64)
    if index.shape[0]:
        scatter_add_rows(out, index, values)
    return out


def segment_mean(values: np.ndarray, index: np.ndarray, n_segments: int) -> np.ndarray:
    """Per-segment mean of rows; empty segments yield zero rows."""
    total = segment_sum(values, index, n_segments)
    counts = segment_counts(index, n_segments)
    nonempty = counts > 0
    total[nonempty] /= counts[nonempty, None]
    return total


def segment_max(values: np.ndarray, index: np.ndarray, n_segments: int) -> np.ndarray:
    """Per-segment column-wise max; empty segments hold -inf."""
    out = np.full((n_segments, values.shape[1]), -np.inf, dtype=np.float64)
    if index.shape[0]:
        scatter_max_rows(out, index, values)
    return out
