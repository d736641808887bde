"""Occlusion resolution for splatted points.

``zbuffer_parallel`` is the race-then-repair scheme: every point writes its
depth into the buffer without any conflict resolution, the stored values are
gathered back, and only points strictly nearer than what landed in their cell
are resubmitted. The resubmitted set shrinks every round, so the loop ends
after at most (largest cell multiplicity) rounds.

The scatter has two execution modes:

``deterministic``
    single-threaded, last writer in index order wins.
``threaded``
    ``numba.prange`` over points with unsynchronised stores; the winner of a
    contended cell is whatever store lands last.

``zbuffer_serial_oracle`` is the plain per-cell minimum used to check it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

# allow thread counts above the core count; numba reads this once at import
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(os.cpu_count() or 1, 8)))
# try OpenMP before TBB; an old TBB only produces a warning and falls through
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

import numba  # noqa: E402
import numpy as np  # noqa: E402
from numba import njit, prange  # noqa: E402

from .errors import InternalError, InvalidInput
from .geometry import Registration, Status

MODES = ("deterministic", "threaded")


@njit(cache=True)
def _scatter_serial(zbuf, keys, vals):
    for p in range(keys.shape[0]):
        zbuf[keys[p]] = vals[p]


@njit(parallel=True, cache=True)
def _scatter_threaded(zbuf, keys, vals):
    for p in prange(keys.shape[0]):
        zbuf[keys[p]] = vals[p]


@dataclass(frozen=True, eq=False)
class ZBufferResult:
    """Outcome of a z-buffer pass.

    zbuffer:      winning depth per cell, ``+inf`` where nothing landed
    visible:      sorted indices of points whose depth equals their cell's winner
    iterations:   number of scatter rounds executed
    round_sizes:  number of points scattered in each round
    """

    zbuffer: np.ndarray
    visible: np.ndarray
    iterations: int
    round_sizes: tuple

    def visible_mask(self, n):
        mask = np.zeros(n, dtype=bool)
        mask[self.visible] = True
        return mask


def _check_inputs(depths, raster_indices, cell_count):
    d = np.ascontiguousarray(depths, dtype=np.float64).reshape(-1)
    k = np.ascontiguousarray(raster_indices, dtype=np.int64).reshape(-1)
    if d.shape != k.shape:
        raise InvalidInput("depths and raster_indices differ in length")
    if cell_count < 0 or (cell_count == 0 and len(k)):
        raise InvalidInput("cell_count must cover every raster index")
    if len(k) and (k.min() < 0 or k.max() >= cell_count):
        raise InvalidInput("raster index out of range")
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise InvalidInput("depths must be finite and strictly positive")
    return d, k


def _resolve_threads(threads):
    if threads is None:
        return numba.get_num_threads()
    if threads < 1:
        raise InvalidInput("thread count must be >= 1")
    return min(int(threads), numba.config.NUMBA_NUM_THREADS)


def zbuffer_parallel(depths, raster_indices, cell_count, *, mode="deterministic",
                     threads=None, scatter_order=None):
    """Race-then-repair z-buffer.

    ``scatter_order`` (deterministic mode only) is a permutation of point
    indices giving the write order; the last writer in that order wins each
    contended cell. It exists to drive worst-case round counts in tests.
    """
    d_orig, k_orig = _check_inputs(depths, raster_indices, cell_count)
    n = len(d_orig)
    if mode not in MODES:
        raise InvalidInput(f"unknown scatter mode {mode!r}")

    perm = None
    if scatter_order is not None:
        if mode != "deterministic":
            raise InvalidInput("scatter_order requires deterministic mode")
        perm = np.asarray(scatter_order, dtype=np.int64)
        if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
            raise InvalidInput("scatter_order must be a permutation of point indices")
        d_run, k_run = d_orig[perm], k_orig[perm]
    else:
        d_run, k_run = d_orig, k_orig

    if mode == "threaded":
        nthreads = _resolve_threads(threads)
        previous = numba.get_num_threads()
        numba.set_num_threads(nthreads)
        scatter = _scatter_threaded
    else:
        scatter = _scatter_serial

    zbuf = np.full(cell_count, np.inf)
    d, k = d_run, k_run
    sizes = []
    try:
        while True:
            if len(sizes) > n:
                raise InternalError("z-buffer exceeded its iteration cap")
            sizes.append(len(d))
            scatter(zbuf, k, d)
            gathered = zbuf[k]
            nearer = d < gathered
            remaining = int(np.count_nonzero(nearer))
            if remaining == 0:
                break
            if remaining >= len(d):
                raise InternalError("z-buffer repair set did not shrink")
            d = d[nearer]
            k = k[nearer]
    finally:
        if mode == "threaded":
            numba.set_num_threads(previous)

    visible = np.flatnonzero(d_run == zbuf[k_run])
    if perm is not None:
        visible = np.sort(perm[visible])
    return ZBufferResult(zbuf, visible, len(sizes), tuple(sizes))


def zbuffer_serial_oracle(depths, raster_indices, cell_count):
    """Single-pass per-cell minimum; every point achieving the minimum is visible."""
    d, k = _check_inputs(depths, raster_indices, cell_count)
    zbuf = np.full(cell_count, np.inf)
    np.minimum.at(zbuf, k, d)
    visible = np.flatnonzero(d == zbuf[k])
    return ZBufferResult(zbuf, visible, 1, (len(d),))


def heuristic_filter(transformed_depths, target_depth, raster_indices, tolerance=0.0):
    """Minimum-depth-consistency filter against a (predicted) target depth map.

    A point passes when it is not behind the target depth at its cell by more
    than ``tolerance``. Cells with no valid target depth pass everything.
    Returns the sorted indices of passing points.
    """
    d = np.asarray(transformed_depths, dtype=np.float64).reshape(-1)
    k = np.asarray(raster_indices, dtype=np.int64).reshape(-1)
    if d.shape != k.shape:
        raise InvalidInput("depths and raster_indices differ in length")
    target = target_depth.values.reshape(-1)
    valid = target_depth.validity.reshape(-1)
    if len(k) and (k.min() < 0 or k.max() >= target.size):
        raise InvalidInput("raster index outside target depth map")
    keep = ~valid[k] | (d <= target[k] + tolerance)
    return np.flatnonzero(keep)


def cell_multiplicity(raster_indices, cell_count):
    return np.bincount(np.asarray(raster_indices, dtype=np.int64), minlength=cell_count)


def visible_points(outcome, zres):
    """Map a result computed on the in-frame-positive subset back to point indices."""
    return outcome.in_frame_positive[zres.visible]


def register(cloud, outcome, visible, intr):
    """Place visible points into the target raster.

    ``visible`` is either a ``ZBufferResult`` computed on ``outcome``'s
    in-frame-positive subset, or an array of point indices. When several
    visible points share a cell the lowest point index is stored.
    """
    if isinstance(visible, ZBufferResult):
        idx = visible_points(outcome, visible)
    else:
        idx = np.asarray(visible, dtype=np.int64)
    idx = np.sort(idx)
    if len(idx) and np.any(outcome.status[idx] != Status.IN_FRAME_POSITIVE):
        raise InvalidInput("only in-frame positive-depth points can be registered")
    cells = outcome.raster_index[idx]
    cells_u, first = np.unique(cells, return_index=True)
    winners = idx[first]
    coords = np.zeros((intr.cell_count, 3))
    populated = np.zeros(intr.cell_count, dtype=bool)
    owner = np.full(intr.cell_count, -1, dtype=np.int64)
    coords[cells_u] = cloud.points[winners]
    populated[cells_u] = True
    owner[cells_u] = winners
    h, w = intr.height, intr.width
    return Registration(coords.reshape(h, w, 3), populated.reshape(h, w),
                        owner.reshape(h, w))


def self_registration(cloud, intr):
    """Registration of a cloud at its own source pixels (the reshaped cloud)."""
    coords = np.zeros((intr.cell_count, 3))
    populated = np.zeros(intr.cell_count, dtype=bool)
    owner = np.full(intr.cell_count, -1, dtype=np.int64)
    cells = cloud.source_cells
    coords[cells] = cloud.points
    populated[cells] = True
    owner[cells] = np.arange(len(cloud))
    h, w = intr.height, intr.width
    return Registration(coords.reshape(h, w, 3), populated.reshape(h, w),
                        owner.reshape(h, w))

