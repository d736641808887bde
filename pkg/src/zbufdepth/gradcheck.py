"""Analytic depth gradients of the total loss, and a finite-difference check.

Gradients follow the fixed-mask convention: visibility, point status, raster
cells, bilinear tap cells and SSIM patch membership are held constant, and
the derivative flows through the continuous quantities only (moved point
coordinates, projected coordinates, bilinear samples, depth signs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .geometry import DepthMap

REL_ERROR_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class GradientMap:
    """dL/dD per pixel; zero at invalid pixels."""

    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        valid = np.array(self.validity, dtype=bool)
        vals[~valid] = 0.0
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "validity", valid)


@dataclass(frozen=True, eq=False)
class GradCheckReport:
    max_relative_error: float
    errors: dict = field(repr=False)   # frame name -> grid, NaN where not checked
    pixels_checked: int
    pixels_skipped_nonsmooth: int

    def to_dict(self):
        return {"max_relative_error": self.max_relative_error,
                "pixels_checked": self.pixels_checked,
                "pixels_skipped_nonsmooth": self.pixels_skipped_nonsmooth}


def _direction_grads(e, weights):
    """Return (dL/dD_source, dL/dD_target) grids for one evaluated direction."""
    intr = e.intr
    h, w = intr.height, intr.width
    n = len(e.cloud)
    g_q = np.zeros((n, 3))          # dL/d(moved point)
    g_tgt = np.zeros(h * w)

    # point term
    cnt = e.counts["point"]
    if cnt and weights.point:
        sgn = np.sign(e.point_diff) * (weights.point / cnt)
        owners = e.reg_hat.owner.reshape(-1)[e.point_cells]
        np.add.at(g_q, owners, sgn)
        own = e.reg.owner.reshape(-1)[e.point_cells]
        rays = intr.rays(*e.target_cloud.source_pixel[own].T)
        g_tgt[e.point_cells] -= np.einsum("nc,nc->n", sgn, rays)

    # image and SSIM terms both reach depth through the bilinear sample
    vis = e.visible
    g_s = np.zeros((len(vis), 3))
    cnt = e.counts["image"]
    if cnt and weights.image:
        g_s += np.sign(e.image_resid) * (weights.image / cnt)
    if e.ssim.count and weights.ssim:
        g_raster = L.ssim_grad_target(e.ssim, e.ssim_recon, e.ssim_target)
        g_s[e.ssim_points] += weights.ssim * g_raster.reshape(-1, 3)[e.ssim_cells]
    if len(vis):
        g_u = np.einsum("nc,nc->n", g_s, e.image_ds_du)
        g_v = np.einsum("nc,nc->n", g_s, e.image_ds_dv)
        x, y, z = e.moved.points[vis].T
        g_q[vis, 0] += g_u * intr.fx / z
        g_q[vis, 1] += g_v * intr.fy / z
        g_q[vis, 2] -= (g_u * intr.fx * x + g_v * intr.fy * y) / (z * z)

    # negative-depth term
    neg = e.negative
    if len(neg) and weights.negative_depth:
        g_q[neg, 2] += weights.negative_depth * np.sign(e.outcome.depth[neg])

    # moved point = R * (d * ray) + t, so dQ/dd = R ray
    rays = intr.rays(*e.cloud.source_pixel.T)
    dq_dd = rays @ e.pose.rotation.T
    g_d = np.einsum("nc,nc->n", g_q, dq_dd)
    g_src = np.zeros(h * w)
    g_src[e.cloud.source_cells] = g_d
    return g_src.reshape(h, w), g_tgt.reshape(h, w)


def grad_total_wrt_depths(frame_t, frame_t1, pose, intr, weights=None,
                          occlusion_mode=L.OcclusionMode.ZBUFFER, heuristic_tol=0.0,
                          zbuffer_mode="deterministic", evals=None):
    """Analytic gradient of ``total_loss`` with respect to both depth maps."""
    weights = weights or L.LossWeights()
    if evals is None:
        evals = L.evaluate_pair(frame_t, frame_t1, pose, intr, occlusion_mode,
                                heuristic_tol, zbuffer_mode)
    fwd, bwd = evals
    src_t, tgt_t1 = _direction_grads(fwd, weights)
    src_t1, tgt_t = _direction_grads(bwd, weights)
    return (GradientMap(src_t + tgt_t, frame_t.depth.validity),
            GradientMap(src_t1 + tgt_t1, frame_t1.depth.validity))


def term_gradients(frame_t, frame_t1, pose, intr, **kwargs):
    """Unweighted gradient of each term separately: ``{term: (g_t, g_t1)}``."""
    evals = L.evaluate_pair(frame_t, frame_t1, pose, intr, **kwargs)
    out = {}
    for name in L.TERMS:
        unit = L.LossWeights(**{k: float(k == name) for k in L.TERMS})
        out[name] = grad_total_wrt_depths(frame_t, frame_t1, pose, intr, unit, evals=evals)
    return out


def _same_state(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _near_boundary(coord, margin, taps):
    # raster cells change at half-integers; bilinear taps (only sampled for
    # visible points) change at integers
    half = abs(coord - (np.floor(coord) + 0.5)) < margin
    return half or (taps and abs(coord - np.round(coord)) < margin)


def finite_diff_check(frame_t, frame_t1, pose, intr, weights=None, *, step=1e-4,
                      skip_margin=1e-3, occlusion_mode=L.OcclusionMode.ZBUFFER,
                      heuristic_tol=0.0, analytic=None, frames=("t", "t1"),
                      rel_floor=REL_ERROR_FLOOR):
    """Compare the analytic gradient with central differences, pixel by pixel.

    The relative error at a pixel is ``|a - f| / max(|a|, |f|, rel_floor)``.
    A pixel is skipped as non-smooth when either probe changes any discrete
    selection of either direction, or when the pixel's own projected point
    lies within ``skip_margin`` pixels of a tap or cell boundary.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    weights = weights or L.LossWeights()
    opts = dict(occlusion_mode=occlusion_mode, heuristic_tol=heuristic_tol)
    base = L.evaluate_pair(frame_t, frame_t1, pose, intr, **opts)
    if analytic is None:
        analytic = grad_total_wrt_depths(frame_t, frame_t1, pose, intr, weights,
                                         evals=base, **opts)
    base_fp = [e.fingerprint() for e in base]
    source_eval = {"t": base[0], "t1": base[1]}

    errors = {}
    checked = skipped = 0
    worst = 0.0
    for name in frames:
        grad = analytic[0] if name == "t" else analytic[1]
        frame = frame_t if name == "t" else frame_t1
        e_src = source_eval[name]
        pos = np.full(frame.depth.shape, -1, dtype=np.int64)
        pos.reshape(-1)[e_src.cloud.source_cells] = np.arange(len(e_src.cloud))
        sampled = np.zeros(len(e_src.cloud), dtype=bool)
        sampled[e_src.visible] = True
        err = np.full(frame.depth.shape, np.nan)
        for j, i in zip(*np.nonzero(frame.depth.validity)):
            p = pos[j, i]
            if (_near_boundary(e_src.outcome.u[p], skip_margin, sampled[p])
                    or _near_boundary(e_src.outcome.v[p], skip_margin, sampled[p])):
                skipped += 1
                continue
            losses = []
            smooth = True
            for sgn in (1.0, -1.0):
                vals = frame.depth.values.copy()
                vals[j, i] += sgn * step
                if vals[j, i] <= 0:
                    smooth = False
                    break
                probe = L.Frame(frame.image, DepthMap(vals, frame.depth.validity))
                ft, ft1 = (probe, frame_t1) if name == "t" else (frame_t, probe)
                dirs = L.evaluate_pair(ft, ft1, pose, intr, **opts)
                if not all(_same_state(e.fingerprint(), fp) for e, fp in zip(dirs, base_fp)):
                    smooth = False
                    break
                losses.append(L.combine(dirs, weights).total)
            if not smooth:
                skipped += 1
                continue
            fd = (losses[0] - losses[1]) / (2 * step)
            a = grad.values[j, i]
            rel = abs(a - fd) / max(abs(a), abs(fd), rel_floor)
            err[j, i] = rel
            worst = max(worst, rel)
            checked += 1
        errors[name] = err
    return GradCheckReport(worst, errors, checked, skipped)
