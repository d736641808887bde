"""Reprojection losses over a pair of frames.

One *direction* takes the points of a source frame, moves them into a target
camera, resolves occlusion, and scores the result against the target frame:

* point term: l1 distance between the registered moved points and the target
  frame's own points, averaged over cells populated in both;
* image term: per visible point, l1 over channels between the bilinear sample
  of the target image at the projected coordinate and the point's own color,
  averaged over visible points;
* SSIM term: the registered points' own colors and their target samples are
  splatted at the registered cells; ``1 - SSIM`` averaged over 3x3 patches
  whose nine cells are all populated;
* negative-depth term: sum of ``|z|`` over points that land in frame behind
  the target camera. Those points are removed from every other term.

``total_loss`` runs both directions and combines the summed terms with the
weights. Terms with no contributing element are 0.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import InvalidInput
from .geometry import Status
from .zbuffer import (heuristic_filter, register, self_registration,
                      zbuffer_parallel)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

TERMS = ("point", "image", "ssim", "negative_depth")


class OcclusionMode(str, enum.Enum):
    NONE = "none"
    ZBUFFER = "zbuffer"
    HEURISTIC = "heuristic"


@dataclass(frozen=True, eq=False)
class Image:
    """RGB image, ``pixels`` shaped ``(height, width, 3)`` with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInput("image must be (height, width, 3)")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0 or px.max(initial=0.0) > 1:
            raise InvalidInput("image intensities must be finite and within [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class Frame:
    image: Image
    depth: geo.DepthMap

    def __post_init__(self):
        if self.image.shape != self.depth.shape:
            raise InvalidInput("image and depth map dimensions differ")


@dataclass(frozen=True)
class LossWeights:
    point: float = 0.005
    image: float = 10.0
    ssim: float = 2.0
    negative_depth: float = 2.0

    def __post_init__(self):
        for name in TERMS:
            w = getattr(self, name)
            if not np.isfinite(w) or w < 0:
                raise InvalidInput(f"weight {name} must be finite and >= 0")

    def as_dict(self):
        return {name: getattr(self, name) for name in TERMS}

    def scaled(self, **factors):
        d = self.as_dict()
        for k, c in factors.items():
            d[k] *= c
        return LossWeights(**d)


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    point: float
    image: float
    ssim: float
    negative_depth: float
    total: float
    contributing_counts: dict
    directions: tuple = field(default=(), repr=False)

    def terms(self):
        return {name: getattr(self, name) for name in TERMS}

    def to_dict(self):
        d = self.terms()
        d["total"] = self.total
        d["contributing_counts"] = dict(self.contributing_counts)
        return d


# --- sampling ---------------------------------------------------------------

def bilinear_sample(pixels, u, v, with_grad=False):
    """Bilinear lookup of ``pixels[(v, u)]`` with clamp-to-edge taps.

    Returns samples shaped ``(n, channels)``; with ``with_grad`` also the
    partial derivatives with respect to ``u`` and ``v``.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w = pixels.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x0 = np.floor(u)
    y0 = np.floor(v)
    a = (u - x0)[:, None]
    b = (v - y0)[:, None]
    xa = np.clip(x0, 0, w - 1).astype(np.int64)
    xb = np.clip(x0 + 1, 0, w - 1).astype(np.int64)
    ya = np.clip(y0, 0, h - 1).astype(np.int64)
    yb = np.clip(y0 + 1, 0, h - 1).astype(np.int64)
    i00 = pixels[ya, xa]
    i10 = pixels[ya, xb]
    i01 = pixels[yb, xa]
    i11 = pixels[yb, xb]
    s = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    if not with_grad:
        return s
    ds_du = (1 - b) * (i10 - i00) + b * (i11 - i01)
    ds_dv = (1 - a) * (i01 - i00) + a * (i11 - i10)
    return s, ds_du, ds_dv


# --- SSIM -------------------------------------------------------------------

def _box3(a):
    """Sum over each 3x3 window; output indexed by window center (interior only)."""
    h, w = a.shape[:2]
    out = np.zeros((h - 2, w - 2) + a.shape[2:])
    for dy in range(3):
        for dx in range(3):
            out += a[dy:dy + h - 2, dx:dx + w - 2]
    return out


def _box3_adjoint(c, shape):
    out = np.zeros(shape)
    h, w = shape[:2]
    for dy in range(3):
        for dx in range(3):
            out[dy:dy + h - 2, dx:dx + w - 2] += c
    return out


@dataclass(frozen=True, eq=False)
class SSIMStats:
    patch_mask: np.ndarray   # (H-2, W-2) window centers with 9 populated cells
    ssim: np.ndarray         # (H-2, W-2, C) per-channel SSIM
    mu_x: np.ndarray
    mu_y: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    @property
    def count(self):
        return int(np.count_nonzero(self.patch_mask))

    @property
    def loss(self):
        if self.count == 0:
            return 0.0
        per_patch = 1.0 - self.ssim[self.patch_mask].mean(axis=1)
        # SSIM <= 1 exactly; rounding can overshoot by an ulp or so
        return max(0.0, float(per_patch.sum() / self.count))


def ssim_stats(recon, target, populated):
    x = np.asarray(recon, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    populated = np.asarray(populated, dtype=bool)
    if x.shape != y.shape or x.shape[:2] != populated.shape:
        raise InvalidInput("SSIM inputs differ in shape")
    h, w = populated.shape
    if h < 3 or w < 3:
        empty = np.zeros((max(h - 2, 0), max(w - 2, 0)) + x.shape[2:])
        return SSIMStats(np.zeros(empty.shape[:2], dtype=bool), empty, empty,
                         empty, empty, empty, empty, empty)
    patch_mask = _box3(populated.astype(np.float64)) == 9
    mu_x = _box3(x) / 9
    mu_y = _box3(y) / 9
    var_x = _box3(x * x) / 9 - mu_x ** 2
    var_y = _box3(y * y) / 9 - mu_y ** 2
    cov = _box3(x * y) / 9 - mu_x * mu_y
    a = 2 * mu_x * mu_y + SSIM_C1
    b = 2 * cov + SSIM_C2
    c = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    d = var_x + var_y + SSIM_C2
    ssim = a * b / (c * d)
    return SSIMStats(patch_mask, ssim, mu_x, mu_y, a, b, c, d)


def ssim_grad_target(stats, recon, target):
    """Gradient of the SSIM loss with respect to every cell of ``target``."""
    x = np.asarray(recon, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    n = stats.count
    if n == 0:
        return np.zeros_like(y)
    s, mx, my = stats.ssim, stats.mu_x, stats.mu_y
    a, b, c, d = stats.a, stats.b, stats.c, stats.d
    cd = c * d
    # dSSIM/dy_i = alpha + beta * x_i + gamma * y_i for each window
    alpha = (2 / 9) * ((mx * b - a * mx) / cd - s * (my / c - my / d))
    beta = (2 / 9) * a / cd
    gamma = -(2 / 9) * s / d
    m = stats.patch_mask[:, :, None]
    alpha, beta, gamma = alpha * m, beta * m, gamma * m
    g = (_box3_adjoint(alpha, y.shape) + x * _box3_adjoint(beta, y.shape)
         + y * _box3_adjoint(gamma, y.shape))
    return -g / (y.shape[2] * n)


def ssim_loss(recon, target, populated):
    """Mean ``1 - SSIM`` over 3x3 patches whose nine cells are all populated.

    SSIM uses a uniform window, is computed per channel and averaged over
    channels. Accepts ``Image`` objects or raw ``(H, W, C)`` arrays.
    """
    x = recon.pixels if isinstance(recon, Image) else recon
    y = target.pixels if isinstance(target, Image) else target
    return ssim_stats(x, y, populated).loss


# --- individual terms -------------------------------------------------------

def point_loss(reg_hat, reg):
    value, _ = _point_terms(reg_hat, reg)[:2]
    return value


def _point_terms(reg_hat, reg):
    if reg_hat.shape != reg.shape:
        raise InvalidInput("registrations differ in shape")
    both = (reg_hat.populated & reg.populated).reshape(-1)
    cells = np.flatnonzero(both)
    diff = reg_hat.coords.reshape(-1, 3)[cells] - reg.coords.reshape(-1, 3)[cells]
    count = len(cells)
    value = float(np.abs(diff).sum() / count) if count else 0.0
    return value, count, cells, diff


def reconstruct_and_image_loss(target_image, source_image, cloud, outcome, visible):
    value = _image_terms(target_image, source_image, cloud, outcome,
                         np.asarray(visible, dtype=np.int64))[0]
    return value


def _image_terms(target_image, source_image, cloud, outcome, visible):
    visible = np.sort(visible)
    if len(visible) and np.any(outcome.status[visible] != Status.IN_FRAME_POSITIVE):
        raise InvalidInput("visible points must be in frame with positive depth")
    sampled, ds_du, ds_dv = bilinear_sample(
        target_image.pixels, outcome.u[visible], outcome.v[visible], with_grad=True)
    src = cloud.source_pixel[visible]
    origin = source_image.pixels[src[:, 1], src[:, 0]]
    resid = sampled - origin
    count = len(visible)
    value = float(np.abs(resid).sum() / count) if count else 0.0
    return value, count, sampled, origin, resid, ds_du, ds_dv


def negative_depth_loss(outcome):
    neg = outcome.negative_in_frame
    return float(np.abs(outcome.depth[neg]).sum())


# --- one direction ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DirectionEval:
    """Forward pass of one direction, with what the gradient code reuses."""

    intr: geo.Intrinsics
    pose: geo.RigidTransform
    cloud: geo.PointCloud          # source points in the source camera
    moved: geo.PointCloud          # source points in the target camera
    target_cloud: geo.PointCloud   # target frame's own points
    outcome: geo.ProjectionOutcome
    visible: np.ndarray            # point indices entering point/image/SSIM
    zbuffer_iterations: int | None
    reg_hat: geo.Registration
    reg: geo.Registration
    values: dict
    counts: dict
    point_cells: np.ndarray
    point_diff: np.ndarray
    image_resid: np.ndarray
    image_ds_du: np.ndarray
    image_ds_dv: np.ndarray
    ssim: SSIMStats
    ssim_recon: np.ndarray
    ssim_target: np.ndarray
    ssim_cells: np.ndarray         # flat cells of the SSIM rasters that are populated
    ssim_points: np.ndarray        # position in ``visible`` of each cell's owner

    @property
    def negative(self):
        return self.outcome.negative_in_frame

    @property
    def exclusions(self):
        ifp = int(np.count_nonzero(self.outcome.status == Status.IN_FRAME_POSITIVE))
        return {
            "out_of_frame": int(np.count_nonzero(self.outcome.status == Status.OUT_OF_FRAME)),
            "negative_in_frame": int(len(self.negative)),
            "occluded": ifp - int(len(self.visible)),
        }

    def contributing_points(self):
        """Source point indices contributing to each term."""
        owners = self.reg_hat.owner.reshape(-1)
        return {
            "point": np.sort(owners[self.point_cells]),
            "image": self.visible,
            "ssim": np.sort(self.visible[self.ssim_points][self._ssim_used_cells()]),
            "negative_depth": self.negative,
        }

    def _ssim_used_cells(self):
        h, w = self.intr.height, self.intr.width
        used = np.zeros((h, w), dtype=bool)
        if h >= 3 and w >= 3:
            used = _box3_adjoint(self.ssim.patch_mask.astype(np.float64), (h, w)) > 0
        return used.reshape(-1)[self.ssim_cells]

    def fingerprint(self):
        """Every discrete selection the loss depends on, for smoothness checks."""
        o = self.outcome
        vis = self.visible
        return (
            o.status, o.raster_index, vis,
            np.floor(o.u[vis]), np.floor(o.v[vis]),
            self.reg_hat.owner, self.reg.populated, self.ssim.patch_mask,
            np.sign(self.point_diff), np.sign(self.image_resid),
        )


def evaluate_direction(source, target, pose, intr, occlusion_mode=OcclusionMode.ZBUFFER,
                       heuristic_tol=0.0, zbuffer_mode="deterministic"):
    """Score ``source`` frame points moved by ``pose`` into the ``target`` camera."""
    mode = OcclusionMode(occlusion_mode)
    if source.depth.shape != intr.shape or target.depth.shape != intr.shape:
        raise InvalidInput("frame dimensions do not match intrinsics")
    cloud = geo.inverse_project(source.depth, intr)
    moved = geo.transform(cloud, pose)
    outcome = geo.project(moved, intr)
    cand = outcome.in_frame_positive

    iterations = None
    if mode is OcclusionMode.ZBUFFER:
        zres = zbuffer_parallel(outcome.depth[cand], outcome.raster_index[cand],
                                intr.cell_count, mode=zbuffer_mode)
        visible = cand[zres.visible]
        iterations = zres.iterations
    elif mode is OcclusionMode.HEURISTIC:
        keep = heuristic_filter(outcome.depth[cand], target.depth,
                                outcome.raster_index[cand], heuristic_tol)
        visible = cand[keep]
    else:
        visible = cand

    reg_hat = register(moved, outcome, visible, intr)
    target_cloud = geo.inverse_project(target.depth, intr)
    reg = self_registration(target_cloud, intr)

    p_val, p_cnt, p_cells, p_diff = _point_terms(reg_hat, reg)
    i_val, i_cnt, sampled, origin, resid, ds_du, ds_dv = _image_terms(
        target.image, source.image, cloud, outcome, visible)

    shape = (intr.height, intr.width, 3)
    owners = reg_hat.owner.reshape(-1)
    ssim_cells = np.flatnonzero(owners >= 0)
    ssim_points = np.searchsorted(visible, owners[ssim_cells])
    recon = np.zeros(shape)
    tgt = np.zeros(shape)
    recon.reshape(-1, 3)[ssim_cells] = origin[ssim_points]
    tgt.reshape(-1, 3)[ssim_cells] = sampled[ssim_points]
    stats = ssim_stats(recon, tgt, reg_hat.populated)

    n_val = negative_depth_loss(outcome)
    values = {"point": p_val, "image": i_val, "ssim": stats.loss, "negative_depth": n_val}
    counts = {"point": p_cnt, "image": i_cnt, "ssim": stats.count,
              "negative_depth": int(len(outcome.negative_in_frame))}
    return DirectionEval(intr, pose, cloud, moved, target_cloud, outcome, visible,
                         iterations, reg_hat, reg, values, counts, p_cells, p_diff,
                         resid, ds_du, ds_dv, stats, recon, tgt, ssim_cells, ssim_points)


def evaluate_pair(frame_t, frame_t1, pose, intr, occlusion_mode=OcclusionMode.ZBUFFER,
                  heuristic_tol=0.0, zbuffer_mode="deterministic"):
    """Both directions. ``pose`` maps frame t+1 camera coordinates into frame t."""
    forward = evaluate_direction(frame_t, frame_t1, geo.invert(pose), intr,
                                 occlusion_mode, heuristic_tol, zbuffer_mode)
    backward = evaluate_direction(frame_t1, frame_t, pose, intr,
                                  occlusion_mode, heuristic_tol, zbuffer_mode)
    return forward, backward


def combine(directions, weights):
    sums = {name: sum(d.values[name] for d in directions) for name in TERMS}
    counts = {name: sum(d.counts[name] for d in directions) for name in TERMS}
    total = (weights.point * sums["point"] + weights.image * sums["image"]
             + weights.ssim * sums["ssim"] + weights.negative_depth * sums["negative_depth"])
    return LossBreakdown(sums["point"], sums["image"], sums["ssim"],
                         sums["negative_depth"], float(total), counts, tuple(directions))


def total_loss(frame_t, frame_t1, pose, intr, weights=None,
               occlusion_mode=OcclusionMode.ZBUFFER, heuristic_tol=0.0,
               zbuffer_mode="deterministic"):
    """Weighted sum of all four terms over both directions."""
    weights = weights or LossWeights()
    dirs = evaluate_pair(frame_t, frame_t1, pose, intr, occlusion_mode,
                         heuristic_tol, zbuffer_mode)
    return combine(dirs, weights)
