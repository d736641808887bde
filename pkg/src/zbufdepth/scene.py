"""Synthetic scenes whose depth and occlusion are known in closed form.

Scenes are built from fronto-parallel primitives (constant world z): bounded
rectangles and unbounded planes. Depth and color come from exact ray/plane
intersection; visibility between the two cameras is decided by intersecting
the segment from the second camera's center to each surface point with every
primitive. None of this touches the z-buffer code it is used to check.

Camera poses are camera-to-world. The relative pose handed to the losses maps
second-camera coordinates into first-camera coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .geometry import DepthMap, Intrinsics, RigidTransform
from .losses import Frame, Image

KITTI_WIDTH = 1216
KITTI_HEIGHT = 352
KITTI_MAX_DEPTH = 80.0
KITTI_BASELINE = 0.54
KITTI_INTRINSICS = Intrinsics(721.5377, 721.5377, 609.5593, 172.854, KITTI_WIDTH, KITTI_HEIGHT)

TEXTURES = ("constant", "smooth", "checker")
_SEGMENT_EPS = 1e-9


@dataclass(frozen=True)
class Primitive:
    """Surface at world depth ``z``; ``bounds`` is ``(x0, x1, y0, y1)`` or None for a plane.

    Texture parameters:
      constant  (r, g, b)
      smooth    (r, g, b, amplitude, kx, ky, phase): per-channel sinusoid
      checker   (size, r1, g1, b1, r2, g2, b2)
    """

    z: float
    bounds: tuple | None = None
    texture: str = "constant"
    params: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise InvalidInput(f"unknown texture {self.texture!r}")
        if self.bounds is not None:
            x0, x1, y0, y1 = self.bounds
            if not (x0 < x1 and y0 < y1):
                raise InvalidInput("rectangle bounds must be increasing")
            object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    @property
    def kind(self):
        return "plane" if self.bounds is None else "rect"

    def contains(self, x, y):
        if self.bounds is None:
            return np.ones(np.shape(x), dtype=bool)
        x0, x1, y0, y1 = self.bounds
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    def color(self, x, y):
        p = self.params
        n = np.shape(x)
        if self.texture == "constant":
            return np.broadcast_to(np.array(p[:3]), n + (3,)).copy()
        if self.texture == "smooth":
            base = np.array(p[:3])
            amp, kx, ky, phase = p[3:7]
            shift = np.array([0.0, 2.0, 4.0])
            arg = (kx * x + ky * y + phase)[..., None] + shift
            return np.clip(base + amp * np.sin(arg), 0.0, 1.0)
        size = p[0]
        parity = (np.floor(x / size) + np.floor(y / size)) % 2 == 0
        return np.where(parity[..., None], np.array(p[1:4]), np.array(p[4:7]))

    def to_dict(self):
        return {"kind": self.kind, "z": self.z,
                "bounds": list(self.bounds) if self.bounds else None,
                "texture": self.texture, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d):
        bounds = d.get("bounds")
        return cls(float(d["z"]), tuple(bounds) if bounds else None,
                   d.get("texture", "constant"), tuple(d.get("params", (0.5, 0.5, 0.5))))


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def to_dict(self):
        return {"intrinsics": self.intrinsics.to_dict(), "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(Intrinsics.from_dict(d["intrinsics"]), RigidTransform.from_dict(d["pose"]))


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    camera_t: Camera
    camera_t1: Camera
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not np.isfinite(self.noise) or self.noise < 0:
            raise InvalidInput("noise amplitude must be >= 0")
        if self.camera_t.intrinsics != self.camera_t1.intrinsics:
            raise InvalidInput("both cameras must share intrinsics")

    @property
    def intrinsics(self):
        return self.camera_t.intrinsics

    @property
    def relative_pose(self):
        """Maps camera t+1 coordinates into camera t coordinates."""
        return self.camera_t.pose.inverse().compose(self.camera_t1.pose)

    def to_dict(self):
        return {"schema_version": 1, "seed": int(self.seed), "noise": self.noise,
                "camera_t": self.camera_t.to_dict(), "camera_t1": self.camera_t1.to_dict(),
                "primitives": [p.to_dict() for p in self.primitives]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(tuple(Primitive.from_dict(p) for p in d["primitives"]),
                       Camera.from_dict(d["camera_t"]), Camera.from_dict(d["camera_t1"]),
                       float(d.get("noise", 0.0)), int(d.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"bad scene document: {exc}") from exc

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Noiseless rendering of a scene from both cameras.

    ``visible_t_to_t1`` is true for a valid pixel of frame t whose surface
    point lands in frame t+1 (snapped cell inside the frame) in front of the
    camera with nothing between it and the camera. ``negative_set_t_to_t1``
    marks pixels whose point lands in frame behind camera t+1, and
    ``landing_t_to_t1`` pixels that land in frame in front of it (visible or
    occluded).
    """

    spec: SceneSpec
    depth_t: DepthMap
    depth_t1: DepthMap
    image_t: Image
    image_t1: Image
    visible_t_to_t1: np.ndarray | None
    negative_set_t_to_t1: np.ndarray | None
    landing_t_to_t1: np.ndarray | None = None

    @property
    def intrinsics(self):
        return self.spec.intrinsics

    @property
    def pose(self):
        return self.spec.relative_pose

    def frames(self, depth_t=None, depth_t1=None):
        return (Frame(self.image_t, depth_t or self.depth_t),
                Frame(self.image_t1, depth_t1 or self.depth_t1))


def _pixel_grid(intr):
    jj, ii = np.mgrid[0:intr.height, 0:intr.width]
    return ii.astype(np.float64), jj.astype(np.float64)


def _pixel_window(prim, cam):
    """Pixel box that can see ``prim`` (whole frame unless the camera is unrotated)."""
    intr = cam.intrinsics
    full = (0, intr.height, 0, intr.width)
    if prim.bounds is None or not np.array_equal(cam.pose.rotation, np.eye(3)):
        return full
    depth = prim.z - cam.pose.translation[2]
    if depth <= 0:
        return (0, 0, 0, 0)
    x0, x1, y0, y1 = prim.bounds
    c = cam.pose.translation
    u0 = intr.fx * (x0 - c[0]) / depth + intr.cx
    u1 = intr.fx * (x1 - c[0]) / depth + intr.cx
    v0 = intr.fy * (y0 - c[1]) / depth + intr.cy
    v1 = intr.fy * (y1 - c[1]) / depth + intr.cy
    i0 = int(np.clip(np.floor(u0) - 1, 0, intr.width))
    i1 = int(np.clip(np.ceil(u1) + 2, 0, intr.width))
    j0 = int(np.clip(np.floor(v0) - 1, 0, intr.height))
    j1 = int(np.clip(np.ceil(v1) + 2, 0, intr.height))
    return (j0, j1, i0, i1)


def render(spec, cam):
    """Ray-cast every pixel; returns (depth, validity, color, hit_points, primitive_id)."""
    intr = cam.intrinsics
    ii, jj = _pixel_grid(intr)
    rays = intr.rays(ii, jj)
    dirs = rays @ cam.pose.rotation.T
    origin = cam.pose.translation
    h, w = intr.shape
    depth = np.full((h, w), np.inf)
    prim_id = np.full((h, w), -1, dtype=np.int64)
    windows = []
    for idx, prim in enumerate(spec.primitives):
        j0, j1, i0, i1 = win = _pixel_window(prim, cam)
        windows.append(win)
        if j0 >= j1 or i0 >= i1:
            continue
        d = dirs[j0:j1, i0:i1]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (prim.z - origin[2]) / d[..., 2]
        hx = origin[0] + s * d[..., 0]
        hy = origin[1] + s * d[..., 1]
        nearer = (s > 0) & np.isfinite(s) & prim.contains(hx, hy) & (s < depth[j0:j1, i0:i1])
        np.copyto(depth[j0:j1, i0:i1], s, where=nearer)
        np.copyto(prim_id[j0:j1, i0:i1], idx, where=nearer)
    valid = prim_id >= 0
    depth[~valid] = 0.0
    points = origin + depth[..., None] * dirs
    color = np.zeros((h, w, 3))
    for idx, (prim, (j0, j1, i0, i1)) in enumerate(zip(spec.primitives, windows)):
        sel = prim_id[j0:j1, i0:i1] == idx
        if np.any(sel):
            pts = points[j0:j1, i0:i1][sel]
            color[j0:j1, i0:i1][sel] = prim.color(pts[:, 0], pts[:, 1])
    return depth, valid, color, points, prim_id


def _snap(x):
    return np.where(x >= 0, np.floor(x + 0.5), -np.floor(-x + 0.5))


def _visibility(spec, points, valid):
    """Geometric visibility of world ``points`` from camera t+1."""
    cam = spec.camera_t1
    intr = cam.intrinsics
    c1 = cam.pose.translation
    local = (points - c1) @ cam.pose.rotation
    z = local[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = _snap(intr.fx * local[..., 0] / z + intr.cx)
        v = _snap(intr.fy * local[..., 1] / z + intr.cy)
        in_frame = valid & (z != 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    negative = in_frame & (z < 0)
    candidate = in_frame & (z > 0)

    visible = candidate.copy()
    sel = np.flatnonzero(candidate.reshape(-1))
    px = points.reshape(-1, 3)[sel]
    for prim in spec.primitives:
        dz = px[:, 2] - c1[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (prim.z - c1[2]) / dz
        between = (dz != 0) & (s > _SEGMENT_EPS) & (s < 1 - _SEGMENT_EPS)
        if not np.any(between):
            continue
        k = np.flatnonzero(between)
        cx = c1[0] + s[k] * (px[k, 0] - c1[0])
        cy = c1[1] + s[k] * (px[k, 1] - c1[1])
        blocked = k[prim.contains(cx, cy)]
        visible.reshape(-1)[sel[blocked]] = False
    return visible, negative, candidate


def generate(spec, visibility=True):
    """Render both cameras and (optionally) the t -> t+1 visibility ground truth."""
    for prim in spec.primitives:
        if prim.z <= spec.camera_t.pose.translation[2]:
            raise InvalidInput("primitive lies behind camera t")
    d_t, valid_t, col_t, pts_t, _ = render(spec, spec.camera_t)
    d_t1, valid_t1, col_t1, _, _ = render(spec, spec.camera_t1)
    vis = neg = land = None
    if visibility:
        vis, neg, land = _visibility(spec, pts_t, valid_t)
    return GroundTruth(spec, DepthMap(d_t, valid_t), DepthMap(d_t1, valid_t1),
                       Image(col_t), Image(col_t1), vis, neg, land)


def swapped(spec):
    """The same scene with the two cameras exchanged."""
    return SceneSpec(spec.primitives, spec.camera_t1, spec.camera_t, spec.noise, spec.seed)


def perturb_depth(gt, amplitude, seed, frame="t"):
    """Uniform noise in ``[-amplitude, amplitude]`` on valid pixels, kept positive."""
    if amplitude < 0:
        raise InvalidInput("amplitude must be >= 0")
    depth = gt.depth_t if frame == "t" else gt.depth_t1
    if amplitude == 0:
        return depth
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-amplitude, amplitude, size=depth.shape)
    vals = np.where(depth.validity, np.maximum(depth.values + noise, 1e-6), 0.0)
    return DepthMap(vals, depth.validity)


# --- scene recipes -----------------------------------------------------------

def _random_texture(rng, smooth_only=False):
    kind = "smooth" if smooth_only or rng.random() < 0.6 else "checker"
    if kind == "smooth":
        base = rng.uniform(0.3, 0.7, 3)
        return kind, (*base, rng.uniform(0.05, 0.25), rng.uniform(-1.5, 1.5),
                      rng.uniform(-1.5, 1.5), rng.uniform(0, 2 * np.pi))
    return kind, (rng.uniform(0.3, 2.0), *rng.uniform(0, 1, 3), *rng.uniform(0, 1, 3))


def rect_from_pixels(intr, i0, i1, j0, j1, z, texture="constant", params=(0.5, 0.5, 0.5)):
    """Rectangle at depth ``z`` covering pixel centers ``i0..i1`` x ``j0..j1`` of an
    unrotated camera at the origin; its edges fall on half-pixel lines."""
    x0 = (i0 - 0.5 - intr.cx) * z / intr.fx
    x1 = (i1 + 0.5 - intr.cx) * z / intr.fx
    y0 = (j0 - 0.5 - intr.cy) * z / intr.fy
    y1 = (j1 + 0.5 - intr.cy) * z / intr.fy
    return Primitive(z, (x0, x1, y0, y1), texture, params)


def kitti_like_spec(seed):
    """352x1216 stereo-like scene: a background plane at the depth cap plus 10-50 boxes."""
    rng = np.random.default_rng(seed)
    intr = KITTI_INTRINSICS
    prims = [Primitive(KITTI_MAX_DEPTH, None, *_random_texture(rng))]
    for _ in range(int(rng.integers(10, 51))):
        z = float(rng.uniform(2.0, 60.0))
        wpx = int(rng.integers(20, 300))
        hpx = int(rng.integers(15, 200))
        ci = int(rng.integers(0, intr.width))
        cj = int(rng.integers(0, intr.height))
        prims.append(rect_from_pixels(intr, ci - wpx // 2, ci + wpx // 2,
                                      cj - hpx // 2, cj + hpx // 2, z, *_random_texture(rng)))
    cam_t1 = Camera(intr, RigidTransform(np.eye(3), [KITTI_BASELINE, 0.0, 0.0]))
    return SceneSpec(tuple(prims), Camera(intr), cam_t1, 0.0, seed)


# depths whose disparity fx * baseline / z is a whole number of pixels
_BAND_FX = 100.0
_BAND_BASELINE = 0.5
_BAND_DEPTHS = (5.0, 6.25, 10.0, 12.5, 25.0)
_BAND_BACKGROUND = 50.0


def occlusion_band_spec(seed, width=96, height=48):
    """Stereo scene with whole-pixel disparities and pixel-aligned boxes.

    The boxes are disjoint in frame t and lie fully inside it, so every
    surface that can occlude in frame t+1 was sampled in frame t.
    """
    rng = np.random.default_rng(seed)
    intr = Intrinsics(_BAND_FX, _BAND_FX, (width - 1) / 2, (height - 1) / 2, width, height)
    prims = [Primitive(_BAND_BACKGROUND, None, *_random_texture(rng))]
    boxes = []
    for _ in range(int(rng.integers(1, 5))):
        for _attempt in range(20):
            bw = int(rng.integers(4, width // 3))
            bh = int(rng.integers(4, height // 2))
            i0 = int(rng.integers(0, width - bw))
            j0 = int(rng.integers(0, height - bh))
            box = (i0, i0 + bw - 1, j0, j0 + bh - 1)
            if all(box[1] < b[0] or b[1] < box[0] or box[3] < b[2] or b[3] < box[2]
                   for b in boxes):
                boxes.append(box)
                z = float(rng.choice(_BAND_DEPTHS))
                prims.append(rect_from_pixels(intr, *box, z, *_random_texture(rng)))
                break
    cam_t1 = Camera(intr, RigidTransform(np.eye(3), [_BAND_BASELINE, 0.0, 0.0]))
    return SceneSpec(tuple(prims), Camera(intr), cam_t1, 0.0, seed)


def smooth_spec(seed, width=24, height=18):
    """Small scene with smooth textures and a generic (non-integer-shift) pose."""
    rng = np.random.default_rng(seed)
    f = float(rng.uniform(20.0, 30.0))
    intr = Intrinsics(f, f, (width - 1) / 2 + rng.uniform(-1, 1),
                      (height - 1) / 2 + rng.uniform(-1, 1), width, height)
    prims = [Primitive(float(rng.uniform(8.0, 12.0)), None, *_random_texture(rng, True))]
    for _ in range(int(rng.integers(1, 3))):
        z = float(rng.uniform(3.0, 6.0))
        bw = int(rng.integers(4, width // 2))
        bh = int(rng.integers(4, height // 2))
        i0 = int(rng.integers(0, width - bw))
        j0 = int(rng.integers(0, height - bh))
        prims.append(rect_from_pixels(intr, i0, i0 + bw - 1, j0, j0 + bh - 1, z,
                                      *_random_texture(rng, True)))
    pose = RigidTransform.from_axis_angle(rng.normal(0, 0.01, 3),
                                          [rng.uniform(0.05, 0.2), rng.normal(0, 0.02),
                                           rng.normal(0, 0.05)])
    return SceneSpec(tuple(prims), Camera(intr), Camera(intr, pose), 0.05, seed)


def identity_spec(seed, width=32, height=24):
    """Both cameras coincide; any scene content."""
    spec = occlusion_band_spec(seed, width, height)
    return SceneSpec(spec.primitives, spec.camera_t, spec.camera_t, 0.0, seed)


RECIPES = {
    "kitti": kitti_like_spec,
    "occlusion": occlusion_band_spec,
    "smooth": smooth_spec,
    "identity": identity_spec,
}
