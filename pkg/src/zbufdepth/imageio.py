"""Byte-level readers and writers.

* images: binary PPM (``P6``), maxval 255;
* depth and gradient maps: grayscale PFM (``Pf``), little-endian, rows stored
  bottom to top. Invalid depth pixels are stored as 0.0;
* poses and camera intrinsics: JSON documents.

Every parse failure raises ``FormatError`` carrying the byte offset.
"""

from __future__ import annotations

import enum
import json
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput
from .geometry import DepthMap, Intrinsics, RigidTransform
from .losses import Frame, Image

_WHITESPACE = b" \t\n\r\v\f"


class FileFormat(enum.Enum):
    PPM_P6 = "ppm"
    PFM_GRAY = "pfm"
    JSON_DOC = "json"

    @classmethod
    def for_path(cls, path):
        suffix = Path(path).suffix.lower().lstrip(".")
        try:
            return cls(suffix)
        except ValueError:
            raise InvalidInput(f"no format registered for {path}") from None


def _header(data, ntokens, comments):
    """Split the first ``ntokens`` whitespace-separated header fields.

    Returns ``(raw bytes, offset)`` pairs and the payload offset, one byte past
    the last token (the single separating whitespace byte).
    """
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < ntokens:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if comments and pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        if pos >= n:
            raise FormatError("truncated header", pos)
        start = pos
        while pos < n and data[pos] not in _WHITESPACE:
            pos += 1
        tokens.append((data[start:pos], start))
    if pos >= n:
        raise FormatError("header not terminated", pos)
    return tokens, pos + 1


def _int_field(token, name):
    raw, offset = token
    try:
        value = int(raw.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError(f"bad {name} field {raw!r}", offset) from None
    if value < 1:
        raise FormatError(f"{name} must be positive", offset)
    return value


def write_image(image):
    pixels = image.pixels if isinstance(image, Image) else Image(image).pixels
    h, w = pixels.shape[:2]
    q = np.floor(pixels * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def read_image(data):
    data = bytes(data)
    tokens, start = _header(data, 4, comments=True)
    magic, off = tokens[0]
    if magic != b"P6":
        raise FormatError(f"expected P6 magic, got {magic!r}", off)
    w = _int_field(tokens[1], "width")
    h = _int_field(tokens[2], "height")
    maxval = _int_field(tokens[3], "maxval")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", tokens[3][1])
    need = w * h * 3
    if len(data) - start < need:
        raise FormatError(f"truncated payload: need {need} bytes", len(data))
    if len(data) - start > need:
        raise FormatError("trailing bytes after payload", start + need)
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    return Image(px.reshape(h, w, 3).astype(np.float64) / 255.0)


def _write_pfm(values):
    values = np.asarray(values, dtype=np.float32)
    h, w = values.shape
    body = np.ascontiguousarray(values[::-1]).astype("<f4").tobytes()
    return f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + body


def _read_pfm(data):
    data = bytes(data)
    tokens, start = _header(data, 4, comments=False)
    magic, off = tokens[0]
    if magic != b"Pf":
        raise FormatError(f"expected Pf magic, got {magic!r}", off)
    w = _int_field(tokens[1], "width")
    h = _int_field(tokens[2], "height")
    raw, off = tokens[3]
    try:
        scale = float(raw.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError(f"bad scale field {raw!r}", off) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError("scale must be finite and nonzero", off)
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    if len(data) - start < need:
        raise FormatError(f"truncated payload: need {need} bytes", len(data))
    if len(data) - start > need:
        raise FormatError("trailing bytes after payload", start + need)
    flat = np.frombuffer(data, dtype=dtype, count=w * h, offset=start)
    bad = np.flatnonzero(~np.isfinite(flat))
    if len(bad):
        raise FormatError("non-finite value in payload", start + 4 * int(bad[0]))
    return flat.reshape(h, w)[::-1].astype(np.float64), start, flat


def write_depth(depth):
    return _write_pfm(np.where(depth.validity, depth.values, 0.0))


def read_depth(data):
    values, start, flat = _read_pfm(data)
    neg = np.flatnonzero(flat < 0)
    if len(neg):
        raise FormatError("negative depth in payload", start + 4 * int(neg[0]))
    return DepthMap(values, values != 0.0)


def write_gradient(gmap):
    values = gmap.values if hasattr(gmap, "values") else gmap
    return _write_pfm(values)


def read_gradient(data):
    return _read_pfm(data)[0]


def _read_json(path):
    path = Path(path)
    text = path.read_bytes()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path.name}: {exc.msg}", exc.pos) from None


def load_pose(path):
    return RigidTransform.from_dict(_read_json(path))


def load_intrinsics(path):
    return Intrinsics.from_dict(_read_json(path))


def save_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


FRAME_FILES = ("image_t.ppm", "image_t1.ppm", "depth_t.pfm", "depth_t1.pfm",
               "pose.json", "intrinsics.json")


def load_frames(directory):
    """Read a frame-pair directory; returns (frame_t, frame_t1, pose, intrinsics)."""
    d = Path(directory)
    missing = [name for name in FRAME_FILES if not (d / name).is_file()]
    if missing:
        raise InvalidInput(f"{d}: missing {', '.join(missing)}")
    intr = load_intrinsics(d / "intrinsics.json")
    pose = load_pose(d / "pose.json")
    frame_t = Frame(read_image((d / "image_t.ppm").read_bytes()),
                    read_depth((d / "depth_t.pfm").read_bytes()))
    frame_t1 = Frame(read_image((d / "image_t1.ppm").read_bytes()),
                     read_depth((d / "depth_t1.pfm").read_bytes()))
    if frame_t.depth.shape != intr.shape or frame_t1.depth.shape != intr.shape:
        raise InvalidInput("frame files do not match intrinsics dimensions")
    return frame_t, frame_t1, pose, intr


def save_frames(directory, frame_t, frame_t1, pose, intr):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "image_t.ppm").write_bytes(write_image(frame_t.image))
    (d / "image_t1.ppm").write_bytes(write_image(frame_t1.image))
    (d / "depth_t.pfm").write_bytes(write_depth(frame_t.depth))
    (d / "depth_t1.pfm").write_bytes(write_depth(frame_t1.depth))
    save_json(d / "pose.json", pose.to_dict())
    save_json(d / "intrinsics.json", intr.to_dict())
