"""Image/depth containers, dataset I/O, resizing, and synthetic scenes.

Depth files use PFM (lossless float32) as the canonical format and 16-bit
grayscale PNG with an explicit quantization scale as the interchange format.
A dataset directory is `<root>/manifest.csv` with header
`id,rgb_path,depth_path,depth_scale` plus the files it references (paths
relative to the root).
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import MalformedFileError, MissingFileError, ShapeMismatchError

PRIMITIVES = ("ramp", "sphere-cap", "lumen-tube")

# Fixed warm tint and texture amplitude used by the synthetic shader.
_TINT = np.array([1.0, 0.82, 0.74])
_TEXTURE_AMPLITUDE = 0.02
_TEXTURE_CELL = 8


class ClampWarning(UserWarning):
    """Depth values were clamped during 16-bit quantization."""


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write `data` to `path` via a temp file + rename in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _as_float(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


@dataclass(frozen=True)
class RGBImage:
    """H x W x 3 color image with channel values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = _as_float(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {np.shape(px)}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite channel values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("channel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class DepthMap:
    """H x W per-pixel depth (relative units) plus a validity mask.

    Every valid pixel must be finite and strictly positive. Use
    `DepthMap.from_values` to apply the standard rule that non-finite or
    non-positive stored values are invalid.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        v = _as_float(self.values)
        m = np.asarray(self.valid, dtype=bool)
        if v.ndim != 2:
            raise ValueError(f"expected (H, W) values, got shape {np.shape(v)}")
        if m.shape != v.shape:
            raise ShapeMismatchError(
                f"validity mask shape {m.shape} != values shape {v.shape}"
            )
        bad = m & ~(np.isfinite(v) & (v > 0))
        if bad.any():
            raise ValueError("valid pixels must be finite and strictly positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)

    @classmethod
    def from_values(cls, values, valid=None) -> "DepthMap":
        """Build a map, marking non-finite or non-positive pixels invalid."""
        v = _as_float(values)
        ok = np.isfinite(v) & (v > 0)
        if valid is not None:
            ok = ok & np.asarray(valid, dtype=bool)
        v = np.where(np.isfinite(v), v, 0.0).astype(v.dtype, copy=False)
        return cls(v, ok)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SamplePair:
    """One RGB frame paired with its ground-truth depth map."""

    id: str
    image: RGBImage
    depth: DepthMap

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.depth.height, self.depth.width):
            raise ShapeMismatchError(
                f"sample {self.id!r}: rgb is "
                f"{self.image.height}x{self.image.width} but depth is "
                f"{self.depth.height}x{self.depth.width}"
            )

    @property
    def size(self) -> tuple[int, int]:
        return (self.image.height, self.image.width)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    rgb_path: str
    depth_path: str
    depth_scale: float = 1.0

    def __post_init__(self):
        if not self.depth_scale > 0:
            raise ValueError(f"entry {self.id!r}: depth_scale must be positive")


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered collection of sample entries; order is the canonical iteration order."""

    root: Path
    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate ids in manifest: {dupes}")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Analytic scene description; depth is an exact function of pixel coords."""

    primitive: str
    near: float = 1.0
    far: float = 2.0
    texture_seed: int = 0
    size: tuple[int, int] = (64, 96)

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}; choose from {PRIMITIVES}")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        h, w = self.size
        if h < 1 or w < 1:
            raise ValueError("size must be at least 1x1")


# ---------------------------------------------------------------------------
# PFM I/O


def write_pfm(values: np.ndarray, path: str | Path) -> None:
    """Write a single-channel float32 PFM ("Pf", little-endian, rows bottom-up)."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects an (H, W) array, got shape {arr.shape}")
    h, w = arr.shape
    buf = io.BytesIO()
    buf.write(b"Pf\n")
    buf.write(f"{w} {h}\n".encode("ascii"))
    buf.write(b"-1.0\n")
    buf.write(np.flipud(arr).astype("<f4").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a grayscale PFM file into a float32 (H, W) array."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"depth file not found: {path}")
    with open(path, "rb") as f:
        data = f.read()

    def next_token(pos):
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedFileError(f"truncated PFM header: {path}")
        return data[start:pos], pos

    try:
        magic, pos = next_token(0)
        if magic == b"PF":
            raise MalformedFileError(f"color PFM not supported: {path}")
        if magic != b"Pf":
            raise MalformedFileError(f"not a PFM file (bad magic {magic!r}): {path}")
        wtok, pos = next_token(pos)
        htok, pos = next_token(pos)
        stok, pos = next_token(pos)
        w, h = int(wtok), int(htok)
        scale = float(stok)
    except (ValueError, MalformedFileError) as exc:
        if isinstance(exc, MalformedFileError):
            raise
        raise MalformedFileError(f"malformed PFM header: {path}") from exc
    if w < 1 or h < 1 or scale == 0:
        raise MalformedFileError(f"malformed PFM header: {path}")
    pos += 1  # single whitespace byte terminates the header
    raster = data[pos:]
    if len(raster) != 4 * w * h:
        raise MalformedFileError(
            f"PFM raster has {len(raster)} bytes, expected {4 * w * h}: {path}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raster, dtype=dtype).reshape(h, w)
    return np.flipud(arr).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG I/O


def write_png16(values: np.ndarray, valid: np.ndarray, path: str | Path,
                depth_scale: float) -> None:
    """Quantize depth to 16-bit grayscale PNG: round(value / depth_scale).

    Quantized values are clamped to [0, 65535] (with a ClampWarning when any
    valid pixel actually clamps); invalid pixels are stored as 0.
    """
    if not depth_scale > 0:
        raise ValueError("depth_scale must be positive")
    v = np.asarray(values, dtype=np.float64)
    q = np.rint(v / depth_scale)
    clamped = (q < 0) | (q > 65535)
    if (clamped & np.asarray(valid, dtype=bool)).any():
        warnings.warn(
            f"{int(clamped.sum())} depth value(s) clamped to the 16-bit range "
            f"while writing {path}",
            ClampWarning,
            stacklevel=2,
        )
    q = np.clip(q, 0, 65535).astype(np.uint16)
    q = np.where(np.asarray(valid, dtype=bool), q, np.uint16(0))
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png16(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"depth file not found: {path}")
    try:
        arr = np.array(Image.open(path))
    except UnidentifiedImageError as exc:
        raise MalformedFileError(f"not a readable PNG: {path}") from exc
    if arr.ndim != 2:
        raise MalformedFileError(f"expected single-channel depth PNG, got {arr.shape}: {path}")
    return arr.astype(np.uint16)


def write_rgb_png(image: RGBImage, path: str | Path) -> None:
    """Store an RGBImage as 8-bit RGB PNG (values quantized by round(x*255))."""
    q = np.rint(image.pixels * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_rgb_png(path: str | Path) -> RGBImage:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"image file not found: {path}")
    try:
        img = Image.open(path).convert("RGB")
    except UnidentifiedImageError as exc:
        raise MalformedFileError(f"not a readable image: {path}") from exc
    return RGBImage(np.asarray(img, dtype=np.float32) / 255.0)


def write_depth(depth: DepthMap, path: str | Path, format: str = "pfm",
                depth_scale: float = 1.0) -> None:
    """Write a depth map as `pfm` (lossless) or `png16` (quantized).

    Invalid pixels are stored as 0 so they round-trip as invalid under the
    standard non-positive rule.
    """
    if format == "pfm":
        values = np.where(depth.valid, depth.values, 0.0).astype(np.float32)
        write_pfm(values, path)
    elif format == "png16":
        write_png16(depth.values, depth.valid, path, depth_scale)
    else:
        raise ValueError(f"unknown depth format {format!r}; use 'pfm' or 'png16'")


def read_depth(path: str | Path, depth_scale: float = 1.0) -> DepthMap:
    """Read a PFM or 16-bit PNG depth file, applying `depth_scale`."""
    ext = Path(path).suffix.lower()
    if ext == ".pfm":
        raw = read_pfm(path)
    elif ext == ".png":
        raw = read_png16(path).astype(np.float32)
    else:
        raise MalformedFileError(f"unsupported depth extension {ext!r}: {path}")
    return DepthMap.from_values(raw * float(depth_scale))


# ---------------------------------------------------------------------------
# Manifests


def read_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    mpath = root / "manifest.csv"
    if not mpath.exists():
        raise MissingFileError(f"manifest not found: {mpath}")
    entries = []
    with open(mpath, newline="") as f:
        reader = csv.DictReader(f)
        expected = ["id", "rgb_path", "depth_path", "depth_scale"]
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != expected:
            raise MalformedFileError(
                f"manifest header must be {','.join(expected)!r}: {mpath}"
            )
        for row in reader:
            try:
                entries.append(
                    ManifestEntry(
                        id=row["id"],
                        rgb_path=row["rgb_path"],
                        depth_path=row["depth_path"],
                        depth_scale=float(row["depth_scale"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise MalformedFileError(f"malformed manifest row {row!r}: {mpath}") from exc
    return DatasetManifest(root=root, entries=tuple(entries))


def write_manifest(manifest: DatasetManifest) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "rgb_path", "depth_path", "depth_scale"])
    for e in manifest.entries:
        writer.writerow([e.id, e.rgb_path, e.depth_path, repr(e.depth_scale)])
    atomic_write_text(Path(manifest.root) / "manifest.csv", buf.getvalue())


def load_sample(entry: ManifestEntry, root: str | Path = ".") -> SamplePair:
    """Load one manifest entry into a SamplePair.

    Depth values are multiplied by the entry's depth_scale; stored values
    that are non-finite or non-positive become invalid pixels.
    """
    root = Path(root)
    image = read_rgb_png(root / entry.rgb_path)
    depth = read_depth(root / entry.depth_path, depth_scale=entry.depth_scale)
    if (image.height, image.width) != (depth.height, depth.width):
        raise ShapeMismatchError(
            f"sample {entry.id!r}: rgb is {image.height}x{image.width} but "
            f"depth is {depth.height}x{depth.width}"
        )
    return SamplePair(id=entry.id, image=image, depth=depth)


def load_dataset(manifest: DatasetManifest) -> list[SamplePair]:
    return [load_sample(e, manifest.root) for e in manifest.entries]


def save_dataset(samples: Iterable[SamplePair], root: str | Path,
                 depth_format: str = "pfm", depth_scale: float = 1.0) -> DatasetManifest:
    """Write samples as a dataset directory (rgb/, depth/, manifest.csv)."""
    root = Path(root)
    ext = {"pfm": "pfm", "png16": "png"}[depth_format]
    entries = []
    for s in samples:
        rgb_rel = f"rgb/{s.id}.png"
        depth_rel = f"depth/{s.id}.{ext}"
        write_rgb_png(s.image, root / rgb_rel)
        write_depth(s.depth, root / depth_rel, format=depth_format, depth_scale=depth_scale)
        scale = depth_scale if depth_format == "png16" else 1.0
        entries.append(ManifestEntry(s.id, rgb_rel, depth_rel, scale))
    manifest = DatasetManifest(root=root, entries=tuple(entries))
    write_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# Resizing

def _src_coords(n_src: int, n_dst: int) -> np.ndarray:
    # Corner-aligned sampling: dst index i maps to i*(n_src-1)/(n_dst-1).
    if n_dst == 1 or n_src == 1:
        return np.zeros(n_dst, dtype=np.float64)
    return np.arange(n_dst, dtype=np.float64) * ((n_src - 1) / (n_dst - 1))


def resize_bilinear(arr: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample an (H, W) or (H, W, C) array to `target` (h, w)."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be at least 1x1, got {target}")
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    ys = _src_coords(h, th)
    xs = _src_coords(w, tw)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.minimum(y0, h - 1)
    x0 = np.minimum(x0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1)
    if arr.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    a = arr[np.ix_(y0, x0)].astype(np.float64)
    b = arr[np.ix_(y0, x1)].astype(np.float64)
    c = arr[np.ix_(y1, x0)].astype(np.float64)
    d = arr[np.ix_(y1, x1)].astype(np.float64)
    out = (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
           + c * wy * (1 - wx) + d * wy * wx)
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32
    return out.astype(dtype)


def resize_nearest(arr: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample (used for validity masks)."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be at least 1x1, got {target}")
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    iy = np.clip(np.rint(_src_coords(h, th)).astype(np.intp), 0, h - 1)
    ix = np.clip(np.rint(_src_coords(w, tw)).astype(np.intp), 0, w - 1)
    return arr[np.ix_(iy, ix)].copy()


def resize_sample(sample: SamplePair, target: tuple[int, int]) -> SamplePair:
    """Stretch RGB and depth bilinearly to `target`; mask goes nearest-neighbor.

    Aspect ratio is deliberately not preserved: rectangular targets stretch
    the content, matching the fixed-input-size convention of the training
    pipeline.
    """
    image = RGBImage(np.clip(resize_bilinear(sample.image.pixels, target), 0.0, 1.0))
    values = resize_bilinear(sample.depth.values, target)
    valid = resize_nearest(sample.depth.valid, target)
    depth = DepthMap.from_values(values, valid)
    return SamplePair(id=sample.id, image=image, depth=depth)


# ---------------------------------------------------------------------------
# Synthetic scenes


def _scene_rng(seed: int, texture_seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        [int(seed) & 0xFFFFFFFF, int(texture_seed) & 0xFFFFFFFF, stream]
    )


def _synthetic_depth(spec: SyntheticSceneSpec, seed: int) -> np.ndarray:
    h, w = spec.size
    near, far = float(spec.near), float(spec.far)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    if spec.primitive == "ramp":
        t = xx / (w - 1) if w > 1 else np.zeros_like(xx)
        depth = (1.0 - t) * near + t * far
    elif spec.primitive == "sphere-cap":
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        radius = min(h - 1, w - 1) / 2.0
        if radius == 0:
            depth = np.full((h, w), near)
        else:
            r = np.hypot(yy - cy, xx - cx) / radius
            r = np.minimum(r, 1.0)
            bulge = 1.0 - np.sqrt(np.maximum(1.0 - r * r, 0.0))
            depth = near + (far - near) * bulge
    else:  # lumen-tube
        rng = _scene_rng(seed, spec.texture_seed, 0)
        cy = (0.3 + 0.4 * rng.random()) * (h - 1)
        cx = (0.3 + 0.4 * rng.random()) * (w - 1)
        rho = 0.45 * min(h, w)
        r = np.hypot(yy - cy, xx - cx) / rho
        depth = near + (far - near) * np.clip(r, 0.0, 1.0)
    return depth


def generate_synthetic(spec: SyntheticSceneSpec, seed: int) -> SamplePair:
    """Render an analytic scene: exact depth plus a shaded, textured RGB.

    Brightness is proportional to near/depth, modulated by a fixed warm tint
    and a small smooth texture drawn from (seed, spec.texture_seed). The
    result is a pure function of (spec, seed).
    """
    h, w = spec.size
    depth = _synthetic_depth(spec, seed)
    base = spec.near / depth  # in (0, 1], brightest at the nearest pixel

    rng = _scene_rng(seed, spec.texture_seed, 1)
    cells = (math.ceil(h / _TEXTURE_CELL) + 1, math.ceil(w / _TEXTURE_CELL) + 1)
    coarse = rng.uniform(-1.0, 1.0, size=(cells[0], cells[1], 3))
    texture = resize_bilinear(coarse, (h, w)) * _TEXTURE_AMPLITUDE

    rgb = np.clip(base[..., None] * _TINT[None, None, :] + texture, 0.0, 1.0)
    image = RGBImage(rgb.astype(np.float32))
    depth_map = DepthMap(depth.astype(np.float32), np.ones((h, w), dtype=bool))
    return SamplePair(id=f"{spec.primitive}_{seed:05d}", image=image, depth=depth_map)
