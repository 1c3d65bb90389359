"""Layer-channel rasterization of Manhattan geometry.

Cells are drawn into a stack of binary channel images, one channel per mask
layer group.  A pixel is set exactly when the pixel square and the drawn
geometry overlap with strictly positive area; all overlap predicates run in
exact rational arithmetic, so rasters are reproducible and translation
invariant.  Pixel row 0 is the bottom row, and the grid is anchored at the
lower-left corner of the geometry's bounding box.

Native rasters keep the cell's true resolution.  resize_to_target pads small
rasters into the top-right-zero-padded target frame and average-pools large
ones down; build_pyramid derives the coarser scales consumed by the
multi-resolution classifier.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (ConfigError, DimError, EmptyRasterError, FormatError,
                     UnsupportedGeometryError)
from .layout import Boundary, LayerKey, Library, Path, PathEnd, bounding_box

# ---------------------------------------------------------------------------
# Channel mapping

@dataclass
class LayerChannelMap:
    """Assignment of (layer, datatype) pairs to raster channel indices.

    Several layer keys may share a channel (e.g. both gate materials land on
    one gate channel); every channel has a human-readable label.
    """

    entries: dict[LayerKey, int] = field(default_factory=dict)
    labels: dict[int, str] = field(default_factory=dict)

    @property
    def channel_count(self) -> int:
        return max(self.labels) + 1 if self.labels else 0

    def channel_of(self, key: LayerKey) -> int | None:
        return self.entries.get(key)

    def add(self, key: LayerKey, channel: int, label: str) -> None:
        if channel < 0:
            raise ConfigError(f"channel index must be >= 0, got {channel}")
        if key in self.entries:
            raise ConfigError(f"layer {key.layer},{key.datatype} mapped twice")
        if self.labels.get(channel, label) != label:
            raise ConfigError(f"channel {channel} labeled both "
                              f"{self.labels[channel]!r} and {label!r}")
        self.entries[key] = channel
        self.labels[channel] = label

    @classmethod
    def from_text(cls, text: str) -> "LayerChannelMap":
        """Parse `layer,datatype,channel,label` lines; '#' starts a comment."""
        cmap = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise ConfigError(f"line {lineno}: expected "
                                  f"layer,datatype,channel,label, got {raw!r}")
            try:
                key = LayerKey(int(parts[0]), int(parts[1]))
                channel = int(parts[2])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
            cmap.add(key, channel, parts[3])
        if not cmap.entries:
            raise ConfigError("channel map is empty")
        return cmap

    def to_text(self) -> str:
        lines = ["# layer,datatype,channel,label"]
        for key in sorted(self.entries):
            ch = self.entries[key]
            lines.append(f"{key.layer},{key.datatype},{ch},{self.labels[ch]}")
        return "\n".join(lines) + "\n"


def _default_map() -> LayerChannelMap:
    cmap = LayerChannelMap()
    cmap.add(LayerKey(1, 0), 0, "well")
    cmap.add(LayerKey(2, 0), 0, "well")
    cmap.add(LayerKey(3, 0), 1, "implant")
    cmap.add(LayerKey(4, 0), 1, "implant")
    cmap.add(LayerKey(5, 0), 2, "active")
    cmap.add(LayerKey(17, 0), 3, "gate")   # poly gate
    cmap.add(LayerKey(30, 0), 3, "gate")   # metal gate shares the channel
    cmap.add(LayerKey(10, 0), 4, "contact")
    for i in range(8):
        cmap.add(LayerKey(40 + i, 0), 5 + i, f"metal{i + 1}")
    for i in range(7):
        cmap.add(LayerKey(60 + i, 0), 13 + i, f"via{i + 1}")
    cmap.add(LayerKey(81, 0), 20, "pad")
    return cmap


DEFAULT_CHANNEL_MAP = _default_map()


@dataclass
class RasterConfig:
    pixel_pitch_nm: int = 10
    target_size: int = 256
    scales: tuple[int, ...] = (64, 128, 256)

    def validate(self) -> None:
        if self.pixel_pitch_nm <= 0:
            raise ConfigError("pixel pitch must be positive")
        for n in (self.target_size, *self.scales):
            if n < 1 or n & (n - 1):
                raise ConfigError(f"sizes must be powers of two, got {n}")
        if max(self.scales) != self.target_size:
            raise ConfigError("largest scale must equal the target size")


def map_layers(boundaries: list[Boundary], paths: list[Path],
               cmap: LayerChannelMap):
    """Split geometry by channel. Returns (per-channel shape lists, unmapped keys)."""
    channels: list[list] = [[] for _ in range(cmap.channel_count)]
    unmapped: set[LayerKey] = set()
    for shape in (*boundaries, *paths):
        ch = cmap.channel_of(shape.layer)
        if ch is None:
            unmapped.add(shape.layer)
        else:
            channels[ch].append(shape)
    return channels, sorted(unmapped)


# ---------------------------------------------------------------------------
# Exact primitive decomposition

def _polygon_rects(b: Boundary):
    """Decompose a rectilinear polygon into disjoint rects by scanline slabs."""
    pts = b.vertices
    vertical = []
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        if x0 == x1 and y0 != y1:
            vertical.append((x0, min(y0, y1), max(y0, y1)))
        elif y0 == y1 and x0 != x1:
            continue
        elif (x0, y0) == (x1, y1):
            continue
        else:
            raise UnsupportedGeometryError(
                f"boundary edge ({x0},{y0})-({x1},{y1}) is not axis-parallel")
    ys = sorted({y for _, ylo, yhi in vertical for y in (ylo, yhi)})
    for ya, yb in zip(ys, ys[1:]):
        xs = sorted(x for x, ylo, yhi in vertical if ylo <= ya and yhi >= yb)
        if len(xs) % 2:
            raise UnsupportedGeometryError("boundary is not a valid polygon")
        for xa, xb in zip(xs[0::2], xs[1::2]):
            if xa < xb:
                yield (xa, ya, xb, yb)


def _path_primitives(p: Path):
    """Yield ('rect', ...) and ('disc', ...) primitives covering a path."""
    half = Fraction(p.width, 2)
    segments = [(a, b) for a, b in zip(p.points, p.points[1:]) if a != b]
    if not segments:
        raise UnsupportedGeometryError("path has no extent")
    for (x0, y0), (x1, y1) in segments:
        if y0 == y1:
            yield ("rect", min(x0, x1), y0 - half, max(x0, x1), y0 + half)
        elif x0 == x1:
            yield ("rect", x0 - half, min(y0, y1), x0 + half, max(y0, y1))
        else:
            raise UnsupportedGeometryError(
                f"path segment ({x0},{y0})-({x1},{y1}) is not axis-parallel")
    # Square joints fill the outer-corner notch left by abutting segment rects.
    for vx, vy in p.points[1:-1]:
        yield ("rect", vx - half, vy - half, vx + half, vy + half)
    if p.end_style is PathEnd.EXTENDED:
        for (ex, ey) in (p.points[0], p.points[-1]):
            yield ("rect", ex - half, ey - half, ex + half, ey + half)
    elif p.end_style is PathEnd.ROUND:
        for (ex, ey) in (p.points[0], p.points[-1]):
            yield ("disc", ex, ey, half)


def _shape_primitives(shape):
    if isinstance(shape, Boundary):
        yield from (("rect", *r) for r in _polygon_rects(shape))
    else:
        yield from _path_primitives(shape)


def _primitive_bbox(prim):
    if prim[0] == "rect":
        return prim[1:]
    _, cx, cy, r = prim
    return (cx - r, cy - r, cx + r, cy + r)


def _axis_range(lo, hi, anchor, pitch, count):
    """Grid indices whose cells overlap [lo, hi) with positive length."""
    i_lo = math.floor(Fraction(lo - anchor) / pitch)
    i_hi = math.ceil(Fraction(hi - anchor) / pitch) - 1
    return max(i_lo, 0), min(i_hi, count - 1)


def pixelize(channels: list[list], cfg: RasterConfig,
             dbu_per_nm: Fraction = Fraction(1)) -> np.ndarray:
    """Rasterize per-channel geometry into a binary (C, H, W) float32 stack.

    The grid is anchored at the lower-left of the joint bounding box of all
    channels, one pixel per pixel_pitch_nm square; a pixel is 1 exactly when
    geometry covers part of its open square.  Raises EmptyRasterError when no
    channel holds geometry.
    """
    cfg.validate()
    pitch = Fraction(cfg.pixel_pitch_nm) * dbu_per_nm
    prims = [[prim for shape in shapes for prim in _shape_primitives(shape)]
             for shapes in channels]
    boxes = [_primitive_bbox(p) for per in prims for p in per]
    if not boxes:
        raise EmptyRasterError("no drawable geometry on any mapped channel")
    gx = min(b[0] for b in boxes)
    gy = min(b[1] for b in boxes)
    x_hi = max(b[2] for b in boxes)
    y_hi = max(b[3] for b in boxes)
    width = math.ceil(Fraction(x_hi - gx) / pitch)
    height = math.ceil(Fraction(y_hi - gy) / pitch)

    stack = np.zeros((len(channels), height, width), dtype=np.float32)
    for ch, per in enumerate(prims):
        plane = stack[ch]
        for prim in per:
            if prim[0] == "rect":
                _, x0, y0, x1, y1 = prim
                if x0 >= x1 or y0 >= y1:
                    continue
                c0, c1 = _axis_range(x0, x1, gx, pitch, width)
                r0, r1 = _axis_range(y0, y1, gy, pitch, height)
                if c0 <= c1 and r0 <= r1:
                    plane[r0:r1 + 1, c0:c1 + 1] = 1.0
            else:
                _fill_disc(plane, prim, gx, gy, pitch)
    return stack


def _fill_disc(plane: np.ndarray, prim, gx, gy, pitch) -> None:
    """Set pixels whose closed square lies within r of the disc center.

    Squared distance from the square to the center < r**2 is exactly the
    positive-area overlap predicate for a disc.
    """
    _, cx, cy, r = prim
    height, width = plane.shape
    r2 = r * r
    c0, c1 = _axis_range(cx - r, cx + r, gx, pitch, width)
    r0, r1 = _axis_range(cy - r, cy + r, gy, pitch, height)
    for row in range(r0, r1 + 1):
        y_lo = gy + row * pitch
        dy = max(y_lo - cy, cy - (y_lo + pitch), 0)
        rem = r2 - dy * dy
        if rem <= 0:
            continue
        for col in range(c0, c1 + 1):
            x_lo = gx + col * pitch
            dx = max(x_lo - cx, cx - (x_lo + pitch), 0)
            if dx * dx < rem:
                plane[row, col] = 1.0


# ---------------------------------------------------------------------------
# Scaling

def avg_pool(stack: np.ndarray, k: int) -> np.ndarray:
    """Non-overlapping k x k mean pooling over the trailing two axes."""
    if k == 1:
        return stack
    c, h, w = stack.shape
    if h % k or w % k:
        raise DimError(f"dims ({h}, {w}) are not divisible by pool window {k}")
    return stack.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def _pad_top_right(stack: np.ndarray, h: int, w: int) -> np.ndarray:
    c, h0, w0 = stack.shape
    if h0 > h or w0 > w:
        raise DimError(f"cannot pad ({h0}, {w0}) down to ({h}, {w})")
    out = np.zeros((c, h, w), dtype=stack.dtype)
    out[:, :h0, :w0] = stack
    return out


def resize_to_target(native: np.ndarray, cfg: RasterConfig) -> np.ndarray:
    """Fit a native raster into the (C, target, target) frame.

    Rasters at or under the target are zero-padded above and to the right
    (content stays anchored at the lower left).  Larger rasters are padded up
    to a multiple of k = ceil(max_dim / target), average-pooled by k, then
    padded; values land in [0, 1].
    """
    cfg.validate()
    if native.ndim != 3:
        raise DimError(f"expected a (C, H, W) stack, got shape {native.shape}")
    n = cfg.target_size
    c, h, w = native.shape
    longest = max(h, w)
    if longest > n:
        k = -(-longest // n)
        native = _pad_top_right(native, -(-h // k) * k, -(-w // k) * k)
        native = avg_pool(native, k)
    return _pad_top_right(native.astype(np.float32, copy=False), n, n)


def build_pyramid(stack: np.ndarray, scales: tuple[int, ...] = (64, 128, 256)
                  ) -> dict[int, np.ndarray]:
    """Average-pool a (C, S, S) stack down to each requested scale."""
    c, h, w = stack.shape
    top = max(scales)
    if h != top or w != top:
        raise DimError(f"stack is {h}x{w}, expected {top}x{top}")
    out = {}
    for s in sorted(scales, reverse=True):
        if top % s:
            raise DimError(f"scale {s} does not divide {top}")
        out[s] = avg_pool(stack, top // s).astype(np.float32, copy=False)
    return out


# ---------------------------------------------------------------------------
# Survey

@dataclass
class SizeStats:
    """How many cells exceed each raster scale at the configured pitch."""

    total: int
    exceeding: dict[int, int]
    fractions: dict[int, float]
    sizes: dict[str, int]

    def to_text(self) -> str:
        lines = [f"cells surveyed: {self.total}"]
        for s in sorted(self.exceeding):
            lines.append(f"  larger than {s:4d} px: {self.exceeding[s]:6d}"
                         f"  ({100 * self.fractions[s]:.1f}%)")
        return "\n".join(lines)


def size_stats(lib: Library, cfg: RasterConfig,
               names: list[str] | None = None) -> SizeStats:
    """Native raster edge length per cell, tallied against the scale ladder."""
    cfg.validate()
    pitch = Fraction(cfg.pixel_pitch_nm) * lib.dbu_per_nm
    sizes: dict[str, int] = {}
    memo: dict = {}
    for name in (names if names is not None else list(lib.cells)):
        box = bounding_box(lib, name, memo)
        if box is None:
            sizes[name] = 0
            continue
        w = math.ceil(Fraction(box[2] - box[0]) / pitch)
        h = math.ceil(Fraction(box[3] - box[1]) / pitch)
        sizes[name] = max(w, h)
    exceeding = {s: sum(1 for v in sizes.values() if v > s) for s in cfg.scales}
    total = len(sizes)
    fractions = {s: (n / total if total else 0.0) for s, n in exceeding.items()}
    return SizeStats(total, exceeding, fractions, sizes)


# ---------------------------------------------------------------------------
# Stack files

_STACK_MAGIC = b"LTG1"


def save_stack(path, stack: np.ndarray) -> None:
    """Write an array as magic, u8 rank, u32-LE dims, f32-LE row-major data."""
    arr = np.ascontiguousarray(stack, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_STACK_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_stack(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _STACK_MAGIC:
        raise FormatError(f"{path}: bad magic, not a raster stack file")
    if len(data) < 5:
        raise FormatError(f"{path}: truncated header")
    rank = data[4]
    if not (1 <= rank <= 4):
        raise FormatError(f"{path}: implausible rank {rank}")
    head = 5 + 4 * rank
    if len(data) < head:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", data, 5)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != head + 4 * count:
        raise FormatError(f"{path}: payload does not match dims {dims}")
    return np.frombuffer(data[head:], dtype="<f4").reshape(dims).copy()
