"""Hierarchical Manhattan layout model.

A Library maps cell names to Cells.  Cells hold rectilinear boundaries,
Manhattan paths, and placements of other cells (optionally arrayed).  All
coordinates are integers in database units; exact rational arithmetic is used
wherever half-unit quantities (path half-widths) appear, so every geometric
predicate in the pipeline stays exact.
"""

from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Iterator

from .errors import CycleError, LinkError, NotFoundError

Point = tuple[int, int]

GDS_COORD_MIN = -(2**31)
GDS_COORD_MAX = 2**31 - 1


@dataclass(frozen=True, order=True)
class LayerKey:
    """GDSII (layer, datatype) pair identifying a mask layer."""

    layer: int
    datatype: int

    def __post_init__(self):
        if not (0 <= self.layer <= 255 and 0 <= self.datatype <= 255):
            raise ValueError(f"layer/datatype must be in 0..255, got {self}")


class PathEnd(Enum):
    """Path end style: flush cut, half-width semicircle, or half-width square extension."""

    FLUSH = 0
    ROUND = 1
    EXTENDED = 2


@dataclass
class Boundary:
    """Closed rectilinear polygon.  Vertices form an open ring (no repeated
    closing vertex); consecutive edges must be axis-parallel for the raster
    stage, but the model itself only requires three distinct vertices and
    nonzero area."""

    layer: LayerKey
    vertices: list[Point]

    def signed_area2(self) -> int:
        # Twice the shoelace area; exact in ints.
        pts = self.vertices
        acc = 0
        for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
            acc += x0 * y1 - x1 * y0
        return acc

    def validate(self) -> None:
        if len(set(self.vertices)) < 3:
            raise ValueError("boundary needs at least 3 distinct vertices")
        if self.signed_area2() == 0:
            raise ValueError("boundary has zero area")

    def bbox(self) -> tuple[int, int, int, int]:
        xs = [p[0] for p in self.vertices]
        ys = [p[1] for p in self.vertices]
        return min(xs), min(ys), max(xs), max(ys)


@dataclass
class Path:
    """Wire drawn along a Manhattan centerline with uniform width."""

    layer: LayerKey
    width: int
    points: list[Point]
    end_style: PathEnd = PathEnd.FLUSH

    def validate(self) -> None:
        if self.width <= 0:
            raise ValueError("path width must be positive")
        if len(self.points) < 2:
            raise ValueError("path needs at least 2 points")


@dataclass
class ArraySpec:
    """Regular lattice: rows x cols placements stepped by the pitch vectors."""

    rows: int
    cols: int
    row_pitch: Point
    col_pitch: Point

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array rows/cols must be >= 1")


@dataclass
class Instance:
    """Placement of a referenced cell.

    The placement applies mirror (about the x axis), then rotation, then
    translation to the child's coordinates.  rotation is one of 0/90/180/270.
    """

    ref_name: str
    origin: Point = (0, 0)
    rotation: int = 0
    mirrored_x: bool = False
    array: ArraySpec | None = None

    def validate(self) -> None:
        if self.rotation not in (0, 90, 180, 270):
            raise ValueError(f"rotation must be a multiple of 90, got {self.rotation}")
        if self.array is not None:
            self.array.validate()


@dataclass
class Cell:
    name: str
    boundaries: list[Boundary] = field(default_factory=list)
    paths: list[Path] = field(default_factory=list)
    instances: list[Instance] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.boundaries or self.paths or self.instances)


@dataclass
class Library:
    """Named collection of cells plus the unit scale from the source stream.

    meters_per_dbu is kept as the raw parsed double so a rewrite reproduces
    the original value; dbu arithmetic uses the exact rational form.
    """

    name: str = "LIB"
    cells: dict[str, Cell] = field(default_factory=dict)
    user_units_per_dbu: float = 1e-3
    meters_per_dbu: float = 1e-9
    version: int = 600

    def add(self, cell: Cell) -> Cell:
        if cell.name in self.cells:
            raise ValueError(f"duplicate cell name {cell.name!r}")
        self.cells[cell.name] = cell
        return cell

    @property
    def nm_per_dbu(self) -> Fraction:
        return exact_fraction(self.meters_per_dbu) * 10**9

    @property
    def dbu_per_nm(self) -> Fraction:
        return 1 / self.nm_per_dbu

    def top_candidates(self) -> list[str]:
        """Cells never referenced by another cell, in definition order."""
        referenced = {i.ref_name for c in self.cells.values() for i in c.instances}
        return [name for name in self.cells if name not in referenced]

    def validate(self) -> None:
        """Check referential integrity and acyclicity; raise LinkError/CycleError."""
        for cell in self.cells.values():
            for inst in cell.instances:
                if inst.ref_name not in self.cells:
                    raise LinkError(inst.ref_name)
        check_acyclic(self.cells)


def exact_fraction(x: float) -> Fraction:
    """The exact decimal value of a float's shortest repr, as a Fraction.

    repr(1e-9) == '1e-09', whose decimal reading is exactly 10**-9; going
    through the repr avoids binary-float dust in unit conversions.
    """
    from decimal import Decimal

    return Fraction(Decimal(repr(x)))


def check_acyclic(cells: dict[str, Cell]) -> None:
    """DFS cycle check over the reference graph. Raises CycleError with the cycle path."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {name: WHITE for name in cells}
    stack_path: list[str] = []

    def visit(name: str) -> None:
        color[name] = GRAY
        stack_path.append(name)
        for inst in cells[name].instances:
            child = inst.ref_name
            if child not in cells:
                continue  # link errors reported separately
            if color[child] == GRAY:
                cycle = stack_path[stack_path.index(child):] + [child]
                raise CycleError(cycle)
            if color[child] == WHITE:
                visit(child)
        stack_path.pop()
        color[name] = BLACK

    for name in cells:
        if color[name] == WHITE:
            visit(name)


# ---------------------------------------------------------------------------
# Transforms

@dataclass(frozen=True)
class Transform:
    """Mirror about x (optional), rotate by a 90-degree multiple, translate."""

    origin: Point = (0, 0)
    rotation: int = 0
    mirrored_x: bool = False

    def apply_vector(self, v: tuple) -> tuple:
        """Linear part only (no translation). Works on int or Fraction coords."""
        x, y = v
        if self.mirrored_x:
            y = -y
        r = self.rotation % 360
        if r == 90:
            x, y = -y, x
        elif r == 180:
            x, y = -x, -y
        elif r == 270:
            x, y = y, -x
        return (x, y)

    def apply(self, p: tuple) -> tuple:
        x, y = self.apply_vector(p)
        return (x + self.origin[0], y + self.origin[1])

    def compose(self, inner: "Transform") -> "Transform":
        """Transform equal to applying `inner` first, then self."""
        mirrored = self.mirrored_x ^ inner.mirrored_x
        sign = -1 if self.mirrored_x else 1
        rotation = (self.rotation + sign * inner.rotation) % 360
        return Transform(self.apply(inner.origin), rotation, mirrored)

    @staticmethod
    def of(inst: Instance, origin: Point | None = None) -> "Transform":
        return Transform(origin if origin is not None else inst.origin,
                         inst.rotation, inst.mirrored_x)


def expand_instance(inst: Instance) -> list[Instance]:
    """Replace an arrayed placement by its individual placements.

    Element (i, j) sits at origin + i*row_pitch + j*col_pitch; rows are the
    outer loop so the expansion order is deterministic.
    """
    if inst.array is None:
        return [inst]
    arr = inst.array
    out = []
    ox, oy = inst.origin
    for i in range(arr.rows):
        for j in range(arr.cols):
            x = ox + i * arr.row_pitch[0] + j * arr.col_pitch[0]
            y = oy + i * arr.row_pitch[1] + j * arr.col_pitch[1]
            out.append(replace(inst, origin=(x, y), array=None))
    return out


# ---------------------------------------------------------------------------
# Geometry queries

Box = tuple  # (xmin, ymin, xmax, ymax); ints or Fractions, exact either way


def _path_shapes_bbox(path: Path) -> Box:
    half = Fraction(path.width, 2)
    xs: list = []
    ys: list = []
    for (x0, y0), (x1, y1) in zip(path.points, path.points[1:]):
        if y0 == y1:  # horizontal: widen perpendicular to the run
            xs += [min(x0, x1), max(x0, x1)]
            ys += [y0 - half, y0 + half]
        elif x0 == x1:  # vertical
            xs += [x0 - half, x0 + half]
            ys += [min(y0, y1), max(y0, y1)]
        else:  # diagonal: pad the centerline box on every side
            xs += [min(x0, x1) - half, max(x0, x1) + half]
            ys += [min(y0, y1) - half, max(y0, y1) + half]
    if path.end_style is not PathEnd.FLUSH:
        # Round caps and square extensions both reach half-width past the
        # endpoints; their boxes coincide.
        for x, y in (path.points[0], path.points[-1]):
            xs += [x - half, x + half]
            ys += [y - half, y + half]
    return (min(xs), min(ys), max(xs), max(ys))


def _merge(a: Box | None, b: Box | None) -> Box | None:
    if a is None:
        return b
    if b is None:
        return a
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def _transform_box(t: Transform, box: Box) -> Box:
    x0, y0, x1, y1 = box
    pts = [t.apply(p) for p in ((x0, y0), (x1, y0), (x0, y1), (x1, y1))]
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return (min(xs), min(ys), max(xs), max(ys))


def bounding_box(lib: Library, name: str,
                 _memo: dict[str, Box | None] | None = None) -> Box | None:
    """Tight axis-aligned box over all drawn geometry of a cell, in dbu.

    Includes path widths and end extensions, and recurses through instances.
    Returns None for a cell with no drawn geometry anywhere below it.
    """
    if name not in lib.cells:
        raise NotFoundError(f"no cell named {name!r}")
    memo = _memo if _memo is not None else {}
    if name in memo:
        return memo[name]
    cell = lib.cells[name]
    box: Box | None = None
    for b in cell.boundaries:
        box = _merge(box, b.bbox())
    for p in cell.paths:
        box = _merge(box, _path_shapes_bbox(p))
    for inst in cell.instances:
        child = bounding_box(lib, inst.ref_name, memo)
        if child is None:
            continue
        if inst.array is None:
            box = _merge(box, _transform_box(Transform.of(inst), child))
        else:
            arr = inst.array
            ox, oy = inst.origin
            # Lattice offsets are linear in (i, j), so the extreme corners
            # bound every element.
            for i in (0, arr.rows - 1):
                for j in (0, arr.cols - 1):
                    o = (ox + i * arr.row_pitch[0] + j * arr.col_pitch[0],
                         oy + i * arr.row_pitch[1] + j * arr.col_pitch[1])
                    box = _merge(box, _transform_box(Transform.of(inst, o), child))
    memo[name] = box
    return box


def _transform_boundary(t: Transform, b: Boundary) -> Boundary:
    return Boundary(b.layer, [t.apply(p) for p in b.vertices])


def _transform_path(t: Transform, p: Path) -> Path:
    return Path(p.layer, p.width, [t.apply(q) for q in p.points], p.end_style)


def collect_flat_geometry(lib: Library, name: str) -> tuple[list[Boundary], list[Path]]:
    """All geometry of a cell with the full hierarchy flattened into its frame."""
    if name not in lib.cells:
        raise NotFoundError(f"no cell named {name!r}")
    boundaries: list[Boundary] = []
    paths: list[Path] = []

    def walk(cell_name: str, t: Transform) -> None:
        cell = lib.cells[cell_name]
        for b in cell.boundaries:
            boundaries.append(_transform_boundary(t, b))
        for p in cell.paths:
            paths.append(_transform_path(t, p))
        for inst in cell.instances:
            if inst.ref_name not in lib.cells:
                raise LinkError(inst.ref_name)
            for single in expand_instance(inst):
                walk(inst.ref_name, t.compose(Transform.of(single)))

    walk(name, Transform())
    return boundaries, paths


# ---------------------------------------------------------------------------
# Restructuring

def flatten_one_level(cell: Cell, target: Instance, lib: Library) -> Cell:
    """Replace one placement by the referenced cell's transformed content.

    Returns a new Cell; neither the input cell nor the library is modified.
    Untouched boundary/path/instance objects are carried over by reference so
    callers can track identity across the rewrite.  The child's geometry is
    copied through the placement transform (one copy per array element); its
    instances are re-parented with composed transforms, array pitches mapped
    through the placement's linear part.
    """
    idx = next((i for i, inst in enumerate(cell.instances) if inst is target), None)
    if idx is None:
        raise NotFoundError("target instance is not in the cell")
    if target.ref_name not in lib.cells:
        raise LinkError(target.ref_name)
    child = lib.cells[target.ref_name]

    new = Cell(cell.name, list(cell.boundaries), list(cell.paths),
               cell.instances[:idx] + cell.instances[idx + 1:])
    for single in expand_instance(target):
        t = Transform.of(single)
        for b in child.boundaries:
            new.boundaries.append(_transform_boundary(t, b))
        for p in child.paths:
            new.paths.append(_transform_path(t, p))
        for inner in child.instances:
            arr = inner.array
            if arr is not None:
                arr = ArraySpec(arr.rows, arr.cols,
                                t.apply_vector(arr.row_pitch),
                                t.apply_vector(arr.col_pitch))
            composed = t.compose(Transform.of(inner))
            new.instances.append(Instance(inner.ref_name, composed.origin,
                                          composed.rotation, composed.mirrored_x, arr))
    return new


# ---------------------------------------------------------------------------
# Content hashing

def _i64(*vals: int) -> bytes:
    return struct.pack(f"<{len(vals)}q", *vals)


def design_hash(lib: Library, name: str,
                _memo: dict[str, bytes] | None = None) -> bytes:
    """128-bit digest of a cell's content, independent of cell names and of
    the order geometry or instances are listed in.

    Two cells hash equal iff their boundaries, paths, and child placements
    (compared by child content, not name) match.  Used to recognize repeated
    designs across a hierarchy.
    """
    if name not in lib.cells:
        raise NotFoundError(f"no cell named {name!r}")
    memo = _memo if _memo is not None else {}
    if name in memo:
        return memo[name]
    cell = lib.cells[name]

    blobs = []
    for b in cell.boundaries:
        blobs.append(b"B" + _i64(b.layer.layer, b.layer.datatype, len(b.vertices))
                     + b"".join(_i64(x, y) for x, y in b.vertices))
    for p in cell.paths:
        blobs.append(b"P" + _i64(p.layer.layer, p.layer.datatype, p.width,
                                 p.end_style.value, len(p.points))
                     + b"".join(_i64(x, y) for x, y in p.points))
    inst_blobs = []
    for inst in cell.instances:
        child = design_hash(lib, inst.ref_name, memo)
        blob = b"I" + child + _i64(inst.origin[0], inst.origin[1],
                                   inst.rotation, int(inst.mirrored_x))
        if inst.array is not None:
            a = inst.array
            blob += _i64(a.rows, a.cols, *a.row_pitch, *a.col_pitch)
        inst_blobs.append(blob)

    payload = b"CELL" + b"".join(sorted(blobs)) + b"".join(sorted(inst_blobs))
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    memo[name] = digest
    return digest


# ---------------------------------------------------------------------------
# Traversal

@dataclass
class Visit:
    """One expanded placement encountered during a depth-first walk."""

    parent: str
    instance: Instance          # expanded placement (array=None)
    source: Instance            # the instance record it came from
    path: str                   # e.g. "TOP/amp[1]/mos[0]"
    depth: int


def hierarchy_order(lib: Library, top: str) -> Iterator[Visit]:
    """Deterministic depth-first pre-order over all expanded placements.

    Children are visited in instance-list order, array elements row-major.
    Every placement is yielded, including repeats of identical sub-trees.
    Placements are numbered per referenced name across the whole parent
    cell, so every yielded path is unique below its parent.
    """
    if top not in lib.cells:
        raise NotFoundError(f"no cell named {top!r}")

    def walk(name: str, prefix: str, depth: int) -> Iterator[Visit]:
        counts: dict[str, int] = {}
        for inst in lib.cells[name].instances:
            if inst.ref_name not in lib.cells:
                raise LinkError(inst.ref_name)
            for single in expand_instance(inst):
                k = counts.get(inst.ref_name, 0)
                counts[inst.ref_name] = k + 1
                path = f"{prefix}/{inst.ref_name}[{k}]"
                yield Visit(name, single, inst, path, depth)
                yield from walk(inst.ref_name, path, depth + 1)

    yield from walk(top, top, 0)


def copy_cells(cells: dict[str, Cell]) -> dict[str, Cell]:
    """Deep copy of a cell map (for session-local editing)."""
    return copy.deepcopy(cells)
