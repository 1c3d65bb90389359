"""GDSII stream format reader and writer.

Covers the record subset produced by Manhattan analog layouts: library and
structure framing, BOUNDARY, PATH, SREF, and AREF elements with orthogonal
transforms.  TEXT, NODE, and BOX elements are skipped with a warning; any
other record type is a parse error.  Records are big-endian: u16 total length
(including this 4-byte header), u8 record type, u8 data type.
"""

from __future__ import annotations

import logging
import math
import struct

from .errors import ParseError, RangeError
from .layout import (ArraySpec, Boundary, Cell, Instance, LayerKey, Library,
                     Path, PathEnd, GDS_COORD_MAX, GDS_COORD_MIN)

log = logging.getLogger(__name__)

# Record types
HEADER = 0x00
BGNLIB = 0x01
LIBNAME = 0x02
UNITS = 0x03
ENDLIB = 0x04
BGNSTR = 0x05
STRNAME = 0x06
ENDSTR = 0x07
BOUNDARY = 0x08
PATH = 0x09
SREF = 0x0A
AREF = 0x0B
TEXT = 0x0C
LAYER = 0x0D
DATATYPE = 0x0E
WIDTH = 0x0F
XY = 0x10
ENDEL = 0x11
SNAME = 0x12
COLROW = 0x13
NODE = 0x15
STRANS = 0x1A
MAG = 0x1B
ANGLE = 0x1C
PATHTYPE = 0x21
BOX = 0x2D

_REC_NAMES = {
    HEADER: "HEADER", BGNLIB: "BGNLIB", LIBNAME: "LIBNAME", UNITS: "UNITS",
    ENDLIB: "ENDLIB", BGNSTR: "BGNSTR", STRNAME: "STRNAME", ENDSTR: "ENDSTR",
    BOUNDARY: "BOUNDARY", PATH: "PATH", SREF: "SREF", AREF: "AREF",
    TEXT: "TEXT", LAYER: "LAYER", DATATYPE: "DATATYPE", WIDTH: "WIDTH",
    XY: "XY", ENDEL: "ENDEL", SNAME: "SNAME", COLROW: "COLROW", NODE: "NODE",
    STRANS: "STRANS", MAG: "MAG", ANGLE: "ANGLE", PATHTYPE: "PATHTYPE",
    BOX: "BOX",
}

# Data types
D_NONE = 0
D_BITARRAY = 1
D_INT16 = 2
D_INT32 = 3
D_REAL8 = 5
D_ASCII = 6

_SKIPPABLE_ELEMENTS = (TEXT, NODE, BOX)

_STRANS_REFLECT = 0x8000
_STRANS_ABS_MAG = 0x0004
_STRANS_ABS_ANGLE = 0x0002

_PATHTYPE_TO_END = {0: PathEnd.FLUSH, 1: PathEnd.ROUND, 2: PathEnd.EXTENDED}
_END_TO_PATHTYPE = {v: k for k, v in _PATHTYPE_TO_END.items()}


# ---------------------------------------------------------------------------
# Eight-byte real (excess-64, base-16 mantissa in [1/16, 1))

def decode_real8(data: bytes) -> float:
    if len(data) != 8:
        raise ValueError("real8 needs exactly 8 bytes")
    sign = -1.0 if data[0] & 0x80 else 1.0
    exponent = (data[0] & 0x7F) - 64
    mantissa = int.from_bytes(data[1:], "big")
    if mantissa == 0:
        return 0.0
    return sign * math.ldexp(mantissa, 4 * exponent - 56)


def encode_real8(value: float) -> bytes:
    if value == 0.0:
        return b"\x00" * 8
    if not math.isfinite(value):
        raise ValueError(f"cannot encode {value!r} as real8")
    sign = 0x80 if value < 0 else 0x00
    frac, exp2 = math.frexp(abs(value))  # frac in [0.5, 1)
    exp16 = -(-exp2 // 4)  # ceil: smallest e with |value| / 16**e < 1
    mantissa = round(math.ldexp(frac, exp2 - 4 * exp16 + 56))
    if mantissa >= 1 << 56:  # rounding carried past the top
        mantissa >>= 4
        exp16 += 1
    if not (-64 <= exp16 <= 63):
        raise ValueError(f"real8 exponent out of range for {value!r}")
    return bytes([sign | (exp16 + 64)]) + mantissa.to_bytes(7, "big")


# ---------------------------------------------------------------------------
# Record-level reading

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.rec_offset = 0  # start of the record last read

    def next_record(self) -> tuple[int, int, bytes]:
        """Return (record_type, data_type, payload). Raises at EOF."""
        self.rec_offset = self.pos
        if self.pos + 4 > len(self.data):
            raise ParseError("truncated record header", self.pos)
        length, rtype, dtype = struct.unpack_from(">HBB", self.data, self.pos)
        if length < 4 or length % 2:
            raise ParseError(f"bad record length {length}", self.pos)
        if self.pos + length > len(self.data):
            raise ParseError("record runs past end of stream", self.pos)
        payload = self.data[self.pos + 4:self.pos + length]
        self.pos += length
        return rtype, dtype, payload

    def error(self, message: str) -> ParseError:
        return ParseError(message, self.rec_offset)


def _ints16(payload: bytes) -> tuple[int, ...]:
    return struct.unpack(f">{len(payload) // 2}h", payload)


def _ints32(payload: bytes) -> tuple[int, ...]:
    return struct.unpack(f">{len(payload) // 4}l", payload)


def _ascii(payload: bytes) -> str:
    return payload.rstrip(b"\x00").decode("ascii")


def _points(payload: bytes, rd: _Reader) -> list[tuple[int, int]]:
    if len(payload) % 8:
        raise rd.error("XY payload is not a whole number of points")
    vals = _ints32(payload)
    return list(zip(vals[0::2], vals[1::2]))


# ---------------------------------------------------------------------------
# Parsing

def parse_gdsii(data: bytes) -> Library:
    """Parse a GDSII byte stream into a Library.

    Raises ParseError (with byte offset) on malformed input, LinkError for
    dangling references, CycleError for reference cycles.
    """
    rd = _Reader(data)

    rtype, dtype, payload = rd.next_record()
    if rtype != HEADER or dtype != D_INT16 or len(payload) != 2:
        raise rd.error("stream does not begin with a HEADER record")
    version = _ints16(payload)[0]

    rtype, _, _ = rd.next_record()
    if rtype != BGNLIB:
        raise rd.error("expected BGNLIB after HEADER")

    lib = Library(version=version)
    seen_units = False
    while True:
        rtype, dtype, payload = rd.next_record()
        if rtype == LIBNAME:
            lib.name = _ascii(payload)
        elif rtype == UNITS:
            if len(payload) != 16:
                raise rd.error("UNITS payload must hold two real8 values")
            lib.user_units_per_dbu = decode_real8(payload[:8])
            lib.meters_per_dbu = decode_real8(payload[8:])
            if lib.meters_per_dbu <= 0:
                raise rd.error("UNITS meters-per-dbu must be positive")
            seen_units = True
        elif rtype == BGNSTR:
            if not seen_units:
                raise rd.error("BGNSTR before UNITS")
            cell = _parse_structure(rd)
            if cell.name in lib.cells:
                raise rd.error(f"duplicate cell name {cell.name!r}")
            lib.cells[cell.name] = cell
        elif rtype == ENDLIB:
            break
        else:
            raise rd.error(f"unexpected record {_REC_NAMES.get(rtype, hex(rtype))} "
                           "at library level")

    lib.validate()
    return lib


def _parse_structure(rd: _Reader) -> Cell:
    rtype, _, payload = rd.next_record()
    if rtype != STRNAME:
        raise rd.error("expected STRNAME after BGNSTR")
    cell = Cell(_ascii(payload))
    while True:
        rtype, _, payload = rd.next_record()
        if rtype == ENDSTR:
            return cell
        if rtype == BOUNDARY:
            cell.boundaries.append(_parse_boundary(rd))
        elif rtype == PATH:
            cell.paths.append(_parse_path(rd))
        elif rtype in (SREF, AREF):
            cell.instances.append(_parse_ref(rd, aref=rtype == AREF))
        elif rtype in _SKIPPABLE_ELEMENTS:
            log.warning("skipping %s element in cell %r",
                        _REC_NAMES[rtype], cell.name)
            while rd.next_record()[0] != ENDEL:
                pass
        else:
            raise rd.error(f"unexpected record {_REC_NAMES.get(rtype, hex(rtype))} "
                           f"in cell {cell.name!r}")


def _element_fields(rd: _Reader, allowed: dict) -> dict:
    """Read records until ENDEL, dispatching payloads via `allowed`."""
    fields: dict = {}
    while True:
        rtype, _, payload = rd.next_record()
        if rtype == ENDEL:
            return fields
        if rtype not in allowed:
            raise rd.error(f"unexpected record {_REC_NAMES.get(rtype, hex(rtype))} "
                           "inside element")
        fields[rtype] = allowed[rtype](payload)


def _require(fields: dict, rtype: int, rd: _Reader, what: str):
    if rtype not in fields:
        raise rd.error(f"element is missing its {what} record")
    return fields[rtype]


def _layer_key(fields: dict, rd: _Reader) -> LayerKey:
    layer = _require(fields, LAYER, rd, "LAYER")[0]
    datatype = _require(fields, DATATYPE, rd, "DATATYPE")[0]
    try:
        return LayerKey(layer, datatype)
    except ValueError as exc:
        raise rd.error(str(exc)) from None


def _parse_boundary(rd: _Reader) -> Boundary:
    fields = _element_fields(rd, {
        LAYER: _ints16, DATATYPE: _ints16, XY: lambda p: _points(p, rd),
    })
    pts = _require(fields, XY, rd, "XY")
    if len(pts) < 4 or pts[0] != pts[-1]:
        raise rd.error("boundary XY must close on its first point")
    b = Boundary(_layer_key(fields, rd), pts[:-1])
    try:
        b.validate()
    except ValueError as exc:
        raise rd.error(str(exc)) from None
    return b


def _parse_path(rd: _Reader) -> Path:
    fields = _element_fields(rd, {
        LAYER: _ints16, DATATYPE: _ints16, WIDTH: _ints32,
        PATHTYPE: _ints16, XY: lambda p: _points(p, rd),
    })
    pts = _require(fields, XY, rd, "XY")
    width = _require(fields, WIDTH, rd, "WIDTH")[0]
    ptype = fields.get(PATHTYPE, (0,))[0]
    if ptype not in _PATHTYPE_TO_END:
        raise rd.error(f"unsupported path type {ptype}")
    p = Path(_layer_key(fields, rd), width, pts, _PATHTYPE_TO_END[ptype])
    try:
        p.validate()
    except ValueError as exc:
        raise rd.error(str(exc)) from None
    return p


def _parse_transform(fields: dict, rd: _Reader) -> tuple[int, bool]:
    mirrored = False
    if STRANS in fields:
        bits = fields[STRANS][0] & 0xFFFF
        if bits & (_STRANS_ABS_MAG | _STRANS_ABS_ANGLE):
            raise rd.error("absolute magnification/angle is not supported")
        if bits & ~_STRANS_REFLECT:
            raise rd.error(f"unsupported STRANS flags {bits:#06x}")
        mirrored = bool(bits & _STRANS_REFLECT)
    if MAG in fields and fields[MAG] != 1.0:
        raise rd.error(f"magnification {fields[MAG]} is not supported (must be 1)")
    rotation = 0
    if ANGLE in fields:
        angle = fields[ANGLE]
        rotation = int(angle) % 360
        if angle != rotation or rotation % 90:
            raise rd.error(f"angle {angle} is not a multiple of 90 degrees")
    return rotation, mirrored


def _parse_ref(rd: _Reader, aref: bool) -> Instance:
    fields = _element_fields(rd, {
        SNAME: _ascii, STRANS: _ints16, MAG: lambda p: decode_real8(p),
        ANGLE: lambda p: decode_real8(p), COLROW: _ints16,
        XY: lambda p: _points(p, rd),
    })
    name = _require(fields, SNAME, rd, "SNAME")
    pts = _require(fields, XY, rd, "XY")
    rotation, mirrored = _parse_transform(fields, rd)
    if not aref:
        if len(pts) != 1:
            raise rd.error("SREF XY must hold exactly one point")
        return Instance(name, pts[0], rotation, mirrored)

    cols, rows = _require(fields, COLROW, rd, "COLROW")
    if cols < 1 or rows < 1:
        raise rd.error("AREF COLROW values must be positive")
    if len(pts) != 3:
        raise rd.error("AREF XY must hold exactly three points")
    origin, col_end, row_end = pts

    def pitch(end: tuple[int, int], n: int, what: str) -> tuple[int, int]:
        dx, dy = end[0] - origin[0], end[1] - origin[1]
        if dx % n or dy % n:
            raise rd.error(f"AREF {what} spacing is not a whole number of units")
        return (dx // n, dy // n)

    array = ArraySpec(rows, cols, pitch(row_end, rows, "row"),
                      pitch(col_end, cols, "column"))
    return Instance(name, origin, rotation, mirrored, array)


# ---------------------------------------------------------------------------
# Writing

class _Writer:
    def __init__(self):
        self.chunks: list[bytes] = []

    def record(self, rtype: int, dtype: int, payload: bytes = b"") -> None:
        self.chunks.append(struct.pack(">HBB", len(payload) + 4, rtype, dtype))
        self.chunks.append(payload)

    def int16(self, rtype: int, *vals: int) -> None:
        self.record(rtype, D_INT16, struct.pack(f">{len(vals)}h", *vals))

    def int32(self, rtype: int, *vals: int) -> None:
        for v in vals:
            if not (GDS_COORD_MIN <= v <= GDS_COORD_MAX):
                raise RangeError(f"coordinate {v} exceeds the 32-bit range")
        self.record(rtype, D_INT32, struct.pack(f">{len(vals)}l", *vals))

    def string(self, rtype: int, text: str) -> None:
        raw = text.encode("ascii")
        if len(raw) % 2:
            raw += b"\x00"
        self.record(rtype, D_ASCII, raw)

    def real8(self, rtype: int, *vals: float) -> None:
        self.record(rtype, D_REAL8, b"".join(encode_real8(v) for v in vals))


def _write_transform(w: _Writer, rotation: int, mirrored: bool) -> None:
    if mirrored or rotation:
        w.record(STRANS, D_BITARRAY,
                 struct.pack(">H", _STRANS_REFLECT if mirrored else 0))
    if rotation:
        w.real8(ANGLE, float(rotation))


def write_gdsii(lib: Library) -> bytes:
    """Serialize a Library to GDSII bytes.

    Output is a pure function of the library content (timestamps are zeroed),
    so writing the same library twice yields identical bytes.
    """
    lib.validate()
    w = _Writer()
    w.int16(HEADER, lib.version)
    w.int16(BGNLIB, *([0] * 12))
    w.string(LIBNAME, lib.name)
    w.real8(UNITS, lib.user_units_per_dbu, lib.meters_per_dbu)

    for cell in lib.cells.values():
        w.int16(BGNSTR, *([0] * 12))
        w.string(STRNAME, cell.name)
        for b in cell.boundaries:
            b.validate()
            w.record(BOUNDARY, D_NONE)
            w.int16(LAYER, b.layer.layer)
            w.int16(DATATYPE, b.layer.datatype)
            ring = b.vertices + [b.vertices[0]]
            w.int32(XY, *[c for pt in ring for c in pt])
            w.record(ENDEL, D_NONE)
        for p in cell.paths:
            p.validate()
            w.record(PATH, D_NONE)
            w.int16(LAYER, p.layer.layer)
            w.int16(DATATYPE, p.layer.datatype)
            if p.end_style is not PathEnd.FLUSH:
                w.int16(PATHTYPE, _END_TO_PATHTYPE[p.end_style])
            w.int32(WIDTH, p.width)
            w.int32(XY, *[c for pt in p.points for c in pt])
            w.record(ENDEL, D_NONE)
        for inst in cell.instances:
            inst.validate()
            arr = inst.array
            w.record(AREF if arr else SREF, D_NONE)
            w.string(SNAME, inst.ref_name)
            _write_transform(w, inst.rotation, inst.mirrored_x)
            ox, oy = inst.origin
            if arr is None:
                w.int32(XY, ox, oy)
            else:
                if not (1 <= arr.cols <= 32767 and 1 <= arr.rows <= 32767):
                    raise RangeError("AREF rows/cols exceed the 16-bit range")
                w.int16(COLROW, arr.cols, arr.rows)
                w.int32(XY, ox, oy,
                        ox + arr.cols * arr.col_pitch[0],
                        oy + arr.cols * arr.col_pitch[1],
                        ox + arr.rows * arr.row_pitch[0],
                        oy + arr.rows * arr.row_pitch[1])
            w.record(ENDEL, D_NONE)
        w.record(ENDSTR, D_NONE)

    w.record(ENDLIB, D_NONE)
    return b"".join(w.chunks)


def read_gdsii_file(path) -> Library:
    with open(path, "rb") as fh:
        return parse_gdsii(fh.read())


def write_gdsii_file(path, lib: Library) -> None:
    with open(path, "wb") as fh:
        fh.write(write_gdsii(lib))
