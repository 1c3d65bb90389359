"""GDSII codec tests.

The reference byte streams here are assembled by hand with struct, so the
parser and writer are checked against the wire format itself rather than
against each other.
"""

import logging
import struct
from fractions import Fraction

import pytest

from ltg.errors import CycleError, LinkError, ParseError, RangeError
from ltg.gds import (decode_real8, encode_real8, parse_gdsii, write_gdsii)
from ltg.layout import (ArraySpec, Boundary, Cell, Instance, LayerKey,
                        Library, Path, PathEnd)


def rec(rtype: int, dtype: int, payload: bytes = b"") -> bytes:
    return struct.pack(">HBB", len(payload) + 4, rtype, dtype) + payload


def i16(*vals) -> bytes:
    return struct.pack(f">{len(vals)}h", *vals)


def i32(*vals) -> bytes:
    return struct.pack(f">{len(vals)}l", *vals)


def minimal_stream(cell_records: bytes = b"", name: bytes = b"X\x00") -> bytes:
    return (rec(0x00, 2, i16(600))                     # HEADER v600
            + rec(0x01, 2, i16(*[0] * 12))             # BGNLIB
            + rec(0x02, 6, b"LIB\x00")                 # LIBNAME
            + rec(0x03, 5, encode_real8(1e-3) + encode_real8(1e-9))  # UNITS
            + rec(0x05, 2, i16(*[0] * 12))             # BGNSTR
            + rec(0x06, 6, name)                       # STRNAME
            + cell_records
            + rec(0x07, 0)                             # ENDSTR
            + rec(0x04, 0))                            # ENDLIB


BOUNDARY_RECORDS = (rec(0x08, 0)
                    + rec(0x0D, 2, i16(40))
                    + rec(0x0E, 2, i16(0))
                    + rec(0x10, 3, i32(0, 0, 100, 0, 100, 50, 0, 50, 0, 0))
                    + rec(0x11, 0))


# ---------------------------------------------------------------------------
# Eight-byte reals

def reference_real8(value: float) -> bytes:
    """Independent excess-64 encoder built on exact rational arithmetic."""
    if value == 0.0:
        return b"\x00" * 8
    sign = 0x80 if value < 0 else 0
    v = Fraction(abs(value))
    exp = 0
    while v >= 1:
        v /= 16
        exp += 1
    while v < Fraction(1, 16):
        v *= 16
        exp -= 1
    mantissa = round(v * 2**56)
    if mantissa == 2**56:
        mantissa = 2**52
        exp += 1
    return bytes([sign | (exp + 64)]) + mantissa.to_bytes(7, "big")


@pytest.mark.parametrize("value", [
    0.0, 1.0, -1.0, 2.0, 0.5, -3.0, 90.0, 180.0, 270.0,
    1e-3, 1e-9, 2.5e-10, 1 / 3, 123456.789, -6.25e-5,
])
def test_encode_real8_matches_reference(value):
    assert encode_real8(value) == reference_real8(value)


def test_real8_known_bytes():
    # 1.0 = (1/16) * 16**1 -> exponent byte 0x41, mantissa 2**52
    assert encode_real8(1.0) == bytes([0x41, 0x10, 0, 0, 0, 0, 0, 0])
    assert encode_real8(2.0) == bytes([0x41, 0x20, 0, 0, 0, 0, 0, 0])
    assert encode_real8(-3.0) == bytes([0xC1, 0x30, 0, 0, 0, 0, 0, 0])
    assert encode_real8(0.5) == bytes([0x40, 0x80, 0, 0, 0, 0, 0, 0])
    assert decode_real8(bytes([0x41, 0x10, 0, 0, 0, 0, 0, 0])) == 1.0
    assert decode_real8(b"\x00" * 8) == 0.0


@pytest.mark.parametrize("value", [
    1.0, -2.5, 1e-9, 1e-3, 360.0, 1 / 7, 9.87654321e12, 5e-64,
])
def test_real8_round_trip_is_exact(value):
    # 53-bit doubles always fit the 56-bit mantissa, so decode inverts encode.
    assert decode_real8(encode_real8(value)) == value


# ---------------------------------------------------------------------------
# Parsing hand-assembled streams

def test_header_record_bytes():
    stream = minimal_stream()
    assert stream[:6] == bytes([0x00, 0x06, 0x00, 0x02, 0x02, 0x58])
    assert parse_gdsii(stream).version == 600


def test_parse_minimal_library():
    lib = parse_gdsii(minimal_stream(BOUNDARY_RECORDS))
    assert lib.name == "LIB"
    assert lib.user_units_per_dbu == 1e-3
    assert lib.meters_per_dbu == 1e-9
    assert lib.nm_per_dbu == 1
    assert list(lib.cells) == ["X"]
    cell = lib.cells["X"]
    assert len(cell.boundaries) == 1
    b = cell.boundaries[0]
    assert b.layer == LayerKey(40, 0)
    # closing vertex is dropped
    assert b.vertices == [(0, 0), (100, 0), (100, 50), (0, 50)]


def test_parse_path_defaults_to_flush():
    records = (rec(0x09, 0)
               + rec(0x0D, 2, i16(17)) + rec(0x0E, 2, i16(0))
               + rec(0x0F, 3, i32(20))
               + rec(0x10, 3, i32(0, 0, 100, 0))
               + rec(0x11, 0))
    cell = parse_gdsii(minimal_stream(records)).cells["X"]
    assert len(cell.paths) == 1
    p = cell.paths[0]
    assert (p.width, p.end_style) == (20, PathEnd.FLUSH)
    assert p.points == [(0, 0), (100, 0)]


def test_parse_sref_with_transform():
    child = (rec(0x05, 2, i16(*[0] * 12)) + rec(0x06, 6, b"B\x00")
             + BOUNDARY_RECORDS + rec(0x07, 0))
    sref = (rec(0x0A, 0) + rec(0x12, 6, b"B\x00")
            + rec(0x1A, 1, struct.pack(">H", 0x8000))
            + rec(0x1C, 5, encode_real8(270.0))
            + rec(0x10, 3, i32(-10, 25))
            + rec(0x11, 0))
    stream = (minimal_stream()[:-4]  # drop ENDLIB, keep empty cell X
              + child
              + rec(0x05, 2, i16(*[0] * 12)) + rec(0x06, 6, b"T\x00")
              + sref + rec(0x07, 0)
              + rec(0x04, 0))
    lib = parse_gdsii(stream)
    inst = lib.cells["T"].instances[0]
    assert inst.ref_name == "B"
    assert inst.origin == (-10, 25)
    assert inst.rotation == 270
    assert inst.mirrored_x is True
    assert lib.top_candidates() == ["X", "T"]


def test_parse_aref_recovers_pitches():
    child = (rec(0x05, 2, i16(*[0] * 12)) + rec(0x06, 6, b"B\x00")
             + BOUNDARY_RECORDS + rec(0x07, 0))
    # 3 columns spaced (200, 0), 2 rows spaced (0, 300), origin (50, 60)
    aref = (rec(0x0B, 0) + rec(0x12, 6, b"B\x00")
            + rec(0x13, 2, i16(3, 2))
            + rec(0x10, 3, i32(50, 60, 50 + 600, 60, 50, 60 + 600))
            + rec(0x11, 0))
    stream = (minimal_stream()[:-4] + child
              + rec(0x05, 2, i16(*[0] * 12)) + rec(0x06, 6, b"T\x00")
              + aref + rec(0x07, 0) + rec(0x04, 0))
    arr = parse_gdsii(stream).cells["T"].instances[0].array
    assert (arr.rows, arr.cols) == (2, 3)
    assert arr.col_pitch == (200, 0)
    assert arr.row_pitch == (0, 300)


def test_text_element_is_skipped_with_warning(caplog):
    text = (rec(0x0C, 0)                       # TEXT
            + rec(0x0D, 2, i16(1))             # LAYER
            + rec(0x16, 2, i16(0))             # TEXTTYPE
            + rec(0x10, 3, i32(5, 5))
            + rec(0x19, 6, b"hi")              # STRING
            + rec(0x11, 0))
    with caplog.at_level(logging.WARNING, logger="ltg.gds"):
        lib = parse_gdsii(minimal_stream(text + BOUNDARY_RECORDS))
    assert "TEXT" in caplog.text
    cell = lib.cells["X"]
    assert len(cell.boundaries) == 1 and not cell.paths and not cell.instances


def test_parse_errors_carry_offsets():
    stream = minimal_stream(BOUNDARY_RECORDS)
    with pytest.raises(ParseError) as err:
        parse_gdsii(stream[:len(stream) - 7])
    assert err.value.offset is not None

    with pytest.raises(ParseError):
        parse_gdsii(b"\x00\x04\x04\x00")  # starts with ENDLIB, not HEADER


def test_magnification_other_than_one_is_rejected():
    sref = (rec(0x0A, 0) + rec(0x12, 6, b"X\x00")
            + rec(0x1B, 5, encode_real8(2.0))
            + rec(0x10, 3, i32(0, 0)) + rec(0x11, 0))
    stream = (minimal_stream()[:-4]
              + rec(0x05, 2, i16(*[0] * 12)) + rec(0x06, 6, b"T\x00")
              + sref + rec(0x07, 0) + rec(0x04, 0))
    with pytest.raises(ParseError, match="magnification"):
        parse_gdsii(stream)


def test_non_orthogonal_angle_is_rejected():
    sref = (rec(0x0A, 0) + rec(0x12, 6, b"X\x00")
            + rec(0x1C, 5, encode_real8(45.0))
            + rec(0x10, 3, i32(0, 0)) + rec(0x11, 0))
    stream = (minimal_stream()[:-4]
              + rec(0x05, 2, i16(*[0] * 12)) + rec(0x06, 6, b"T\x00")
              + sref + rec(0x07, 0) + rec(0x04, 0))
    with pytest.raises(ParseError, match="multiple of 90"):
        parse_gdsii(stream)


def test_absolute_transform_flags_are_rejected():
    sref = (rec(0x0A, 0) + rec(0x12, 6, b"X\x00")
            + rec(0x1A, 1, struct.pack(">H", 0x0004))
            + rec(0x10, 3, i32(0, 0)) + rec(0x11, 0))
    stream = (minimal_stream()[:-4]
              + rec(0x05, 2, i16(*[0] * 12)) + rec(0x06, 6, b"T\x00")
              + sref + rec(0x07, 0) + rec(0x04, 0))
    with pytest.raises(ParseError, match="absolute"):
        parse_gdsii(stream)


def test_dangling_reference_raises_link_error():
    sref = (rec(0x0A, 0) + rec(0x12, 6, b"NOPE"
                                ) + rec(0x10, 3, i32(0, 0)) + rec(0x11, 0))
    with pytest.raises(LinkError) as err:
        parse_gdsii(minimal_stream(sref))
    assert err.value.name == "NOPE"


def test_unclosed_boundary_is_rejected():
    records = (rec(0x08, 0) + rec(0x0D, 2, i16(1)) + rec(0x0E, 2, i16(0))
               + rec(0x10, 3, i32(0, 0, 10, 0, 10, 10, 0, 10))
               + rec(0x11, 0))
    with pytest.raises(ParseError, match="close"):
        parse_gdsii(minimal_stream(records))


# ---------------------------------------------------------------------------
# Writing

def full_feature_library() -> Library:
    lib = Library(name="FULL")
    leaf = lib.add(Cell("leaf"))
    leaf.boundaries.append(Boundary(LayerKey(5, 0),
                                    [(0, 0), (200, 0), (200, 80), (0, 80)]))
    leaf.boundaries.append(Boundary(LayerKey(17, 0),
                                    [(-40, -40), (0, -40), (0, 0),
                                     (40, 0), (40, 40), (-40, 40)]))
    for i, style in enumerate(PathEnd):
        leaf.paths.append(Path(LayerKey(40, i), 20,
                               [(0, 100 * i), (300, 100 * i), (300, 100 * i + 60)],
                               style))
    mid = lib.add(Cell("mid"))
    mid.instances.append(Instance("leaf", (1000, 0), 90, True))
    mid.instances.append(Instance("leaf", (-500, -500), 180, False))
    top = lib.add(Cell("top"))
    top.instances.append(Instance("mid", (0, 0), 270, False))
    top.instances.append(Instance("leaf", (0, 5000), 0, True,
                                  ArraySpec(2, 3, (0, 700), (650, 0))))
    return lib


def test_write_parse_round_trip_preserves_structure():
    lib = full_feature_library()
    data = write_gdsii(lib)
    back = parse_gdsii(data)
    assert back == lib


def test_second_write_is_byte_identical():
    lib = full_feature_library()
    first = write_gdsii(lib)
    second = write_gdsii(parse_gdsii(first))
    assert first == second


def test_write_rejects_out_of_range_coordinates():
    lib = Library()
    lib.add(Cell("c")).boundaries.append(
        Boundary(LayerKey(1, 0), [(0, 0), (2**31, 0), (2**31, 10), (0, 10)]))
    with pytest.raises(RangeError):
        write_gdsii(lib)


def test_write_rejects_dangling_reference_and_cycles():
    lib = Library()
    lib.add(Cell("a")).instances.append(Instance("missing"))
    with pytest.raises(LinkError):
        write_gdsii(lib)

    lib = Library()
    lib.add(Cell("a")).instances.append(Instance("b"))
    lib.add(Cell("b")).instances.append(Instance("a"))
    with pytest.raises(CycleError) as err:
        write_gdsii(lib)
    assert "a" in err.value.path and "b" in err.value.path
