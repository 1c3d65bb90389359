"""Parametric layout generators for the built-in class family.

Each generator maps an integer parameter set (lengths in nm, one nm per
database unit) to a flat Manhattan cell.  The family covers twelve circuit
primitives, every metal-to-metal via stack combination, and a boundary
array, plus two kinds of not-generatable material: random rectangle noise
and structurally perturbed copies of real generator output whose routing no
longer lines up.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ParamError, RegistryError
from .layout import Boundary, Cell, LayerKey, Path, PathEnd

# Mask layers, matching the default channel table.
NWELL = LayerKey(1, 0)
PWELL = LayerKey(2, 0)
NIMP = LayerKey(3, 0)
PIMP = LayerKey(4, 0)
ACTIVE = LayerKey(5, 0)
POLY = LayerKey(17, 0)
MGATE = LayerKey(30, 0)
CONTACT = LayerKey(10, 0)
METAL = tuple(LayerKey(40 + i, 0) for i in range(8))
VIA = tuple(LayerKey(60 + i, 0) for i in range(7))
PAD = LayerKey(81, 0)

CUT = 40        # contact/via cut edge
GATE_OVER = 60  # poly overhang past active
SD = 3 * CUT    # source/drain region width between gates


@dataclass(frozen=True)
class ParamSpec:
    """Inclusive integer range, sampled on a step grid."""

    name: str
    lo: int
    hi: int
    step: int = 1

    def check(self, value: int) -> int:
        if not isinstance(value, (int, np.integer)):
            raise ParamError(self.name, f"expected an integer, got {value!r}")
        if not (self.lo <= value <= self.hi):
            raise ParamError(self.name, f"{value} outside [{self.lo}, {self.hi}]")
        return int(value)

    def sample(self, rng: np.random.Generator) -> int:
        return self.lo + self.step * int(rng.integers(0, (self.hi - self.lo) // self.step + 1))


@dataclass
class GeneratorSpec:
    """A named parametric layout family."""

    id: str
    params: list[ParamSpec]
    build: Callable[[dict], Cell]
    label: str = ""

    def __post_init__(self):
        if not self.label:
            self.label = self.id

    def validated(self, params: dict) -> dict:
        out = {}
        for spec in self.params:
            if spec.name not in params:
                raise ParamError(spec.name, "missing")
            out[spec.name] = spec.check(params[spec.name])
        extra = set(params) - set(out)
        if extra:
            raise ParamError(sorted(extra)[0], "not a parameter of this generator")
        return out


def sample_params(spec: GeneratorSpec, rng: np.random.Generator) -> dict:
    return {p.name: p.sample(rng) for p in spec.params}


def generate_layout(spec: GeneratorSpec, params: dict) -> Cell:
    return spec.build(spec.validated(params))


# ---------------------------------------------------------------------------
# Drawing helpers

def _r(cell: Cell, layer: LayerKey, x0, y0, x1, y1) -> None:
    x0, x1 = sorted((int(x0), int(x1)))
    y0, y1 = sorted((int(y0), int(y1)))
    cell.boundaries.append(Boundary(layer, [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]))


def _cut_column(cell: Cell, layer: LayerKey, cx: int, y0: int, y1: int) -> None:
    """Column of square cuts centered at cx filling [y0, y1]."""
    n = max(1, (y1 - y0) // (2 * CUT))
    span = y1 - y0 - n * CUT
    gap = span // (n + 1)
    y = y0 + gap
    for _ in range(n):
        _r(cell, layer, cx - CUT // 2, y, cx + CUT // 2, y + CUT)
        y += CUT + gap


def _fet(cell: Cell, x0: int, y0: int, fingers: int, w: int, l: int,
         nmos: bool, strap_drain: bool = True) -> tuple[int, int]:
    """Draw a multi-finger transistor; returns its (width, height) extent.

    Active from (x0, y0); gates are vertical poly fingers; every diffusion
    column gets contacts and a metal1 strip, drain strips optionally omitted
    so callers can route them.
    """
    aw = fingers * l + (fingers + 1) * SD
    _r(cell, ACTIVE, x0, y0, x0 + aw, y0 + w)
    _r(cell, NIMP if nmos else PIMP, x0 - CUT, y0 - CUT, x0 + aw + CUT, y0 + w + CUT)
    well = PWELL if nmos else NWELL
    _r(cell, well, x0 - 2 * CUT, y0 - 2 * CUT, x0 + aw + 2 * CUT, y0 + w + 2 * CUT)
    for k in range(fingers):
        gx = x0 + SD + k * (l + SD)
        _r(cell, POLY, gx, y0 - GATE_OVER, gx + l, y0 + w + GATE_OVER)
    for k in range(fingers + 1):
        cx = x0 + k * (l + SD) + SD // 2
        if strap_drain or k % 2 == 0:
            _cut_column(cell, CONTACT, cx, y0 + 10, y0 + w - 10)
            _r(cell, METAL[0], cx - 30, y0 - 20, cx + 30, y0 + w + 20)
    return aw, w


def _check_even(params: dict, names: tuple[str, ...]) -> None:
    for n in names:
        if params[n] % 2:
            raise ParamError(n, "must be even to keep contacts on grid")


# ---------------------------------------------------------------------------
# Circuit generators

def _build_mosfet(p: dict) -> Cell:
    cell = Cell("mosfet")
    _fet(cell, 0, 0, p["fingers"], p["w"], p["l"], nmos=p["flavor"] == 0)
    return cell


def _build_poly_resistor(p: dict) -> Cell:
    cell = Cell("poly_resistor")
    width, seg, gap = p["width"], p["seg_len"], p["width"] * 3
    pts = [(0, 0)]
    x, y = 0, 0
    for k in range(p["segments"]):
        x = seg if k % 2 == 0 else 0
        pts.append((x, y))
        if k < p["segments"] - 1:
            y += gap
            pts.append((x, y))
    cell.paths.append(Path(POLY, width, pts, PathEnd.EXTENDED))
    for ex, ey in (pts[0], pts[-1]):
        _r(cell, CONTACT, ex - CUT // 2, ey - CUT // 2, ex + CUT // 2, ey + CUT // 2)
        _r(cell, METAL[0], ex - CUT, ey - CUT, ex + CUT, ey + CUT)
    return cell


def _stacked_pair(cell: Cell, p: dict, ngates: int) -> None:
    """Shared skeleton of the inverter/NAND family: an nmos row under a pmos
    row with common poly columns and supply rails."""
    wn, wp, l = p["wn"], p["wp"], p["l"]
    sep = 6 * CUT
    aw = ngates * l + (ngates + 1) * SD
    _r(cell, ACTIVE, 0, 0, aw, wn)
    _r(cell, NIMP, -CUT, -CUT, aw + CUT, wn + CUT)
    _r(cell, PWELL, -2 * CUT, -2 * CUT, aw + 2 * CUT, wn + 2 * CUT)
    py0 = wn + sep
    _r(cell, ACTIVE, 0, py0, aw, py0 + wp)
    _r(cell, PIMP, -CUT, py0 - CUT, aw + CUT, py0 + wp + CUT)
    _r(cell, NWELL, -2 * CUT, py0 - 2 * CUT, aw + 2 * CUT, py0 + wp + 2 * CUT)
    for k in range(ngates):
        gx = SD + k * (l + SD)
        _r(cell, POLY, gx, -GATE_OVER, gx + l, py0 + wp + GATE_OVER)
    rail = 2 * CUT
    _r(cell, METAL[0], -rail, -3 * rail, aw + rail, -rail)          # ground
    _r(cell, METAL[0], -rail, py0 + wp + rail, aw + rail, py0 + wp + 3 * rail)
    for k in range(ngates + 1):
        cx = k * (l + SD) + SD // 2
        _cut_column(cell, CONTACT, cx, 10, wn - 10)
        _cut_column(cell, CONTACT, cx, py0 + 10, py0 + wp - 10)
        if k % 2 == 0:  # source columns tie to the rails
            _r(cell, METAL[0], cx - 30, -2 * rail, cx + 30, wn + 20)
            _r(cell, METAL[0], cx - 30, py0 - 20, cx + 30, py0 + wp + 2 * rail)
        else:           # drain columns join on a mid strap
            _r(cell, METAL[0], cx - 30, -20, cx + 30, py0 + wp + 20)


def _build_inverter(p: dict) -> Cell:
    cell = Cell("inverter")
    _stacked_pair(cell, p, 1)
    return cell


def _build_nand(n: int):
    def build(p: dict) -> Cell:
        cell = Cell(f"nand{n}")
        _stacked_pair(cell, p, n)
        # distinguishing series/parallel hint: poly input taps at the top
        for k in range(n):
            gx = SD + k * (p["l"] + SD)
            _r(cell, POLY, gx - CUT, p["wn"] + 6 * CUT + p["wp"] + GATE_OVER,
               gx + p["l"] + CUT, p["wn"] + 6 * CUT + p["wp"] + GATE_OVER + 2 * CUT)
        return cell
    return build


def _build_transmission_gate(p: dict) -> Cell:
    cell = Cell("transmission_gate")
    w, l = p["w"], p["l"]
    nw, _ = _fet(cell, 0, 0, 1, w, l, nmos=True)
    gap = 4 * CUT
    _fet(cell, nw + gap, 0, 1, w, l, nmos=False)
    # separate gate taps above and below
    for gx, ty in ((SD, w + GATE_OVER), (nw + gap + SD, -GATE_OVER - 2 * CUT)):
        _r(cell, POLY, gx - CUT, ty, gx + l + CUT, ty + 2 * CUT)
    # common source / common drain straps on metal1
    _r(cell, METAL[0], -30, -3 * CUT, nw + gap + SD // 2 + 30, -CUT)
    _r(cell, METAL[0], -30, w + CUT, nw + gap + SD // 2 + 30, w + 3 * CUT)
    return cell


def _build_current_mirror(p: dict) -> Cell:
    cell = Cell("current_mirror")
    w, l = p["w"], p["l"]
    step = l + 2 * SD + 2 * CUT
    for leg in range(p["legs"]):
        _fet(cell, leg * step, 0, 1, w, l, nmos=True)
    # shared gate bus under the actives
    _r(cell, POLY, SD - CUT, -GATE_OVER - 2 * CUT,
       (p["legs"] - 1) * step + SD + l + CUT, -GATE_OVER)
    # diode connection on the reference leg
    _r(cell, METAL[0], SD + l + SD // 2 - 30, -GATE_OVER - 2 * CUT, SD + l + SD // 2 + 30, 20)
    _r(cell, CONTACT, SD + l + SD // 2 - CUT // 2, -GATE_OVER - 2 * CUT + 10,
       SD + l + SD // 2 + CUT // 2, -GATE_OVER - 2 * CUT + 10 + CUT)
    return cell


def _build_sr_latch_like(p: dict) -> Cell:
    cell = Cell("sr_latch_like")
    w, l = p["w"], p["l"]
    aw, _ = _fet(cell, 0, 0, 2, w, l, nmos=True)
    _fet(cell, aw + 4 * CUT, 0, 2, w, l, nmos=True)
    # cross-coupled routing: one strap on metal1, the crossing one on metal2
    total = 2 * aw + 4 * CUT
    _r(cell, METAL[0], 0, w + 2 * CUT, total, w + 4 * CUT)
    _r(cell, METAL[1], 0, w + 6 * CUT, total, w + 8 * CUT)
    for cx in (SD + l + SD // 2, aw + 4 * CUT + SD + l + SD // 2):
        _r(cell, METAL[0], cx - 30, w + 2 * CUT, cx + 30, w + 8 * CUT)
        _r(cell, VIA[0], cx - CUT // 2, w + 6 * CUT + CUT // 2,
           cx + CUT // 2, w + 6 * CUT + 3 * CUT // 2)
    return cell


def _build_sense_amp_like(p: dict) -> Cell:
    cell = Cell("sense_amp_like")
    w, l = p["w"], p["l"]
    aw = l + 2 * SD
    gap = 6 * CUT
    # mirrored inverter halves
    half = {"wn": w, "wp": w + 2 * CUT, "l": l}
    left = Cell("tmp_l")
    _stacked_pair(left, half, 1)
    right = Cell("tmp_r")
    _stacked_pair(right, half, 1)
    shift = aw + gap
    for b in left.boundaries:
        cell.boundaries.append(b)
    for b in right.boundaries:
        cell.boundaries.append(Boundary(b.layer, [(2 * shift - x - 0, y)
                                                  for x, y in b.vertices]))
    # tail device centered below
    _fet(cell, (2 * shift - aw) // 2 - SD, -w - 8 * CUT, 1, w, l, nmos=True)
    # bitline columns on metal2 with via taps
    top = w + 6 * CUT + w + 2 * CUT
    for cx in (-2 * CUT, 2 * shift + 2 * CUT):
        _r(cell, METAL[1], cx - 30, -w - 8 * CUT, cx + 30, top)
    return cell


def _build_resistor_bank_unit(p: dict) -> Cell:
    cell = Cell("resistor_bank_unit")
    width, length, n = p["width"], p["seg_len"], p["count"]
    pitch = 3 * width
    for k in range(n):
        x = k * pitch
        _r(cell, POLY, x, 0, x + width, length)
        for ey in (CUT, length - 2 * CUT):
            _r(cell, CONTACT, x + width // 2 - CUT // 2, ey,
               x + width // 2 + CUT // 2, ey + CUT)
    # end straps on metal1 joining alternate bars
    total = (n - 1) * pitch + width
    _r(cell, METAL[0], -CUT, -2 * CUT, total + CUT, CUT + CUT)
    _r(cell, METAL[0], -CUT, length - 2 * CUT, total + CUT, length + CUT)
    return cell


def _build_diff_pair(p: dict) -> Cell:
    cell = Cell("diff_pair")
    w, l = p["w"], p["l"]
    aw, _ = _fet(cell, 0, 0, 1, w, l, nmos=True)
    gap = 2 * CUT
    _fet(cell, aw + gap, 0, 1, w, l, nmos=True)
    # shared tail strap dropping from between the halves
    mid = aw + gap // 2
    _r(cell, METAL[0], mid - 30, -5 * CUT, mid + 30, 20)
    _r(cell, METAL[0], SD // 2 - 30, -5 * CUT, aw + gap + SD // 2 + 30, -5 * CUT + 60)
    # drain taps rise symmetrically
    for cx in (aw - SD // 2, aw + gap + SD // 2 + l + SD):
        _r(cell, METAL[0], cx - 30, w - 20, cx + 30, w + 4 * CUT)
    return cell


def _build_decap_unit(p: dict) -> Cell:
    cell = Cell("decap_unit")
    w, h = p["w"], p["h"]
    _r(cell, ACTIVE, 0, 0, w, h)
    _r(cell, MGATE, CUT, CUT, w - CUT, h - CUT)  # plate capacitor gate
    _r(cell, NWELL, -2 * CUT, -2 * CUT, w + 2 * CUT, h + 2 * CUT)
    _r(cell, NIMP, -CUT, -CUT, w + CUT, h + CUT)
    # contact ring outside the plate
    for cx in range(CUT, w - CUT + 1, 4 * CUT):
        for cy in (-CUT // 2, h - CUT // 2 + CUT):
            _r(cell, CONTACT, cx, cy - CUT // 2, cx + CUT, cy + CUT // 2)
    _r(cell, METAL[0], -CUT, -2 * CUT, w + CUT, 0)
    _r(cell, METAL[0], -CUT, h, w + CUT, h + 2 * CUT)
    return cell


# ---------------------------------------------------------------------------
# Via stacks and boundary arrays

def _build_via_stack(bottom: int, top: int):
    """Lattice of via stacks connecting metal `bottom` .. metal `top` (1-based)."""

    def build(p: dict) -> Cell:
        cell = Cell(f"via_m{bottom}_m{top}")
        cut, enc, pitch = p["cut"], p["enc"], p["pitch"]
        for i in range(p["rows"]):
            for j in range(p["cols"]):
                cx, cy = j * pitch, i * pitch
                for lvl in range(bottom, top + 1):
                    _r(cell, METAL[lvl - 1], cx - cut // 2 - enc, cy - cut // 2 - enc,
                       cx + cut // 2 + enc, cy + cut // 2 + enc)
                for lvl in range(bottom, top):
                    _r(cell, VIA[lvl - 1], cx - cut // 2, cy - cut // 2,
                       cx + cut // 2, cy + cut // 2)
        return cell

    return build


def _build_boundary_array(p: dict) -> Cell:
    cell = Cell("boundary_array")
    w, h, gap = p["w"], p["h"], p["gap"]
    layer = METAL[p["level"]]
    for i in range(p["rows"]):
        for j in range(p["cols"]):
            x, y = j * (w + gap), i * (h + gap)
            _r(cell, layer, x, y, x + w, y + h)
    return cell


# ---------------------------------------------------------------------------
# The built-in family

def _fet_params(w_hi=1000):
    return [ParamSpec("fingers", 1, 6), ParamSpec("w", 200, w_hi, 20),
            ParamSpec("l", 20, 60, 10)]


def builtin_specs() -> list[GeneratorSpec]:
    """The generator family in canonical class order (class index = position)."""
    specs = [
        GeneratorSpec("mosfet", _fet_params() + [ParamSpec("flavor", 0, 1)],
                      _build_mosfet),
        GeneratorSpec("poly_resistor",
                      [ParamSpec("segments", 2, 6), ParamSpec("seg_len", 300, 1200, 20),
                       ParamSpec("width", 30, 80, 10)], _build_poly_resistor),
        GeneratorSpec("inverter",
                      [ParamSpec("wn", 200, 800, 20), ParamSpec("wp", 300, 1200, 20),
                       ParamSpec("l", 20, 60, 10)], _build_inverter),
        GeneratorSpec("nand2",
                      [ParamSpec("wn", 200, 800, 20), ParamSpec("wp", 300, 1200, 20),
                       ParamSpec("l", 20, 60, 10)], _build_nand(2)),
        GeneratorSpec("nand3",
                      [ParamSpec("wn", 200, 800, 20), ParamSpec("wp", 300, 1200, 20),
                       ParamSpec("l", 20, 60, 10)], _build_nand(3)),
        GeneratorSpec("transmission_gate",
                      [ParamSpec("w", 200, 600, 20), ParamSpec("l", 20, 60, 10)],
                      _build_transmission_gate),
        GeneratorSpec("current_mirror",
                      [ParamSpec("legs", 2, 4), ParamSpec("w", 200, 800, 20),
                       ParamSpec("l", 30, 80, 10)], _build_current_mirror),
        GeneratorSpec("sr_latch_like",
                      [ParamSpec("w", 200, 500, 20), ParamSpec("l", 20, 40, 10)],
                      _build_sr_latch_like),
        GeneratorSpec("sense_amp_like",
                      [ParamSpec("w", 300, 700, 20), ParamSpec("l", 20, 50, 10)],
                      _build_sense_amp_like),
        GeneratorSpec("resistor_bank_unit",
                      [ParamSpec("count", 2, 6), ParamSpec("seg_len", 400, 1000, 20),
                       ParamSpec("width", 40, 80, 10)], _build_resistor_bank_unit),
        GeneratorSpec("diff_pair",
                      [ParamSpec("w", 300, 900, 20), ParamSpec("l", 20, 60, 10)],
                      _build_diff_pair),
        GeneratorSpec("decap_unit",
                      [ParamSpec("w", 400, 1600, 40), ParamSpec("h", 400, 1600, 40)],
                      _build_decap_unit),
    ]
    via_params = [ParamSpec("rows", 1, 4), ParamSpec("cols", 1, 4),
                  ParamSpec("pitch", 160, 400, 20), ParamSpec("cut", 40, 60, 10),
                  ParamSpec("enc", 10, 60, 5)]
    for bottom, top in itertools.combinations(range(1, 9), 2):
        specs.append(GeneratorSpec(f"via_m{bottom}_m{top}", list(via_params),
                                   _build_via_stack(bottom, top),
                                   label=f"via stack m{bottom}-m{top}"))
    specs.append(GeneratorSpec(
        "boundary_array",
        [ParamSpec("rows", 1, 4), ParamSpec("cols", 1, 4),
         ParamSpec("w", 40, 400, 20), ParamSpec("h", 40, 400, 20),
         ParamSpec("gap", 40, 400, 20), ParamSpec("level", 0, 7)],
        _build_boundary_array))
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise RegistryError("duplicate generator ids in the built-in family")
    return specs


# ---------------------------------------------------------------------------
# Not-generatable material

def generate_negative(rng: np.random.Generator, frame: int = 2560) -> Cell:
    """Random rectangles on random mapped layers: unstructured NG noise."""
    layers = [NWELL, PWELL, NIMP, PIMP, ACTIVE, POLY, MGATE, CONTACT,
              *METAL, *VIA, PAD]
    cell = Cell("negative")
    for _ in range(int(rng.integers(1, 13))):
        w = int(rng.integers(10, 2001))
        h = int(rng.integers(10, 2001))
        x = int(rng.integers(0, max(1, frame - w)))
        y = int(rng.integers(0, max(1, frame - h)))
        layer = layers[int(rng.integers(0, len(layers)))]
        _r(cell, layer, x, y, x + w, y + h)
    return cell


_METAL_SET = set(METAL)


def _damage_copy(cell: Cell) -> tuple[Cell, list[int]]:
    out = Cell(cell.name + "_perturbed", [Boundary(b.layer, list(b.vertices))
                                          for b in cell.boundaries],
               [Path(p.layer, p.width, list(p.points), p.end_style)
                for p in cell.paths], list(cell.instances))
    metal_idx = [i for i, b in enumerate(out.boundaries) if b.layer in _METAL_SET]
    return out, metal_idx


def perturb_routing(cell: Cell, rng: np.random.Generator) -> Cell | None:
    """Break a generated cell's routing while keeping its overall footprint.

    Preferred move: swap the x-extents of two equal-sized metal shapes on
    different rows, which leaves every per-channel row/column occupancy
    histogram unchanged while disconnecting the wiring.  Falls back to
    displacing one metal shape off its alignment.  Returns None when the
    cell has no metal to damage.
    """
    out, metal_idx = _damage_copy(cell)
    if not metal_idx:
        return None

    def box(i):
        return out.boundaries[i].bbox()

    # look for a marginal-preserving swap partner pair
    pairs = []
    for a, b in itertools.combinations(metal_idx, 2):
        xa0, ya0, xa1, ya1 = box(a)
        xb0, yb0, xb1, yb1 = box(b)
        same_size = (xa1 - xa0, ya1 - ya0) == (xb1 - xb0, yb1 - yb0)
        if (same_size and out.boundaries[a].layer == out.boundaries[b].layer
                and xa0 != xb0 and ya0 != yb0):
            pairs.append((a, b))
    if pairs:
        a, b = pairs[int(rng.integers(0, len(pairs)))]
        xa0, ya0, _, _ = box(a)
        xb0, yb0, _, _ = box(b)
        _shift(out.boundaries[a], xb0 - xa0, 0)
        _shift(out.boundaries[b], xa0 - xb0, 0)
        return out

    return displace_routing(cell, rng)


def displace_routing(cell: Cell, rng: np.random.Generator) -> Cell | None:
    """Knock one or two metal shapes off their alignment.

    Each chosen shape either jumps clean off its grid position by multiples
    of its size or nudges just far enough to break an overlap or uncover a
    cut.  Unlike the swap move this changes the cell's occupancy profile,
    so the result is structured NG material that axis-histogram features
    can in principle detect.  Returns None when the cell has no metal.
    """
    out, metal_idx = _damage_copy(cell)
    if not metal_idx:
        return None
    moves = min(len(metal_idx), 1 + int(rng.integers(0, 2)))
    for i in rng.choice(len(metal_idx), size=moves, replace=False):
        x0, y0, x1, y1 = out.boundaries[metal_idx[i]].bbox()
        w, h = x1 - x0, y1 - y0
        sign = 1 if rng.integers(0, 2) else -1
        if rng.integers(0, 2):
            dx = int(rng.integers(1, 4)) * (w + CUT) * sign
            dy = int(rng.integers(0, 2)) * (h + CUT)
        else:
            dx = int(rng.integers(CUT // 2, max(CUT, w))) * sign
            dy = 0
        _shift(out.boundaries[metal_idx[i]], dx, dy)
    return out


def _shift(b: Boundary, dx: int, dy: int) -> None:
    b.vertices = [(x + dx, y + dy) for x, y in b.vertices]
