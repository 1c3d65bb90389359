"""Generator family tests.

Shape censuses are counted by hand from the drawing rules; the round-trip
test pushes every generator's output through the GDSII codec to prove the
family stays inside the supported geometry subset.
"""

import numpy as np
import pytest

from ltg import generators as G
from ltg.dataset import rasterize_standalone, standalone_hash
from ltg.errors import ParamError
from ltg.gds import parse_gdsii, write_gdsii
from ltg.layout import Cell, Library, design_hash
from ltg.raster import DEFAULT_CHANNEL_MAP, RasterConfig, map_layers

RCFG = RasterConfig()


def lo_params(spec):
    return {p.name: p.lo for p in spec.params}


def hi_params(spec):
    return {p.name: p.hi for p in spec.params}


# ---------------------------------------------------------------------------
# Family census

def test_family_has_41_unique_ids():
    specs = G.builtin_specs()
    ids = [s.id for s in specs]
    assert len(ids) == 41
    assert len(set(ids)) == 41
    vias = [i for i in ids if i.startswith("via_m")]
    assert len(vias) == 28  # every unordered metal pair out of 8 levels
    assert "via_m1_m2" in vias and "via_m3_m7" in vias


def test_labels_default_to_ids():
    spec = G.builtin_specs()[0]
    assert spec.label == spec.id


# ---------------------------------------------------------------------------
# Parameter handling

def test_validated_rejects_missing_extra_and_range():
    spec = next(s for s in G.builtin_specs() if s.id == "mosfet")
    good = lo_params(spec)
    assert spec.validated(good) == good
    with pytest.raises(ParamError):
        spec.validated({**good, "w": 10**9})
    with pytest.raises(ParamError):
        spec.validated({**good, "bogus": 1})
    missing = dict(good)
    missing.pop("fingers")
    with pytest.raises(ParamError):
        spec.validated(missing)
    with pytest.raises(ParamError):
        spec.validated({**good, "w": 200.5})


def test_sample_params_deterministic_and_on_grid():
    spec = next(s for s in G.builtin_specs() if s.id == "inverter")
    a = G.sample_params(spec, np.random.default_rng(9))
    b = G.sample_params(spec, np.random.default_rng(9))
    assert a == b
    for p in spec.params:
        assert p.lo <= a[p.name] <= p.hi
        assert (a[p.name] - p.lo) % p.step == 0


def test_degenerate_range_always_returns_lo():
    p = G.ParamSpec("x", 3, 3)
    rng = np.random.default_rng(0)
    assert all(p.sample(rng) == 3 for _ in range(20))


def test_sampling_is_roughly_uniform():
    p = G.ParamSpec("x", 1, 4)
    rng = np.random.default_rng(123)
    draws = [p.sample(rng) for _ in range(10000)]
    for v in (1, 2, 3, 4):
        assert 0.23 <= draws.count(v) / len(draws) <= 0.27


# ---------------------------------------------------------------------------
# Shape censuses

def count_on(cell, layer):
    return sum(1 for b in cell.boundaries if b.layer == layer)


def test_mosfet_draws_one_gate_stripe_per_finger():
    spec = next(s for s in G.builtin_specs() if s.id == "mosfet")
    cell = G.generate_layout(spec, {"fingers": 4, "w": 500, "l": 30,
                                    "flavor": 1})
    assert count_on(cell, G.POLY) == 4
    assert count_on(cell, G.ACTIVE) == 1


def test_boundary_array_counts_rows_times_cols():
    spec = next(s for s in G.builtin_specs() if s.id == "boundary_array")
    cell = G.generate_layout(spec, {"rows": 2, "cols": 2, "w": 100, "h": 100,
                                    "gap": 100, "level": 0})
    assert count_on(cell, G.METAL[0]) == 4
    assert len(cell.boundaries) == 4


def test_via_stack_census():
    spec = next(s for s in G.builtin_specs() if s.id == "via_m1_m3")
    cell = G.generate_layout(spec, {"rows": 3, "cols": 1, "pitch": 200,
                                    "cut": 40, "enc": 20})
    # per site: one enclosure on each of m1..m3, one cut on via1 and via2
    for lvl in (0, 1, 2):
        assert count_on(cell, G.METAL[lvl]) == 3
    for lvl in (0, 1):
        assert count_on(cell, G.VIA[lvl]) == 3
    assert count_on(cell, G.METAL[3]) == 0
    assert count_on(cell, G.VIA[2]) == 0


# ---------------------------------------------------------------------------
# Every generator: validity, determinism, raster, codec round trip

@pytest.mark.parametrize("spec", G.builtin_specs(), ids=lambda s: s.id)
def test_generator_output_is_well_formed(spec):
    rng = np.random.default_rng(hash(spec.id) % 2**32)
    for params in (lo_params(spec), hi_params(spec),
                   G.sample_params(spec, rng)):
        cell = G.generate_layout(spec, params)
        assert cell.boundaries or cell.paths
        for b in cell.boundaries:
            b.validate()
        for p in cell.paths:
            p.validate()
        # deterministic rebuild
        assert standalone_hash(cell) == \
            standalone_hash(G.generate_layout(spec, params))
    # random-sample output survives rasterization and the stream codec
    _, unmapped = map_layers(cell.boundaries, cell.paths, DEFAULT_CHANNEL_MAP)
    assert unmapped == []
    native = rasterize_standalone(cell, RCFG)
    assert native.any()
    assert set(np.unique(native)) <= {0.0, 1.0}
    lib = Library("t", {cell.name: cell})
    again = parse_gdsii(write_gdsii(lib))
    assert design_hash(again, cell.name) == design_hash(lib, cell.name)


# ---------------------------------------------------------------------------
# Negatives

def test_negative_is_deterministic_and_bounded():
    a = G.generate_negative(np.random.default_rng(7))
    b = G.generate_negative(np.random.default_rng(7))
    assert standalone_hash(a) == standalone_hash(b)
    assert 1 <= len(a.boundaries) <= 12
    native = rasterize_standalone(a, RCFG)
    assert native.shape[1] <= 256 and native.shape[2] <= 256


def test_negatives_are_rarely_duplicated():
    hashes = {standalone_hash(G.generate_negative(np.random.default_rng(k)))
              for k in range(200)}
    assert len(hashes) >= 195


# ---------------------------------------------------------------------------
# Routing perturbation

def test_perturb_returns_none_without_metal():
    cell = Cell("bare")
    G._r(cell, G.POLY, 0, 0, 100, 100)
    assert G.perturb_routing(cell, np.random.default_rng(0)) is None


def test_perturb_swap_preserves_axis_histograms():
    # exactly one equal-size metal pair at different rows and columns, so
    # the swap move is forced
    cell = Cell("two_wires")
    G._r(cell, G.METAL[0], 0, 0, 100, 20)
    G._r(cell, G.METAL[0], 200, 200, 300, 220)
    broken = G.perturb_routing(cell, np.random.default_rng(1))
    src = rasterize_standalone(cell, RCFG)
    pert = rasterize_standalone(broken, RCFG)
    assert src.shape == pert.shape
    assert not np.array_equal(src, pert)
    assert np.array_equal(src.sum(axis=1), pert.sum(axis=1))
    assert np.array_equal(src.sum(axis=2), pert.sum(axis=2))


def test_perturb_changes_design_hash_but_not_bbox():
    spec = next(s for s in G.builtin_specs() if s.id == "inverter")
    cell = G.generate_layout(spec, lo_params(spec))
    broken = G.perturb_routing(cell, np.random.default_rng(3))
    assert broken is not None
    assert standalone_hash(broken) != standalone_hash(cell)
    assert len(broken.boundaries) == len(cell.boundaries)


def test_displace_returns_none_without_metal():
    cell = Cell("bare")
    G._r(cell, G.POLY, 0, 0, 100, 100)
    assert G.displace_routing(cell, np.random.default_rng(0)) is None


def test_displace_moves_only_metal_shapes():
    spec = next(s for s in G.builtin_specs() if s.id == "inverter")
    cell = G.generate_layout(spec, lo_params(spec))
    moved = G.displace_routing(cell, np.random.default_rng(4))
    assert moved is not None
    assert len(moved.boundaries) == len(cell.boundaries)
    changed = [i for i, (a, b) in
               enumerate(zip(cell.boundaries, moved.boundaries))
               if a.vertices != b.vertices]
    assert 1 <= len(changed) <= 2
    assert all(moved.boundaries[i].layer in G._METAL_SET for i in changed)
