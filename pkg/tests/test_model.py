"""Classifier assembly, decision rule, batching, training loop, checkpoints.

Training tests run a deliberately tiny configuration on synthetic rasters
whose classes are trivially separable, so convergence is fast and the
assertions stay about mechanics (determinism, early stopping, restoration),
not about learning capacity.
"""

import numpy as np
import pytest

from ltg import model as M
from ltg import nn
from ltg.errors import ConfigError, DimError, FormatError, RegistryError
from ltg.raster import RasterConfig, build_pyramid, resize_to_target

TINY = M.ModelConfig(input_channels=2, class_count=3, stem_width=4,
                     stage_widths=(4, 8), blocks_per_stage=1,
                     scales=(8, 16))


def tiny_registry():
    return M.ClassRegistry([
        M.ClassEntry(0, "gen_a", "a"),
        M.ClassEntry(1, "gen_b", "b"),
        M.ClassEntry(2, None, "ng"),
    ])


# ---------------------------------------------------------------------------
# Config validation

@pytest.mark.parametrize("bad", [
    dict(class_count=1),
    dict(stage_widths=()),
    dict(blocks_per_stage=0),
    dict(scales=()),
    dict(scales=(64, 64)),
    dict(scales=(48,)),          # not a power of two
    dict(scales=(2,)),           # below the minimum
    dict(scales=(128, 64)),      # not ascending
    dict(scales=(4,), stage_widths=(4, 4, 4, 4)),  # grid collapses to zero
])
def test_config_rejects(bad):
    cfg = M.ModelConfig(**{**dict(input_channels=2, class_count=3,
                                  stem_width=4, stage_widths=(4,),
                                  blocks_per_stage=1, scales=(8,)), **bad})
    with pytest.raises(ConfigError):
        cfg.validate()


def test_default_config_is_valid():
    M.ModelConfig().validate()


# ---------------------------------------------------------------------------
# Class registry

def test_registry_requires_dense_indices():
    with pytest.raises(RegistryError):
        M.ClassRegistry([M.ClassEntry(1, "g", "g"), M.ClassEntry(2, None, "ng")])


def test_registry_requires_exactly_one_ng_last():
    with pytest.raises(RegistryError):
        M.ClassRegistry([M.ClassEntry(0, "g", "g"), M.ClassEntry(1, "h", "h")])
    with pytest.raises(RegistryError):
        M.ClassRegistry([M.ClassEntry(0, None, "ng"), M.ClassEntry(1, "g", "g")])
    with pytest.raises(RegistryError):
        M.ClassRegistry([M.ClassEntry(0, None, "n1"), M.ClassEntry(1, None, "n2")])


def test_registry_lookup_and_round_trip():
    reg = tiny_registry()
    assert reg.class_count == 3
    assert reg.ng_index == 2
    assert reg.index_of("gen_b") == 1
    assert reg.label(2) == "ng"
    assert reg.generator_id(2) is None
    with pytest.raises(RegistryError):
        reg.index_of("nope")
    again = M.ClassRegistry.from_dict(reg.to_dict())
    assert again.entries == reg.entries


def test_registry_from_generators_appends_ng():
    class Spec:
        def __init__(self, id, label):
            self.id, self.label = id, label

    reg = M.ClassRegistry.from_generators([Spec("x", "X"), Spec("y", "Y")])
    assert reg.class_count == 3
    assert reg.generator_id(0) == "x"
    assert reg.generator_id(reg.ng_index) is None


# ---------------------------------------------------------------------------
# Decision rule

def test_top_k_orders_by_probability_then_index():
    ranked = M.top_k(np.array([0.2, 0.8, 0.8, 0.1]), 3)
    assert ranked == [(1, 0.8), (2, 0.8), (0, 0.2)]


def test_decide_confident_winner():
    p = M.decide(np.array([0.9, 0.2, 0.1]), tiny_registry())
    assert (p.decided, p.is_ng) == (0, False)
    assert p.probability == pytest.approx(0.9)
    assert p.top[0] == (0, pytest.approx(0.9))


def test_decide_below_threshold_falls_to_ng():
    reg = tiny_registry()
    p = M.decide(np.array([0.4, 0.2, 0.1]), reg)
    assert p.is_ng and p.decided == reg.ng_index
    assert p.probability == pytest.approx(0.1)  # reported prob is the NG one


def test_decide_ng_peak_wins():
    p = M.decide(np.array([0.3, 0.2, 0.9]), tiny_registry())
    assert p.is_ng


def test_decide_tie_with_ng_goes_to_ng():
    p = M.decide(np.array([0.7, 0.2, 0.7]), tiny_registry())
    assert p.is_ng


def test_decide_tie_between_classes_takes_lower_index():
    p = M.decide(np.array([0.7, 0.7, 0.1]), tiny_registry())
    assert (p.decided, p.is_ng) == (0, False)


def test_decide_threshold_is_inclusive():
    p = M.decide(np.array([0.5, 0.1, 0.1]), tiny_registry(),
                 M.DecisionPolicy(threshold=0.5))
    assert not p.is_ng


def test_decide_rejects_wrong_width():
    with pytest.raises(DimError):
        M.decide(np.array([0.5, 0.5]), tiny_registry())


def test_decide_top_list_length_follows_policy():
    p = M.decide(np.array([0.9, 0.2, 0.1]), tiny_registry(),
                 M.DecisionPolicy(top_k=2))
    assert len(p.top) == 2


# ---------------------------------------------------------------------------
# Architecture invariants

def test_branches_share_parameter_count():
    cfg = M.ModelConfig(input_channels=3, class_count=4, stem_width=4,
                        stage_widths=(4, 8), blocks_per_stage=1,
                        scales=(8, 16, 32))
    model = M.build_multiscale_model(cfg, seed=0)
    counts = {s: M.parameter_count(model, s) for s in cfg.scales}
    assert len(set(counts.values())) == 1
    assert M.parameter_count(model) > max(counts.values())


def test_forward_shape_and_branch_input_guard():
    model = M.build_multiscale_model(TINY, seed=0)
    pyr = {8: np.zeros((2, 2, 8, 8), np.float32),
           16: np.zeros((2, 2, 16, 16), np.float32)}
    assert model.forward(pyr).shape == (2, 3)
    with pytest.raises(DimError):
        model.branches[16].forward(np.zeros((2, 2, 8, 8), np.float32))


def test_base_model_runs_single_scale():
    model = M.build_base_model(TINY, seed=0)
    assert tuple(model.config.scales) == (16,)
    out = model.forward({16: np.zeros((1, 2, 16, 16), np.float32)})
    assert out.shape == (1, 3)


def test_deterministic_construction():
    a = M.build_multiscale_model(TINY, seed=7)
    b = M.build_multiscale_model(TINY, seed=7)
    for pa, pb in zip(a.params(), b.params()):
        assert pa.name == pb.name
        assert np.array_equal(pa.value, pb.value)


# ---------------------------------------------------------------------------
# Batching

def test_pyramid_batch_matches_per_sample_pyramid():
    rng = np.random.default_rng(0)
    batch = rng.random((3, 2, 16, 16)).astype(np.float32)
    pyr = M.pyramid_batch(batch, (8, 16))
    for i in range(3):
        single = build_pyramid(batch[i], (8, 16))
        for s in (8, 16):
            assert np.allclose(pyr[s][i], single[s], atol=1e-6)


def test_pyramid_batch_rejects_wrong_size():
    with pytest.raises(DimError):
        M.pyramid_batch(np.zeros((1, 2, 8, 8), np.float32), (8, 16))


def test_prepare_batch_resizes_then_stacks():
    natives = [np.ones((2, 5, 9), np.float32), np.ones((2, 20, 3), np.float32)]
    pyr = M.prepare_batch(natives, TINY)
    assert pyr[16].shape == (2, 2, 16, 16)
    assert pyr[8].shape == (2, 2, 8, 8)
    rcfg = RasterConfig(target_size=16, scales=(8, 16))
    assert np.allclose(pyr[16][0], resize_to_target(natives[0], rcfg))


def test_one_hot():
    out = M.one_hot(np.array([2, 0]), 3)
    assert out.tolist() == [[0, 0, 1], [1, 0, 0]]


# ---------------------------------------------------------------------------
# Training mechanics

def synthetic_set(n_per_class, rng):
    """Three trivially separable patterns on a 2-channel native raster."""
    natives, labels = [], []
    for k in range(3):
        for _ in range(n_per_class):
            nat = np.zeros((2, 12, 12), np.float32)
            if k == 0:
                nat[0, :6] = 1.0
            elif k == 1:
                nat[1, :, :6] = 1.0
            else:
                nat[:, 6:, 6:] = rng.random((6, 6)) > 0.5
            natives.append(nat)
            labels.append(k)
    return natives, np.array(labels)


def test_training_learns_and_is_deterministic():
    rng = np.random.default_rng(0)
    train = synthetic_set(6, rng)
    val = synthetic_set(2, rng)
    tcfg = M.TrainConfig(batch_size=4, lr=3e-3, max_epochs=12, patience=12,
                         seed=1)
    histories = []
    for _ in range(2):
        model = M.build_multiscale_model(TINY, seed=3)
        histories.append(M.train_model(model, tiny_registry(), train, val,
                                       tcfg))
    losses_a = [(h.train_loss, h.val_loss) for h in histories[0]]
    losses_b = [(h.train_loss, h.val_loss) for h in histories[1]]
    assert losses_a == losses_b
    assert histories[0][-1].val_loss < histories[0][0].val_loss


def test_early_stopping_restores_best_state():
    rng = np.random.default_rng(1)
    train = synthetic_set(4, rng)
    val = synthetic_set(2, rng)
    model = M.build_multiscale_model(TINY, seed=0)
    tcfg = M.TrainConfig(batch_size=4, lr=3e-3, max_epochs=40, patience=3,
                         seed=0)
    history = M.train_model(model, tiny_registry(), train, val, tcfg)
    best = min(h.val_loss for h in history)
    # stopped within patience of the best epoch, not at max_epochs
    best_epoch = min(range(len(history)),
                     key=lambda i: history[i].val_loss)
    assert len(history) <= best_epoch + 1 + tcfg.patience
    # restored parameters reproduce the best validation loss exactly
    reg = tiny_registry()
    loss, _ = M._forward_eval(model, *val, reg, M.DecisionPolicy())
    assert loss == pytest.approx(best, rel=1e-6)


def test_training_rejects_degenerate_set():
    with pytest.raises(ConfigError):
        M.train_model(M.build_multiscale_model(TINY), tiny_registry(),
                      ([np.zeros((2, 4, 4), np.float32)], np.array([0])),
                      ([np.zeros((2, 4, 4), np.float32)], np.array([0])))


def test_evaluate_model_reports_consistent_totals():
    rng = np.random.default_rng(2)
    data = synthetic_set(3, rng)
    model = M.build_multiscale_model(TINY, seed=0)
    report, preds = M.evaluate_model(model, tiny_registry(), data)
    assert report.counts.total == len(data[0]) == len(preds)
    assert sum(r["total"] for r in report.per_class) == len(data[0])
    assert set(report.topk) == {1, 2, 3}


def test_predict_design_returns_prediction():
    model = M.build_multiscale_model(TINY, seed=0)
    p = M.predict_design(model, np.zeros((2, 10, 10), np.float32),
                         tiny_registry())
    assert isinstance(p, M.Prediction)
    assert len(p.top) == 3


# ---------------------------------------------------------------------------
# Checkpoints

def test_save_load_round_trip(tmp_path):
    model = M.build_multiscale_model(TINY, seed=5)
    reg = tiny_registry()
    policy = M.DecisionPolicy(threshold=0.4, top_k=2)
    path = tmp_path / "m.ltgm"
    M.save_model(path, model, reg, policy)
    again, reg2, pol2 = M.load_model(path)
    assert reg2.entries == reg.entries
    assert (pol2.threshold, pol2.top_k) == (0.4, 2)
    pyr = {8: np.full((1, 2, 8, 8), 0.3, np.float32),
           16: np.full((1, 2, 16, 16), 0.3, np.float32)}
    assert np.allclose(model.forward(pyr), again.forward(pyr), atol=1e-6)


def test_load_rejects_registry_width_mismatch(tmp_path):
    model = M.build_multiscale_model(TINY, seed=0)
    reg = M.ClassRegistry([M.ClassEntry(0, "g", "g"),
                           M.ClassEntry(1, None, "ng")])
    path = tmp_path / "m.ltgm"
    M.save_model(path, model, reg)  # 2-class registry, 3-class model
    with pytest.raises(FormatError):
        M.load_model(path)


def test_load_state_rejects_missing_extra_and_misshaped():
    model = M.build_multiscale_model(TINY, seed=0)
    state = {k: v.copy() for k, v in model.state_arrays().items()}
    incomplete = dict(state)
    incomplete.pop(sorted(incomplete)[0])
    with pytest.raises(FormatError):
        model.load_state_arrays(incomplete)
    extra = dict(state)
    extra["bogus"] = np.zeros(1, np.float32)
    with pytest.raises(FormatError):
        model.load_state_arrays(extra)
    wrong = dict(state)
    k = sorted(wrong)[0]
    wrong[k] = np.zeros(np.asarray(wrong[k]).size + 1, np.float32)
    with pytest.raises(FormatError):
        model.load_state_arrays(wrong)


def test_checkpoint_magic_is_checked(tmp_path):
    path = tmp_path / "bad.ltgm"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        M.load_model(path)
