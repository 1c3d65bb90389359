"""Multi-scale residual CNN classifier over layer-channel rasters.

One sub-network per input scale, each with the same stage plan and therefore
the same parameter count: a 3x3 stem (strided on the larger scales), mean
pooling down to the common working resolution, residual stages that halve
the grid as they widen, and global average pooling.  Branch features are
concatenated into a single fully-connected head that emits one sigmoid
logit per class, the last class meaning "not generatable".

decide() turns per-class probabilities into a verdict: the top class wins
if it is generatable and confident, with ties broken toward NG first and
lower indices second.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics, nn
from .errors import ConfigError, DimError, FormatError, RegistryError
from .raster import resize_to_target, RasterConfig

MODEL_MAGIC = b"LTGM"


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 21
    class_count: int = 52
    stem_width: int = 16
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    scales: tuple[int, ...] = (64, 128, 256)

    def validate(self) -> None:
        if self.input_channels < 1 or self.class_count < 2:
            raise ConfigError("need at least one channel and two classes")
        if not self.stage_widths or self.blocks_per_stage < 1:
            raise ConfigError("stage plan must be non-empty")
        if len(set(self.scales)) != len(self.scales) or not self.scales:
            raise ConfigError("scales must be distinct")
        for s in self.scales:
            if s < 4 or s & (s - 1):
                raise ConfigError(f"scale {s} is not a power of two >= 4")
        if tuple(sorted(self.scales)) != tuple(self.scales):
            raise ConfigError("scales must be sorted ascending")
        if min(self.scales) >> (len(self.stage_widths) - 1) < 1:
            raise ConfigError("too many stages for the smallest scale")


# ---------------------------------------------------------------------------
# Class registry

@dataclass(frozen=True)
class ClassEntry:
    index: int
    generator_id: str | None  # None marks the not-generatable class
    label: str


@dataclass
class ClassRegistry:
    """Dense class-index table: one entry per class, NG last."""

    entries: list[ClassEntry]

    def __post_init__(self):
        if [e.index for e in self.entries] != list(range(len(self.entries))):
            raise RegistryError("class indices must be dense from 0")
        ng = [e.index for e in self.entries if e.generator_id is None]
        if len(ng) != 1:
            raise RegistryError("exactly one not-generatable class required")
        if ng[0] != len(self.entries) - 1:
            raise RegistryError("the not-generatable class must come last")

    @property
    def class_count(self) -> int:
        return len(self.entries)

    @property
    def ng_index(self) -> int:
        return len(self.entries) - 1

    def label(self, index: int) -> str:
        return self.entries[index].label

    def generator_id(self, index: int) -> str | None:
        return self.entries[index].generator_id

    def index_of(self, generator_id: str) -> int:
        for e in self.entries:
            if e.generator_id == generator_id:
                return e.index
        raise RegistryError(f"unknown generator id {generator_id!r}")

    @classmethod
    def from_generators(cls, specs, ng_label: str = "not_generatable"
                        ) -> "ClassRegistry":
        entries = [ClassEntry(i, s.id, s.label) for i, s in enumerate(specs)]
        entries.append(ClassEntry(len(entries), None, ng_label))
        return cls(entries)

    def to_dict(self) -> dict:
        return {"entries": [{"index": e.index, "generator_id": e.generator_id,
                             "label": e.label} for e in self.entries]}

    @classmethod
    def from_dict(cls, data: dict) -> "ClassRegistry":
        return cls([ClassEntry(e["index"], e["generator_id"], e["label"])
                    for e in data["entries"]])


# ---------------------------------------------------------------------------
# Decisions

@dataclass(frozen=True)
class DecisionPolicy:
    threshold: float = 0.5
    top_k: int = 3


@dataclass
class Prediction:
    decided: int            # class index; equals ng_index for NG verdicts
    probability: float      # probability of the decided class
    is_ng: bool
    top: list[tuple[int, float]]


def top_k(probs: np.ndarray, k: int) -> list[tuple[int, float]]:
    """The k highest-probability classes, ties broken toward lower indices."""
    order = np.lexsort((np.arange(len(probs)), -probs))
    return [(int(i), float(probs[i])) for i in order[:k]]


def decide(probs: np.ndarray, registry: ClassRegistry,
           policy: DecisionPolicy = DecisionPolicy()) -> Prediction:
    """Verdict rule: a tie with NG goes to NG; otherwise the lowest argmax
    wins and must clear the confidence threshold to count as generatable."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (registry.class_count,):
        raise DimError(f"expected {registry.class_count} probabilities, "
                       f"got shape {probs.shape}")
    ng = registry.ng_index
    peak = probs.max()
    star = ng if probs[ng] == peak else int(np.argmax(probs))
    ranked = top_k(probs, policy.top_k)
    if star == ng or probs[star] < policy.threshold:
        return Prediction(ng, float(probs[ng]), True, ranked)
    return Prediction(star, float(probs[star]), False, ranked)


# ---------------------------------------------------------------------------
# Model

class Branch(nn.Layer):
    """One scale's sub-network: strided stem, pool to the working grid,
    residual stages, global average pooling."""

    def __init__(self, name: str, cfg: ModelConfig, scale: int,
                 rng: np.random.Generator, dtype):
        reduction = scale // min(cfg.scales)
        stride = 2 if reduction > 1 else 1
        layers: list[nn.Layer] = [
            nn.Conv(f"{name}.stem", cfg.input_channels, cfg.stem_width, 3,
                    stride, rng, dtype, bias=False),
            nn.BatchNorm(f"{name}.stembn", cfg.stem_width, dtype=dtype),
            nn.ReLU(),
            nn.AvgPool(reduction // stride),
        ]
        cin = cfg.stem_width
        for si, width in enumerate(cfg.stage_widths):
            for bi in range(cfg.blocks_per_stage):
                s = 2 if (si > 0 and bi == 0) else 1
                layers.append(nn.ResidualBlock(f"{name}.s{si}b{bi}", cin,
                                               width, s, rng, dtype))
                cin = width
        layers.append(nn.GlobalAvgPool())
        self.net = nn.Sequential(layers)
        self.scale = scale

    def params(self):
        return self.net.params()

    def buffers(self):
        return self.net.buffers()

    def forward(self, x, train=False):
        if x.shape[2] != self.scale or x.shape[3] != self.scale:
            raise DimError(f"branch expects {self.scale}x{self.scale} input, "
                           f"got {x.shape[2]}x{x.shape[3]}")
        return self.net.forward(x, train)

    def backward(self, dy):
        return self.net.backward(dy)


class MultiScaleModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.config = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.branches = {s: Branch(f"s{s}", cfg, s, rng, dtype)
                         for s in cfg.scales}
        feat = cfg.stage_widths[-1] * len(cfg.scales)
        self.fc = nn.Linear("fc", feat, cfg.class_count, rng, dtype)

    def params(self) -> list[nn.Parameter]:
        out = []
        for s in self.config.scales:
            out += self.branches[s].params()
        return out + self.fc.params()

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.branches.values():
            out.update(b.buffers())
        return out

    def forward(self, pyramid: dict[int, np.ndarray], train: bool = False
                ) -> np.ndarray:
        feats = [self.branches[s].forward(pyramid[s], train)
                 for s in self.config.scales]
        return self.fc.forward(np.concatenate(feats, axis=1), train)

    def backward(self, dlogits: np.ndarray) -> None:
        dcat = self.fc.backward(dlogits)
        width = self.config.stage_widths[-1]
        for i, s in enumerate(self.config.scales):
            self.branches[s].backward(dcat[:, i * width:(i + 1) * width])

    def predict_probs(self, pyramid: dict[int, np.ndarray]) -> np.ndarray:
        return nn.sigmoid(self.forward(pyramid, train=False))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.params()}
        dup = len(out) != len(self.params())
        if dup:
            raise FormatError("duplicate parameter names in model")
        out.update(self.buffers())
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        targets = {p.name: p for p in self.params()}
        buffers = self.buffers()
        for name, arr in arrays.items():
            if name in targets:
                slot = targets.pop(name).value
            elif name in buffers:
                slot = buffers.pop(name)
            else:
                raise FormatError(f"checkpoint array {name!r} has no slot")
            if slot.shape != arr.shape:
                raise FormatError(f"{name}: shape {arr.shape} != {slot.shape}")
            slot[...] = arr.astype(slot.dtype)
        if targets or buffers:
            missing = sorted([*targets, *buffers])[:3]
            raise FormatError(f"checkpoint is missing arrays: {missing}")


def build_multiscale_model(cfg: ModelConfig, seed: int = 0,
                           dtype=np.float32) -> MultiScaleModel:
    return MultiScaleModel(cfg, seed, dtype)


def build_base_model(cfg: ModelConfig, seed: int = 0,
                     dtype=np.float32) -> MultiScaleModel:
    """Single-branch variant running only at the largest configured scale."""
    return MultiScaleModel(replace(cfg, scales=(max(cfg.scales),)), seed, dtype)


def parameter_count(model: MultiScaleModel, scale: int | None = None) -> int:
    if scale is None:
        return sum(p.value.size for p in model.params())
    return sum(p.value.size for p in model.branches[scale].params())


# ---------------------------------------------------------------------------
# Batching

def pyramid_batch(resized: np.ndarray, scales: tuple[int, ...]
                  ) -> dict[int, np.ndarray]:
    """Mean-pool a (N, C, S, S) batch down to every scale."""
    n, c, h, w = resized.shape
    top = max(scales)
    if h != top or w != top:
        raise DimError(f"batch is {h}x{w}, expected {top}x{top}")
    out = {}
    for s in scales:
        f = top // s
        if f == 1:
            out[s] = resized
        else:
            out[s] = resized.reshape(n, c, s, f, s, f).mean(axis=(3, 5))
    return out


def prepare_batch(natives: list[np.ndarray], cfg: ModelConfig
                  ) -> dict[int, np.ndarray]:
    rcfg = RasterConfig(target_size=max(cfg.scales), scales=tuple(cfg.scales))
    resized = np.stack([resize_to_target(nat, rcfg) for nat in natives])
    return pyramid_batch(resized, cfg.scales)


def one_hot(labels: np.ndarray, class_count: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), class_count), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    max_epochs: int = 60
    patience: int = 10
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    seconds: float


def _forward_eval(model: MultiScaleModel, natives, labels, registry, policy,
                  batch_size=32):
    """Eval-mode sweep; returns (mean bce loss, predictions)."""
    losses = []
    preds = []
    for lo in range(0, len(natives), batch_size):
        chunk = natives[lo:lo + batch_size]
        pyr = prepare_batch(chunk, model.config)
        logits = model.forward(pyr, train=False)
        targets = one_hot(labels[lo:lo + len(chunk)],
                          model.config.class_count, logits.dtype)
        loss, _ = nn.bce_loss(logits, targets)
        losses.append(loss * len(chunk))
        probs = nn.sigmoid(logits)
        preds += [decide(p, registry, policy) for p in probs]
    return sum(losses) / max(len(natives), 1), preds


def train_model(model: MultiScaleModel, registry: ClassRegistry,
                train_set: tuple[list[np.ndarray], np.ndarray],
                val_set: tuple[list[np.ndarray], np.ndarray],
                tcfg: TrainConfig = TrainConfig(),
                policy: DecisionPolicy = DecisionPolicy(),
                progress=None) -> list[EpochStats]:
    """Adam + batched BCE with early stopping on validation loss.

    Stops once validation loss has not improved for `patience` epochs and
    restores the best parameters seen.  Deterministic for a fixed seed.
    """
    natives, labels = train_set
    if len(natives) < 2:
        raise ConfigError("training needs at least two samples")
    opt = nn.Adam(model.params(), lr=tcfg.lr)
    rng = np.random.default_rng(tcfg.seed)
    history: list[EpochStats] = []
    best_loss = np.inf
    best_state: dict[str, np.ndarray] | None = None
    since_best = 0

    for epoch in range(tcfg.max_epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(natives))
        total = 0.0
        seen = 0
        for lo in range(0, len(order), tcfg.batch_size):
            idx = order[lo:lo + tcfg.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need at least two samples
            pyr = prepare_batch([natives[i] for i in idx], model.config)
            logits = model.forward(pyr, train=True)
            targets = one_hot(labels[idx], model.config.class_count,
                              logits.dtype)
            loss, dlogits = nn.bce_loss(logits, targets)
            opt.zero_grad()
            model.backward(dlogits)
            opt.step()
            total += loss * len(idx)
            seen += len(idx)
        val_loss, val_preds = _forward_eval(model, *val_set, registry, policy)
        val_labels = val_set[1]
        correct = sum(1 for p, y in zip(val_preds, val_labels)
                      if (p.is_ng and y == registry.ng_index)
                      or (not p.is_ng and p.decided == y))
        stats = EpochStats(epoch, total / max(seen, 1), val_loss,
                           correct / max(len(val_labels), 1),
                           time.monotonic() - t0)
        history.append(stats)
        if progress is not None:
            progress(stats)
        if val_loss < best_loss - 1e-6:
            best_loss = val_loss
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= tcfg.patience:
                break
    if best_state is not None:
        model.load_state_arrays(best_state)
    return history


def evaluate_model(model: MultiScaleModel, registry: ClassRegistry,
                   data: tuple[list[np.ndarray], np.ndarray],
                   policy: DecisionPolicy = DecisionPolicy()
                   ) -> tuple[metrics.MetricsReport, list[Prediction]]:
    natives, labels = data
    t0 = time.monotonic()
    _, preds = _forward_eval(model, natives, labels, registry, policy)
    counts = metrics.tally(preds, labels, registry.ng_index)
    topk = {k: metrics.topk_accuracy(preds, labels, k)
            for k in range(1, policy.top_k + 1)}
    per_class = []
    for e in registry.entries:
        total = int(np.sum(labels == e.index))
        if not total:
            continue
        correct = sum(1 for p, y in zip(preds, labels)
                      if y == e.index and p.decided == y)
        per_class.append({"index": e.index, "label": e.label,
                          "total": total, "correct": correct})
    report = metrics.MetricsReport(counts, topk, per_class,
                                   (time.monotonic() - t0) * 1e3)
    return report, preds


def predict_design(model: MultiScaleModel, native: np.ndarray,
                   registry: ClassRegistry,
                   policy: DecisionPolicy = DecisionPolicy()) -> Prediction:
    probs = model.predict_probs(prepare_batch([native], model.config))[0]
    return decide(probs, registry, policy)


# ---------------------------------------------------------------------------
# Checkpoints

def save_model(path, model: MultiScaleModel, registry: ClassRegistry,
               policy: DecisionPolicy = DecisionPolicy()) -> None:
    config = {
        "model": asdict(model.config),
        "registry": registry.to_dict(),
        "policy": {"threshold": policy.threshold, "top_k": policy.top_k},
    }
    nn.save_arrays(path, MODEL_MAGIC, config, model.state_arrays())


def load_model(path) -> tuple[MultiScaleModel, ClassRegistry, DecisionPolicy]:
    config, arrays = nn.load_arrays(path, MODEL_MAGIC)
    try:
        mc = config["model"]
        cfg = ModelConfig(mc["input_channels"], mc["class_count"],
                          mc["stem_width"], tuple(mc["stage_widths"]),
                          mc["blocks_per_stage"], tuple(mc["scales"]))
        registry = ClassRegistry.from_dict(config["registry"])
        pol = config.get("policy", {})
        policy = DecisionPolicy(pol.get("threshold", 0.5), pol.get("top_k", 3))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed model config: {exc}") from None
    if registry.class_count != cfg.class_count:
        raise FormatError(f"{path}: registry has {registry.class_count} "
                          f"classes but model expects {cfg.class_count}")
    model = MultiScaleModel(cfg)
    model.load_state_arrays(arrays)
    return model, registry, policy
