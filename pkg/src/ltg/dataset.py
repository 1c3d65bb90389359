"""Dataset construction and ingestion.

A dataset directory holds one raster stack file per sample plus a
manifest.json describing every sample: file, label, provenance (generated,
random-negative, or manual), sampling seed and parameters, train/validation
split, and the design hash of the source cell.  Builds are reproducible:
the same specs and seed produce byte-identical stacks and manifest.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .errors import DataError, FormatError, IoError, RegistryError
from .generators import (GeneratorSpec, displace_routing, generate_layout,
                         generate_negative, perturb_routing, sample_params)
from .gds import read_gdsii_file
from .layout import Cell, Library, collect_flat_geometry, design_hash
from .model import ClassRegistry
from .raster import (DEFAULT_CHANNEL_MAP, LayerChannelMap, RasterConfig,
                     load_stack, map_layers, pixelize, save_stack)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# Rasterization entry points

def rasterize_cell(lib: Library, name: str, cfg: RasterConfig,
                   cmap: LayerChannelMap = DEFAULT_CHANNEL_MAP) -> np.ndarray:
    """Native raster of one cell with its full hierarchy flattened."""
    boundaries, paths = collect_flat_geometry(lib, name)
    channels, unmapped = map_layers(boundaries, paths, cmap)
    if unmapped:
        log.warning("cell %s: %d unmapped layer keys ignored: %s",
                    name, len(unmapped), unmapped)
    return pixelize(channels, cfg, lib.dbu_per_nm)


def rasterize_standalone(cell: Cell, cfg: RasterConfig,
                         cmap: LayerChannelMap = DEFAULT_CHANNEL_MAP
                         ) -> np.ndarray:
    """Raster of a bare cell outside any library (1 dbu = 1 nm)."""
    lib = Library(cell.name, {cell.name: cell})
    return rasterize_cell(lib, cell.name, cfg, cmap)


def standalone_hash(cell: Cell) -> str:
    return design_hash(Library(cell.name, {cell.name: cell}), cell.name).hex()


# ---------------------------------------------------------------------------
# Manifest

@dataclass
class Sample:
    stack_file: str            # path relative to the manifest directory
    label: int
    source: str                # generated | random-negative | manual
    split: str                 # train | val
    design_hash: str
    seed: int | None = None
    params: dict | None = None
    instances: int = 1
    duplicate: bool = False


@dataclass
class DatasetManifest:
    registry: ClassRegistry
    pixel_pitch_nm: int
    target_size: int
    samples: list[Sample] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def class_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for s in self.samples:
            out[s.label] = out.get(s.label, 0) + 1
        return out

    def to_json_dict(self) -> dict:
        return {
            "version": self.version,
            "registry": self.registry.to_dict(),
            "pixel_pitch_nm": self.pixel_pitch_nm,
            "target_size": self.target_size,
            "samples": [asdict(s) for s in self.samples],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DatasetManifest":
        try:
            version = data["version"]
            if version != MANIFEST_VERSION:
                raise FormatError(f"unsupported manifest version {version}")
            manifest = cls(ClassRegistry.from_dict(data["registry"]),
                           int(data["pixel_pitch_nm"]),
                           int(data["target_size"]),
                           [Sample(**s) for s in data["samples"]],
                           version)
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from None
        for s in manifest.samples:
            if not 0 <= s.label < manifest.registry.class_count:
                raise FormatError(f"sample label {s.label} out of range")
        return manifest

    def save(self, out_dir) -> None:
        path = FsPath(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json_dict(), indent=2,
                                   sort_keys=True) + "\n")

    @classmethod
    def load(cls, dataset_dir) -> "DatasetManifest":
        path = FsPath(dataset_dir) / MANIFEST_NAME
        if not path.is_file():
            raise IoError(f"no {MANIFEST_NAME} under {dataset_dir}")
        return cls.from_json_dict(json.loads(path.read_text()))


def load_samples(manifest: DatasetManifest, dataset_dir,
                 split: str | None = None
                 ) -> tuple[list[np.ndarray], np.ndarray]:
    """Stack arrays and labels for one split (or all samples)."""
    base = FsPath(dataset_dir)
    natives, labels = [], []
    for s in manifest.samples:
        if split is not None and s.split != split:
            continue
        natives.append(load_stack(base / s.stack_file))
        labels.append(s.label)
    return natives, np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# Building

def _split_of(k: int, total: int, val_frac: float) -> str:
    return "val" if k < round(total * val_frac) else "train"


def build_dataset(specs: list[GeneratorSpec], per_class: int, negatives: int,
                  seed: int, out_dir, cfg: RasterConfig | None = None,
                  cmap: LayerChannelMap = DEFAULT_CHANNEL_MAP,
                  val_frac: float = 0.1) -> DatasetManifest:
    """Sample every generator, add random negatives, rasterize, write manifest.

    Each sample's rng is seeded by (seed, class index, sample index), so any
    single sample can be regenerated in isolation.  Negative cells whose
    design hash collides with any positive (or an earlier negative) are
    redrawn; the training set must not contain mislabeled duplicates.
    """
    if val_frac < 0 or val_frac >= 1:
        raise DataError(f"val_frac {val_frac} outside [0, 1)")
    cfg = cfg or RasterConfig()
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    registry = ClassRegistry.from_generators(specs)
    manifest = DatasetManifest(registry, cfg.pixel_pitch_nm, cfg.target_size)
    positive_hashes: set[str] = set()

    for ci, spec in enumerate(specs):
        for k in range(per_class):
            rng = np.random.default_rng((seed, ci, k))
            params = sample_params(spec, rng)
            cell = generate_layout(spec, params)
            h = standalone_hash(cell)
            positive_hashes.add(h)
            fname = f"{spec.id}_{k:05d}.ltg1"
            save_stack(out / fname, rasterize_standalone(cell, cfg, cmap))
            manifest.samples.append(Sample(
                fname, ci, "generated", _split_of(k, per_class, val_frac), h,
                seed=seed, params=params))

    ng = registry.ng_index
    seen_negative: set[str] = set()
    for k in range(negatives):
        for attempt in range(100):
            rng = np.random.default_rng((seed, ng, k, attempt))
            cell = generate_negative(rng)
            h = standalone_hash(cell)
            if h not in positive_hashes and h not in seen_negative:
                break
        else:
            raise DataError(f"could not draw a fresh negative after 100 tries "
                            f"(sample {k})")
        seen_negative.add(h)
        fname = f"negative_{k:05d}.ltg1"
        save_stack(out / fname, rasterize_standalone(cell, cfg, cmap))
        manifest.samples.append(Sample(
            fname, ng, "random-negative", _split_of(k, negatives, val_frac),
            h, seed=seed))

    manifest.save(out)
    return manifest


# ---------------------------------------------------------------------------
# Ingestion of labeled layouts

LABEL_SIDECAR = "labels.csv"


def resolve_label(registry: ClassRegistry, text: str) -> int:
    """Map a sidecar label (generator id or class label) to a class index."""
    for e in registry.entries:
        if text == e.generator_id or text == e.label:
            return e.index
    raise RegistryError(f"label {text!r} matches no class in the registry")


def ingest_labeled(src_dir, registry: ClassRegistry, out_dir,
                   cfg: RasterConfig | None = None,
                   cmap: LayerChannelMap = DEFAULT_CHANNEL_MAP,
                   split: str = "val") -> DatasetManifest:
    """Rasterize a directory of GDSII files with a labels.csv sidecar.

    The sidecar holds `filename,label` rows; labels name a generator id or
    a registry class label (the not-generatable class by its label).  Files
    repeating an already-seen design hash are kept but flagged duplicate.
    """
    cfg = cfg or RasterConfig()
    src = FsPath(src_dir)
    sidecar = src / LABEL_SIDECAR
    if not sidecar.is_file():
        raise IoError(f"missing label sidecar {sidecar}")
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(registry, cfg.pixel_pitch_nm, cfg.target_size)
    seen: set[str] = set()
    with open(sidecar, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 2:
                raise FormatError(f"{sidecar}: expected filename,label "
                                  f"rows, got {row!r}")
            fname, label_text = row[0].strip(), row[1].strip()
            label = resolve_label(registry, label_text)
            gds_path = src / fname
            if not gds_path.is_file():
                raise IoError(f"listed file {gds_path} does not exist")
            lib = read_gdsii_file(gds_path)
            tops = lib.top_candidates()
            if not tops:
                raise DataError(f"{fname}: no top cell (reference cycle?)")
            h = design_hash(lib, tops[0]).hex()
            stack_name = FsPath(fname).stem + ".ltg1"
            save_stack(out / stack_name, rasterize_cell(lib, tops[0], cfg, cmap))
            manifest.samples.append(Sample(
                stack_name, label, "manual", split, h, duplicate=h in seen))
            seen.add(h)
    manifest.save(out)
    return manifest


# ---------------------------------------------------------------------------
# Structured negatives for generalization checks

def perturbed_negatives(specs: list[GeneratorSpec], count: int, seed: int,
                        cfg: RasterConfig | None = None,
                        cmap: LayerChannelMap = DEFAULT_CHANNEL_MAP
                        ) -> list[np.ndarray]:
    """Routing-broken copies of generated layouts, rasterized.

    Kept candidates satisfy two properties checked on the native raster:
    every per-channel row sum and column sum matches the unbroken source
    exactly (axis-histogram features cannot tell them apart), yet at least
    one pixel differs (the full raster can).  Such layouts are structured,
    plausible, and not generatable as drawn.
    """
    cfg = cfg or RasterConfig()
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    attempts = 0
    while len(out) < count and attempts < 200 * count:
        attempts += 1
        spec = specs[int(rng.integers(0, len(specs)))]
        cell = generate_layout(spec, sample_params(spec, rng))
        broken = perturb_routing(cell, rng)
        if broken is None:
            continue
        src = rasterize_standalone(cell, cfg, cmap)
        pert = rasterize_standalone(broken, cfg, cmap)
        if src.shape != pert.shape or np.array_equal(src, pert):
            continue
        if not (np.array_equal(src.sum(axis=1), pert.sum(axis=1))
                and np.array_equal(src.sum(axis=2), pert.sum(axis=2))):
            continue
        out.append(pert)
    if len(out) < count:
        raise DataError(f"only {len(out)} of {count} perturbed negatives "
                        f"found after {attempts} attempts")
    return out


def displaced_negatives(specs: list[GeneratorSpec], count: int, seed: int,
                        cfg: RasterConfig | None = None,
                        cmap: LayerChannelMap = DEFAULT_CHANNEL_MAP
                        ) -> list[np.ndarray]:
    """Routing-displaced copies of generated layouts, rasterized.

    The complement of perturbed_negatives: kept candidates must change the
    footprint or at least one per-channel axis sum, so the two families
    never overlap.  Useful as structured training negatives that teach what
    broken routing looks like without touching the histogram-preserving
    holdout family.
    """
    cfg = cfg or RasterConfig()
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    attempts = 0
    while len(out) < count and attempts < 200 * count:
        attempts += 1
        spec = specs[int(rng.integers(0, len(specs)))]
        cell = generate_layout(spec, sample_params(spec, rng))
        broken = displace_routing(cell, rng)
        if broken is None:
            continue
        src = rasterize_standalone(cell, cfg, cmap)
        pert = rasterize_standalone(broken, cfg, cmap)
        if src.shape == pert.shape and (
                np.array_equal(src, pert)
                or (np.array_equal(src.sum(axis=1), pert.sum(axis=1))
                    and np.array_equal(src.sum(axis=2), pert.sum(axis=2)))):
            continue
        out.append(pert)
    if len(out) < count:
        raise DataError(f"only {len(out)} of {count} displaced negatives "
                        f"found after {attempts} attempts")
    return out
