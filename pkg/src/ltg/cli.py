"""Command-line entry points.

Every flag falls back to an LTG_<NAME> environment variable before its
built-in default.  Exit status is 0 on success and 2 on usage or data
errors; all randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

from . import dataset as ds
from . import metrics
from . import svm as svm_mod
from .errors import LtgError
from .examiner import (auto_examine, emit_generator_skeleton,
                       model_classifier, report_json, report_text,
                       start_session)
from .gds import read_gdsii_file
from .generators import builtin_specs
from .layout import bounding_box, design_hash, hierarchy_order
from .model import (DecisionPolicy, ModelConfig, TrainConfig,
                    build_multiscale_model, evaluate_model, load_model,
                    save_model, train_model)
from .raster import RasterConfig

SIZE_BUCKETS = (64, 128, 256)


def _env(name: str, default, cast=str):
    raw = os.environ.get(f"LTG_{name}")
    if raw is None:
        return default
    return cast(raw)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _scales_for(target_size: int) -> tuple[int, ...]:
    return tuple(s for s in (target_size // 4, target_size // 2, target_size)
                 if s >= 4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltg",
        description="layout-to-generator conversion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="sub-cell size distribution of a layout")
    p.add_argument("gdsii")
    p.add_argument("--top", default=_env("TOP", None))
    p.add_argument("--pitch", type=int, default=_env("PITCH", 10, int))

    p = sub.add_parser("dataset", help="synthesize a labeled training set")
    p.add_argument("--specs", required=True,
                   help="text file of generator ids, one per line")
    p.add_argument("--per-class", type=int,
                   default=_env("PER_CLASS", 200, int))
    p.add_argument("--negatives", type=int,
                   default=_env("NEGATIVES", 200, int))
    p.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    p.add_argument("--out", required=True)
    p.add_argument("--pitch", type=int, default=_env("PITCH", 10, int))
    p.add_argument("--target-size", type=int,
                   default=_env("TARGET_SIZE", 256, int))
    p.add_argument("--val-frac", type=float,
                   default=_env("VAL_FRAC", 0.1, float))

    p = sub.add_parser("train", help="train the multi-scale classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-frac", type=float,
                   default=_env("VAL_FRAC", 0.1, float))
    p.add_argument("--batch", type=int, default=_env("BATCH", 8, int))
    p.add_argument("--patience", type=int, default=_env("PATIENCE", 10, int))
    p.add_argument("--epochs", type=int, default=_env("EPOCHS", 60, int))
    p.add_argument("--lr", type=float, default=_env("LR", 1e-3, float))
    p.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    p.add_argument("--out", required=True)
    p.add_argument("--stem-width", type=int,
                   default=_env("STEM_WIDTH", 16, int))
    p.add_argument("--stage-widths", type=_int_tuple,
                   default=_env("STAGE_WIDTHS", (16, 32, 64), _int_tuple))
    p.add_argument("--blocks", type=int, default=_env("BLOCKS", 2, int))
    p.add_argument("--threshold", type=float,
                   default=_env("THRESHOLD", 0.5, float))

    p = sub.add_parser("eval", help="score a trained classifier")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--topk", type=int, default=_env("TOPK", 3, int))
    p.add_argument("--per-instance", action="store_true")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")

    p = sub.add_parser("svm-train", help="train the histogram baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--lam", type=float, default=_env("LAM", 1e-4, float))
    p.add_argument("--epochs", type=int, default=_env("EPOCHS", 20, int))
    p.add_argument("--lr", type=float, default=_env("LR", 1e-3, float))
    p.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    p.add_argument("--out", required=True)

    p = sub.add_parser("svm-eval", help="score the histogram baseline")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--topk", type=int, default=_env("TOPK", 3, int))
    p.add_argument("--per-instance", action="store_true")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")

    p = sub.add_parser("examine", help="classify every sub-cell of a layout")
    p.add_argument("gdsii")
    p.add_argument("--top", default=_env("TOP", None))
    p.add_argument("--model", required=True)
    p.add_argument("--auto", action="store_true",
                   help="approve generatable verdicts, mark NG manual")
    p.add_argument("--report", default=None, help="write JSON report here")
    p.add_argument("--skeleton", default=None,
                   help="write the generator skeleton here (implies --auto)")
    p.add_argument("--pitch", type=int, default=_env("PITCH", 10, int))

    p = sub.add_parser("serve", help="run the approval-loop HTTP service")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default=_env("HOST", "127.0.0.1"))
    p.add_argument("--port", type=int, default=_env("PORT", 8787, int))
    p.add_argument("--pitch", type=int, default=_env("PITCH", 10, int))
    p.add_argument("--target-size", type=int,
                   default=_env("TARGET_SIZE", 256, int))

    return parser


# ---------------------------------------------------------------------------
# Subcommands

def _cmd_stats(args) -> int:
    lib = read_gdsii_file(args.gdsii)
    if args.top is not None:
        names = {v.instance.ref_name for v in hierarchy_order(lib, args.top)}
    else:
        names = set(lib.cells)
    seen: dict[bytes, str] = {}
    for name in sorted(names):
        seen.setdefault(design_hash(lib, name), name)
    sizes = []
    for name in seen.values():
        box = bounding_box(lib, name)
        if box is None:
            continue
        nm = max(box[2] - box[0], box[3] - box[1]) * lib.nm_per_dbu
        sizes.append(math.ceil(nm / args.pitch))
    print(f"distinct designs: {len(seen)}  with geometry: {len(sizes)}  "
          f"pitch: {args.pitch} nm/px")
    total = max(len(sizes), 1)
    lower = 0
    for edge in SIZE_BUCKETS:
        n = sum(1 for s in sizes if lower < s <= edge)
        print(f"  {lower + 1:>4}-{edge:>4} px: {n:>6}  ({100 * n / total:.1f}%)")
        lower = edge
    n = sum(1 for s in sizes if s > SIZE_BUCKETS[-1])
    print(f"  >{SIZE_BUCKETS[-1]:>7} px: {n:>6}  ({100 * n / total:.1f}%)")
    return 0


def _load_spec_ids(path: str) -> list[str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise LtgError(f"cannot read specs file: {exc}") from None
    ids = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.append(line)
    if not ids:
        raise LtgError(f"{path}: no generator ids listed")
    return ids


def _cmd_dataset(args) -> int:
    wanted = _load_spec_ids(args.specs)
    by_id = {s.id: s for s in builtin_specs()}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise LtgError(f"unknown generator ids: {', '.join(missing)}")
    cfg = RasterConfig(args.pitch, args.target_size,
                       _scales_for(args.target_size))
    manifest = ds.build_dataset([by_id[i] for i in wanted], args.per_class,
                                args.negatives, args.seed, args.out,
                                cfg=cfg, val_frac=args.val_frac)
    counts = manifest.class_counts()
    print(f"wrote {len(manifest.samples)} samples to {args.out}")
    for entry in manifest.registry.entries:
        print(f"  {entry.label}: {counts.get(entry.index, 0)}")
    return 0


def _load_split(manifest, data_dir, split):
    if split == "all":
        return ds.load_samples(manifest, data_dir)
    return ds.load_samples(manifest, data_dir, split=split)


def _dataset_raster_cfg(manifest) -> RasterConfig:
    ts = manifest.target_size
    return RasterConfig(manifest.pixel_pitch_nm, ts, _scales_for(ts))


def _cmd_train(args) -> int:
    manifest = ds.DatasetManifest.load(args.dataset)
    registry = manifest.registry
    train_set = ds.load_samples(manifest, args.dataset, split="train")
    val_set = ds.load_samples(manifest, args.dataset, split="val")
    cfg = _dataset_raster_cfg(manifest)
    mc = ModelConfig(input_channels=21, class_count=registry.class_count,
                     stem_width=args.stem_width,
                     stage_widths=args.stage_widths,
                     blocks_per_stage=args.blocks, scales=cfg.scales)
    model = build_multiscale_model(mc, seed=args.seed)
    tcfg = TrainConfig(args.batch, args.lr, args.epochs, args.patience,
                       args.seed)
    policy = DecisionPolicy(threshold=args.threshold)
    history = train_model(model, registry, train_set, val_set, tcfg, policy,
                          progress=lambda st: print(
                              f"epoch {st.epoch:>3}: train {st.train_loss:.4f}"
                              f"  val {st.val_loss:.4f}"))
    save_model(args.out, model, registry, policy)
    best = min(h.val_loss for h in history)
    print(f"trained {len(history)} epochs (best val loss {best:.4f}); "
          f"saved {args.out}")
    return 0


def _per_instance_text(preds, labels, samples, ng_index: int) -> str:
    per = [metrics.tally([p], [y], ng_index) for p, y in zip(preds, labels)]
    total = metrics.weighted_counts(per, [s.instances for s in samples])
    s = metrics.summarize(total)

    def pct(v):
        return "undefined" if v is None else f"{100 * v:.2f}%"

    return (f"per-instance ({total.total} instances): "
            f"accuracy {pct(s['accuracy'])}   "
            f"NG identification {pct(s['ng_identification_rate'])}\n")


def _samples_of_split(manifest, split):
    if split == "all":
        return manifest.samples
    return [s for s in manifest.samples if s.split == split]


def _cmd_eval(args) -> int:
    manifest = ds.DatasetManifest.load(args.dataset)
    model, registry, policy = load_model(args.model)
    policy = DecisionPolicy(policy.threshold, args.topk)
    natives, labels = _load_split(manifest, args.dataset, args.split)
    if not natives:
        raise LtgError(f"no samples in split {args.split!r}")
    rep, preds = evaluate_model(model, registry, (natives, labels), policy)
    print(rep.to_text())
    if args.per_instance:
        samples = _samples_of_split(manifest, args.split)
        print(_per_instance_text(preds, labels, samples, registry.ng_index),
              end="")
    return 0


def _cmd_svm_train(args) -> int:
    manifest = ds.DatasetManifest.load(args.dataset)
    natives, labels = ds.load_samples(manifest, args.dataset, split="train")
    cfg = _dataset_raster_cfg(manifest)
    feats = svm_mod.features_for(natives, cfg)
    model = svm_mod.train_svm(feats, labels, manifest.registry,
                              svm_mod.SvmConfig(args.lam, args.epochs,
                                                args.lr, args.seed))
    svm_mod.save_svm(args.out, model)
    print(f"trained baseline on {len(labels)} samples; saved {args.out}")
    return 0


def _cmd_svm_eval(args) -> int:
    manifest = ds.DatasetManifest.load(args.dataset)
    model = svm_mod.load_svm(args.model)
    natives, labels = _load_split(manifest, args.dataset, args.split)
    if not natives:
        raise LtgError(f"no samples in split {args.split!r}")
    cfg = _dataset_raster_cfg(manifest)
    feats = svm_mod.features_for(natives, cfg)
    rep, preds = svm_mod.evaluate_svm(model, feats, labels, args.topk)
    print(rep.to_text())
    if args.per_instance:
        samples = _samples_of_split(manifest, args.split)
        print(_per_instance_text(preds, labels, samples,
                                 model.registry.ng_index), end="")
    return 0


def _cmd_examine(args) -> int:
    lib = read_gdsii_file(args.gdsii)
    model, registry, policy = load_model(args.model)
    top = args.top
    if top is None:
        candidates = lib.top_candidates()
        if not candidates:
            raise LtgError("library has no top cell; pass --top")
        top = candidates[0]
    ts = max(model.config.scales)
    cfg = RasterConfig(args.pitch, ts, model.config.scales)
    session = start_session(lib, top, model_classifier(model), registry,
                            policy=policy, cfg=cfg)
    if args.auto or args.skeleton:
        auto_examine(session)
    else:
        while session.examine_next() is not None:
            pass
    print(report_text(session), end="")
    if args.report:
        Path(args.report).write_text(report_json(session))
        print(f"report written to {args.report}")
    if args.skeleton:
        Path(args.skeleton).write_text(emit_generator_skeleton(session))
        print(f"skeleton written to {args.skeleton}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    cfg = RasterConfig(args.pitch, args.target_size,
                       _scales_for(args.target_size))
    load_model(args.model)          # fail fast before binding the port
    app = create_app(default_model_path=args.model, cfg=cfg)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


_COMMANDS = {
    "stats": _cmd_stats,
    "dataset": _cmd_dataset,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "svm-train": _cmd_svm_train,
    "svm-eval": _cmd_svm_eval,
    "examine": _cmd_examine,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (LtgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
