"""histoseg command line: gen / train / select / infer / classify / metrics /
serve.

Exit codes: 0 success, 1 validation error (bad flags, config, values),
2 runtime failure.  Heavy imports happen inside subcommands so --threads
can cap the BLAS pools before numpy loads.
"""

import argparse
import json
import os
import sys
from pathlib import Path


class CLIValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIValidationError(f"{message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# flat key = value config files


def _dataclass_defaults(cls):
    import dataclasses
    return {f.name: f.default for f in dataclasses.fields(cls)}


def _known_keys():
    from .model import ModelConfig
    from .sampler import AugmentConfig
    from .synthetic import SynthConfig
    from .trainer import TrainConfig

    keys = {}
    for cls in (ModelConfig, TrainConfig, SynthConfig):
        keys.update(_dataclass_defaults(cls))
    keys.update({
        "mag_divisor": 1,
        "stride": 0,          # 0 = patch_size (no overlap in the train grid)
        "min_overlap": 0,     # 0 = patch_size // 2
        "n_val": 0,           # 0 = one fifth of the slides
        "augment": True,
        "augment_probability": _dataclass_defaults(AugmentConfig)["probability"],
        "beta": 1.5,
        "pred_t": 0.5,
        "area_t": 0.0,
        "top_epochs": 5,
    })
    return keys


def _coerce(raw, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise CLIValidationError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        elem = default[0]
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != len(default):
            raise CLIValidationError(
                f"expected {len(default)} comma-separated values, got {raw!r}")
        return tuple(type(elem)(p) for p in parts)
    return raw


def read_config(path):
    """Parse a flat key = value file; unknown keys are rejected."""
    known = _known_keys()
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CLIValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in known:
            raise CLIValidationError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(raw.strip(), known[key])
        except (TypeError, ValueError) as e:
            raise CLIValidationError(f"{path}:{lineno}: {e}")
    return out


def load_settings(args, overrides=None):
    """File settings (if --config given) with flag overrides on top."""
    settings = dict(_known_keys())
    if getattr(args, "config", None):
        settings.update(read_config(args.config))
    for key, value in (overrides or {}).items():
        if value is not None:
            settings[key] = value
    return settings


def _model_config(settings):
    from .model import ModelConfig
    fields = _dataclass_defaults(ModelConfig)
    return ModelConfig(**{k: settings[k] for k in fields}).validate()


def _train_config(settings):
    from .trainer import TrainConfig
    fields = _dataclass_defaults(TrainConfig)
    return TrainConfig(**{k: settings[k] for k in fields}).validate()


def _synth_config(settings):
    from .synthetic import SynthConfig
    fields = _dataclass_defaults(SynthConfig)
    return SynthConfig(**{k: settings[k] for k in fields}).validate()


def _slide_dirs(root):
    root = Path(root)
    dirs = sorted(p.parent for p in root.glob("*/meta.json"))
    if not dirs:
        raise CLIValidationError(f"no slide bundles under {root}")
    return dirs


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    settings = load_settings(args, {"seed": args.seed,
                                    "tumor_prevalence": args.prevalence})
    cfg = _synth_config(settings)
    from .synthetic import generate_dataset
    paths = generate_dataset(cfg, args.out, args.count)
    print(f"wrote {len(paths)} slide bundles to {args.out}")
    return 0


def cmd_train(args):
    settings = load_settings(args, {"seed": args.seed, "epochs": args.epochs})
    from .model import build_model
    from .sampler import (AugmentConfig, PatchDataset, build_resample_plan,
                          extract_patch_grid, write_plan_csv)
    from .slide import load_slide_bundle
    from .trainer import select_top_epochs, train

    model_cfg = _model_config(settings)
    train_cfg = _train_config(settings)
    mag = settings["mag_divisor"]
    stride = settings["stride"] or model_cfg.patch_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train_dirs = _slide_dirs(args.data)
    if args.val_data:
        val_dirs = _slide_dirs(args.val_data)
    else:
        n_val = settings["n_val"] or max(1, len(train_dirs) // 5)
        if n_val >= len(train_dirs):
            raise CLIValidationError("validation split leaves no training slides")
        train_dirs, val_dirs = train_dirs[:-n_val], train_dirs[-n_val:]

    train_bundles = [load_slide_bundle(d) for d in train_dirs]
    val_bundles = [load_slide_bundle(d) for d in val_dirs]
    dataset = PatchDataset(train_bundles + val_bundles, mag)

    train_specs = []
    for bundle in train_bundles:
        train_specs.extend(extract_patch_grid(bundle, model_cfg.patch_size, stride, mag))
    val_specs = []
    for bundle in val_bundles:
        val_specs.extend(extract_patch_grid(bundle, model_cfg.patch_size, stride, mag))
    if not train_specs or not val_specs:
        raise CLIValidationError("patch grids are empty; check patch_size/mag_divisor")

    plan = build_resample_plan(train_specs, seed=train_cfg.seed)
    write_plan_csv(plan, out / "plan.csv")
    augment_cfg = None
    if settings["augment"]:
        augment_cfg = AugmentConfig(probability=settings["augment_probability"])

    model = build_model(model_cfg, seed=train_cfg.seed)
    print(f"training {model_cfg.encoder}+{model_cfg.head} on "
          f"{len(train_specs)} patches (plan total {plan.total}), "
          f"{len(val_specs)} val patches")
    reports = train(model, plan, dataset, val_specs, train_cfg,
                    out_dir=out / "checkpoints", augment_cfg=augment_cfg)
    for r in reports:
        print(f"epoch {r.epoch:3d}  loss {r.train_loss:.5f}  "
              f"val_iou {r.val_iou:.4f}  ({r.seconds:.1f}s)")
    top = select_top_epochs(reports, n=settings["top_epochs"])
    (out / "reports.json").write_text(json.dumps(
        [r.__dict__ for r in reports], indent=1))
    (out / "top_epochs.json").write_text(json.dumps(
        [{"epoch": r.epoch, "val_iou": r.val_iou, "checkpoint": r.checkpoint}
         for r in top], indent=1))
    print(f"best epoch {top[0].epoch} (val IoU {top[0].val_iou:.4f}): "
          f"{top[0].checkpoint}")
    return 0


def _truth_sections(data_root):
    from .slide import load_slide_bundle
    pairs = []
    for d in _slide_dirs(data_root):
        bundle = load_slide_bundle(d)
        for section in bundle.sections:
            pairs.append((bundle, section))
    return pairs


def cmd_select(args):
    settings = load_settings(args, {"beta": args.beta})
    from .evaluation import (DEFAULT_AREA_GRID, DEFAULT_PRED_GRID, grid_search,
                             write_score_table)
    from .model import load_model

    model = load_model(args.model)
    sections = _truth_sections(args.val)
    missing = [s.section_id for _, s in sections if s.truth_label is None]
    if missing:
        raise CLIValidationError(f"sections without truth labels: {missing[:5]}")
    pred_grid = ([float(v) for v in args.pred_grid.split(",")]
                 if args.pred_grid else DEFAULT_PRED_GRID)
    area_grid = ([float(v) for v in args.area_grid.split(",")]
                 if args.area_grid else DEFAULT_AREA_GRID)
    best, rows = grid_search(model, sections, pred_grid, area_grid,
                             beta=settings["beta"],
                             mag_divisor=settings["mag_divisor"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    best_row = max(rows, key=lambda r: r["f_beta"])
    out.write_text(json.dumps({
        "pred_t": best.pred_t, "area_t": best.area_t,
        "beta": settings["beta"], "f_beta": best_row["f_beta"],
    }, indent=1))
    write_score_table(rows, out.with_suffix(".scores.csv"))
    print(f"selected pred_t={best.pred_t} area_t={best.area_t} "
          f"(F_beta={best_row['f_beta']:.4f}) -> {out}")
    return 0


def cmd_infer(args):
    settings = load_settings(args)
    from .inference import predict_heatmap, save_heatmap
    from .model import load_model
    from .slide import load_slide_bundle

    if bool(args.slide) == bool(args.data):
        raise CLIValidationError("exactly one of --slide or --data is required")
    model = load_model(args.model)
    slide_dirs = [Path(args.slide)] if args.slide else _slide_dirs(args.data)
    mag = settings["mag_divisor"]
    overlap = settings["min_overlap"] or model.cfg.patch_size // 2
    out_root = Path(args.out)
    n = 0
    for d in slide_dirs:
        bundle = load_slide_bundle(d)
        out_dir = out_root / bundle.slide_id
        for section in bundle.sections:
            hm = predict_heatmap(model, bundle, section, min_overlap=overlap,
                                 mag_divisor=mag, truncate_at=args.truncate)
            save_heatmap(hm, out_dir, section.section_id,
                         model_id=str(args.model), truncate_at=args.truncate,
                         bbox=section.bbox)
            n += 1
    print(f"wrote {n} heatmaps to {out_root}")
    return 0


def cmd_classify(args):
    settings = load_settings(args, {"pred_t": args.pred_t, "area_t": args.area_t})
    from .inference import ThresholdPair, binarize_and_label, classify_section, load_heatmap

    pair = ThresholdPair(settings["pred_t"], settings["area_t"]).validate()
    root = Path(args.heatmaps)
    sidecars = sorted(root.glob("*/heatmap_*.json")) + sorted(root.glob("heatmap_*.json"))
    if not sidecars:
        raise CLIValidationError(f"no heatmaps under {root}")
    rows = []
    for sidecar in sidecars:
        section_id = sidecar.stem.removeprefix("heatmap_")
        hm, meta = load_heatmap(sidecar.parent, section_id)
        labeling = binarize_and_label(hm, pair.pred_t, with_runs=False)
        label, _ = classify_section(labeling, pair.area_t)
        slide_id = sidecar.parent.name if sidecar.parent != root else ""
        rows.append((slide_id, section_id, label))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write("slide_id,section_id,predicted\n")
        for slide_id, section_id, label in rows:
            f.write(f"{slide_id},{section_id},{label}\n")
    if args.write_sections and args.data:
        _write_predictions(args.data, rows)
    print(f"classified {len(rows)} sections -> {out}")
    return 0


def _write_predictions(data_root, rows):
    """Update predicted_label in each bundle's sections.json."""
    by_slide = {}
    for slide_id, section_id, label in rows:
        by_slide.setdefault(slide_id, {})[section_id] = label
    for d in _slide_dirs(data_root):
        labels = by_slide.get(d.name)
        path = d / "sections.json"
        if not labels or not path.exists():
            continue
        sections = json.loads(path.read_text())
        for entry in sections:
            if entry["section_id"] in labels:
                entry["predicted_label"] = labels[entry["section_id"]]
        path.write_text(json.dumps(sections, indent=1))


def cmd_metrics(args):
    settings = load_settings(args, {"beta": args.beta})
    from .evaluation import confusion_from_labels, f_beta, metrics

    predictions = {}
    lines = Path(args.labels).read_text().strip().splitlines()
    for line in lines[1:]:
        slide_id, section_id, label = line.split(",")
        predictions[(slide_id, section_id)] = label
    pairs = []
    for bundle, section in _truth_sections(args.data):
        pred = predictions.get((bundle.slide_id, section.section_id))
        if pred is not None and section.truth_label is not None:
            pairs.append((section.truth_label, pred))
    if not pairs:
        raise CLIValidationError("no overlapping sections between labels and truth")
    c = confusion_from_labels(pairs)
    m = metrics(c)
    m["f_beta"] = f_beta(m["precision"], m["recall"], settings["beta"])
    m["tp"], m["fp"], m["tn"], m["fn"] = c.tp, c.fp, c.tn, c.fn
    print(json.dumps(m, indent=1))
    return 0


def cmd_serve(args):
    from .review import serve
    serve(args.data, port=args.port, host=args.host,
          live_model_path=args.live_model, frontend_dir=args.frontend)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    from . import CHECKPOINT_MAGIC, __version__

    parser = _Parser(prog="histoseg",
                     description="WSI tumor segmentation and section classification")
    parser.add_argument("--version", action="version",
                        version=f"histoseg {__version__} "
                                f"(checkpoint format {CHECKPOINT_MAGIC})")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic slide bundles")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--prevalence", type=float, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on slide bundles")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="grid-search prediction/area thresholds")
    p.add_argument("--model", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--pred-grid", default=None)
    p.add_argument("--area-grid", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("infer", help="write section heatmaps")
    p.add_argument("--model", required=True)
    p.add_argument("--slide", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--truncate", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("classify", help="classify sections from heatmaps")
    p.add_argument("--heatmaps", required=True)
    p.add_argument("--pred-t", type=float, default=None)
    p.add_argument("--area-t", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--write-sections", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("metrics", help="section metrics against truth labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("serve", help="run the review service")
    p.add_argument("--data", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--live-model", default=None)
    p.add_argument("--frontend", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CLIValidationError as e:
        print(f"histoseg: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args) or 0
    except CLIValidationError as e:
        print(f"histoseg: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"histoseg: validation error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # runtime failures
        print(f"histoseg: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
