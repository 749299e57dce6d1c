"""Command-line entry point: ``fairvit {synth,train,eval,explain,report}``.

Configuration is a flat ``section.key=value`` text file (sections ``synth``,
``model``, ``train``, ``path``); command-line flags override file values.
Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import DataError, concat_datasets, SyntheticSpec, export_dataset, generate, load_manifest, split
from .explain import explain_rollout, export_heatmap, grad_cam
from .imaging import save_image
from .layers import ConfigError
from .metrics import MetricError, MetricsReport, bias_reduction, compute_report
from .model import CheckpointError, ModelConfig, build_model, config_to_text, load_checkpoint, parse_field, text_to_dict
from .trainer import TrainConfig, TrainingAborted, adversary_accuracy, evaluate, train

logger = logging.getLogger("fairvit")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

SECTIONS = {"synth": SyntheticSpec, "model": ModelConfig, "train": TrainConfig}
# flag aliases that read better than the field names
ALIASES = {("train", "lam"): ["--lambda"]}
# fields resolved from elsewhere, so not exposed as flags
HIDDEN = {("model", "grl_lambda")}


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config resolution


def _add_section_flags(parser: argparse.ArgumentParser, section: str) -> None:
    group = parser.add_argument_group(f"{section} settings")
    for f in fields(SECTIONS[section]):
        if (section, f.name) in HIDDEN:
            continue
        names = [f"--{f.name.replace('_', '-')}"] + ALIASES.get((section, f.name), [])
        group.add_argument(*names, dest=f"{section}.{f.name}", default=None, metavar="V")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set train.lr=0.001")
    parser.add_argument("-v", "--verbose", action="store_true")


def resolve_config(args, sections: tuple[str, ...], base: dict[str, str] | None = None) -> dict[str, str]:
    """Merge (base, config file, --set, explicit flags) into flat ``section.key`` strings."""
    values: dict[str, str] = dict(base or {})
    if getattr(args, "config", None):
        try:
            values.update(text_to_dict(Path(args.config).read_text()))
        except OSError as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for key, value in vars(args).items():
        if "." in key and value is not None:
            values[key] = str(value)
    allowed = set(sections) | {"path", "state"}
    for key in values:
        section = key.split(".", 1)[0]
        if "." not in key or section not in allowed:
            raise ValidationError(f"unknown config key {key!r}")
    return {k: v for k, v in values.items() if k.split(".", 1)[0] in set(sections) | {"path"}}


def build_section(values: dict[str, str], section: str):
    cls = SECTIONS[section]
    prefix = section + "."
    kwargs = {}
    for key, raw in values.items():
        if key.startswith(prefix):
            name = key[len(prefix):]
            try:
                kwargs[name] = parse_field(cls, name, raw)
            except ConfigError as exc:
                raise ValidationError(f"{key}: {exc}") from None
    obj = cls(**kwargs)
    try:
        obj.validate()
    except (ConfigError, DataError) as exc:
        raise ValidationError(f"{section}: {exc}") from None
    return obj


def _flatten(section: str, obj) -> dict:
    return {f"{section}.{k}": v for k, v in asdict(obj).items()}


def _prepare_dir(path: Path, force: bool, what: str) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ValidationError(f"{what} {path} exists and is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _load_split(data_dir: Path, split_name: str, image_size: int):
    manifest = data_dir / "manifest.csv" if data_dir.is_dir() else data_dir
    parts = load_manifest(manifest, image_size=image_size)
    if split_name == "all":
        return concat_datasets(list(parts.values())), parts
    if split_name not in parts:
        raise ValidationError(f"{manifest} has no {split_name!r} split")
    return parts[split_name], parts


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    values = resolve_config(args, ("synth",))
    spec = build_section(values, "synth")
    out = Path(args.out)
    _prepare_dir(out, args.force, "output directory")
    ds = generate(spec)
    parts = split(ds, seed=spec.seed)
    export_dataset(parts, out)
    (out / "synth_config.txt").write_text(config_to_text(_flatten("synth", spec)))
    print(f"wrote {len(ds)} samples to {out}")
    for part in parts:
        counts = np.bincount(part.attrs, minlength=2)
        print(f"  {part.split:5s} n={len(part):5d}  group0={counts[0]}  group1={counts[1]}")
    for g in range(2):
        s = ds.scores[ds.attrs == g]
        print(f"  group {g}: score mean {s.mean():.3f}  sd {s.std():.3f}  min {s.min():.2f}  max {s.max():.2f}")
    return EXIT_OK


def cmd_train(args) -> int:
    base = {}
    if args.resume:
        ck_model, ck_values, _ = load_checkpoint(args.resume)
        base = {k: v for k, v in ck_values.items() if k.startswith(("train.", "path."))}
        base.update(_model_values(ck_model.cfg))
    values = resolve_config(args, ("model", "train"), base)
    if args.data:
        values["path.data"] = str(args.data)
    if "path.data" not in values:
        raise ValidationError("no dataset given (--data or path.data in the config)")
    tcfg = build_section(values, "train")
    values["model.grl_lambda"] = repr(tcfg.lam)
    mcfg = build_section(values, "model")
    if args.resume and mcfg != ck_model.cfg:
        diffs = sorted(k for k, v in _model_values(mcfg).items() if _model_values(ck_model.cfg).get(k) != v)
        raise ValidationError(f"model settings conflict with checkpoint {args.resume}: {', '.join(diffs)}")

    out = Path(args.out)
    if args.resume:
        out.mkdir(parents=True, exist_ok=True)
    else:
        _prepare_dir(out, args.force, "run directory")
    resolved = _flatten("model", mcfg) | _flatten("train", tcfg) | {"path.data": values["path.data"]}
    (out / "config.txt").write_text(config_to_text(resolved))

    data_dir = Path(values["path.data"])
    train_ds, parts = _load_split(data_dir, "train", mcfg.image_size)
    if "val" not in parts:
        raise ValidationError(f"{data_dir} has no 'val' split")
    model = build_model(mcfg, seed=tcfg.seed)
    result = train(model, train_ds, parts["val"], tcfg, run_dir=out, resume=args.resume)
    last = result.logs[-1] if result.logs else None
    if last is not None:
        print(f"trained {mcfg.variant} for {tcfg.epochs} epochs; last epoch: {last.to_json()}")
    print(f"run directory: {out}")
    return EXIT_OK


def _model_values(cfg: ModelConfig) -> dict[str, str]:
    return text_to_dict(config_to_text(_flatten("model", cfg)))


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    if args.config:
        expected = text_to_dict(Path(args.config).read_text())
        ck = _model_values(model.cfg)
        diffs = {k: {"config": v, "checkpoint": ck.get(k)} for k, v in expected.items()
                 if k.startswith("model.") and ck.get(k) != v}
        if diffs:
            print(json.dumps({"error": "config/checkpoint mismatch", "keys": diffs}, indent=2, sort_keys=True),
                  file=sys.stderr)
            return EXIT_VALIDATION
    ds, _ = _load_split(Path(args.data), args.split, model.cfg.image_size)
    preds = evaluate(model, ds, with_features=True)
    report = compute_report(
        preds.pred, preds.y, preds.attrs, preds.features,
        inline_adversary_accuracy=adversary_accuracy(model, preds.features, preds.attrs),
        classes=model.cfg.n_attr_classes,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds.to_csv(out / "predictions.csv")
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def cmd_explain(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    ds, _ = _load_split(Path(args.data), args.split, model.cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = []
    for sample_id in [s for s in args.ids.split(",") if s]:
        try:
            sample = ds[ds.index_of(sample_id)]
        except KeyError:
            errors.append(f"{sample_id}: not in the {args.split} split")
            continue
        save_image(sample.image, out / f"{sample_id}.original.png")
        if model.cfg.has_cnn:
            export_heatmap(grad_cam(model, sample.image, sample_id), sample.image, out)
        else:
            logger.warning("%s: variant %s has no CNN branch; grad_cam skipped", sample_id, model.cfg.variant)
        if model.cfg.has_vit:
            export_heatmap(explain_rollout(model, sample.image, sample_id), sample.image, out)
        else:
            logger.warning("%s: variant %s has no ViT branch; attention_rollout skipped",
                           sample_id, model.cfg.variant)
    if errors:
        print("errors:\n  " + "\n  ".join(errors), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _read_metrics(path) -> MetricsReport:
    try:
        return MetricsReport.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise MetricError(f"{path}: not valid JSON ({exc})") from None
    except MetricError as exc:
        raise MetricError(f"{path}: {exc}") from None


def build_report(baseline: MetricsReport, fair: MetricsReport) -> dict:
    """Two-row comparison (baseline vs debiased) with the gap reduction."""
    try:
        reduction = bias_reduction(baseline.performance_gap, fair.performance_gap)
    except MetricError:
        reduction = None
    row = lambda r: {
        "group_mae": {str(k): v for k, v in sorted(r.group_mae.items())},
        "performance_gap": r.performance_gap,
        "probe_accuracy": r.probe_accuracy,
        "inline_adversary_accuracy": r.inline_adversary_accuracy,
        "pc": r.pc, "mae": r.mae, "rmse": r.rmse,
    }
    return {
        "baseline": row(baseline),
        "fair": row(fair),
        "bias_reduction_percent": reduction,
        "bias_reduction_display": "n/a" if reduction is None else f"{reduction:.1f}%",
    }


def format_report(rep: dict) -> str:
    groups = sorted(rep["baseline"]["group_mae"])
    head = ["Method"] + [f"MAE[{g}]" for g in groups] + ["Gap", "Adversary acc", "PC"]
    lines = ["  ".join(f"{h:>14s}" for h in head)]
    for label, key in (("baseline", "baseline"), ("debiased", "fair")):
        r = rep[key]
        acc = "n/a" if r["probe_accuracy"] is None else f"{100 * r['probe_accuracy']:.1f}%"
        cells = [label] + [f"{r['group_mae'][g]:.3f}" for g in groups] + [
            f"{r['performance_gap']:.3f}", acc, f"{r['pc']:.4f}"]
        lines.append("  ".join(f"{c:>14s}" for c in cells))
    lines.append(f"Bias reduction: {rep['bias_reduction_display']}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    rep = build_report(_read_metrics(args.baseline), _read_metrics(args.fair))
    text = format_report(rep)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text + "\n")
        (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairvit", description="Fair image-score regression on a numpy autodiff stack.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    _add_common(p)
    _add_section_flags(p, "synth")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model variant")
    _add_common(p)
    _add_section_flags(p, "model")
    _add_section_flags(p, "train")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="predict a split and compute metrics")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--config", type=Path, help="expected config; mismatching model keys are an error")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="write Grad-CAM / attention-rollout heatmaps")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="all", help="split to search for ids (default: all)")
    p.add_argument("--ids", required=True, help="comma-separated sample ids")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="compare baseline and debiased metrics")
    p.add_argument("--baseline", required=True, type=Path)
    p.add_argument("--fair", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError, DataError, MetricError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
