"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``), applies
``--set key.path=value`` overrides, writes the resolved config to its output
directory and delegates to the library. Exit codes: 0 success, 1 runtime
failure, 2 bad usage or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .config import ConfigError, load_config, to_jsonable, write_resolved
from .data import (
    Cohort,
    PhantomConfig,
    Zone,
    finetune_splits,
    generate_phantom_cohort,
    read_dataset,
    read_masks,
    split_cohort,
    write_dataset,
    write_masks,
)
from .experiment import ExperimentPlan, emit_curve_plot, emit_metric_bars, load_result, persist_results, run_sweep
from .metrics import base_apex_analysis, base_apex_size_band, evaluate_cohort
from .model import ModelConfig, build_model
from .postprocess import PostprocessConfig, derive_min_size_threshold, postprocess_volume
from .transfer import (
    TrainConfig,
    finetune,
    load_checkpoint,
    make_scheme,
    predict_volume,
    save_checkpoint,
    train_scratch,
    train_source,
)

log = logging.getLogger("dwiseg")


@dataclass
class GenerateConfig:
    domain: str = "source"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


@dataclass
class TrainSourceConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    model_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(augment=True))
    split_ratios: list[float] = field(default_factory=lambda: [3.0, 1.0, 1.5])
    split_seed: int = 0


@dataclass
class FinetuneConfig:
    scheme: str = "WG"
    freeze_bottleneck: bool = True
    from_scratch: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    model_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    # optional: take the nested subset of this size after holding out test_size patients
    subset_size: int | None = None
    test_size: int = 0
    split_seed: int = 0


@dataclass
class PredictConfig:
    zone: str = "WG"
    b_value_policy: str | float = "mean"
    threshold: float = 0.5


@dataclass
class PostprocessCliConfig:
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)


@dataclass
class EvaluateConfig:
    zone: str = "WG"


@dataclass
class DataSource:
    path: str | None = None
    phantom: PhantomConfig | None = None

    def load(self, domain: str) -> Cohort:
        if (self.path is None) == (self.phantom is None):
            raise ConfigError(f"{domain} data: give exactly one of 'path' or 'phantom'")
        if self.path is not None:
            return read_dataset(self.path)
        return generate_phantom_cohort(self.phantom, domain)


@dataclass
class SweepConfig:
    plan: ExperimentPlan = field(default_factory=ExperimentPlan)
    source: DataSource = field(default_factory=lambda: DataSource(phantom=PhantomConfig(n_patients=24)))
    target: DataSource = field(default_factory=lambda: DataSource(phantom=PhantomConfig(n_patients=24)))
    plot_format: str = "svg"
    bar_sizes: list[int] | None = None


@dataclass
class PlotConfig:
    plot_format: str = "svg"
    bar_sizes: list[int] | None = None


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg, out: Path, args) -> None:
    write_resolved({"subcommand": args.command, "config": to_jsonable(cfg), "overrides": args.set}, out)


def cmd_generate_phantom(args) -> int:
    cfg = load_config(GenerateConfig, args.config, args.set)
    if cfg.domain not in ("source", "target"):
        raise ConfigError(f"domain must be 'source' or 'target', got {cfg.domain!r}")
    out = _out(args)
    _echo(cfg, out, args)
    cohort = generate_phantom_cohort(cfg.phantom, cfg.domain)
    manifest = write_dataset(cohort, out / "data")
    print(manifest)
    return 0


def cmd_train_source(args) -> int:
    cfg = load_config(TrainSourceConfig, args.config, args.set)
    out = _out(args)
    _echo(cfg, out, args)
    cohort = read_dataset(args.data)
    train, val, _ = split_cohort(cohort, ratios=cfg.split_ratios, seed=cfg.split_seed)
    model, history = train_source(build_model(cfg.model, cfg.model_seed), train, val, cfg.train)
    save_checkpoint(model, out / "checkpoint.npz", extra={"best_epoch": history.best_epoch})
    history.to_csv(out / "train_log.csv")
    print(out / "checkpoint.npz")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(FinetuneConfig, args.config, args.set)
    out = _out(args)
    _echo(cfg, out, args)
    cohort = read_dataset(args.data)
    if cfg.subset_size is not None:
        subsets, _ = finetune_splits(cohort, [cfg.subset_size], cfg.test_size, cfg.split_seed)
        cohort = subsets[cfg.subset_size]
    if cfg.from_scratch:
        model, history = train_scratch(cfg.model, cfg.model_seed, cohort, cfg.train)
    else:
        if not args.checkpoint:
            raise ConfigError("finetune needs --checkpoint unless from_scratch is set")
        pretrained = load_checkpoint(args.checkpoint)
        scheme = make_scheme(cfg.scheme, pretrained.config.n_levels, cfg.freeze_bottleneck)
        model, history = finetune(pretrained, cohort, scheme, cfg.train)
    save_checkpoint(model, out / "checkpoint.npz")
    history.to_csv(out / "train_log.csv")
    print(out / "checkpoint.npz")
    return 0


def cmd_predict(args) -> int:
    cfg = load_config(PredictConfig, args.config, args.set)
    out = _out(args)
    _echo(cfg, out, args)
    model = load_checkpoint(args.checkpoint)
    cohort = read_dataset(args.data)
    masks = {p.patient_id: predict_volume(model, p, cfg.b_value_policy, cfg.threshold)[1] for p in cohort.patients}
    print(write_masks(masks, out / "masks", cfg.zone))
    return 0


def cmd_postprocess(args) -> int:
    cfg = load_config(PostprocessCliConfig, args.config, args.set)
    out = _out(args)
    masks, zone = read_masks(args.masks)
    pp = cfg.postprocess
    if args.reference:
        threshold = derive_min_size_threshold(read_dataset(args.reference), zone, pp.threshold_fraction)
        if zone == "WG":
            pp.min_mask_pixels_wg = threshold
        else:
            pp.min_mask_pixels_tz = threshold
    _echo(cfg, out, args)
    cleaned = {pid: postprocess_volume(vol, pp, zone) for pid, vol in masks.items()}
    print(write_masks(cleaned, out / "masks", zone))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(EvaluateConfig, args.config, args.set)
    out = _out(args)
    _echo(cfg, out, args)
    preds, zone = read_masks(args.masks)
    if zone != cfg.zone:
        raise ValueError(f"masks are for zone {zone}, evaluation requested for {cfg.zone}")
    cohort = read_dataset(args.data)
    gts = {p.patient_id: p.masks(zone) for p in cohort.patients}
    report = evaluate_cohort(preds, gts, zone)
    analysis = base_apex_analysis(preds, gts, zone, base_apex_size_band(gts))
    (out / "report.json").write_text(
        json.dumps({"zone": zone, **report.to_dict(), **analysis}, indent=2, sort_keys=True) + "\n"
    )
    cols = ["zone", "mean_dsc", "std_dsc", "sensitivity", "specificity", "precision"]
    row = {"zone": zone, **report.to_dict()}
    (out / "metrics.csv").write_text(
        ",".join(cols) + "\n" + ",".join("" if row[c] is None else str(row[c]) for c in cols) + "\n"
    )
    print(json.dumps({"mean_dsc": report.mean_dsc, "std_dsc": report.std_dsc}))
    return 0


def _plots(result, out: Path, fmt: str, bar_sizes) -> None:
    sizes = bar_sizes or result.plan.finetune_sizes
    emit_curve_plot(result, result.plan.zone, out / f"curve_{result.plan.zone}.{fmt}")
    emit_metric_bars(result, sizes, out / f"bars_{result.plan.zone}.{fmt}")


def cmd_sweep(args) -> int:
    cfg = load_config(SweepConfig, args.config, args.set)
    out = _out(args)
    _echo(cfg, out, args)
    source = cfg.source.load("source")
    target = cfg.target.load("target")
    result = run_sweep(cfg.plan, source, target, workers=args.workers)
    persist_results(result, out)
    _plots(result, out, cfg.plot_format, cfg.bar_sizes)
    failed = [c for c in result.cells if c.status != "ok"]
    print(f"{len(result.cells)} cells, {len(failed)} failed -> {out / 'results.csv'}")
    return 0


def cmd_plot(args) -> int:
    cfg = load_config(PlotConfig, args.config, args.set)
    out = _out(args)
    _echo(cfg, out, args)
    _plots(load_result(args.results), out, cfg.plot_format, cfg.bar_sizes)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwiseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help, *extra):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--out", required=True, help="output directory")
        for flag, kw in extra:
            p.add_argument(flag, **kw)
        p.set_defaults(func=func)
        return p

    add("generate-phantom", cmd_generate_phantom, "write a synthetic cohort")
    add("train-source", cmd_train_source, "train on a source dataset", ("--data", {"required": True}))
    add(
        "finetune",
        cmd_finetune,
        "fine-tune a checkpoint (or train from scratch) on target data",
        ("--data", {"required": True}),
        ("--checkpoint", {}),
    )
    add("predict", cmd_predict, "predict mask volumes", ("--data", {"required": True}), ("--checkpoint", {"required": True}))
    add("postprocess", cmd_postprocess, "clean predicted masks", ("--masks", {"required": True}), ("--reference", {"help": "dataset to derive the size threshold from"}))
    add("evaluate", cmd_evaluate, "score masks against a dataset", ("--masks", {"required": True}), ("--data", {"required": True}))
    add(
        "sweep",
        cmd_sweep,
        "run a fine-tune-size sweep",
        ("--workers", {"type": int, "default": int(os.environ.get("DWISEG_WORKERS", "1"))}),
    )
    add("plot", cmd_plot, "plot a persisted sweep", ("--results", {"required": True}))
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line, machine-parsable failure
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
