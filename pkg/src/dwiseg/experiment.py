"""Fine-tune-size sweep across training regimes and empty-slice rewards.

Per seed, one source model is trained and reused by every transfer cell and
by the no-training baseline. All cells are evaluated on the same fixed
target test set, after post-processing.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Cohort, Zone, finetune_splits, split_cohort
from .loss import LossConfig
from .metrics import MetricsReport, evaluate_cohort
from .model import ModelConfig, build_model
from .postprocess import PostprocessConfig, derive_min_size_threshold, postprocess_volume
from .transfer import TrainConfig, finetune, make_scheme, predict_volume, train_scratch, train_source

log = logging.getLogger(__name__)

REGIMES = ("transfer", "scratch", "no-training")
CLINICAL_SIZES = (8, 30, 42, 70, 85, 106, 115)
CSV_COLUMNS = (
    "zone", "regime", "X", "size", "seed",
    "mean_dsc", "std_dsc", "sensitivity", "specificity", "precision", "status",
)


@dataclass
class ExperimentPlan:
    zone: Zone = "WG"
    finetune_sizes: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    regimes: list[str] = field(default_factory=lambda: list(REGIMES))
    x_values: list[float] = field(default_factory=lambda: [0.0, 1.0])
    # optional per-regime override of x_values, e.g. {"transfer": [0.0]}
    x_values_by_regime: dict[str, list[float]] = field(default_factory=dict)
    # X = 1.0 trains with the conventional smoothed loss rather than the modified one
    conventional_at_x1: bool = True
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    fixed_test_size: int = 8
    split_seed: int = 0
    source_split_ratios: list[float] = field(default_factory=lambda: [3.0, 1.0, 1.5])
    freeze_bottleneck: bool = True
    model: ModelConfig = field(default_factory=lambda: ModelConfig(n_levels=3, base_channels=8))
    source_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(lr=1e-3, epochs=12, batch_size=8, augment=True)
    )
    finetune_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(lr=1e-3, epochs=8, batch_size=8, lr_schedule="cosine")
    )
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    derive_min_size: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.source_train, dict):
            self.source_train = TrainConfig(**self.source_train)
        if isinstance(self.finetune_train, dict):
            self.finetune_train = TrainConfig(**self.finetune_train)
        if isinstance(self.postprocess, dict):
            self.postprocess = PostprocessConfig(**self.postprocess)
        self.finetune_sizes = [int(s) for s in self.finetune_sizes]
        if any(b <= a for a, b in zip(self.finetune_sizes, self.finetune_sizes[1:])):
            raise ValueError("finetune_sizes must be strictly increasing")
        unknown = set(self.regimes) - set(REGIMES)
        if unknown:
            raise ValueError(f"unknown regimes {sorted(unknown)}")
        for x in self.x_values + [x for xs in self.x_values_by_regime.values() for x in xs]:
            if not 0.0 <= x <= 1.0:
                raise ValueError(f"X value {x} outside [0, 1]")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def xs(self, regime: str) -> list[float]:
        return list(self.x_values_by_regime.get(regime, self.x_values))

    def loss_for(self, X: float) -> LossConfig:
        base = self.finetune_train.loss
        if self.conventional_at_x1 and X == 1.0:
            return LossConfig("conventional", 1.0, base.epsilon, base.binarize_threshold)
        return LossConfig("modified", X, base.epsilon, base.binarize_threshold, base.fp_suppression)

    def cell_keys(self) -> list[tuple]:
        keys = []
        for regime in self.regimes:
            xs = [None] if regime == "no-training" else self.xs(regime)
            for X in xs:
                for size in self.finetune_sizes:
                    for seed in self.seeds:
                        keys.append((self.zone, regime, X, size, seed))
        return sorted(keys, key=_sort_key)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def clinical_preset(cls, zone: Zone = "WG") -> "ExperimentPlan":
        """Size grid and X sweep of the clinical study (needs a 148-patient target cohort)."""
        return cls(
            zone=zone,
            finetune_sizes=list(CLINICAL_SIZES),
            x_values=[round(0.1 * i, 1) for i in range(11)],
            seeds=[0],
            fixed_test_size=33,
            model=ModelConfig(n_levels=4, base_channels=16),
            source_train=TrainConfig(lr=1e-4, epochs=25, augment=True, zone=zone),
            finetune_train=TrainConfig(lr=1e-4, epochs=25, zone=zone),
        )


def _sort_key(key: tuple):
    zone, regime, X, size, seed = key
    return (zone, REGIMES.index(regime), -1.0 if X is None else X, size, seed)


@dataclass
class CellResult:
    zone: str
    regime: str
    X: float | None
    size: int
    seed: int
    status: str = "ok"
    report: MetricsReport | None = None
    raw_report: MetricsReport | None = None
    runtime_s: float = 0.0
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.zone, self.regime, self.X, self.size, self.seed)

    def to_dict(self, with_runtime: bool = False) -> dict:
        d = {
            "zone": self.zone,
            "regime": self.regime,
            "X": self.X,
            "size": self.size,
            "seed": self.seed,
            "status": self.status,
            "report": self.report.to_dict() if self.report else None,
            "raw_report": self.raw_report.to_dict() if self.raw_report else None,
            "error": self.error,
        }
        if with_runtime:
            d["runtime_s"] = self.runtime_s
        return d


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    cells: list[CellResult]
    test_patient_ids: list[str] = field(default_factory=list)
    min_pixels: int = 0

    def get(self, regime: str, X: float | None, size: int, seed: int) -> CellResult:
        for c in self.cells:
            if (c.regime, c.X, c.size, c.seed) == (regime, X, size, seed):
                return c
        raise KeyError((regime, X, size, seed))

    def ok_cells(self, regime: str | None = None) -> list[CellResult]:
        return [c for c in self.cells if c.status == "ok" and (regime is None or c.regime == regime)]


# --------------------------------------------------------------------------
# running


def _evaluate(model, test: Cohort, zone: Zone, pp: PostprocessConfig) -> tuple[MetricsReport, MetricsReport]:
    raw, post, gts = {}, {}, {}
    for p in test.patients:
        _, binary = predict_volume(model, p)
        raw[p.patient_id] = binary
        post[p.patient_id] = postprocess_volume(binary, pp, zone)
        gts[p.patient_id] = p.masks(zone)
    return evaluate_cohort(post, gts, zone), evaluate_cohort(raw, gts, zone)


def _with(cfg: TrainConfig, **changes) -> TrainConfig:
    d = asdict(cfg)
    d.update(changes)
    return TrainConfig(**d)


def _run_seed(plan: ExperimentPlan, source: Cohort, target: Cohort, seed: int) -> list[CellResult]:
    torch.set_num_threads(1)
    zone = plan.zone
    src_train, src_val, _ = split_cohort(source, ratios=plan.source_split_ratios, seed=plan.split_seed)
    subsets, test = finetune_splits(target, plan.finetune_sizes, plan.fixed_test_size, seed=plan.split_seed)
    pp = _postprocess_config(plan, src_train)
    keys = [k for k in plan.cell_keys() if k[4] == seed]
    results: list[CellResult] = []

    source_model, source_error, source_time = None, None, 0.0
    if any(k[1] in ("transfer", "no-training") for k in keys):
        t0 = time.perf_counter()
        try:
            source_model, _ = train_source(
                build_model(plan.model, seed),
                src_train,
                src_val,
                _with(plan.source_train, seed=seed, zone=zone, augment=True),
            )
        except Exception:
            source_error = traceback.format_exc(limit=3)
        source_time = time.perf_counter() - t0

    baseline = None
    for key in keys:
        _, regime, X, size, _ = key
        cell = CellResult(*key)
        t0 = time.perf_counter()
        try:
            if regime in ("transfer", "no-training") and source_model is None:
                raise RuntimeError(f"source training failed: {source_error}")
            if regime == "no-training":
                # the source model and test set do not depend on size
                if baseline is None:
                    baseline = _evaluate(source_model, test, zone, pp)
                cell.report, cell.raw_report = baseline
            elif regime == "transfer":
                cfg = _with(plan.finetune_train, seed=seed, zone=zone, augment=False, loss=plan.loss_for(X))
                scheme = make_scheme(zone, plan.model.n_levels, plan.freeze_bottleneck)
                model, _ = finetune(source_model, subsets[size], scheme, cfg)
                cell.report, cell.raw_report = _evaluate(model, test, zone, pp)
            else:
                cfg = _with(plan.finetune_train, seed=seed, zone=zone, augment=False, loss=plan.loss_for(X))
                model, _ = train_scratch(plan.model, seed, subsets[size], cfg)
                cell.report, cell.raw_report = _evaluate(model, test, zone, pp)
        except Exception as exc:
            cell.status = "failed"
            cell.error = f"{type(exc).__name__}: {exc}"
            log.warning("cell %s failed: %s", key, cell.error)
        cell.runtime_s = time.perf_counter() - t0
        if regime in ("transfer", "no-training"):
            cell.runtime_s += source_time / sum(1 for k in keys if k[1] in ("transfer", "no-training"))
        results.append(cell)
        log.info("cell %s -> %s", key, "ok" if cell.report is None else f"{cell.report.mean_dsc:.4f}")
    return results


def _postprocess_config(plan: ExperimentPlan, reference: Cohort) -> PostprocessConfig:
    pp = PostprocessConfig(**asdict(plan.postprocess))
    if plan.derive_min_size:
        threshold = derive_min_size_threshold(reference, plan.zone, pp.threshold_fraction)
        if plan.zone == "WG":
            pp.min_mask_pixels_wg = threshold
        else:
            pp.min_mask_pixels_tz = threshold
    return pp


def run_sweep(plan: ExperimentPlan, source_cohort: Cohort, target_cohort: Cohort, workers: int | None = None) -> ExperimentResult:
    """Run every planned cell; failures are recorded and the sweep continues.

    ``workers`` (default: ``$DWISEG_WORKERS`` or 1) parallelises over seeds.
    """
    needed = (max(plan.finetune_sizes) if plan.finetune_sizes else 0) + plan.fixed_test_size
    if needed > len(target_cohort):
        raise ValueError(f"plan needs {needed} target patients, cohort has {len(target_cohort)}")
    workers = workers or int(os.environ.get("DWISEG_WORKERS", "1"))
    if workers > 1 and len(plan.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(plan.seeds))) as pool:
            chunks = list(pool.map(_run_seed, *zip(*[(plan, source_cohort, target_cohort, s) for s in plan.seeds])))
    else:
        chunks = [_run_seed(plan, source_cohort, target_cohort, s) for s in plan.seeds]
    cells = sorted((c for chunk in chunks for c in chunk), key=lambda c: _sort_key(c.key))
    src_train = split_cohort(source_cohort, ratios=plan.source_split_ratios, seed=plan.split_seed)[0]
    _, test = finetune_splits(target_cohort, plan.finetune_sizes, plan.fixed_test_size, seed=plan.split_seed)
    pp = _postprocess_config(plan, src_train)
    return ExperimentResult(plan, cells, test.patient_ids, pp.min_pixels(plan.zone))


# --------------------------------------------------------------------------
# aggregation


def best_x(result: ExperimentResult, regime: str, size: int) -> float | None:
    """X with the highest seed-averaged mean DSC for (regime, size); ties go to the smaller X."""
    by_x: dict = {}
    for c in result.ok_cells(regime):
        if c.size == size:
            by_x.setdefault(c.X, []).append(c.report.mean_dsc)
    if not by_x:
        return None
    return max(sorted(by_x, key=lambda x: -1 if x is None else x), key=lambda x: float(np.mean(by_x[x])))


def summarize(result: ExperimentResult, metric: str = "mean_dsc", raw: bool = False) -> dict[str, dict[int, float]]:
    """regime -> size -> seed-averaged metric at the best X for that cell."""
    out: dict[str, dict[int, float]] = {}
    for regime in result.plan.regimes:
        for size in result.plan.finetune_sizes:
            X = best_x(result, regime, size)
            vals = []
            for c in result.ok_cells(regime):
                if c.size == size and c.X == X:
                    rep = c.raw_report if raw else c.report
                    v = getattr(rep, metric)
                    if v is not None:
                        vals.append(v)
            if vals:
                out.setdefault(regime, {})[size] = float(np.mean(vals))
    return out


def mean_over_seeds(result: ExperimentResult, regime: str, X: float | None, size: int, raw: bool = False) -> float:
    vals = [
        (c.raw_report if raw else c.report).mean_dsc
        for c in result.ok_cells(regime)
        if c.X == X and c.size == size
    ]
    if not vals:
        raise KeyError((regime, X, size))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# persistence


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _cell_filename(c: CellResult) -> str:
    x = "none" if c.X is None else f"{c.X:.1f}"
    return f"{c.zone}_{c.regime}_X{x}_n{c.size}_s{c.seed}.json"


def results_rows(result: ExperimentResult) -> list[dict]:
    rows = []
    for c in result.cells:
        r = c.report
        rows.append(
            {
                "zone": c.zone,
                "regime": c.regime,
                "X": c.X,
                "size": c.size,
                "seed": c.seed,
                "mean_dsc": r.mean_dsc if r else None,
                "std_dsc": r.std_dsc if r else None,
                "sensitivity": r.sensitivity if r else None,
                "specificity": r.specificity if r else None,
                "precision": r.precision if r else None,
                "status": c.status,
            }
        )
    return rows


def persist_results(result: ExperimentResult, out_dir: str | Path) -> dict[str, Path]:
    """Write plan echo, per-cell JSON, ``results.csv`` and ``timings.csv``.

    Everything except ``timings.csv`` is a deterministic function of the
    plan, data and seeds.
    """
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    paths = {}
    meta = {"plan": result.plan.to_dict(), "test_patient_ids": result.test_patient_ids, "min_pixels": result.min_pixels}
    paths["plan"] = out / "plan.json"
    paths["plan"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for c in result.cells:
        (out / "cells" / _cell_filename(c)).write_text(json.dumps(c.to_dict(), indent=2, sort_keys=True) + "\n")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in results_rows(result):
        w.writerow([_fmt(row[k]) for k in CSV_COLUMNS])
    paths["results"] = out / "results.csv"
    paths["results"].write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("zone", "regime", "X", "size", "seed", "runtime_s"))
    for c in result.cells:
        w.writerow([_fmt(v) for v in (c.zone, c.regime, c.X, c.size, c.seed)] + [f"{c.runtime_s:.3f}"])
    paths["timings"] = out / "timings.csv"
    paths["timings"].write_text(buf.getvalue())
    return paths


def read_results_csv(path: str | Path) -> list[dict]:
    def parse(k, v):
        if v == "":
            return None
        if k in ("size", "seed"):
            return int(v)
        if k in ("zone", "regime", "status"):
            return v
        return float(v)

    with open(path, newline="") as f:
        return [{k: parse(k, v) for k, v in row.items()} for row in csv.DictReader(f)]


def load_result(out_dir: str | Path) -> ExperimentResult:
    out = Path(out_dir)
    meta = json.loads((out / "plan.json").read_text())
    plan = ExperimentPlan.from_dict(meta["plan"])
    runtimes = {}
    timings = out / "timings.csv"
    if timings.exists():
        for row in read_results_csv_raw(timings):
            runtimes[(row["regime"], row["X"], int(row["size"]), int(row["seed"]))] = float(row["runtime_s"])
    cells = []
    for path in sorted((out / "cells").glob("*.json")):
        d = json.loads(path.read_text())
        cell = CellResult(
            d["zone"], d["regime"], d["X"], d["size"], d["seed"], d["status"],
            MetricsReport.from_dict(d["report"]) if d["report"] else None,
            MetricsReport.from_dict(d["raw_report"]) if d["raw_report"] else None,
            error=d["error"],
        )
        x_key = "" if cell.X is None else repr(float(cell.X))
        cell.runtime_s = runtimes.get((cell.regime, x_key, cell.size, cell.seed), 0.0)
        cells.append(cell)
    cells.sort(key=lambda c: _sort_key(c.key))
    return ExperimentResult(plan, cells, meta["test_patient_ids"], meta["min_pixels"])


def read_results_csv_raw(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------
# plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dwiseg"
    return plt


def _save(fig, out_path: Path) -> None:
    fmt = out_path.suffix.lstrip(".").lower() or "svg"
    metadata = {"Date": None} if fmt == "svg" else {}
    fig.savefig(out_path, format=fmt, metadata=metadata)


def emit_curve_plot(result: ExperimentResult, zone: Zone, out_path: str | Path) -> dict[str, tuple[list[int], list[float]]]:
    """Mean DSC against fine-tune size, one line per regime. Returns the plotted series."""
    plt = _pyplot()
    out_path = Path(out_path)
    summary = summarize(result)
    series = {}
    fig, ax = plt.subplots(figsize=(6, 4))
    styles = {"transfer": ("tab:blue", "o-"), "scratch": ("tab:green", "s-"), "no-training": ("black", "--")}
    labels = {"transfer": "Transfer learning", "scratch": "Train target from scratch", "no-training": "No training on target"}
    for regime in result.plan.regimes:
        pts = summary.get(regime, {})
        if not pts:
            continue
        xs = sorted(pts)
        ys = [pts[s] for s in xs]
        series[regime] = (xs, ys)
        color, style = styles[regime]
        ax.plot(xs, ys, style, color=color, label=labels[regime])
    ax.set_xlabel("fine-tune set size (patients)")
    ax.set_ylabel(f"mean DSC ({zone})")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, out_path)
    plt.close(fig)
    return series


def emit_metric_bars(result: ExperimentResult, sizes: Sequence[int], out_path: str | Path) -> dict[int, dict[str, list[float]]]:
    """Grouped sensitivity/specificity/precision bars per regime for each size."""
    plt = _pyplot()
    out_path = Path(out_path)
    metrics = ("sensitivity", "specificity", "precision")
    tables = {m: summarize(result, m) for m in metrics}
    sizes = [s for s in sizes if s in result.plan.finetune_sizes]
    data: dict[int, dict[str, list[float]]] = {}
    fig, axes = plt.subplots(1, max(1, len(sizes)), figsize=(4 * max(1, len(sizes)), 3.5), squeeze=False)
    for ax, size in zip(axes[0], sizes):
        regimes = [r for r in result.plan.regimes if any(size in tables[m].get(r, {}) for m in metrics)]
        data[size] = {}
        width = 0.8 / len(metrics)
        for j, m in enumerate(metrics):
            vals = [tables[m].get(r, {}).get(size, math.nan) for r in regimes]
            data[size][m] = vals
            ax.bar(np.arange(len(regimes)) + (j - 1) * width, vals, width, label=m)
        ax.set_xticks(np.arange(len(regimes)))
        ax.set_xticklabels(regimes)
        ax.set_ylim(0, 1.05)
        ax.set_title(f"{size} patients")
    axes[0][0].legend(loc="lower left", fontsize="small")
    fig.tight_layout()
    _save(fig, out_path)
    plt.close(fig)
    return data
