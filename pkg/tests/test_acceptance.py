"""Acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line to the
terminal (outside pytest's capture) before asserting. Criteria 6 to 8 share
one run of the phantom sweep defined in ``configs/phantom_sweep.json``.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dwiseg.cli import SweepConfig
from dwiseg.config import load_config
from dwiseg.data import PhantomConfig, generate_phantom_cohort
from dwiseg.experiment import ExperimentPlan, mean_over_seeds, persist_results, run_sweep, summarize
from dwiseg.loss import X_GRID, LossConfig, binary_dsc, modified_dsc, soft_dice_training_loss
from dwiseg.metrics import evaluate_cohort
from dwiseg.model import ModelConfig, build_model
from dwiseg.postprocess import close_mask, open_mask, threshold_from_counts
from dwiseg.transfer import TrainConfig, finetune, make_scheme, snapshot

ROOT = Path(__file__).resolve().parents[1]
SWEEP_CONFIG = ROOT / "configs" / "phantom_sweep.json"
CPU_BUDGET_S = 30 * 60


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return emit


# ----------------------------------------------------------------- 1


def _oracle(P, G, X, eps):
    ps = {(i, j) for i, j in zip(*np.nonzero(P))}
    gs = {(i, j) for i, j in zip(*np.nonzero(G))}
    inter = len(ps & gs)
    smoothed = min(1.0, 2 * (inter + eps) / (len(ps) + len(gs) + 2 * eps))
    modified = X if not ps and not gs else 2 * inter / (len(ps) + len(gs))
    return smoothed, modified


def test_criterion_1_loss_oracle(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(10_000):
        density = rng.choice([0.0, 0.05, 0.3, 0.7])
        P = (rng.random((8, 8)) < density).astype(np.uint8)
        G = (rng.random((8, 8)) < rng.choice([0.0, 0.05, 0.3, 0.7])).astype(np.uint8)
        X = X_GRID[k % len(X_GRID)]
        want_b, want_m = _oracle(P, G, X, 1e-6)
        worst = max(worst, abs(binary_dsc(P, G) - want_b), abs(modified_dsc(P, G, X) - want_m))
    empty = np.zeros((8, 8), np.uint8)
    grid_ok = all(modified_dsc(empty, empty, X) == X for X in X_GRID) and len(X_GRID) == 11
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and grid_ok and elapsed < 10
    report(1, ok, f"max |err| = {worst:.1e}, empty/empty -> X for all 11 X: {grid_ok}, {elapsed:.2f} s")


# ----------------------------------------------------------------- 2


def _central_difference(f, p, h=1e-7):
    grad = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        up, down = p.copy(), p.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2 * h)
    return grad


def test_criterion_2_gradients(report):
    rng = np.random.default_rng(2)
    configs = [
        LossConfig("conventional"),
        LossConfig("modified", X=0.0),
        LossConfig("modified", X=0.7),
        LossConfig("modified", X=1.0, fp_suppression=True),
    ]
    worst = 0.0
    for k in range(100):
        cfg = configs[k % len(configs)]
        p = rng.uniform(0.05, 0.95, (4, 4))
        G = (rng.random((4, 4)) < 0.4).astype(np.float64)
        if cfg.family == "modified":
            G.flat[rng.integers(16)] = 1.0  # the differentiable branch needs a non-empty G
        _, analytic = soft_dice_training_loss(p, G, cfg)
        numeric = _central_difference(lambda q: soft_dice_training_loss(q, G, cfg)[0], p)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, np.linalg.norm(analytic - numeric) / scale)
    zero = np.zeros((4, 4))
    zero_grad = all(
        not soft_dice_training_loss(rng.uniform(0, 0.49, (4, 4)), zero, LossConfig("modified", X=X))[1].any()
        for X in X_GRID
    )
    report(2, worst < 1e-4 and zero_grad, f"max rel. err = {worst:.1e}, empty/empty gradient exactly zero: {zero_grad}")


# ----------------------------------------------------------------- 3


def test_criterion_3_freezing(report):
    # 1 patient x 5 slices x 4 b-values = 20 samples, batch 4 -> 5 steps/epoch, 4 epochs -> 20 steps
    cfg = PhantomConfig(n_patients=1, slices_per_patient=5, height=16, width=16, prostate_slice_fraction=0.6)
    cohort = generate_phantom_cohort(cfg, "target")
    train = TrainConfig(lr=1e-2, epochs=4, batch_size=4, loss=LossConfig("conventional"))
    model = build_model(ModelConfig(n_levels=4, base_channels=8), seed=0)
    before = snapshot(model)

    def changed(tuned):
        after = snapshot(tuned)
        return {k.split("/")[0] for k in before if not torch.equal(before[k], after[k])}

    frozen_wg = {"Down-1", "Down-2", "Down-3", "Down-4", "Bottleneck"}
    wg = changed(finetune(model, cohort, make_scheme("WG", 4), train)[0])
    tz = changed(finetune(model, cohort, make_scheme("TZ", 4), train)[0])
    ok = (
        not wg & frozen_wg
        and {"Up-1", "Head"} <= wg
        and {"Down-1", "Down-2"} <= tz
        and not tz & {"Down-3", "Down-4", "Bottleneck"}
    )
    report(3, ok, f"WG changed {sorted(wg)}; TZ changed {sorted(tz)}")


# ----------------------------------------------------------------- 4


def test_criterion_4_morphology(report):
    rng = np.random.default_rng(4)
    failures = 0
    for _ in range(1000):
        shape = tuple(rng.integers(6, 24, 2))
        m = (rng.random(shape) < rng.uniform(0.05, 0.8)).astype(np.uint8)
        r = int(rng.integers(1, 4))
        c, o = close_mask(m, r), open_mask(m, r)
        failures += (m > c).any() or not np.array_equal(close_mask(c, r), c)
        failures += (o > m).any() or not np.array_equal(open_mask(o, r), o)
    t120 = threshold_from_counts([133, 133, 134])  # mean 133.33
    t65 = threshold_from_counts([72] * 7 + [73, 73])  # mean 72.22
    ok = failures == 0 and t120 == 120 and t65 == 65
    report(4, ok, f"{failures} property violations over 1000 masks; thresholds {t120}, {t65}")


# ----------------------------------------------------------------- 5


def _recount(preds, gts):
    tp = fp = tn = fn = 0
    dscs = []
    for pid in gts:
        for pm, gm in zip(preds[pid], gts[pid]):
            p_any, g_any = bool(pm.sum()), bool(gm.sum())
            tp += p_any and g_any
            fp += p_any and not g_any
            fn += g_any and not p_any
            tn += not p_any and not g_any
            if g_any:
                dscs.append(2 * int((pm & gm).sum()) / (int(pm.sum()) + int(gm.sum())))
    return (tp, fp, tn, fn), float(np.mean(dscs)) if dscs else math.nan


def test_criterion_5_metrics_oracle(report):
    rng = np.random.default_rng(5)
    mismatches = invariance_breaks = 0
    for _ in range(100):
        preds, gts = {}, {}
        for i in range(int(rng.integers(1, 4))):
            n = int(rng.integers(2, 8))
            g = (rng.random((n, 6, 6)) < 0.3).astype(np.uint8)
            g[1:][rng.random(n - 1) < 0.3] = 0
            g[0, 2, 2] = 1  # every patient keeps a prostate slice
            p = (rng.random((n, 6, 6)) < 0.3).astype(np.uint8)
            p[rng.random(n) < 0.3] = 0
            preds[f"p{i}"], gts[f"p{i}"] = p, g
        r = evaluate_cohort(preds, gts)
        counts, mean = _recount(preds, gts)
        mismatches += (r.TP, r.FP, r.TN, r.FN) != counts or r.mean_dsc != mean
        # append empty-GT slices with arbitrary predictions
        pad = int(rng.integers(1, 4))
        preds2 = {k: np.concatenate([v, (rng.random((pad, 6, 6)) < 0.3).astype(np.uint8)]) for k, v in preds.items()}
        gts2 = {k: np.concatenate([v, np.zeros((pad, 6, 6), np.uint8)]) for k, v in gts.items()}
        invariance_breaks += evaluate_cohort(preds2, gts2).mean_dsc != r.mean_dsc
    ok = mismatches == 0 and invariance_breaks == 0
    report(5, ok, f"{mismatches} mismatches vs recount, {invariance_breaks} mean_dsc changes from empty-GT slices")


# ----------------------------------------------------------------- 6-8


@pytest.fixture(scope="module")
def phantom_sweep(tmp_path_factory):
    torch.set_num_threads(1)
    cfg = load_config(SweepConfig, SWEEP_CONFIG)
    t0 = time.process_time()
    result = run_sweep(cfg.plan, cfg.source.load("source"), cfg.target.load("target"), workers=1)
    cpu = time.process_time() - t0
    persist_results(result, tmp_path_factory.mktemp("phantom_sweep"))
    return result, cpu


def test_criterion_6_ordinal_reproduction(phantom_sweep, report):
    result, cpu = phantom_sweep
    sizes = result.plan.finetune_sizes
    s = summarize(result)
    transfer, scratch, baseline = s["transfer"], s["scratch"], s["no-training"]
    a = all(transfer[n] - baseline[n] >= 0.05 for n in sizes)
    b = transfer[sizes[0]] - scratch[sizes[0]] >= 0.05
    drops = [transfer[x] - transfer[y] for x, y in zip(sizes, sizes[1:]) if transfer[y] < transfer[x]]
    c = len(drops) <= 1 and all(d <= 0.02 for d in drops)
    d = all(
        len({result.get("no-training", None, n, seed).report.mean_dsc for n in sizes}) == 1
        for seed in result.plan.seeds
    )
    failed = [cell.key for cell in result.cells if cell.status != "ok"]
    budget = cpu <= CPU_BUDGET_S
    curve = lambda row: " ".join(f"{n}:{row[n]:.3f}" for n in sizes)
    detail = (
        f"(a) {a} (b) {b} (c) {c} (d) {d}; cpu {cpu / 60:.1f} min; "
        f"transfer [{curve(transfer)}] scratch [{curve(scratch)}] no-training [{curve(baseline)}]"
    )
    report(6, a and b and c and d and budget and not failed, detail)


def test_criterion_7_modified_loss_small_data(phantom_sweep, report):
    result, _ = phantom_sweep
    n = result.plan.finetune_sizes[0]
    x0 = mean_over_seeds(result, "scratch", 0.0, n)
    x1 = mean_over_seeds(result, "scratch", 1.0, n)
    report(7, x0 >= x1 - 0.02, f"size {n}: scratch X=0 {x0:.4f} vs X=1 {x1:.4f}")


def test_criterion_8_postprocessing_effect(phantom_sweep, report):
    result, _ = phantom_sweep
    deltas = {}
    for cell in result.ok_cells("transfer"):
        deltas[(cell.X, cell.size, cell.seed)] = cell.report.mean_dsc - cell.raw_report.mean_dsc
    lo, hi = min(deltas.values()), max(deltas.values())
    mean = float(np.mean(list(deltas.values())))
    ok = lo >= -0.005 and hi <= 0.05
    report(8, ok, f"post - raw DSC over {len(deltas)} transfer cells: min {lo:+.4f} max {hi:+.4f} mean {mean:+.4f}")


# ----------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path, report):
    cohort_cfg = PhantomConfig(n_patients=6, slices_per_patient=6, height=32, width=32, b_values=(0, 1000),
                               prostate_slice_fraction=0.5)
    plan = ExperimentPlan(
        finetune_sizes=[1, 2],
        x_values=[0.0, 1.0],
        seeds=[0, 1],
        fixed_test_size=2,
        model=ModelConfig(n_levels=2, base_channels=4),
        source_train=TrainConfig(lr=1e-3, epochs=2, batch_size=8, augment=True),
        finetune_train=TrainConfig(lr=1e-3, epochs=2, batch_size=8),
    )
    outputs = []
    for run in ("a", "b"):
        source = generate_phantom_cohort(cohort_cfg, "source")
        target = generate_phantom_cohort(cohort_cfg, "target")
        paths = persist_results(run_sweep(plan, source, target, workers=1), tmp_path / run)
        cells = sorted((tmp_path / run / "cells").iterdir())
        outputs.append([paths["results"].read_bytes(), paths["plan"].read_bytes()] + [c.read_bytes() for c in cells])
    same = outputs[0] == outputs[1]
    report(9, same, f"results.csv, plan.json and {len(outputs[0]) - 2} cell files byte-identical: {same}")
