"""Run the desk-scale phantom sweep and print the seed-averaged curves.

    python scripts/run_phantom_sweep.py --out runs/phantom [--config configs/phantom_sweep.json]
"""

import argparse
import time
from pathlib import Path

import torch

from dwiseg.cli import SweepConfig, _plots
from dwiseg.config import load_config, to_jsonable, write_resolved
from dwiseg.experiment import persist_results, run_sweep, summarize

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "phantom_sweep.json")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--out", default="runs/phantom")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    torch.set_num_threads(1)
    cfg = load_config(SweepConfig, args.config, args.set)
    out = Path(args.out)
    write_resolved(to_jsonable(cfg), out)
    t0 = time.process_time()
    result = run_sweep(cfg.plan, cfg.source.load("source"), cfg.target.load("target"), workers=args.workers)
    cpu = time.process_time() - t0
    persist_results(result, out)
    _plots(result, out, cfg.plot_format, cfg.bar_sizes)

    for name, raw in (("post-processed", False), ("raw", True)):
        print(f"mean DSC ({name}, best X per cell, averaged over seeds)")
        for regime, row in summarize(result, raw=raw).items():
            print(f"  {regime:12s}", "  ".join(f"{s}:{v:.3f}" for s, v in sorted(row.items())))
    print(f"cpu time {cpu / 60:.1f} min, results in {out}")


if __name__ == "__main__":
    main()
