"""Baseline adapters vs routed adapters under 60% symmetric noise.

Runs both configs in scripts/configs over five seeds, then prints peak and
last-window accuracy, the peak-to-average gap, and how well each arm fits
the noisy versus the clean training labels at the end of training.

    python scripts/desk_trend.py [--out runs/desk] [--workers 1] [--seeds 0 1 2 3 4]
"""
import argparse
import time
from pathlib import Path

import numpy as np

from clearlab import config as C
from clearlab.cli import format_table, read_summary, run_config

HERE = Path(__file__).resolve().parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seeds", type=int, nargs="+", default=None)
    args = ap.parse_args()
    out = Path(args.out)
    over = {} if args.seeds is None else {"seeds": args.seeds}

    rows, timing = [], {}
    for name in ("baseline_adapter", "clear_adapter"):
        cfg = C.load(HERE / f"{name}.cfg", over)
        t0 = time.perf_counter()
        rows.append(run_config(cfg, out, args.workers))
        timing[cfg.name] = time.perf_counter() - t0
    print(format_table(rows))
    print()
    for r in rows:
        runs = sorted((out / r["name"]).glob("seed*.jsonl"))
        s = [read_summary(p) for p in runs]
        gap = np.mean([x["gap"] for x in s])
        noisy = np.mean([x["final_noisy_acc"] for x in s])
        clean = np.mean([x["final_clean_acc"] for x in s])
        print(f"{r['name']:<16} gap {gap:6.2f}  fits noisy labels {noisy:6.2f}%  "
              f"fits clean labels {clean:6.2f}%  wall {timing[r['name']]:.0f}s")


if __name__ == "__main__":
    main()
