"""Command-line runner: single configs over seeds, ablation grids, summary tables.

Exit codes: 0 success, 1 config error, 2 run failure, 3 partial grid failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from .data import DataError, Dataset, load_tsv, train_test
from .model import BaseWeights, pretrain_base
from .noise import NoiseError, build_symmetric, train_probe
from .trainer import RunMetrics, run_baseline, run_experiment

log = logging.getLogger("clearlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_PARTIAL = 0, 1, 2, 3
SUMMARY_FIELDS = ["name", "method", "peft", "strategy", "gamma", "consistency_weight", "noise",
                  "rate", "n_seeds", "n_failed", "peak_mean", "peak_std", "avg_mean", "avg_std"]


# ---------------------------------------------------------------------------
# data, base weights, one run


def load_data(dc: C.DataConfig) -> tuple[Dataset, Dataset]:
    if dc.source == "synthetic":
        return train_test(dc.num_classes, dc.n_train, dc.n_test, dc.seq_len, dc.difficulty, dc.seed)
    train = load_tsv(dc.train_path, split_name="train")
    index = {name: i for i, name in enumerate(train.label_names)}
    test = load_tsv(dc.test_path, vocab=train.vocab, label_index=index, split_name="test")
    return train, test


def resolve(cfg: C.ExperimentConfig, train: Dataset) -> C.ExperimentConfig:
    """Fill the data-derived model fields (vocab size, sequence length, classes)."""
    flat = C.flatten(cfg.to_dict())
    flat.update({"model.vocab_size": len(train.vocab), "model.max_len": cfg.data.seq_len + 1,
                 "model.num_classes": train.num_classes})
    resolved = C.from_dict(flat)
    try:
        if resolved.noise.kind == "symmetric":
            build_symmetric(train.num_classes, resolved.noise.rate)
    except NoiseError as exc:
        raise C.ConfigError(f"noise.rate: {exc}") from exc
    return resolved


def _base_key(cfg: C.ExperimentConfig) -> str:
    arch = {k: v for k, v in dataclasses.asdict(cfg.model).items() if k not in ("peft_kind",)}
    blob = json.dumps({"data": dataclasses.asdict(cfg.data), "arch": arch,
                       "pretrain": {k: v for k, v in dataclasses.asdict(cfg.pretrain).items() if k != "cache"}},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def get_base(cfg: C.ExperimentConfig, train: Dataset, cache_dir: Path | None) -> BaseWeights:
    """Masked-token pretraining of the frozen base, cached on disk by its inputs."""
    pc = cfg.pretrain
    path = None if cache_dir is None or not pc.cache else cache_dir / f"base-{_base_key(cfg)}.npz"
    if path is not None and path.exists():
        with np.load(path) as z:
            return BaseWeights(cfg.model, {k: z[k] for k in z.files})
    log.info("pretraining base (%d steps)", pc.steps)
    base = pretrain_base(train, cfg.model, pc.steps, pc.seed, pc.lr, pc.batch_size)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, **base.params)
        tmp.replace(path)
    return base


def execute(cfg: C.ExperimentConfig, train: Dataset, test: Dataset, base: BaseWeights,
            metrics_path: Path | None) -> RunMetrics:
    """One resolved single-seed run; the metrics file opens with the full config."""
    seed = cfg.seeds[0]
    probe = None
    if cfg.noise.kind == "instance" and cfg.noise.rate > 0:
        probe = train_probe(train, cfg.model, base, seed=seed)
    header = {"config": C.flatten(cfg.to_dict())}
    if cfg.method == "baseline":
        return run_baseline(cfg.model, cfg.train, train, test, base, cfg.noise, probe, metrics_path, header)
    return run_experiment(cfg.model, cfg.train, cfg.routing, train, test, base, cfg.noise, probe,
                          metrics_path, header)


def _run_seed(args) -> tuple[int, dict | None, str | None]:
    cfg, metrics_path, cache_dir = args
    try:
        train, test = load_data(cfg.data)
        base = get_base(cfg, train, cache_dir)
        m = execute(cfg, train, test, base, metrics_path)
        return cfg.seeds[0], m.summary, None
    except Exception as exc:  # a failed seed is reported, the sweep continues
        log.exception("seed %d failed", cfg.seeds[0])
        return cfg.seeds[0], None, f"{type(exc).__name__}: {exc}"


def run_config(cfg: C.ExperimentConfig, out: Path, workers: int = 1, cache_dir: Path | None = None) -> dict:
    """Every seed of ``cfg`` into ``out/<name>/``; returns the aggregated summary row."""
    run_dir = out / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    train, _ = load_data(cfg.data)
    resolved = resolve(cfg, train)
    cache_dir = cache_dir or out / ".cache"
    get_base(resolved, train, cache_dir)  # pretrain once before fanning out
    jobs = []
    for seed in resolved.seeds:
        rc = resolved.for_seed(seed)
        (run_dir / f"seed{seed}.cfg").write_text(C.dumps(rc))
        jobs.append((rc, run_dir / f"seed{seed}.jsonl", cache_dir))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    return summarize(resolved, results)


# ---------------------------------------------------------------------------
# aggregation


def _mean_std(xs: list[float]) -> tuple[float, float]:
    if not xs:
        return float("nan"), float("nan")
    a = np.asarray(xs, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def summarize(cfg: C.ExperimentConfig, results) -> dict:
    ok = [s for _, s, err in results if err is None]
    peak = _mean_std([s["peak"] for s in ok])
    avg = _mean_std([s["average"] for s in ok])
    return {"name": cfg.name, "method": cfg.method, "peft": cfg.model.peft_kind,
            "strategy": cfg.routing.strategy if cfg.method == "clear" else "-",
            "gamma": cfg.routing.gamma, "consistency_weight": cfg.train.consistency_weight,
            "noise": cfg.noise.kind, "rate": cfg.noise.rate, "n_seeds": len(ok),
            "n_failed": len(results) - len(ok), "peak_mean": peak[0], "peak_std": peak[1],
            "avg_mean": avg[0], "avg_std": avg[1],
            "errors": {seed: err for seed, _, err in results if err is not None}}


def read_summary(path: str | Path) -> dict:
    """The summary record of a metrics file."""
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if rec.get("type") == "summary":
            return rec
    raise ValueError(f"{path}: no summary record")


def write_summary_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.4f}" if isinstance(r[k], float) else r[k]) for k in SUMMARY_FIELDS})


def format_table(rows: list[dict]) -> str:
    head = f"{'run':<40} {'seeds':>5} {'peak':>14} {'avg':>14}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['name']:<40} {r['n_seeds']:>5} "
                     f"{r['peak_mean']:>7.2f} ±{r['peak_std']:>5.2f} {r['avg_mean']:>7.2f} ±{r['avg_std']:>5.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument handling


def _split_dotted(extra: list[str]) -> dict:
    """``--noise.rate 0.6`` / ``--noise.rate=0.6`` flags into overrides."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise C.ConfigError(f"unrecognised argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise C.ConfigError(f"flag {tok} needs a value")
            i += 1
            val = extra[i]
        out[key] = C.parse_value(val)
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clearlab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run one config over its seed list"),
                           ("ablate", "run every cell of a grid file")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("path", help="config file" if name == "run" else "grid file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="sets")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None, help="output directory (default: the config's 'out')")
    sub.add_parser("defaults", help="print the default config")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "defaults":
        print(C.dumps(C.ExperimentConfig()), end="")
        return EXIT_OK
    try:
        overrides = {**C.parse_overrides(args.sets), **_split_dotted(extra)}
        if args.out is not None:
            overrides["out"] = args.out
        if args.workers < 1:
            raise C.ConfigError("--workers must be >= 1")
        if args.command == "run":
            cells = [({}, C.load(args.path, overrides))]
        else:
            cells = C.load_grid(args.path, overrides)
        out = Path(cells[0][1].out)
        for cell, cfg in cells:
            if cell:
                cfg.name = cfg.name + "__" + "__".join(f"{k}={json.dumps(v)}" for k, v in cell.items())
    except (C.ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    rows = []
    for cell, cfg in cells:
        try:
            rows.append(run_config(cfg, out, args.workers))
        except (C.ConfigError, DataError) as exc:
            if args.command == "run":
                print(f"config error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            rows.append({**summarize(cfg, [(s, None, str(exc)) for s in cfg.seeds])})
    out.mkdir(parents=True, exist_ok=True)
    name = "summary.csv" if args.command == "run" else f"{cells[0][1].name.split('__')[0]}_grid.csv"
    write_summary_csv(rows, out / name)
    print(format_table(rows))
    failed = [r for r in rows if r["n_failed"]]
    for r in failed:
        for seed, err in r["errors"].items():
            print(f"FAILED {r['name']} seed {seed}: {err}", file=sys.stderr)
    if not failed:
        return EXIT_OK
    return EXIT_RUN if args.command == "run" else EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
