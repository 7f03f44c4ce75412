"""Command-line front end: run experiments, cache oracles, sweep the
transfer weight, and aggregate results for plotting.

Subcommands
-----------
``run``        execute the configured strategy over replicates; writes a
               per-round JSON-lines file, a per-task summary CSV, and a
               run manifest.
``oracle``     compute and cache the exhaustive task optimum for given
               task seeds.
``sweep-beta`` run the transfer strategy across a list of weights with
               shared task seeds; emits per-replicate and aggregated CSVs.
``plot-data``  aggregate a summary CSV into mean and 90% confidence band
               per (strategy, task) or (beta, task).

Replicates execute in worker processes (``MFTBO_WORKERS`` sets the slot
count, default 1) with BLAS threading pinned to one thread, so output
files are byte-identical regardless of the slot count. Result rows are
written in replicate order; an interrupted run leaves a clean prefix that
``--resume`` extends instead of recomputing.

File schemas (every row carries ``schema_version``)
---------------------------------------------------
rounds.jsonl   {schema_version, replicate, task_index, round, p0_dbm,
                alpha, fidelity, cost, y, best_ratio}
summary.csv    schema_version,replicate,task_index,strategy,beta,
                final_ratio,rounds,spent
sweep CSVs     per-replicate: schema_version,beta,replicate,task_index,
                final_ratio,rounds,spent
               aggregated:   schema_version,beta,task_index,mean_ratio,
                ci_low,ci_high,is_best
plot-data CSV  schema_version,<group>,task_index,mean_ratio,ci_low,
                ci_high,n_replicates
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, ExperimentConfig, config_hash,
                     emit_effective, load_config)
from .orchestrator import (CONTINUAL_GIBBON, MFT_MES, OracleCache,
                           SimulationCache, Strategy, TaskSeeds,
                           particle_base_seed, run_sequence)

SCHEMA_VERSION = 1
WORKERS_ENV = "MFTBO_WORKERS"
CI_Z90 = 1.6448536269514722  # two-sided 90% normal quantile

SUMMARY_HEADER = ("schema_version,replicate,task_index,strategy,beta,"
                  "final_ratio,rounds,spent")
SWEEP_HEADER = ("schema_version,beta,replicate,task_index,final_ratio,"
                "rounds,spent")
AGG_HEADER = "schema_version,beta,task_index,mean_ratio,ci_low,ci_high,is_best"


def _n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


def _pin_blas_threads() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def _replicate_job(args):
    """Worker entry: run one replicate of one strategy, return plain rows."""
    cfg_text, replicate, strategy_name, beta, cache_dir = args
    _pin_blas_threads()
    from .config import load_config_text
    cfg = load_config_text(cfg_text)
    strategy = Strategy(strategy_name, beta)
    cache = SimulationCache(cache_dir)
    results = run_sequence(
        cfg.n_tasks, strategy, cfg.topology, cfg.grid(), cfg.cost_model(),
        cfg.arch(), cfg.n_particles, cfg.svgd_config(), cfg.loop_config(),
        cfg.master_seed, replicate=replicate, cache=cache,
        cosine_decay=cfg.svgd_cosine_decay)
    rows = []
    for n, res in enumerate(results, start=1):
        rounds = [{
            "schema_version": SCHEMA_VERSION, "replicate": replicate,
            "task_index": n, "round": rec.t, "p0_dbm": rec.x.p0_dbm,
            "alpha": rec.x.alpha, "fidelity": rec.m, "cost": rec.cost,
            "y": rec.y, "best_ratio": rec.best_ratio_so_far,
        } for rec in res.per_round]
        rows.append({
            "task_index": n, "final_ratio": res.final_ratio,
            "rounds": res.rounds, "spent": res.spent, "round_rows": rounds,
        })
    return replicate, rows


def _run_replicates(cfg: ExperimentConfig, strategy: Strategy,
                    replicates: list[int], cache_dir, on_replicate) -> None:
    """Run replicates in worker slots, delivering results in order."""
    cfg_text = emit_effective(cfg)
    jobs = [(cfg_text, r, strategy.variant, strategy.beta, cache_dir)
            for r in replicates]
    pending: dict[int, list] = {}
    next_idx = 0
    with ProcessPoolExecutor(max_workers=_n_workers()) as pool:
        for replicate, rows in pool.map(_replicate_job, jobs):
            pending[replicate] = rows
            while next_idx < len(replicates) and replicates[next_idx] in pending:
                r = replicates[next_idx]
                on_replicate(r, pending.pop(r))
                next_idx += 1


# ---------------------------------------------------------------------------
# run


def _format_float(v: float) -> str:
    return format(v, ".10g")


def _summary_line(replicate, task_index, strategy, beta, row) -> str:
    return ",".join([
        str(SCHEMA_VERSION), str(replicate), str(task_index),
        strategy, _format_float(beta), _format_float(row["final_ratio"]),
        str(row["rounds"]), _format_float(row["spent"]),
    ])


def _completed_replicates(summary_path: Path, n_tasks: int) -> int:
    """Length of the clean replicate prefix already present in the CSV."""
    if not summary_path.exists():
        return 0
    counts: dict[int, int] = {}
    with open(summary_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            counts[int(row["replicate"])] = counts.get(int(row["replicate"]), 0) + 1
    done = 0
    while counts.get(done, 0) == n_tasks:
        done += 1
    return done


def _truncate_to_prefix(summary_path: Path, rounds_path: Path, keep: int) -> None:
    """Drop rows of replicates >= keep so the files form a clean prefix."""
    if summary_path.exists():
        with open(summary_path, newline="") as fh:
            lines = fh.read().splitlines()
        body = [ln for ln in lines[1:]
                if ln and int(ln.split(",")[1]) < keep]
        summary_path.write_text("\n".join([lines[0]] + body) + "\n")
    if rounds_path.exists():
        kept = []
        with open(rounds_path) as fh:
            for ln in fh:
                if ln.strip() and json.loads(ln)["replicate"] < keep:
                    kept.append(ln.rstrip("\n"))
        rounds_path.write_text("".join(k + "\n" for k in kept))


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, _overrides_from(args))
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "sim_cache"
    summary_path = out_dir / "summary.csv"
    rounds_path = out_dir / "rounds.jsonl"
    manifest_path = out_dir / "manifest.json"

    start = 0
    if args.resume:
        start = _completed_replicates(summary_path, cfg.n_tasks)
        _truncate_to_prefix(summary_path, rounds_path, start)
    elif summary_path.exists():
        summary_path.unlink()
        if rounds_path.exists():
            rounds_path.unlink()
    if start >= cfg.n_replicates:
        print(f"all {cfg.n_replicates} replicates already complete")
        return 0

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "finished_at": None,
        "effective_config": emit_effective(cfg),
        "per_replicate_seeds": {
            str(r): {"particles": particle_base_seed(cfg.master_seed, r),
                     "first_task": TaskSeeds(cfg.master_seed, r, 1).topology_seed()}
            for r in range(cfg.n_replicates)},
        "outputs": [summary_path.name, rounds_path.name],
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))

    new_files = start == 0
    if new_files:
        summary_path.write_text(SUMMARY_HEADER + "\n")
        rounds_path.write_text("")

    strategy = cfg.strategy()

    def write_replicate(replicate, rows):
        with open(summary_path, "a", newline="") as fh:
            for row in rows:
                fh.write(_summary_line(replicate, row["task_index"],
                                       cfg.strategy_name, cfg.beta, row) + "\n")
        with open(rounds_path, "a") as fh:
            for row in rows:
                for rec in row["round_rows"]:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"replicate {replicate}: "
              f"mean ratio {np.mean([r['final_ratio'] for r in rows]):.4f}")

    _run_replicates(cfg, strategy, list(range(start, cfg.n_replicates)),
                    cache_dir, write_replicate)
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"wrote {summary_path} and {rounds_path}")
    return 0


def _overrides_from(args) -> dict[str, str]:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["experiment.master_seed"] = str(args.seed)
    if getattr(args, "replicates", None) is not None:
        overrides["experiment.n_replicates"] = str(args.replicates)
    if getattr(args, "strategy", None) is not None:
        overrides["experiment.strategy"] = args.strategy
    if getattr(args, "beta", None) is not None:
        overrides["experiment.beta"] = str(args.beta)
    return overrides


# ---------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> int:
    try:
        cfg = load_config(args.config, _overrides_from(args))
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    oracle_cache = OracleCache(out_dir / "oracle_cache.json")
    sim_cache = SimulationCache(out_dir / "sim_cache")
    grid = cfg.grid()
    cost = cfg.cost_model()
    s_max = int(cost.cost_of(cost.n_levels))
    for seed in args.task_seed:
        key = oracle_cache.key(seed, cfg.topology, s_max, grid)
        hit = oracle_cache.get(key)
        if hit is not None:
            p0, alpha, f_star = hit
            print(f"seed {seed}: cache hit x*=({p0:g}, {alpha:g}) f*={f_star:.6f}")
            continue
        task = sim_cache.task_for(seed, cfg.topology, s_max, grid)
        x_star, f_star = sim_cache.oracle_for(task, grid, cost)
        oracle_cache.put(key, x_star, f_star)
        print(f"seed {seed}: x*=({x_star.p0_dbm:g}, {x_star.alpha:g}) "
              f"f*={f_star:.6f}")
    return 0


# ---------------------------------------------------------------------------
# beta sweep


def cmd_sweep_beta(args) -> int:
    try:
        cfg = load_config(args.config, _overrides_from(args))
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    betas = [float(b) for b in args.betas.split(",")]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "sim_cache"
    per_rep_path = out_dir / "sweep_summary.csv"
    agg_path = out_dir / "sweep_agg.csv"

    ratios: dict[float, np.ndarray] = {}
    with open(per_rep_path, "w", newline="") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for beta in betas:
            strategy = (Strategy(CONTINUAL_GIBBON) if beta == 0.0
                        else Strategy(MFT_MES, beta))
            mat = np.zeros((cfg.n_replicates, cfg.n_tasks))

            def collect(replicate, rows, beta=beta, mat=mat, fh=fh):
                for row in rows:
                    mat[replicate, row["task_index"] - 1] = row["final_ratio"]
                    fh.write(",".join([
                        str(SCHEMA_VERSION), _format_float(beta),
                        str(replicate), str(row["task_index"]),
                        _format_float(row["final_ratio"]),
                        str(row["rounds"]), _format_float(row["spent"]),
                    ]) + "\n")

            _run_replicates(cfg, strategy, list(range(cfg.n_replicates)),
                            cache_dir, collect)
            ratios[beta] = mat
            print(f"beta {beta:g}: final-task mean ratio "
                  f"{mat[:, -1].mean():.4f}")

    means = {b: ratios[b].mean(axis=0) for b in betas}
    best_beta = {n: max(betas, key=lambda b: means[b][n])
                 for n in range(cfg.n_tasks)}
    with open(agg_path, "w", newline="") as fh:
        fh.write(AGG_HEADER + "\n")
        for beta in betas:
            mat = ratios[beta]
            for n in range(cfg.n_tasks):
                mean = mat[:, n].mean()
                half = (CI_Z90 * mat[:, n].std(ddof=1) / np.sqrt(mat.shape[0])
                        if mat.shape[0] > 1 else 0.0)
                fh.write(",".join([
                    str(SCHEMA_VERSION), _format_float(beta), str(n + 1),
                    _format_float(mean), _format_float(mean - half),
                    _format_float(mean + half),
                    "1" if best_beta[n] == beta else "0",
                ]) + "\n")
    print(f"wrote {per_rep_path} and {agg_path}")
    return 0


# ---------------------------------------------------------------------------
# plot data


def aggregate_rows(rows: list[dict], group_field: str):
    """Mean and 90% normal band of final_ratio per (group, task_index)."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = (row[group_field], int(row["task_index"]))
        groups.setdefault(key, []).append(float(row["final_ratio"]))
    out = []
    for (group, n), values in sorted(groups.items()):
        arr = np.asarray(values)
        half = (CI_Z90 * arr.std(ddof=1) / np.sqrt(len(arr))
                if len(arr) > 1 else 0.0)
        out.append({"group": group, "task_index": n,
                    "mean_ratio": arr.mean(), "ci_low": arr.mean() - half,
                    "ci_high": arr.mean() + half, "n_replicates": len(arr)})
    return out


def cmd_plot_data(args) -> int:
    path = Path(args.results)
    if not path.exists():
        print(f"error: no such results file {path}", file=sys.stderr)
        return 2
    group_field = "strategy" if args.kind == "strategy" else "beta"
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError("results file has no rows")
        for row in rows:
            row["final_ratio"], row["task_index"]  # noqa: B018
            row[group_field]
    except (KeyError, ValueError, csv.Error) as exc:
        print(f"error: malformed results file: {exc}", file=sys.stderr)
        return 2
    aggregated = aggregate_rows(rows, group_field)
    out_path = Path(args.out) if args.out else path.with_name(
        f"plot_{args.kind}.csv")
    with open(out_path, "w", newline="") as fh:
        fh.write(f"schema_version,{group_field},task_index,mean_ratio,"
                 "ci_low,ci_high,n_replicates\n")
        for row in aggregated:
            fh.write(",".join([
                str(SCHEMA_VERSION), str(row["group"]), str(row["task_index"]),
                _format_float(row["mean_ratio"]), _format_float(row["ci_low"]),
                _format_float(row["ci_high"]), str(row["n_replicates"]),
            ]) + "\n")
    print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mftbo",
        description="Continual multi-fidelity Bayesian optimization of "
                    "uplink power control")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, help="override master seed")
        p.add_argument("--replicates", type=int, help="override replicate count")
        p.add_argument("--strategy", choices=["gibbon", "continual-gibbon",
                                              "mft-mes"],
                       help="override strategy")
        p.add_argument("--beta", type=float, help="override transfer weight")
        p.add_argument("--out-dir", default="results", help="output directory")

    p_run = sub.add_parser("run", help="run the configured experiment")
    add_common(p_run)
    p_run.add_argument("--resume", action="store_true",
                       help="extend an interrupted run instead of restarting")
    p_run.set_defaults(func=cmd_run)

    p_oracle = sub.add_parser("oracle", help="compute/cache task optima")
    add_common(p_oracle)
    p_oracle.add_argument("--task-seed", type=int, action="append",
                          required=True, help="task seed (repeatable)")
    p_oracle.set_defaults(func=cmd_oracle)

    p_sweep = sub.add_parser("sweep-beta", help="sweep the transfer weight")
    add_common(p_sweep)
    p_sweep.add_argument("--betas", required=True,
                         help="comma-separated weights, e.g. 0,0.4,1.6")
    p_sweep.set_defaults(func=cmd_sweep_beta)

    p_plot = sub.add_parser("plot-data", help="aggregate results for plotting")
    p_plot.add_argument("--results", required=True, help="summary CSV to read")
    p_plot.add_argument("--kind", choices=["strategy", "beta"],
                        default="strategy")
    p_plot.add_argument("--out", help="output CSV path")
    p_plot.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
