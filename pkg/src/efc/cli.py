"""Command-line entry point: ``efc train | efm-spectrum | perturb | ablate | metrics``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from .config import VARIANTS, ConfigError, ExperimentConfig, apply_overrides, config_from_dict, load_config
from .efm import DegenerateSpectrumError, spectrum_report
from .numerics import SeededRng
from .trainer import (
    MetricsTable,
    load_data,
    metrics,
    perturb_tasks,
    prepare_tasks,
    run_experiment,
)

log = logging.getLogger("efc")

RESULTS_SCHEMA = 1
DEFAULT_OUTPUT = "runs"


class UsageError(ValueError):
    pass


def parse_seeds(text: str) -> list[int]:
    """``3``, ``0..4`` (inclusive) or ``0,2,5``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds: cannot parse {text!r}") from None
    if not seeds:
        raise UsageError(f"--seeds: empty seed list {text!r}")
    return seeds


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def output_dir(args) -> Path:
    return Path(args.out or os.environ.get("EFC_OUTPUT_DIR") or DEFAULT_OUTPUT)


def build_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if getattr(args, "cov_policy", None) and not isinstance(args.cov_policy, list):
        overrides.append(f"trainer.cov_policy={args.cov_policy}")
    return apply_overrides(config, overrides).validate()


def curve_csv(table: MetricsTable) -> str:
    """One row per training step: A_step plus the accuracy of every task."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    k = table.steps
    writer.writerow(["step", "A_step"] + [f"task_{i + 1}" for i in range(k)])
    for step in range(1, table.completed() + 1):
        a_step, _ = metrics(table, step)
        row = [step, repr(a_step)]
        row += [repr(float(table.acc[i, step - 1])) if i < step else "" for i in range(k)]
        writer.writerow(row)
    return buf.getvalue()


def _train_one(config_json: str, out: str, checkpoints: bool) -> dict:
    config = config_from_dict(json.loads(config_json))
    out_path = Path(out)
    started = datetime.now(timezone.utc).isoformat()
    tic = time.perf_counter()
    result = run_experiment(config, keep_checkpoints=checkpoints)
    payload = result.to_dict()
    payload["results_schema"] = RESULTS_SCHEMA
    atomic_write(out_path / "results.json", dump_json(payload))
    atomic_write(out_path / "curve.csv", curve_csv(result.table))
    atomic_write(out_path / "config.json", config.to_json() + "\n")
    for state in result.checkpoints:
        save_checkpoint(
            out_path / "checkpoints" / f"task_{state.task}.efc",
            state.model, state.store, state.efms, config.to_json(), state.task,
        )
    # timestamps live apart from the results so those stay byte-deterministic
    atomic_write(out_path / "run_info.json", dump_json({
        "started": started,
        "elapsed_seconds": time.perf_counter() - tic,
        "seed": config.seed,
    }))
    summary = result.summary()
    log.info("seed %d: A_step %.4f A_inc %.4f -> %s", config.seed, summary["A_step"], summary["A_inc"], out_path)
    return summary


def aggregate(summaries: dict[int, dict]) -> dict:
    a_step = np.array([s["A_step"] for s in summaries.values()])
    a_inc = np.array([s["A_inc"] for s in summaries.values()])
    return {
        "seeds": sorted(summaries),
        "per_seed": {str(k): v for k, v in sorted(summaries.items())},
        "A_step_mean": float(a_step.mean()),
        "A_step_std": float(a_step.std()),
        "A_inc_mean": float(a_inc.mean()),
        "A_inc_std": float(a_inc.std()),
    }


def _run_seeds(config: ExperimentConfig, seeds: list[int], out: Path, checkpoints: bool, jobs: int) -> dict[int, dict]:
    jobs_in = []
    for seed in seeds:
        cfg = apply_overrides(config, [f"seed={seed}"])
        jobs_in.append((seed, cfg.to_json(), str(out / f"seed_{seed}")))
    if jobs > 1 and len(jobs_in) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {seed: pool.submit(_train_one, cj, o, checkpoints) for seed, cj, o in jobs_in}
            return {seed: f.result() for seed, f in futures.items()}
    return {seed: _train_one(cj, o, checkpoints) for seed, cj, o in jobs_in}


def cmd_train(args) -> int:
    config = build_config(args)
    out = output_dir(args)
    if args.seeds is None:
        summary = _train_one(config.to_json(), str(out), not args.no_checkpoints)
        print(json.dumps(summary, sort_keys=True))
        return 0
    summaries = _run_seeds(config, parse_seeds(args.seeds), out, not args.no_checkpoints, args.jobs)
    report = aggregate(summaries)
    atomic_write(out / "summary.json", dump_json(report))
    print(f"A_step {report['A_step_mean']:.4f} +- {report['A_step_std']:.4f} over {len(summaries)} seeds")
    return 0


def _load_ckpt(path) -> dict:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None


def _ckpt_config(ckpt: dict) -> ExperimentConfig:
    return config_from_dict(json.loads(ckpt["config_json"]))


def cmd_efm_spectrum(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    if not ckpt["efms"]:
        raise UsageError(f"{args.checkpoint}: checkpoint holds no EFM")
    config = _ckpt_config(ckpt)
    lam = config.trainer.lambda_efm if args.lambda_efm is None else args.lambda_efm
    eta = config.trainer.eta if args.eta is None else args.eta
    reports = [spectrum_report(e, lam, eta) for e in ckpt["efms"]]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", "index", "eigenvalue"])
    for rep in reports:
        for i, mu in enumerate(rep["eigenvalues"]):
            writer.writerow([rep["task"] + 1, i + 1, repr(mu)])
    out = output_dir(args)
    summary = [{k: v for k, v in rep.items() if k != "eigenvalues"} for rep in reports]
    atomic_write(out / "spectrum.csv", buf.getvalue())
    atomic_write(out / "spectrum.json", dump_json({"results_schema": RESULTS_SCHEMA, "tasks": reports}))
    for row in summary:
        print(f"task {row['task'] + 1}: rank {row['rank']} elbow {row['elbow']} "
              f"constraint count {row['constraint_count']} (lambda {lam:g}, eta {eta:g})")
    return 0


def cmd_perturb(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    if not ckpt["efms"]:
        raise UsageError(f"{args.checkpoint}: checkpoint holds no EFM")
    config = _ckpt_config(ckpt)
    _, tasks = prepare_tasks(config, *load_data(config))
    tasks = tasks[: ckpt["task"]]
    efm = ckpt["efms"][-1]
    modes = ["principal", "non-principal"] if args.mode == "both" else [args.mode]
    seeds = parse_seeds(args.seeds)
    out = {"results_schema": RESULTS_SCHEMA, "checkpoint_task": ckpt["task"], "modes": {}}
    for mode in modes:
        runs = [
            perturb_tasks(ckpt["model"], efm, tasks, mode, args.noise_std, SeededRng(s, "perturb")).as_dict()
            for s in seeds
        ]
        drops = np.array([r["accuracy_drop"] for r in runs])
        out["modes"][mode] = {
            "seeds": seeds,
            "runs": runs,
            "accuracy_drop_mean": drops.mean(axis=0).tolist(),
            "accuracy_drop_std": drops.std(axis=0).tolist(),
        }
        pretty = ", ".join(f"{m * 100:+.2f}" for m in drops.mean(axis=0))
        print(f"{mode}: noise {runs[0]['noise_std']:.4g}, accuracy drop per task (points) [{pretty}]")
    atomic_write(output_dir(args) / "perturbation.json", dump_json(out))
    return 0


def ablation_arms(variants: list[str], updates: list[str], policies: list[str]) -> list[dict]:
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown arm {v!r}; choose from {', '.join(VARIANTS)}")
    for u in updates:
        if u not in ("on", "off"):
            raise UsageError(f"--proto-update takes on/off, got {u!r}")
    return [
        {"name": f"{v}/update={u}/cov={p}", "overrides": [
            f"trainer.loss_variant={v}", f"trainer.proto_update={'true' if u == 'on' else 'false'}",
            f"trainer.cov_policy={p}"]}
        for v in variants for u in updates for p in policies
    ]


def cmd_ablate(args) -> int:
    base = build_config(args)
    arms = ablation_arms(
        [a.strip() for a in args.arms.split(",")],
        [u.strip() for u in args.proto_update.split(",")],
        args.cov_policy or [base.trainer.cov_policy],
    )
    seeds = parse_seeds(args.seeds)
    out = output_dir(args)
    rows = []
    for arm in arms:
        config = apply_overrides(base, arm["overrides"])
        slug = arm["name"].replace("/", "_").replace("=", "-").replace(":", "-").replace("+", "p")
        summaries = _run_seeds(config, seeds, out / slug, False, args.jobs)
        row = {"arm": arm["name"], **aggregate(summaries)}
        rows.append(row)
        print(f"{arm['name']:40s} A_step {row['A_step_mean']:.4f} +- {row['A_step_std']:.4f}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["arm", "A_step_mean", "A_step_std", "A_inc_mean", "A_inc_std"])
    for r in rows:
        writer.writerow([r["arm"], repr(r["A_step_mean"]), repr(r["A_step_std"]), repr(r["A_inc_mean"]), repr(r["A_inc_std"])])
    atomic_write(out / "ablation.csv", buf.getvalue())
    atomic_write(out / "ablation.json", dump_json({"results_schema": RESULTS_SCHEMA, "rows": rows}))
    return 0


def cmd_metrics(args) -> int:
    """Recompute A_step / A_inc from stored metrics tables."""
    per_file = {}
    for path in args.results:
        try:
            data = json.loads(Path(path).read_text())
            table = MetricsTable(list(data["class_counts"]))
            rows = data["metrics_table"]
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"{path}: not a results file ({exc})") from None
        table.acc = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64)
        a_step, a_inc = metrics(table, table.completed())
        per_file[str(path)] = {"A_step": a_step, "A_inc": a_inc, "steps": table.completed()}
        print(f"{path}: A_step {a_step:.4f} A_inc {a_inc:.4f}")
    if len(per_file) > 1:
        a = np.array([v["A_step"] for v in per_file.values()])
        b = np.array([v["A_inc"] for v in per_file.values()])
        print(f"mean A_step {a.mean():.4f} +- {a.std():.4f}, A_inc {b.mean():.4f} +- {b.std():.4f}")
    if args.json:
        sys.stdout.write(dump_json(per_file))
    return 0


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    p.add_argument("--out", help="output directory (default $EFC_OUTPUT_DIR or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="efc", description="Elastic feature consolidation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment (or a seed batch)")
    _config_flags(p)
    p.add_argument("--seeds", help="seed batch, e.g. 0..4 or 0,3")
    p.add_argument("--cov-policy", help="full | lowrank:<fraction> | per-task | last-task")
    p.add_argument("--no-checkpoints", action="store_true", help="skip per-task checkpoint files")
    p.add_argument("--jobs", type=int, default=1, help="parallel seed processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("efm-spectrum", help="eigenvalue spectra of the stored EFMs")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.add_argument("--lambda-efm", type=float)
    p.add_argument("--eta", type=float)
    p.set_defaults(func=cmd_efm_spectrum)

    p = sub.add_parser("perturb", help="principal / non-principal feature perturbation")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=["principal", "non-principal", "both"], default="both")
    p.add_argument("--noise-std", type=float, help="default: half the eval feature RMS")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("ablate", help="compare loss variants, update toggle and covariance policies")
    _config_flags(p)
    p.add_argument("--arms", default="EFC,EFM+sym,FD+sym,FD+PR-ACE,finetune")
    p.add_argument("--proto-update", default="on", help="on, off or on,off")
    p.add_argument("--cov-policy", action="append", help="repeatable")
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="recompute A_step / A_inc from results files")
    p.add_argument("results", nargs="+")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError, DegenerateSpectrumError) as exc:
        print(f"efc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
