"""Command-line experiment harness.

Subcommands::

    train     --config FILE [--out DIR] [--seeds 0,1,2] [--samples N]
    baseline  --config FILE [--out DIR] [--samples N]
    report    --runs DIR [DIR ...] [--baseline FILE] [--out FILE] [--samples N]
    gradcheck [--config FILE] [--out FILE]

Every table is comma-separated with a header row; every report is JSON.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import io
from .baselines import energy_dp_lookup, execution_optimal, lq_riccati, table_policy_evaluate
from .control import (CURVE_COLUMNS, STREAM_TEST, StackedPolicy, evaluate, gradient_check, relative_metric,
                      stream_rng, train)
from .envs import (EnergyMultiModel, EnergySingleModel, ExecutionModel, LQToy, build_model,
                   execution_relative_cost, make_problem, model_to_dict, random_lq)

log = logging.getLogger("stackedcontrol")

GRADCHECK_BATCH = 4


class CommandError(RuntimeError):
    """A user-facing failure: printed without a traceback, exit status 2."""


def _parse_seeds(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise io.ConfigError(f"--seeds: expected comma-separated integers, got {text!r}") from None
    return seeds


def _load(args) -> io.RunConfig:
    cfg = io.load_config(args.config)
    seeds = _parse_seeds(getattr(args, "seeds", None))
    raw = cfg.to_dict()
    if seeds is not None:
        raw["seeds"] = seeds
    if getattr(args, "samples", None) is not None:
        raw["eval_samples"] = args.samples
    if getattr(args, "out", None) is not None:
        raw["out"] = args.out
    resolved = io.parse_config(raw)
    resolved.source = cfg.source
    return resolved


def _environment_dict(env_spec: dict) -> dict:
    """Fully resolved environment definition used to match runs with baselines."""
    d = model_to_dict(build_model(env_spec))
    if "output_head" in env_spec:
        d["output_head"] = env_spec["output_head"]
    return json.loads(json.dumps(d))


def _aggregate(curves: List[List[dict]]) -> List[dict]:
    rows = []
    for points in zip(*curves):
        row = {"iteration": points[0]["iteration"], "n_seeds": len(points)}
        for col in CURVE_COLUMNS[1:]:
            vals = np.array([p[col] for p in points], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            row[f"{col}_mean"] = float(vals.mean()) if vals.size else float("nan")
            row[f"{col}_std"] = float(vals.std()) if vals.size else float("nan")
        rows.append(row)
    return rows


def cmd_train(args) -> int:
    cfg = _load(args)
    problem = make_problem(cfg.environment, cfg.training.penalty)
    out = io.ensure_dir(cfg.out)
    io.write_json(out / "config.json", cfg.to_dict())
    curves = []
    summary = []
    for seed in cfg.seeds:
        seed_cfg = io.parse_config({**cfg.to_dict(), "seeds": [seed]})
        seed_dir = io.ensure_dir(out / f"seed_{seed}")
        io.write_json(seed_dir / "config.json", seed_cfg.to_dict())
        log.info("training seed %d for %d iterations", seed, seed_cfg.training.iterations)
        result = train(problem, seed_cfg.training)
        io.save_checkpoint(result.policy, seed_dir / "checkpoint.npz")
        io.write_csv(seed_dir / "curve.csv", CURVE_COLUMNS, result.curve)
        io.write_csv(seed_dir / "timings.csv", ("iteration", "wall_seconds"),
                     [{"iteration": r["iteration"], "wall_seconds": w}
                      for r, w in zip(result.curve, result.wall_seconds)])
        report = evaluate(problem, result.policy, cfg.eval_samples, seed)
        payload = {"seed": seed, "kind": cfg.environment["kind"], "evaluation": report.to_dict()}
        io.write_json(seed_dir / "report.json", payload)
        curves.append(result.curve)
        summary.append(payload)
        log.info("seed %d: mean %.6g (se %.3g), max violation %.3g", seed, report.mean, report.stderr,
                 report.max_violation)
    agg = _aggregate(curves)
    cols = ["iteration", "n_seeds"] + [f"{c}_{s}" for c in CURVE_COLUMNS[1:] for s in ("mean", "std")]
    io.write_csv(out / "curve_aggregate.csv", cols, agg)
    io.write_json(out / "summary.json", {"runs": summary})
    print(out)
    return 0


def baseline_report(env_spec: dict, samples: int = 100_000, seed: int = 0, out: Optional[Path] = None) -> dict:
    """Oracle value for an environment, plus any serialized artifacts written to ``out``."""
    model = build_model(env_spec)
    report = {"kind": env_spec["kind"], "environment": _environment_dict(env_spec)}
    if isinstance(model, LQToy):
        sol = lq_riccati(model)
        report.update(oracle="riccati", sense="min", value=sol.expected_cost,
                      gains=[k.tolist() for k in sol.gains])
    elif isinstance(model, ExecutionModel):
        oracle = execution_optimal(model)
        report.update(oracle="backward_induction", sense="min", value=oracle.expected_cost,
                      no_impact_cost=oracle.no_impact_cost,
                      gains=[k.tolist() for k in oracle.value.gains])
    elif isinstance(model, EnergySingleModel):
        table = energy_dp_lookup(model)
        s0 = [model.r0, model.w0, model.p0, model.d0]
        mc_mean, mc_se = table_policy_evaluate(table, model, samples, seed)
        report.update(oracle="dp_lookup_table", sense="max", value=table.root_value(s0),
                      table_policy_mean=mc_mean, table_policy_stderr=mc_se, samples=samples)
        if out is not None:
            io.save_value_table(table, Path(out) / "value_table.npz")
            report["table_file"] = "value_table.npz"
    else:
        report.update(oracle=None, sense="max", value=None,
                      status="no oracle: no benchmark solution exists for multi-device storage")
    return report


def cmd_baseline(args) -> int:
    cfg = _load(args)
    out = io.ensure_dir(cfg.out)
    report = baseline_report(cfg.environment, cfg.eval_samples, cfg.seeds[0], out)
    io.write_json(out / "baseline.json", report)
    if report["oracle"] is None:
        print(report["status"])
    else:
        print(f"{report['oracle']}: {report['value']:.10g}")
    print(out / "baseline.json")
    return 0


def _seed_dirs(paths: Sequence[str]) -> List[Path]:
    dirs = []
    for p in map(Path, paths):
        if (p / "checkpoint.npz").exists():
            dirs.append(p)
        else:
            found = sorted(d for d in p.glob("seed_*") if (d / "checkpoint.npz").exists())
            if not found:
                raise CommandError(f"--runs: no checkpoint under {str(p)!r}")
            dirs.extend(found)
    return dirs


REPORT_COLUMNS = ("run", "kind", "seed", "mean", "stderr", "benchmark", "relative", "max_violation",
                  "n_infeasible", "n_samples")


def report_rows(run_dirs: Sequence[Path], baseline: Optional[dict], samples: Optional[int]) -> List[dict]:
    rows = []
    for d in run_dirs:
        cfg = io.load_config(d / "config.json")
        env = _environment_dict(cfg.environment)
        if baseline is not None and env != baseline["environment"]:
            raise CommandError(f"run {str(d)!r} and the baseline describe different environments")
        problem = make_problem(cfg.environment, cfg.training.penalty)
        policy = io.load_checkpoint(d / "checkpoint.npz")
        seed = cfg.seeds[0]
        n = samples or cfg.eval_samples
        rep = evaluate(problem, policy, noise=problem.sample_noise(n, stream_rng(seed, STREAM_TEST)))
        bench, rel = "", ""
        if baseline is not None and baseline.get("value") is not None:
            bench = baseline["value"]
            if baseline["kind"] == "execution":
                rel = execution_relative_cost(rep.mean, bench, baseline["no_impact_cost"])
            else:
                rel = relative_metric(rep.mean, bench, baseline["sense"])
        rows.append({"run": str(d), "kind": cfg.environment["kind"], "seed": seed, "mean": rep.mean,
                     "stderr": rep.stderr, "benchmark": bench, "relative": rel,
                     "max_violation": rep.max_violation, "n_infeasible": rep.n_infeasible,
                     "n_samples": rep.n_samples})
    return rows


def cmd_report(args) -> int:
    baseline = None
    if args.baseline is not None:
        path = Path(args.baseline)
        if not path.exists():
            raise CommandError(f"--baseline: no such file {str(path)!r}")
        baseline = json.loads(path.read_text())
    rows = report_rows(_seed_dirs(args.runs), baseline, args.samples)
    out = Path(args.out or "report.csv")
    io.write_csv(out, REPORT_COLUMNS, rows)
    for r in rows:
        rel = f" relative {r['relative']:.5f}" if r["relative"] != "" else ""
        print(f"{r['run']}: mean {r['mean']:.6g} ± {r['stderr']:.3g}{rel}")
    print(out)
    return 0


def gradcheck_report(env_spec: Optional[dict], hidden=(4, 4), seed: int = 0, h: float = 1e-6,
                     tolerance: float = 1e-4) -> dict:
    if env_spec is None:
        problem = random_lq(seed, 2, 2, 3, constrained=True)
        kind = "lq"
    else:
        problem = make_problem(env_spec)
        kind = env_spec["kind"]
    policy = StackedPolicy.for_problem(problem, hidden, seed)
    noise = problem.sample_noise(GRADCHECK_BATCH, stream_rng(seed, 1))
    rep = gradient_check(problem, policy, noise, h, tolerance)
    worst = None
    if rep.worst_key is not None:
        worst = {"timestep": rep.worst_key[0], "tensor": rep.worst_key[1]}
    return {"kind": kind, "passed": rep.passed, "worst_error": rep.worst_error, "worst": worst,
            "tolerance": tolerance, "n_tensors": len(rep.errors)}


def cmd_gradcheck(args) -> int:
    if args.config is not None:
        cfg = io.load_config(args.config)
        report = gradcheck_report(cfg.environment, cfg.training.hidden, cfg.seeds[0])
    else:
        report = gradcheck_report(None)
    if args.out is not None:
        io.write_json(args.out, report)
    status = "PASS" if report["passed"] else "FAIL"
    where = ""
    if report["worst"] is not None:
        where = f" at t={report['worst']['timestep']} {report['worst']['tensor']}"
    print(f"{status}: worst relative error {report['worst_error']:.3e}{where} (tolerance {report['tolerance']:g})")
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stackedcontrol", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one policy per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seeds", help="comma-separated seed list, overrides the config")
    p.add_argument("--samples", type=int, help="test samples for the final evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="compute the oracle for the configured environment")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--samples", type=int, help="Monte-Carlo samples for table-policy evaluation")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="score trained runs on fresh test noise")
    p.add_argument("--runs", nargs="+", required=True, help="train output or seed directories")
    p.add_argument("--baseline", help="baseline.json from the baseline command")
    p.add_argument("--out", help="CSV path (default report.csv)")
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="compare backward gradients with finite differences")
    p.add_argument("--config")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (io.ConfigError, CommandError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
