"""Command-line entry point.

Subcommands bind JSON configs to the harness and analysis operations.
Every subcommand prints its fully-resolved configuration as JSON before
executing, so any invocation is reproducible from its own echo. Exit
codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import secrets
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    emit_curve_csvs,
    emit_probe_csvs,
    emit_summary_tables,
    emit_tables_and_plotdata,
    probe_acceptance,
    probe_investment,
)
from .env import EnvConfig, expected_return_oracle
from .harness import (
    ALGORITHMS,
    SCHEMA_VERSION,
    RunConfig,
    config_from_dict,
    config_to_dict,
    default_ppo_config,
    load_record,
    reevaluate,
    run_grid,
    run_single,
    step_timing_probe,
)

WORKERS_ENV_VAR = "PARTNERBENCH_WORKERS"


class ConfigError(Exception):
    pass


def _draw_seed() -> int:
    return secrets.randbits(63)


def _default_run_doc() -> dict:
    doc = config_to_dict(RunConfig(algorithm="CMAES", p=1.0))
    ppo = default_ppo_config("PPO-MLP")
    doc["ppo"] = config_to_dict(
        RunConfig(algorithm="PPO-MLP", p=1.0, ppo=ppo)
    )["ppo"]
    doc["seed"] = None
    return doc


def _default_grid_doc() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "algorithms": list(ALGORITHMS),
        "p_values": [0.1, 0.2, 0.5, 1.0],
        "runs_per_cell": 10,
        "base_seed": None,
        "episode_budget": 30000,
        "reeval_episodes": 1000,
    }


def _merge(template: dict, incoming: dict, context: str = "") -> None:
    """Overlay ``incoming`` onto ``template`` in place, rejecting keys the
    template does not define."""
    for key, value in incoming.items():
        where = f"{context}.{key}" if context else key
        if key not in template:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(template[key], dict) and isinstance(value, dict):
            _merge(template[key], value, where)
        else:
            template[key] = value


def _parse_set_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_sets(doc: dict, sets: list[str]) -> None:
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = doc
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[keys[-1]] = _parse_set_value(raw)


def _load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed JSON in {path} at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}"
        ) from exc


def _resolve_doc(template: dict, args) -> dict:
    doc = copy.deepcopy(template)
    if args.config:
        incoming = _load_config_file(args.config)
        version = incoming.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {version!r} in {args.config}"
            )
        _merge(doc, incoming)
    _apply_sets(doc, args.set or [])
    return doc


def _resolve_workers(args) -> int:
    if getattr(args, "workers", None) is not None:
        return args.workers
    env_value = os.environ.get(WORKERS_ENV_VAR)
    if env_value is not None:
        try:
            return int(env_value)
        except ValueError as exc:
            raise ConfigError(
                f"{WORKERS_ENV_VAR} must be an integer, got {env_value!r}"
            ) from exc
    return 1


def _echo(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))
    sys.stdout.flush()


def _ensure_seed(doc: dict, args, field: str) -> None:
    if getattr(args, "seed", None) is not None:
        doc[field] = args.seed
    if doc[field] is None:
        doc[field] = _draw_seed()
        print(f"drew {field} {doc[field]}")


def _cmd_run(args) -> int:
    doc = _resolve_doc(_default_run_doc(), args)
    _ensure_seed(doc, args, "seed")
    doc["env"]["p"] = doc["p"]
    if args.out:
        doc["output_dir"] = str(args.out)
    _echo(doc)
    out_dir = Path(args.out) if args.out else None
    cfg = config_from_dict(
        {k: v for k, v in doc.items() if k != "output_dir"}, output_dir=out_dir
    )
    record = run_single(cfg)
    scores = record.reeval_scores
    print(
        f"status={'failed' if record.failed else 'complete'} "
        f"episodes={record.episodes_run} env_steps={record.env_steps} "
        f"wall={record.wall_time:.1f}s "
        + (
            f"reeval_mean={float(np.mean(scores)):.3f} "
            f"reeval_median={float(np.median(scores)):.3f}"
            if scores
            else "reeval=skipped"
        )
    )
    return 0


def _cmd_grid(args) -> int:
    doc = _resolve_doc(_default_grid_doc(), args)
    _ensure_seed(doc, args, "base_seed")
    workers = _resolve_workers(args)
    out_root = Path(args.out) if args.out else Path("runs")
    doc["out_root"] = str(out_root)
    doc["workers"] = workers
    _echo(doc)
    unknown = set(doc["algorithms"]) - set(ALGORITHMS)
    if unknown:
        raise ConfigError(f"unknown algorithms: {sorted(unknown)}")
    if not doc["algorithms"] or not doc["p_values"] or doc["runs_per_cell"] < 1:
        raise ConfigError("grid needs algorithms, p_values, and runs_per_cell >= 1")
    records = run_grid(
        algorithms=doc["algorithms"],
        p_values=doc["p_values"],
        runs_per_cell=doc["runs_per_cell"],
        base_seed=doc["base_seed"],
        episode_budget=doc["episode_budget"],
        out_root=out_root,
        workers=workers,
        reeval_episodes=doc["reeval_episodes"],
    )
    expected = len(doc["algorithms"]) * len(doc["p_values"]) * doc["runs_per_cell"]
    failed = sum(r.failed for r in records)
    print(
        f"grid complete: {len(records)}/{expected} records "
        f"({failed} flagged failed) under {out_root}"
    )
    return 0 if len(records) == expected else 2


def _load_run_dir(path_text: str):
    path = Path(path_text)
    if not (path / "config.json").exists():
        raise ConfigError(f"not a run directory (no config.json): {path}")
    return load_record(path)


def _cmd_reeval(args) -> int:
    record = _load_run_dir(args.run_dir)
    doc = {
        "run_dir": str(args.run_dir),
        "episodes": args.episodes,
        "p_eval": args.p_eval,
        "seed": args.seed,
        "out": str(args.out) if args.out else None,
    }
    if doc["seed"] is None:
        doc["seed"] = _draw_seed()
        print(f"drew seed {doc['seed']}")
    _echo(doc)
    rng = np.random.default_rng(doc["seed"])
    scores = reevaluate(
        record.final_policy,
        record.config.algorithm,
        doc["episodes"],
        doc["p_eval"],
        rng,
    )
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("episode,return\n")
            for i, score in enumerate(scores):
                fh.write(f"{i},{score!r}\n")
        print(f"wrote {out}")
    if scores:
        print(
            f"reeval_mean={float(np.mean(scores)):.3f} "
            f"reeval_median={float(np.median(scores)):.3f} n={len(scores)}"
        )
    return 0


def _cmd_probe(args) -> int:
    record = _load_run_dir(args.run_dir)
    doc = {
        "run_dir": str(args.run_dir),
        "seed": args.seed,
        "out": str(args.out) if args.out else None,
    }
    if doc["seed"] is None:
        doc["seed"] = _draw_seed()
        print(f"drew seed {doc['seed']}")
    _echo(doc)
    rng = np.random.default_rng(doc["seed"])
    algorithm = record.config.algorithm
    investments = probe_investment(record.final_policy, algorithm, rng)
    profile = probe_acceptance(record.final_policy, algorithm, rng)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "probe_investment.csv", "w", encoding="utf-8") as fh:
            fh.write("draw,investment\n")
            for i, x in enumerate(investments):
                fh.write(f"{i},{x!r}\n")
        with open(out / "probe_acceptance.csv", "w", encoding="utf-8") as fh:
            fh.write("partner_investment,accept_probability,mean_investment\n")
            for y, freq in zip(profile.partner_investment, profile.accept_probability):
                fh.write(f"{y!r},{freq!r},{profile.mean_investment!r}\n")
        print(f"wrote probes under {out}")
    print(
        f"investment mean={float(np.mean(investments)):.3f} "
        f"accept@0={profile.accept_probability[0]:.2f} "
        f"accept@15={profile.accept_probability[-1]:.2f} "
        f"mean_investment={profile.mean_investment:.3f}"
    )
    return 0


def _collect_records(runs_root: str):
    root = Path(runs_root)
    if not root.is_dir():
        raise ConfigError(f"runs directory not found: {root}")
    records = []
    for child in sorted(root.iterdir()):
        if (child / "status.json").exists():
            records.append(load_record(child))
    return records


def _cmd_stats(args) -> int:
    doc = {"runs": str(args.runs), "out": str(args.out or args.runs)}
    _echo(doc)
    records = _collect_records(args.runs)
    written = emit_summary_tables(records, doc["out"])
    if args.all_artifacts:
        written = emit_tables_and_plotdata(records, doc["out"])
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_curves(args) -> int:
    doc = {"runs": str(args.runs), "out": str(args.out or args.runs)}
    _echo(doc)
    records = _collect_records(args.runs)
    for path in emit_curve_csvs(records, doc["out"]):
        print(f"wrote {path}")
    return 0


def _cmd_timing(args) -> int:
    doc = {
        "algorithm": args.algorithm,
        "p": args.p,
        "seconds": args.seconds,
    }
    _echo(doc)
    probe = step_timing_probe(args.algorithm, args.p, args.seconds)
    print(
        f"ms_per_step={probe.ms_per_step:.6f} env_steps={probe.env_steps} "
        f"updates={probe.updates}"
    )
    return 0


def _cmd_oracle(args) -> int:
    doc = {"x": args.x, "threshold": args.threshold, "p": args.p}
    _echo(doc)
    value = expected_return_oracle(args.x, args.threshold, EnvConfig(p=args.p))
    print(f"{value!r}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partnerbench",
        description=(
            "Benchmark runner comparing direct policy search and gradient "
            "policy search in a partner-choice environment with rare "
            "reward events."
        ),
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, seed=True, workers=False, out_help="output path"):
        p.add_argument("--config", help="JSON config file")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="dotted-key config override, repeatable",
        )
        if seed:
            p.add_argument("--seed", type=int, help="64-bit seed")
        if workers:
            p.add_argument(
                "--workers",
                type=int,
                help=f"worker pool size (falls back to ${WORKERS_ENV_VAR})",
            )
        p.add_argument("--out", help=out_help)

    p_run = sub.add_parser("run", help="execute one training run")
    common(p_run, out_help="run directory for persisted artifacts")
    p_run.set_defaults(func=_cmd_run)

    p_grid = sub.add_parser("grid", help="execute an (algorithm x p) grid")
    common(p_grid, workers=True, out_help="grid output root (default ./runs)")
    p_grid.set_defaults(func=_cmd_grid)

    p_re = sub.add_parser("reeval", help="re-evaluate a stored policy")
    p_re.add_argument("--run-dir", required=True, help="directory of a stored run")
    p_re.add_argument("--episodes", type=int, default=1000)
    p_re.add_argument("--p-eval", type=float, default=1.0)
    p_re.add_argument("--seed", type=int)
    p_re.add_argument("--out", help="CSV path for per-episode returns")
    p_re.set_defaults(func=_cmd_reeval)

    p_probe = sub.add_parser("probe", help="probe a stored policy's behaviour")
    p_probe.add_argument("--run-dir", required=True)
    p_probe.add_argument("--seed", type=int)
    p_probe.add_argument("--out", help="directory for probe CSVs")
    p_probe.set_defaults(func=_cmd_probe)

    p_stats = sub.add_parser("stats", help="summary and U-test tables")
    p_stats.add_argument("--runs", required=True, help="grid output root")
    p_stats.add_argument("--out", help="table output directory (default --runs)")
    p_stats.add_argument(
        "--all-artifacts",
        action="store_true",
        help="also emit curve/probe CSVs and plot scripts",
    )
    p_stats.set_defaults(func=_cmd_stats)

    p_curves = sub.add_parser("curves", help="aggregated learning-curve CSVs")
    p_curves.add_argument("--runs", required=True, help="grid output root")
    p_curves.add_argument("--out", help="curve output directory (default --runs)")
    p_curves.set_defaults(func=_cmd_curves)

    p_timing = sub.add_parser("timing", help="wall-clock per-step probe")
    p_timing.add_argument("--algorithm", required=True, choices=ALGORITHMS)
    p_timing.add_argument("--p", type=float, required=True)
    p_timing.add_argument("--seconds", type=float, default=2.0)
    p_timing.set_defaults(func=_cmd_timing)

    p_oracle = sub.add_parser("oracle", help="closed-form expected return")
    p_oracle.add_argument("--x", type=float, required=True)
    p_oracle.add_argument("--threshold", type=float, required=True)
    p_oracle.add_argument("--p", type=float, required=True)
    p_oracle.set_defaults(func=_cmd_oracle)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
