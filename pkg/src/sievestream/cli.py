"""Command-line front end: ``select``, ``simulate``, ``bench`` and ``verify``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 record parse or input error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as cfgmod
from .algorithms import run_selector
from .errors import ConfigError, NumericError, RecordParseError
from .harness import (
    ExperimentConfig,
    divided_select,
    measure_speed,
    report_dict,
    run_rounds,
    speed_trend_violations,
    summarize,
    verify_guarantees,
    write_csv,
    write_manifest,
)
from .records import count_records, iter_records, round_files, write_records
from .simulator import generate_round

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_PARSE, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _load_config(args) -> dict:
    conf = cfgmod.load(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "selector.algorithm": getattr(args, "algorithm", None),
        "selector.k": getattr(args, "k", None),
        "selector.epsilon": getattr(args, "epsilon", None),
        "harness.divide_k": getattr(args, "divide_k", None),
    }
    for key, value in overrides.items():
        if value is not None:
            conf[key] = value
    if getattr(args, "cache", None) is not None:
        conf["harness.cache"] = args.cache == "on"
    return conf


def cmd_select(args) -> int:
    conf = _load_config(args)
    if args.seed is not None:
        conf["selector.seed"] = args.seed
    spec = cfgmod.objective_from(conf)
    sel = cfgmod.selector_from(conf)
    parts = conf.get("harness.divide_k", 1)
    if parts < 1 or sel.k % parts:
        raise ConfigError(f"divide_k={parts} does not divide K={sel.k}")
    cache = conf.get("harness.cache", True)
    if args.input is None:
        raise ConfigError("--input is required")
    if not Path(args.input).exists():
        raise RecordParseError(f"cannot read input {args.input}")
    files = round_files(args.input)
    rounds = []
    for index, path in enumerate(files):
        # records are streamed; only the selector's own storage stays resident
        if parts > 1:
            res, part_sum = divided_select(iter_records(path), count_records(path), spec, sel,
                                           parts, cache=cache)
        else:
            res = run_selector(iter_records(path), spec, sel, cache=cache)
            part_sum = res.value
        rounds.append({
            "round": index,
            "file": str(path),
            "chosen_ids": res.ids,
            "selected_count": len(res.chosen),
            "objective": res.value,
            "objective_parts_sum": part_sum,
            "samples_seen": res.samples_seen,
            "stored_peak": res.stored_peak,
            "distinct_peak": res.distinct_peak,
            "gain_evaluations": res.gain_evaluations,
            "kernel_evaluations": res.kernel_evaluations,
        })
    payload = {
        "algorithm": sel.label,
        "divide_k": parts,
        "config": cfgmod.dumps(conf),
        "chosen_ids": [i for r in rounds for i in r["chosen_ids"]],
        "objective": sum(r["objective"] for r in rounds),
        "rounds": rounds,
    }
    _emit(args.output, payload)
    return EXIT_OK


def _emit(output, payload):
    if output:
        write_manifest(output, payload)
    else:
        json.dump({"format_version": 1, **payload}, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


def cmd_simulate(args) -> int:
    conf = _load_config(args)
    if args.seed is not None:
        conf["simulator.seed"] = args.seed
    world, pec = cfgmod.simulator_from(conf)
    if args.output is None:
        raise ConfigError("--output directory is required")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for r in range(pec.rounds):
        write_records(generate_round(world, pec, r), out / f"round_{r:03d}.jsonl")
    return EXIT_OK


def experiment_from(conf: dict, record_path=None, seed=None) -> ExperimentConfig:
    algorithms = cfgmod.algorithms_from(conf)
    seeds = conf.get("harness.seeds") or [0]
    if seed is not None:
        seeds = [seed]
    common = dict(
        algorithms=algorithms,
        objective=cfgmod.objective_from(conf),
        divide_k=conf.get("harness.divide_k", 1),
        seeds=tuple(seeds),
        cache=conf.get("harness.cache", True),
        timing=conf.get("harness.timing", False),
        rounds=conf.get("harness.rounds"),
    )
    try:
        if record_path is not None:
            return ExperimentConfig(record_path=str(record_path), **common)
        world, pec = cfgmod.simulator_from(conf)
        return ExperimentConfig(world=world, pec=pec, **common)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def cmd_bench(args) -> int:
    conf = _load_config(args)
    if args.iterations is not None:
        conf["harness.iterations"] = args.iterations
    exp = experiment_from(conf, args.input, args.seed)
    if args.output is None:
        raise ConfigError("--output CSV path is required")
    results = run_rounds(exp)
    write_csv(results, args.output)
    payload = {
        "config": cfgmod.dumps(conf),
        "algorithms": {label: summarize(reports) for label, reports in results.items()},
    }
    if "harness.iterations" in conf:
        cells = measure_speed(exp, conf["harness.iterations"])
        payload["speed"] = [asdict(c) for c in cells]
        payload["speed_trend_violations"] = speed_trend_violations(cells)
    write_manifest(Path(args.output).with_suffix(".json"), payload)
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify_guarantees(args.seed or 0, args.instances, fault=args.inject_fault)
    d = report_dict(report)
    for name, ratio in report.min_ratio.items():
        print(f"{name:32s} min ratio {ratio:.6f}")
    print(f"violations: {len(report.violations)}")
    print(f"max log-det error: {report.max_logdet_error:.3e}")
    print(f"max inverse error: {report.max_inverse_error:.3e}")
    if report.worst is not None:
        print("worst case:")
        print(json.dumps(report.worst, indent=2))
    if args.output:
        write_manifest(args.output, d)
    return EXIT_OK if report.ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sievestream", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, output, seed, selector=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--output", help=output)
        p.add_argument("--seed", type=int, help=seed)
        if selector:
            p.add_argument("--algorithm", help="overrides selector.algorithm")
            p.add_argument("--k", type=int, help="overrides selector.k")
            p.add_argument("--epsilon", type=float, help="overrides selector.epsilon")
            p.add_argument("--divide-k", type=int, dest="divide_k",
                           help="split the stream into this many pieces with budget K/n each")
            p.add_argument("--cache", choices=("on", "off"), help="kernel memoization (default on)")

    p = sub.add_parser("select", help="select from a record file (or a directory of rounds)")
    common(p, output="manifest path (default: stdout)", seed="overrides selector.seed")
    p.add_argument("--input", help="record file or directory of round_NNN.jsonl files")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="write simulated rounds as record files")
    common(p, output="directory for round_NNN.jsonl files", seed="overrides simulator.seed",
           selector=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="run the multi-round comparison and write CSV + JSON summary")
    common(p, output="CSV path; the JSON summary goes next to it", seed="run this single repeat seed")
    p.add_argument("--input", help="record file or directory instead of the simulator")
    p.add_argument("--iterations", type=int, help="also measure per-sample latency over this many samples")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="check approximation bounds against exhaustive search")
    p.add_argument("--seed", type=int, help="suite seed (default 0)")
    p.add_argument("--instances", type=int, default=500, help="number of random instances")
    p.add_argument("--output", help="write the JSON report here")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RecordParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
