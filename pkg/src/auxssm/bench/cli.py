"""Command-line entry point: ``auxssm run | validate | bench | simulate``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from ..gauss import RngStream
from ..lgssm import backward_sample, kalman_filter, random_model
from ..pit import dnc_sample, prefix_sample
from .models import MODEL_KINDS, ModelSpec, save_data, simulate
from .runner import ConfigError, load_config, resolve_workers, run
from .validate import MUTATIONS, validate

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
DEFAULT_SIZES = [2**k for k in range(6, 15)]
PATH_SAMPLERS = {
    "sequential": lambda m, fr, rng, w: backward_sample(m, fr, rng),
    "prefix": lambda m, fr, rng, w: prefix_sample(m, fr, rng, workers=w),
    "dnc": lambda m, fr, rng, w: dnc_sample(m, fr, rng, workers=w),
}


def _cmd_run(args) -> int:
    config = load_config(args.config)
    summary = run(config)
    rate_key = "acceptance_rate" if "acceptance_rate" in summary else "update_rate"
    print(json.dumps({
        "output_dir": config.output_dir,
        rate_key: summary[rate_key],
        "final_delta": summary["final_delta"],
        "wall_time": summary["wall_time"],
    }, indent=2))
    return EXIT_OK


def _cmd_validate(args) -> int:
    report = validate(args.mutation)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK if report["passed"] else EXIT_FAILED


def _parse_sizes(text: str) -> list:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--sizes must be comma-separated integers: {text!r}") from exc
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes needs positive integers")
    return sizes


def time_sampler(name: str, T: int, d: int = 2, reps: int = 3, workers: int = 1, seed: int = 0) -> float:
    """Median wall time of one posterior path draw (filtering excluded)."""
    model, obs = random_model(np.random.default_rng(seed), T, d, 1)
    fr = kalman_filter(model, obs)
    fn = PATH_SAMPLERS[name]
    times = []
    for r in range(reps):
        t0 = time.perf_counter()
        fn(model, fr, RngStream(seed).child("rep", r), workers)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _cmd_bench(args) -> int:
    names = list(PATH_SAMPLERS) if args.sampler == "all" else [args.sampler]
    sizes = _parse_sizes(args.sizes) if args.sizes else DEFAULT_SIZES
    workers = resolve_workers(args.workers)
    w = csv.writer(sys.stdout)
    w.writerow(["sampler", "T", "d", "workers", "median_seconds"])
    for T in sizes:
        for name in names:
            sec = time_sampler(name, T, args.d, args.reps, workers)
            w.writerow([name, T, args.d, workers, f"{sec:.6g}"])
            sys.stdout.flush()
    return EXIT_OK


def _model_spec(text: str, seed, T, d) -> ModelSpec:
    if text in MODEL_KINDS:
        data = {"kind": text}
    else:
        try:
            with open(text) as fh:
                data = yaml.safe_load(fh)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"--model must be a model kind or a YAML file: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("model file must hold a mapping")
        data = data.get("model", data)
    for key, val in (("seed", seed), ("T", T), ("d", d)):
        if val is not None:
            data[key] = val
    try:
        return ModelSpec(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_simulate(args) -> int:
    spec = _model_spec(args.model, args.seed, args.T, args.d)
    truth, y = simulate(spec)
    save_data(args.out, truth, y)
    print(f"wrote {spec.kind} data (T={spec.T}, d={spec.d}, seed={spec.seed}) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="auxssm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run chains from a YAML config")
    r.add_argument("--config", required=True)
    r.set_defaults(fn=_cmd_run)

    v = sub.add_parser("validate", help="run the oracle suite, exit 1 on any failure")
    v.add_argument("--out", help="also write the JSON report here")
    v.add_argument("--mutation", choices=MUTATIONS, default=None,
                   help="inject a known defect to check the suite catches it")
    v.set_defaults(fn=_cmd_validate)

    b = sub.add_parser("bench", help="timing table (CSV on stdout) for posterior path samplers")
    b.add_argument("--sampler", choices=list(PATH_SAMPLERS) + ["all"], default="all")
    b.add_argument("--sizes", help="comma-separated horizons T (default 64..16384)")
    b.add_argument("--d", type=int, default=2)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--workers", type=int, default=1)
    b.set_defaults(fn=_cmd_bench)

    s = sub.add_parser("simulate", help="simulate a model and write its data CSV")
    s.add_argument("--model", required=True, help=f"one of {', '.join(MODEL_KINDS)} or a YAML model file")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--d", type=int)
    s.set_defaults(fn=_cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
