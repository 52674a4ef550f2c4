"""Command-line driver: ``nelson-embed run | list | describe``.

Exit codes: 0 success, 2 invalid config (schema or expression syntax),
3 numerical failure inside a module.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import platform
import sys
from importlib import metadata

import numpy as np
import scipy

from .errors import ConfigInvalid
from .experiments import (
    ExperimentError,
    config_hash,
    describe,
    expression_hashes,
    list_experiments,
    run_experiment,
    SUMMARIES,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _clean(obj):
    """Replace non-finite floats by None so the report is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def run(config_path, out=None, seed=None, workers=None, stream=None) -> int:
    """Run one experiment and write ``report.json``, CSV files and ``manifest.json``."""
    stream = stream or sys.stderr
    try:
        config = load_config(config_path)
        if seed is not None:
            if not isinstance(config, dict):
                raise ConfigInvalid("config must be a JSON object")
            config = dict(config, seed=seed)
        result = run_experiment(config, workers=workers)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=stream)
        return EXIT_CONFIG
    except ExperimentError as exc:
        if exc.is_config_error:
            print(f"config error in {exc.operation}: {exc.error}", file=stream)
            return EXIT_CONFIG
        print(f"numerical failure in {exc.operation}: {type(exc.error).__name__}: {exc.error}", file=stream)
        return EXIT_NUMERIC
    out = out or config.get("output") or os.path.join("nelson-out", config["kind"])
    os.makedirs(out, exist_ok=True)
    for name, writer in sorted(result.files.items()):
        writer(os.path.join(out, name))
    chash = config_hash(config)
    report = {
        "kind": config["kind"],
        "config_hash": chash,
        "expression_hashes": expression_hashes(config),
        "seed": config.get("seed", 0),
        "files": sorted(result.files),
        "results": result.results,
    }
    _write_json(os.path.join(out, "report.json"), report)
    manifest = {
        "config_hash": chash,
        "config": config,
        "seed": config.get("seed", 0),
        "workers": workers,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "versions": {"artifact": _version(), "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    print(f"{config['kind']}: wrote {len(result.files) + 2} files to {out}", file=stream)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nelson-embed", description="Stochastic embedding experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (overrides the config)")
    p_run.add_argument("--seed", type=int, help="seed override")
    p_run.add_argument("--workers", type=int, help="simulation worker threads")
    sub.add_parser("list", help="list experiment kinds")
    p_desc = sub.add_parser("describe", help="print the config schema of a kind")
    p_desc.add_argument("kind")
    args = parser.parse_args(argv)
    if args.command == "list":
        for kind in list_experiments():
            print(f"{kind:18s} {SUMMARIES[kind]}")
        return EXIT_OK
    if args.command == "describe":
        try:
            print(describe(args.kind))
        except ConfigInvalid as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be positive")
    return run(args.config, args.out, args.seed, args.workers)


if __name__ == "__main__":
    sys.exit(main())
