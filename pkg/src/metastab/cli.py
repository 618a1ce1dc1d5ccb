"""Command line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical
failure. Failures print one JSON line to standard error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, MetastabError, NumericalError
from .inducing import induce, write_cylinders_csv, write_orbit_csv
from .lab import (ExperimentConfig, Lab, load_config_file, run_asymptotics, run_convergence,
                  run_graph, run_montecarlo, run_ratio)
from .map_core import MapParams, build_map

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

COMMANDS = ("converge", "ratio", "asymptotics", "mc", "graph", "dump-map", "dump-cylinders")


def _schedule(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad epsilon schedule {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha", type=float)
    common.add_argument("--eps", type=float, dest="epsilon")
    common.add_argument("--eps-schedule", type=_schedule, dest="eps_schedule",
                        help="comma separated, strictly decreasing")
    common.add_argument("--grid", type=int, dest="grid_m", help="cells per half of Delta")
    common.add_argument("--cylinders", type=int, dest="cylinder_N")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="output_dir")
    common.add_argument("--config", type=Path, help="flat TOML file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="metastab", description="Metastable intermittent map experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def resolve_config(ns: argparse.Namespace) -> ExperimentConfig:
    data = load_config_file(ns.config) if ns.config is not None else {}
    for key in ("alpha", "epsilon", "eps_schedule", "grid_m", "cylinder_N", "seed", "output_dir"):
        v = getattr(ns, key)
        if v is not None:
            data[key] = v
    return ExperimentConfig.from_mapping(data)


def _error_line(kind: str, message: str, code: int) -> None:
    print(json.dumps({"status": "error", "kind": kind, "exit_code": code, "message": message}),
          file=sys.stderr)


def _failed_rows(rows) -> int:
    bad = [r for r in rows if r.status != "ok"]
    for r in bad:
        _error_line("RowFailure", f"epsilon={r.epsilon!r}: {r.status}", EXIT_NUMERICAL)
    return EXIT_NUMERICAL if bad else EXIT_OK


def dispatch(command: str, cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    if command == "converge":
        return _failed_rows(run_convergence(cfg, out=out))
    if command == "ratio":
        rows, _ = run_ratio(cfg, out=out)
        return _failed_rows(rows)
    if command == "asymptotics":
        run_asymptotics(cfg, out=out)
        return EXIT_OK
    if command == "mc":
        run_montecarlo(cfg, lab=Lab(cfg), out=out)
        return EXIT_OK
    if command == "graph":
        _, rep = run_graph(cfg, out=out)
        sys.stdout.write(rep.text())
        return EXIT_OK
    model = build_map(MapParams(cfg.alpha, cfg.epsilon))
    out.mkdir(parents=True, exist_ok=True)
    if command == "dump-map":
        rows = model.branch_table()
        with open(out / "map_branches.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(rows[0]))
            for r in rows:
                w.writerow([v if isinstance(v, str) else repr(float(v)) for v in r.values()])
        return EXIT_OK
    im = induce(model, cfg.cylinder_N)
    write_cylinders_csv(im, out / "cylinders.csv")
    write_orbit_csv(im.orbit, out / "orbit.csv")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(ns)
        return dispatch(ns.command, cfg)
    except ConfigError as exc:
        _error_line(type(exc).__name__, str(exc), EXIT_CONFIG)
        return EXIT_CONFIG
    except NumericalError as exc:
        _error_line(type(exc).__name__, str(exc), EXIT_NUMERICAL)
        return EXIT_NUMERICAL
    except MetastabError as exc:
        # domain errors raised by map or inducing parameters
        _error_line(type(exc).__name__, str(exc), EXIT_CONFIG)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
