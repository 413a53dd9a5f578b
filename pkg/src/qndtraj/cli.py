"""Command-line front end.

``qndtraj run`` executes a configured experiment and writes
``summary.json`` and ``report.json``; ``qndtraj replay`` reruns the
population filter on a stored trajectory CSV.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, artifacts
from .errors import DegenerateConditioning, GridMismatch, InsufficientWindow, NumericalError
from .experiments import Experiment, load_config, run_experiment, write_filter_csv
from .filter import FilterRun, filter_q_diag
from .model import DegenerateRate, ModelError, QndModel
from .modelfile import ConfigError, load_model

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_STATISTICAL = 4
EXIT_SCHEMA = 5
EXIT_DEGENERATE = 6
EXIT_ANALYSIS = 7

EXIT_HELP = """\
exit codes:
  0  every applicable test passed (or the run completed)
  1  unexpected internal error
  2  configuration or model file error (message names the line)
  3  numerical guard tripped (step too large, invalid state, degenerate filter)
  4  a statistical test failed
  5  artifact schema or grid mismatch (malformed CSV, wrong time step)
  6  degenerate rate or conditioning (theta(i|gamma) = 0 for the requested pointer)
  7  analysis precondition failed (too many unresolved paths, empty cell, short fit window)
"""

# order matters: subclasses before their bases
_ERROR_CODES = (
    (ConfigError, EXIT_CONFIG),
    (NumericalError, EXIT_NUMERICAL),
    (artifacts.SchemaError, EXIT_SCHEMA),
    (GridMismatch, EXIT_SCHEMA),
    (DegenerateRate, EXIT_DEGENERATE),
    (DegenerateConditioning, EXIT_DEGENERATE),
    (analysis.TooManyUnresolved, EXIT_ANALYSIS),
    (analysis.EmptyCell, EXIT_ANALYSIS),
    (analysis.NoExtinctionChannels, EXIT_ANALYSIS),
    (InsufficientWindow, EXIT_ANALYSIS),
    (ModelError, EXIT_CONFIG),
)

log = logging.getLogger("qndtraj")


def exit_code_for(exc: BaseException) -> int:
    for cls, code in _ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return EXIT_ERROR


def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qndtraj",
        description="Monte Carlo simulation of continuously monitored QND measurements.",
        epilog=EXIT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file", epilog=EXIT_HELP,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("--config", required=True, type=Path, help="model + [run] config file")
    run.add_argument("--experiment", choices=[e.value for e in Experiment], help="override the configured experiment")
    run.add_argument("--seed", type=_seed, help="base seed (unsigned 64-bit)")
    run.add_argument("--workers", type=int, help="worker processes; results do not depend on it")
    run.add_argument("--out", type=Path, help="output directory")
    run.add_argument("--stride", type=int, help="store every K-th step")
    run.add_argument("--save-trajectories", action="store_true", default=None,
                     help="write one CSV per trajectory")

    rep = sub.add_parser("replay", help="rerun the filter on a stored trajectory CSV", epilog=EXIT_HELP,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    rep.add_argument("trajectory", type=Path, help="trajectory CSV written with stride 1")
    rep.add_argument("model", type=Path, help="model file")
    rep.add_argument("--qtilde0", type=_vector, help="filter initial populations (default: uniform)")
    rep.add_argument("--out", type=Path, default=Path("replay.csv"), help="filter CSV to write")
    return parser


def cmd_run(args) -> int:
    overrides = {
        "experiment": args.experiment, "seed": args.seed, "workers": args.workers,
        "out": args.out, "stride": args.stride, "save_trajectories": args.save_trajectories,
    }
    cfg = load_config(args.config, overrides)
    log.info("running %s: N=%d T=%g dt=%g seed=%d", cfg.experiment.value, cfg.N, cfg.T, cfg.dt, cfg.seed)
    passed = run_experiment(cfg)
    print(f"{cfg.experiment.value}: {'pass' if passed else 'FAIL'} -> {cfg.out / 'report.json'}")
    return EXIT_OK if passed else EXIT_STATISTICAL


def replay(trajectory, model_path, q_tilde0=None, out=Path("replay.csv")) -> FilterRun:
    """Filter the record stored in ``trajectory`` and write ``t,qtilde_*,trace_distance``."""
    model = load_model(model_path)
    if not isinstance(model, QndModel):
        raise ConfigError("replay needs a diagonal (QND) model", None, str(model_path))
    t, q, record = artifacts.read_record(trajectory, model.dim, model.n_diffusive, model.n_counting)
    if q_tilde0 is None:
        q_tilde0 = np.full(model.dim, 1.0 / model.dim)
    q_tilde0 = np.asarray(q_tilde0, dtype=float)
    if q_tilde0.size != model.dim:
        raise ConfigError(f"qtilde0 has {q_tilde0.size} entries, model dim is {model.dim}")
    series = filter_q_diag(model, record, q_tilde0, record.dt)
    run = FilterRun(q[0].copy(), q_tilde0, t, q, series.q, series.clips)
    write_filter_csv(out, run)
    return run


def cmd_replay(args) -> int:
    run = replay(args.trajectory, args.model, args.qtilde0, args.out)
    print(f"replay: final trace distance {run.trace_distance[-1]:.3g} -> {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_replay(args)
    except Exception as exc:  # map to documented exit codes
        code = exit_code_for(exc)
        if code == EXIT_ERROR:
            raise
        print(f"qndtraj: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
