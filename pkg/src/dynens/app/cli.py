"""Command-line front end.

dynens run CONFIG       run an ensemble from a YAML configuration
dynens validate CONFIG  check a configuration and report what it resolves to
dynens replay-metrics HISTORY  summarize a dumped history table
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time

from ..history import History, HistoryError
from ..runtime import EnsembleError, run_ensemble
from .config import ConfigError, load_config

HISTORY_FILENAME = "history.tsv"


def _add_override_flags(parser):
    parser.add_argument("--nworkers", type=int, metavar="N",
                        help="override ensemble.nworkers")
    parser.add_argument("--comms", choices=("local", "gen_on_manager"),
                        help="override ensemble.comms")
    parser.add_argument("--platform", metavar="NAME",
                        help="override the platform name")
    parser.add_argument("--inventory", metavar="PATH",
                        help="node inventory file, overriding the document")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="override ensemble.seed")
    parser.add_argument("--ensemble-dir", metavar="DIR",
                        help="override ensemble.ensemble_dir")


def _load(args, dry_run=False):
    return load_config(
        args.config,
        nworkers=args.nworkers,
        comms=args.comms,
        platform=args.platform,
        inventory_path=args.inventory,
        seed=args.seed,
        ensemble_dir=args.ensemble_dir,
        dry_run=dry_run,
    )


def _best_returned(history):
    best = None
    for rec in history:
        if rec.returned and not math.isnan(rec.f):
            if best is None or rec.f < best.f:
                best = rec
    return best


def _summarize(history):
    returned = sum(1 for r in history if r.returned)
    killed = sum(1 for r in history if r.kill_sent)
    failed = sum(1 for r in history
                 if r.returned and math.isnan(r.f) and not r.kill_sent)
    lines = [
        f"evaluations: {len(history)} generated, {returned} returned",
    ]
    if killed:
        lines.append(f"killed: {killed}")
    if failed:
        lines.append(f"failed: {failed}")
    best = _best_returned(history)
    if best is not None:
        coords = ", ".join(repr(v) for v in best.x.tolist())
        lines.append(f"best: f={best.f!r} at x=[{coords}] (sim {best.sim_id})")
    return lines


def _cmd_run(args):
    try:
        cfg = _load(args, dry_run=args.dry_run)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    start = time.perf_counter()
    try:
        history, flag = run_ensemble(cfg.run, cfg.gen_fn, cfg.sim_fn,
                                     alloc=cfg.make_alloc())
    except (EnsembleError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - start
    print(f"completed: {flag}")
    for line in _summarize(history):
        print(line)
    print(f"wall time: {elapsed:.2f}s")
    print(f"history: {os.path.join(cfg.run.ensemble_dir, HISTORY_FILENAME)}")
    return 0


def _cmd_validate(args):
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run = cfg.run
    print(f"{args.config}: ok")
    print(f"gen: {cfg.gen_name} "
          f"({'persistent' if cfg.persistent else 'one-shot'}), "
          f"sim: {cfg.sim_name}, alloc: {cfg.alloc_name}"
          f"{' (async)' if cfg.async_mode else ''}")
    print(f"nworkers: {run.nworkers}, comms: {run.comms}, "
          f"n_dims: {run.n_dims}, seed: {run.seed}")
    crit = run.exit_criteria
    parts = []
    if crit.sim_max is not None:
        parts.append(f"sim_max={crit.sim_max}")
    if crit.gen_max is not None:
        parts.append(f"gen_max={crit.gen_max}")
    if crit.wallclock_max is not None:
        parts.append(f"wallclock_max={crit.wallclock_max}")
    if crit.stop_val is not None:
        parts.append(f"stop_val={crit.stop_val[1]}")
    print(f"exit: {', '.join(parts)}")
    if run.platform is not None:
        print(f"platform: {run.platform.name} ({run.platform.mpi_runner})")
    if run.inventory is not None:
        nodes = run.inventory.nodes
        gpus = sum(n.gpus for n in nodes)
        print(f"inventory: {len(nodes)} node(s), "
              f"{sum(n.cores for n in nodes)} cores, {gpus} gpus")
    return 0


def _cmd_replay_metrics(args):
    try:
        history = History.load(args.history)
    except (HistoryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for line in _summarize(history):
        print(line)
    times = [r.returned_time - r.given_time for r in history
             if r.returned_time is not None and r.given_time is not None]
    if times:
        times.sort()
        print(f"sim time: median {times[len(times) // 2]:.3f}s, "
              f"max {times[-1]:.3f}s")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dynens",
        description="Run dynamic ensembles of simulations steered by a "
                    "generator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an ensemble from a configuration")
    p_run.add_argument("config", help="YAML configuration file")
    _add_override_flags(p_run)
    p_run.add_argument("--dry-run", action="store_true",
                       help="print launch lines instead of executing apps")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="validate a configuration")
    p_val.add_argument("config", help="YAML configuration file")
    _add_override_flags(p_val)
    p_val.set_defaults(func=_cmd_validate)

    p_rep = sub.add_parser("replay-metrics",
                           help="summarize a dumped history table")
    p_rep.add_argument("history", help="history .tsv written by a run")
    p_rep.set_defaults(func=_cmd_replay_metrics)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
