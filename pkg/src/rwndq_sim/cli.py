"""Command-line front end.

    rwndq-sim run --preset incast_50 --discipline both --seed 7 --out results/

Each run writes ``throughput.csv``, ``drops.csv`` and ``fct.csv`` into a
subdirectory named after its discipline; ``summary.csv`` next to them puts
the runs side by side.  Exit status is 2 for bad flags or configuration and 1
when the simulation trips an internal assertion.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import scenarios
from .metrics import MetricsReport, write_summary_csv
from .rwndq import StateLog
from .simengine.topology import ConfigError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rwndq-sim", description="Packet-level RWNDQ vs drop-tail experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="simulate a preset or scenario file")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", metavar="NAME", help="named experiment (see `presets`)")
    src.add_argument("--scenario", metavar="FILE", type=Path, help="TOML scenario file")
    run.add_argument("--discipline", choices=("fifo", "rwndq", "both"), default="both")
    run.add_argument("--seed", type=int, default=None, help="RNG seed (default: scenario's)")
    length = run.add_mutually_exclusive_group()
    length.add_argument("--duration", type=_positive_float, metavar="SECONDS",
                        help=f"simulated time (presets default to {scenarios.DESK_DURATION_S:g}s)")
    length.add_argument("--full-length", action="store_true", help="run presets at their full 50s length")
    run.add_argument("--out", type=Path, default=Path("results"), metavar="DIR")
    run.add_argument("--trace", action="store_true",
                     help="also write a per-packet log and RWNDQ port state")
    run.add_argument("--jobs", type=int, default=1, metavar="N",
                     help="run disciplines in N worker processes")

    sub.add_parser("presets", help="list the named experiments")
    return parser


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def resolve_scenario(args: argparse.Namespace) -> scenarios.Scenario:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.preset is not None:
        if args.full_length:
            return scenarios.preset(args.preset, **overrides)
        overrides["duration"] = args.duration or scenarios.DESK_DURATION_S
        return scenarios.preset(args.preset, **overrides)
    scn = scenarios.Scenario.load(args.scenario)
    if args.duration is not None:
        overrides["duration"] = args.duration
    return scn.with_overrides(**overrides) if overrides else scn


def run_one(scn: scenarios.Scenario, discipline: str, out: Path, trace: bool) -> MetricsReport:
    """Simulate one discipline and write its CSVs under ``out/discipline``."""
    rundir = out / discipline
    rundir.mkdir(parents=True, exist_ok=True)
    state_log = StateLog() if trace and discipline == "rwndq" else None
    if trace:
        with open(rundir / "trace.txt", "w") as fh:
            report = scenarios.run(scn, discipline, trace=fh, state_log=state_log)
    else:
        report = scenarios.run(scn, discipline)
    if state_log is not None:
        with open(rundir / "port_state.csv", "w", newline="") as fh:
            state_log.write_csv(fh)
    with open(rundir / "throughput.csv", "w", newline="") as fh:
        report.write_throughput_csv(fh)
    with open(rundir / "drops.csv", "w", newline="") as fh:
        report.write_drops_csv(fh)
    with open(rundir / "fct.csv", "w", newline="") as fh:
        report.write_fct_csv(fh)
    return report


def _cmd_run(args: argparse.Namespace) -> int:
    scn = resolve_scenario(args)
    disciplines = ["fifo", "rwndq"] if args.discipline == "both" else [args.discipline]
    args.out.mkdir(parents=True, exist_ok=True)
    if args.jobs > 1 and len(disciplines) > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(disciplines))) as pool:
            futures = [pool.submit(run_one, scn, d, args.out, args.trace) for d in disciplines]
            reports = [f.result() for f in futures]
    else:
        reports = [run_one(scn, d, args.out, args.trace) for d in disciplines]
    with open(args.out / "summary.csv", "w", newline="") as fh:
        write_summary_csv(fh, reports)

    status = EXIT_OK
    for rep in reports:
        print(_headline(rep))
        if rep.flow_control_violations:
            print(f"error: {rep.discipline}: {rep.flow_control_violations} flow-control violations",
                  file=sys.stderr)
            status = EXIT_RUNTIME
    return status


def _headline(rep: MetricsReport) -> str:
    s = rep.summary()
    parts = [
        f"{rep.scenario}/{rep.discipline}",
        f"goodput={s['goodput_mbps']:.1f}Mb/s",
        f"drops={s['total_drops']}",
        f"backlog={s['mean_backlog_bytes_final_half']:.0f}B",
    ]
    if rep.flow_ids:
        parts.append(f"jain={s['jain_index']:.3f}")
    if "fct_p99_ms" in s:
        parts.append(f"fct_p99={s['fct_p99_ms']:.1f}ms")
    parts.append(f"wall={rep.wall_seconds:.1f}s")
    return "  ".join(parts)


def _cmd_presets(args: argparse.Namespace) -> int:
    for name in scenarios.PRESETS:
        scn = scenarios.preset(name)
        print(f"{name:16s} {scn.topology.shape:17s} elephants={scn.n_elephants:<4d} mice={scn.n_mice_clients}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "presets":
            return _cmd_presets(args)
        return _cmd_run(args)
    except (ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        parser.print_usage(sys.stderr)
        print(f"rwndq-sim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TypeError as exc:
        # unknown or mistyped scenario fields surface from the dataclass constructor
        print(f"rwndq-sim: error: bad scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionError:
        print("rwndq-sim: internal assertion failed", file=sys.stderr)
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
