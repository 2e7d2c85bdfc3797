"""Command line front end.

    hotboxsim simulate  -c run.yaml -o out.trace
    hotboxsim thermal   --steps 30:90:5 --dwell 1200 -o staircase.csv
    hotboxsim calibrate [-t targets.txt] -o calibration.txt
    hotboxsim analyze   -t out.trace -o results/ --bins dwell
    hotboxsim codebook  -o codebook.csv

Exit status: 0 success, 2 usage, 3 configuration, 4 calibration,
5 file input/output, 1 anything else raised by the simulator.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .errors import HotboxError, UnknownPayloadPattern, UsageError


@dataclass
class Command:
    name: str
    args: dict = field(default_factory=dict)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hotboxsim", description="HotBox testbed simulator")
    p.add_argument("--calibration", help="calibration file (default: packaged file or $HOTBOXSIM_CALIBRATION)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="run an experiment and write a trace")
    s.add_argument("-c", "--config", required=True, help="YAML experiment config")
    s.add_argument("-o", "--out", required=True, help="trace file to write")

    t = sub.add_parser("thermal", help="thermal-only schedule run, CSV out")
    t.add_argument("--steps", default="30:90:5",
                   help="targets as start:stop:step or a comma list (default 30:90:5)")
    t.add_argument("--dwell", type=float, default=1200.0, help="dwell seconds per step")
    t.add_argument("--start", type=float, default=30.0, help="initial chamber temperature")
    t.add_argument("--dt", type=float, default=0.5)
    t.add_argument("-o", "--out", required=True)

    c = sub.add_parser("calibrate", help="search link constants and write a calibration file")
    c.add_argument("-t", "--targets", help="targets file (key = value); defaults built in")
    c.add_argument("-o", "--out", required=True)

    a = sub.add_parser("analyze", help="statistics from a trace")
    a.add_argument("-t", "--trace", required=True)
    a.add_argument("-o", "--out", required=True, help="output directory")
    a.add_argument("--bins", default="dwell", help="'dwell' or a bin width in seconds")
    a.add_argument("--include-transitional", action="store_true")

    k = sub.add_parser("codebook", help="dump the chip tables as CSV")
    k.add_argument("-o", "--out", required=True)
    k.add_argument("--msk", action="store_true", help="dump the MSK view instead")
    return p


def parse_args(argv: Optional[List[str]] = None) -> Command:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        raise UsageError(f"hotboxsim: a command is required\n\n{parser.format_help()}")
    args = vars(ns)
    name = args.pop("command")
    if name == "analyze" and args["bins"] != "dwell":
        try:
            width = float(args["bins"])
        except ValueError:
            raise UsageError(f"--bins must be 'dwell' or seconds, got {args['bins']!r}") from None
        if width <= 0:
            raise UsageError("--bins width must be positive")
        args["bins"] = width
    return Command(name, args)


def _parse_steps(spec: str) -> List[float]:
    try:
        if ":" in spec:
            start, stop, step = (float(x) for x in spec.split(":"))
            n = int(round((stop - start) / step))
            return [start + k * step for k in range(n + 1)]
        return [float(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse --steps {spec!r}") from None


def _calibration(args):
    from .impairments import load_calibration
    return load_calibration(args.get("calibration"))


def execute(cmd: Command) -> int:
    a = cmd.args
    if cmd.name == "simulate":
        from .orchestrator import load_config, run_experiment, write_trace
        cal = _calibration(a)
        config = load_config(a["config"], cal)
        write_trace(run_experiment(config, cal), a["out"])
    elif cmd.name == "thermal":
        from .thermal import PlantParams, ScheduleStep, ThermalState, run_schedule
        cal = _calibration(a)
        steps = [ScheduleStep(t, a["dwell"]) for t in _parse_steps(a["steps"])]
        if not steps:
            raise UsageError("no schedule steps given")
        run = run_schedule(ThermalState.at_rest(a["start"], cal.env_temp), steps,
                           PlantParams.from_calibration(cal), a["dt"])
        run.to_csv(a["out"])
    elif cmd.name == "calibrate":
        from .fileio import atomic_write_text
        from .impairments import Calibration, CalibrationTargets, calibrate_defaults
        targets = CalibrationTargets()
        if a.get("targets"):
            try:
                text = Path(a["targets"]).read_text()
            except OSError as exc:
                from .errors import IoError
                raise IoError(f"cannot read targets {a['targets']}: {exc}") from exc
            targets = CalibrationTargets.from_text(text, a["targets"])
        base = _calibration(a) if a.get("calibration") else Calibration()
        *_, cal = calibrate_defaults(targets, base, progress=lambda m: print(m, file=sys.stderr))
        atomic_write_text(a["out"], cal.to_text())
    elif cmd.name == "analyze":
        from . import analysis
        from .orchestrator import DIRECTIONS, read_trace
        trace = read_trace(a["trace"])
        if not a["include_transitional"]:
            trace = trace.select()
        outputs = {"bit_histogram.csv": analysis.to_csv_text(analysis.per_bit_histogram(trace)),
                   "link_summary.csv": analysis.to_csv_text(analysis.link_summary(trace, a["bins"], True))}
        for d, name in enumerate(DIRECTIONS):
            sub = trace.select(direction=d, include_transitional=True)
            tag = name.replace("->", "to")
            outputs[f"link_summary_{tag}.csv"] = analysis.to_csv_text(
                analysis.link_summary(sub, a["bins"], True))
            outputs[f"bit_histogram_{tag}.csv"] = analysis.to_csv_text(analysis.per_bit_histogram(sub))
        try:
            outputs["nibble_stats.csv"] = analysis.to_csv_text(analysis.nibble_stats(trace))
        except UnknownPayloadPattern as exc:
            print(f"hotboxsim: skipping nibble statistics: {exc}", file=sys.stderr)
        from .fileio import atomic_write_text
        for fname, text in outputs.items():
            atomic_write_text(Path(a["out"]) / fname, text)
    elif cmd.name == "codebook":
        from .fileio import atomic_write_text
        from .phy import build_codebook
        cb = build_codebook()
        table = cb.msk_entries if a["msk"] else cb.entries
        lines = ["nibble," + ",".join(f"c{k}" for k in range(32))]
        lines += [f"0x{n:X}," + ",".join(str(int(c)) for c in row) for n, row in enumerate(table)]
        atomic_write_text(a["out"], "\n".join(lines) + "\n")
    else:  # pragma: no cover - argparse restricts the choices
        raise UsageError(f"unknown command {cmd.name}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return execute(parse_args(argv))
    except HotboxError as exc:
        print(f"hotboxsim: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
