"""Command-line entry point: ``tetraloc <command> [options]``.

Commands
    calibrate    fit the pair bias table from synthetic known-bearing samples
    covmap       pan/tilt/range covariance map
    trajectory   moving agents pinging a static observer
    throughput   saturated senders sharing one channel
    dump-frames  hex dump of every frame in one uncontended exchange
    defaults     print the default configuration

Every run writes its outputs, a ``summary.json``, the resolved
``config.ini`` and a ``manifest.json`` (config hash, seed, file list) into
``--out``. Exit status is 0 on success, 1 for configuration errors and 2 for
runtime failures; errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, report, sim
from .config import DEFAULT_SEED, Settings, emit_config, parse_config
from .errors import ConfigError, TetralocError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="config file ([section] / key = value)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. --set noise.range_sigma=0.1")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")

    p = _Parser(prog="tetraloc", description="UWB relative localization simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("calibrate", parents=[common], help="fit pair bias table")
    c = sub.add_parser("covmap", parents=[common], help="covariance map over pan/tilt/range")
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--readings", type=int, help="shortcut for grid.readings_per_cell")
    t = sub.add_parser("trajectory", parents=[common], help="trajectory tracking experiment")
    t.add_argument("--duration", type=float, help="shortcut for trajectory.duration (s)")
    t.add_argument("--rate", type=float, help="shortcut for trajectory.rpp_rate (Hz)")
    t.add_argument("--dump-frames", action="store_true", help="also write frames.csv")
    h = sub.add_parser("throughput", parents=[common], help="saturated channel throughput")
    h.add_argument("--agents", type=int, help="shortcut for throughput.agents")
    h.add_argument("--msg-len", type=int, help="shortcut for throughput.msg_len (bytes)")
    h.add_argument("--duration", type=float, help="shortcut for throughput.duration (s)")
    sub.add_parser("dump-frames", parents=[common], help="frames of one uncontended exchange")
    sub.add_parser("defaults", help="print the default configuration")
    return p


_SHORTCUTS = {
    "readings": "grid.readings_per_cell",
    "agents": "throughput.agents",
    "msg_len": "throughput.msg_len",
    "rate": "trajectory.rpp_rate",
}


def load_settings(args) -> Settings:
    text = ""
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    overrides = list(args.set)
    for attr, key in _SHORTCUTS.items():
        if getattr(args, attr, None) is not None:
            overrides.append(f"{key}={getattr(args, attr)}")
    if getattr(args, "duration", None) is not None:
        overrides.append(f"{args.command}.duration={args.duration}")
    return parse_config(text, overrides)


# commands -------------------------------------------------------------------

def cmd_calibrate(s: Settings, seed: int, out: Path, args) -> tuple[dict, list[str]]:
    run = sim.run_calibration_experiment(s.array(), s.noise(seed), s["calibrate.samples"],
                                         s["calibrate.max_elevation_deg"], s.wavelength)
    (out / "calibration.txt").write_text(run.table.to_text())
    truth = np.asarray(s["noise.bias_true"])
    err = np.angle(np.exp(1j * (np.asarray(run.table.pair_biases) - truth)))
    summary = {
        "samples": len(run.bearings),
        "pair_biases": list(run.table.pair_biases),
        "bias_true": list(truth),
        "max_abs_error_rad": float(np.max(np.abs(err))),
        "residual_rms_rad": run.table.residual_rms,
    }
    return summary, ["calibration.txt"]


def cmd_covmap(s: Settings, seed: int, out: Path, args) -> tuple[dict, list[str]]:
    cfg = s.experiment(seed, s.calibration())
    cells = sim.run_covariance_experiment(cfg, jobs=args.jobs)
    report.write_csv(out / "covmap.csv", report.COVMAP_COLUMNS, report.covmap_rows(cells))
    summary = sim.summarize_covariance(cells)
    summary["covariance_error_space"] = "cartesian"  # cov_* columns use x/y/z position error
    return summary, ["covmap.csv"]


def cmd_trajectory(s: Settings, seed: int, out: Path, args) -> tuple[dict, list[str]]:
    duration = s["trajectory.duration"]
    res = sim.run_trajectory_experiment(
        s.agents(), observer_id=3, duration=duration, rpp_rate=s["trajectory.rpp_rate"],
        node_cfg=s.node_config(), noise=s.noise(seed), estimator=s.estimator(),
        calibration=s.calibration(), array=s.array(), seed=seed, msg_len=s["trajectory.msg_len"],
        record_frames=args.dump_frames, frame_error_rate=s["protocol.frame_error_rate"],
    )
    rows = report.trajectory_rows(res.pings, s["trajectory.lowpass_cutoff_hz"])
    report.write_csv(out / "trajectory.csv", report.TRAJECTORY_COLUMNS, rows)
    files = ["trajectory.csv"]
    if args.dump_frames:
        report.write_csv(out / "frames.csv", report.FRAME_COLUMNS, report.frame_rows(res.network.frames))
        files.append("frames.csv")
    summary = {
        "agents": report.trajectory_summary(rows, duration),
        "collisions": res.network.collisions,
        "transactions": len(res.network.transactions),
        "overlapping_transactions": len(res.network.overlapping_transactions()),
    }
    return summary, files


def cmd_throughput(s: Settings, seed: int, out: Path, args) -> tuple[dict, list[str]]:
    n = s["throughput.agents"]
    res = sim.measure_throughput(n, s["throughput.msg_len"], s["throughput.duration"], s.node_config(),
                                 seed, s.noise(seed), s["protocol.frame_error_rate"])
    summary = {
        "agents": n,
        "senders": n - 1,
        "msg_len": s["throughput.msg_len"],
        "duration_s": res.duration,
        "total_rate_hz": res.total_rate,
        "per_agent_rate_hz": res.per_agent_rate,
        "per_agent_rates_hz": {str(k): v for k, v in res.per_agent_rates.items()},
        "expected_per_agent_rate_hz": sim.CHANNEL_CAPACITY / (n - 1),
        "transactions": res.transactions,
        "min_transaction_ms": res.min_duration_ms,
        "overlapping_transactions": res.overlaps,
    }
    return summary, []


def cmd_dump_frames(s: Settings, seed: int, out: Path, args) -> tuple[dict, list[str]]:
    net = sim.single_exchange(s["trajectory.msg_len"], s.node_config(), seed, s.noise(seed))
    report.write_csv(out / "frames.csv", report.FRAME_COLUMNS, report.frame_rows(net.frames))
    tx = net.transactions[0] if net.transactions else None
    summary = {
        "frames": len(net.frames),
        "outcome": tx.outcome if tx else "none",
        "duration_ms": tx.duration if tx else float("nan"),
    }
    return summary, ["frames.csv"]


COMMANDS = {
    "calibrate": cmd_calibrate,
    "covmap": cmd_covmap,
    "trajectory": cmd_trajectory,
    "throughput": cmd_throughput,
    "dump-frames": cmd_dump_frames,
}


def run(args) -> int:
    if args.command == "defaults":
        sys.stdout.write(emit_config(parse_config("")))
        return 0
    settings = load_settings(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    summary, files = COMMANDS[args.command](settings, args.seed, out, args)
    (out / "config.ini").write_text(emit_config(settings))
    report.write_json(out / "summary.json", summary)
    report.write_json(out / "manifest.json", {
        "command": args.command,
        "seed": args.seed,
        "config_hash": settings.hash(),
        "version": __version__,
        "outputs": files + ["config.ini", "summary.json"],
    })
    print(json.dumps(report._clean(summary), sort_keys=True))
    return 0


def _error(kind: str, exc: Exception) -> None:
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["line"], record["key"] = exc.line, exc.key
    sys.stderr.write(json.dumps(record) + "\n")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        _error("config", exc)
        return 1
    try:
        return run(args)
    except ConfigError as exc:
        _error("config", exc)
        return 1
    except (TetralocError, OSError, ValueError) as exc:
        _error("runtime", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
