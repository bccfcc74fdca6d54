"""Command-line interface: ``qlidar {simulate,correlate,scan,adaptive,report}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, ScenarioConfig, load_config
from .core import build_hot_pixel_mask, zero_hot_pixels
from .correlation import gamma_plus, peak_stats, remove_crosstalk
from .io import FrameFileError, export_pgm, read_frame_stack, write_frame_stack
from .ranging import depth_report
from .runner import (correlation_summary, read_edges, report_text, run_adaptive, run_scenario, write_report)
from .sim import ScanDataset, acquire_dark_stack, acquire_stack


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.frames is not None:
        if args.frames < 2:
            raise ConfigError("acquisition.n_frames", "--frames must be at least 2")
        changes["n_frames"] = args.frames
    if args.method is not None:
        changes["pipeline"] = dataclasses.replace(cfg.pipeline, method=args.method)
    return cfg.replace(**changes) if changes else cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stack_name(index: int) -> str:
    return f"gate_{index:05d}.qlfs"


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out(args, "stacks")
    gates = args.gate if args.gate else range(cfg.schedule.count)
    dark = acquire_dark_stack(cfg.scene, cfg.detector, cfg.pipeline.dark_frames, cfg.seed)
    write_frame_stack(dark, out / "dark.qlfs")
    for i in gates:
        if not 0 <= i < cfg.schedule.count:
            raise ConfigError("schedule.count", f"gate {i} outside the {cfg.schedule.count}-gate schedule")
        stack = acquire_stack(cfg.scene, cfg.detector, cfg.schedule.gate(i), cfg.n_frames, cfg.seed, gate_index=i)
        write_frame_stack(stack, out / _stack_name(i))
    print(f"wrote {len(gates)} stacks of {cfg.n_frames} frames and a dark stack to {out}")
    return 0


def cmd_correlate(args) -> int:
    stack = read_frame_stack(args.stack)
    if args.dark:
        stack = zero_hot_pixels(stack, build_hot_pixel_mask(read_frame_stack(args.dark)))
    method = args.method or "fft"
    g = remove_crosstalk(gamma_plus(stack, method), stack, include_self=True)
    st = peak_stats(g)
    summary = correlation_summary(stack, st)
    if args.out:
        out = _out(args, ".")
        export_pgm(g, out / "gamma_plus.pgm")
        (out / "correlation.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"peak {st.peak_value:.4g} at {st.peak_location}, background std {st.background_std:.4g}, SNR {st.snr:.2f}")
    return 0


def _recorded_scan(cfg: ScenarioConfig, folder: Path) -> ScanDataset:
    missing = [i for i in range(cfg.schedule.count) if not (folder / _stack_name(i)).exists()]
    if missing:
        raise FrameFileError(f"{folder} lacks stacks for {len(missing)} gates (first: {missing[0]})")
    return ScanDataset(cfg.schedule, lambda i: read_frame_stack(folder / _stack_name(i)), cfg.n_frames)


def cmd_scan(args) -> int:
    cfg = _config(args)
    out = _out(args, f"run-{cfg.name}")
    dataset = _recorded_scan(cfg, Path(args.stacks)) if args.stacks else None
    run = run_scenario(cfg, out, dataset)
    sys.stdout.write(report_text(run.report, f"scenario {cfg.name}, seed {cfg.seed}"))
    print(f"outputs in {out}")
    return 0


def cmd_adaptive(args) -> int:
    cfg = _config(args)
    out = _out(args, f"adaptive-{cfg.name}")
    run = run_adaptive(cfg, out)
    if run.edge is None:
        print(f"{run.message} after {len(run.probes)} probes")
        return 2
    print(f"quantum edge at {run.edge.t0:.1f} ps after {len(run.probes)} probes; outputs in {out}")
    return 0


def cmd_report(args) -> int:
    edges = read_edges(args.edges)
    report = depth_report(edges)
    text = report_text(report, f"depth report for {args.edges}")
    if args.out:
        write_report(report, _out(args, "."), text.splitlines()[0])
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qlidar", description="Quantum-correlation LiDAR simulation and ranging.")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario(sp):
        sp.add_argument("--config", required=True,
                        help=f"scenario YAML file or preset name ({', '.join(PRESETS)})")
        sp.add_argument("--seed", type=int, help="override acquisition.seed")
        sp.add_argument("--frames", type=int, help="override acquisition.n_frames")
        sp.add_argument("--method", choices=("fft", "direct"), help="correlation algorithm")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("simulate", help="simulate frame stacks for a scenario")
    scenario(sp)
    sp.add_argument("--gate", type=int, action="append", help="gate index to simulate (repeatable; default all)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("correlate", help="spatially-averaged correlation image of one stack")
    sp.add_argument("stack", help="QLFS frame-stack file")
    sp.add_argument("--dark", help="dark stack used to mask hot pixels")
    sp.add_argument("--method", choices=("fft", "direct"))
    sp.add_argument("--out", help="directory for gamma_plus.pgm and correlation.json")
    sp.set_defaults(func=cmd_correlate)

    sp = sub.add_parser("scan", help="full linear gate scan and dual-profile ranging")
    scenario(sp)
    sp.add_argument("--stacks", help="directory of recorded stacks (from 'simulate') instead of simulating")
    sp.set_defaults(func=cmd_scan)

    sp = sub.add_parser("adaptive", help="correlation-driven gate search")
    scenario(sp)
    sp.set_defaults(func=cmd_adaptive)

    sp = sub.add_parser("report", help="depth report from an edges.csv file")
    sp.add_argument("edges", help="edges.csv written by 'scan'")
    sp.add_argument("--out", help="directory for report.txt and report.json")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FrameFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
