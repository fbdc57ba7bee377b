"""Command-line entry point: ``hammersim <command> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import reports
from .calibration import CalibrationError, calibrate, simulate_run
from .config import ConfigError, ScenarioConfig, dump_config, parse_config
from .defenses import verdict_matrix, write_verdicts
from .dram import DramState
from .hammer import KINDS, HammerTechnique, template_memory
from .opflip import load_flip_database, scan_binary, synthetic_image, target_page, verify_database
from .opflip.database import FlipDatabaseEntry, write_database
from .orchestrator import MachineSpec, OptimizerInput, optimize_n, plan_table, run_dos, run_privilege_escalation, \
    write_table_csv
from .osmodel import TARGET_FILE, build_system
from .physmem import PAGE_SIZE
from .rng import substream
from .waylay import evict_target, exhaustion_evict, expected_unique, relocation_frames

EXIT_OK, EXIT_USAGE, EXIT_FAILED, EXIT_CALIBRATION = 0, 1, 2, 3
COMMANDS = ("template", "waylay", "escalate", "dos", "optimize", "opflip-scan", "calibrate")


def cmd_template(cfg: ScenarioConfig, out: Path) -> int:
    geo = cfg.dram.geometry(cfg.profile)
    state = DramState(geo, cfg.dram.policy(), cfg.cells.params(), cfg.seed)
    technique = HammerTechnique(cfg.template.technique)
    report = template_memory(state, technique, substream(cfg.seed, "template", technique.kind),
                             max_attempts=cfg.template.attempts,
                             address_knowledge=cfg.template.address_knowledge)
    report.write_csv(reports.out_path(out, "flip_offsets"))
    reports.write_json(reports.out_path(out, "outcome"), {"command": "template", "profile": cfg.profile,
                                                         **report.summary()})
    return EXIT_OK


def cmd_waylay(cfg: ScenarioConfig, out: Path) -> int:
    w = cfg.waylay
    usage = {"page_cache": [], "exhaustion": []}
    runs = []
    for i in range(w.runs):
        for method in usage:
            rng = substream(cfg.seed, "waylay", method, i)
            os_ = build_system(w.frames, rng)
            key = (TARGET_FILE, 8)
            if method == "page_cache":
                run = evict_target(os_, key)
            else:
                run = exhaustion_evict(os_, key, rng)
            usage[method].append(run.peak_usage)
            runs.append({"method": method, "run": i, "data_mb": run.data_mb, "elapsed_s": run.elapsed_s,
                         "peak_usage": run.peak_usage, "peak_resident_bytes": run.peak_rss_bytes,
                         "killed": run.killed})
    reports.write_memory_usage(reports.out_path(out, "memory_usage"), usage, w.usage_bin_percent)

    os_ = build_system(w.frames, substream(cfg.seed, "relocation"))
    key = (TARGET_FILE, 8)
    os_.cache.evict(key)
    pool = os_.cache.pool_size
    os_.cache.fault_in(key)
    placed = relocation_frames(os_, key, w.relocations)
    reports.write_heatmap(reports.out_path(out, "relocation_heatmap"), placed, w.frames, w.heatmap_bins)
    reports.write_json(reports.out_path(out, "outcome"), {
        "command": "waylay",
        "runs": runs,
        "relocation": {"pool": pool, "relocations": w.relocations, "unique_frames": int(len(np.unique(placed))),
                       "expected_unique": expected_unique(pool, w.relocations)},
    })
    return EXIT_OK


def cmd_escalate(cfg: ScenarioConfig, out: Path) -> int:
    geo = cfg.dram.geometry(cfg.escalation_profile)
    outcome = run_privilege_escalation(cfg.attack, seed=cfg.seed, geometry=geo, policy=cfg.dram.policy(),
                                       cells=cfg.cells.params(), allocator=cfg.allocator, defenses=cfg.defenses)
    doc = outcome.to_dict()
    doc["command"] = "escalate"
    reports.write_json(reports.out_path(out, "outcome"), doc)
    write_verdicts(reports.out_path(out, "defense_verdicts"), outcome.verdicts,
                   verdict_matrix({_scenario_name(cfg): outcome.verdicts}))
    return EXIT_OK if outcome.privilege == "root" else EXIT_FAILED


def _scenario_name(cfg: ScenarioConfig) -> str:
    a = cfg.attack
    where = "enclave" if a.enclave else "native"
    return f"{where}+{a.technique}+{a.target}+{a.method}+{a.eviction}+{cfg.allocator}"


def cmd_dos(cfg: ScenarioConfig, out: Path) -> int:
    machines = [MachineSpec(name, cfg.dram.geometry(name), cfg.cells.params(), cfg.dram.policy())
                for name in cfg.dos.machines]
    outcomes = run_dos(machines, seed=cfg.seed, seek_cap_s=cfg.dos.seek_cap_s, destroy_cap_s=cfg.dos.destroy_cap_s)
    reports.write_json(reports.out_path(out, "outcome"),
                       {"command": "dos", "machines": [o.to_dict() for o in outcomes]})
    return EXIT_OK if any(o.machine_state == "halted" for o in outcomes) else EXIT_FAILED


def cmd_optimize(cfg: ScenarioConfig, out: Path) -> int:
    o = cfg.optimizer
    inp = OptimizerInput(o.memory_gib * 2**30, o.W, o.F, o.E)
    plan = optimize_n(inp, o.bound)
    write_table_csv(plan_table(inp.P, o.E), reports.out_path(out, "table3"))
    reports.write_json(reports.out_path(out, "outcome"), {
        "command": "optimize",
        "input": dataclasses.asdict(inp),
        "plan": {"n": plan.n, "templating_h": plan.hours()[0], "waylaying_h": plan.hours()[1],
                 "total_h": plan.hours()[2]},
    })
    return EXIT_OK


def cmd_opflip_scan(cfg: ScenarioConfig, out: Path) -> int:
    o = cfg.opflip
    entries = load_flip_database(o.database)
    report = verify_database(entries)
    if o.image:
        image = Path(o.image).read_bytes()
        binary = Path(o.image).name
    else:
        image = synthetic_image(entries)
        binary = entries[0].binary if entries else "image"
    ranges = [tuple(r) for r in o.ranges]
    if not ranges:
        page, _ = target_page(entries)
        ranges = [(page * PAGE_SIZE, min(len(image), (page + 1) * PAGE_SIZE))]
    candidates, notes = scan_binary(image, ranges)
    rows = [FlipDatabaseEntry(binary, c.offset, c.bit, _asm(c.flip.original), _asm(c.flip.flipped), True,
                              bytes(c.flip.original.raw), c.flip.byte_index)
            for c in candidates]
    write_database(rows, reports.out_path(out, "candidates"))
    reports.write_json(reports.out_path(out, "outcome"), {
        "command": "opflip-scan",
        "verification": {"matched": report.matched, "mismatched": len(report.mismatched), "skipped": report.skipped,
                         "ok": report.ok},
        "candidates": len(candidates),
        "notes": notes,
    })
    return EXIT_OK if report.ok else EXIT_FAILED


def _asm(ins) -> str:
    return ins.mnemonic + (" " + ", ".join(ins.operands) if ins.operands else "")


def cmd_calibrate(cfg: ScenarioConfig, out: Path) -> int:
    path = reports.out_path(out, "calibration")
    try:
        record = calibrate(seed=cfg.seed)
    except CalibrationError as exc:
        doc = {"converged": False, "error": str(exc)}
        if exc.record is not None:
            doc["record"] = exc.record.to_dict()
        reports.write_json(path, doc)
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    doc = record.to_dict()
    if cfg.calibration.verify_attempts:
        doc["verification"] = {
            k: simulate_run(record, k, cfg.seed, cfg.calibration.verify_attempts).summary() for k in KINDS}
    reports.write_json(path, doc)
    return EXIT_OK


HANDLERS = {
    "template": cmd_template, "waylay": cmd_waylay, "escalate": cmd_escalate, "dos": cmd_dos,
    "optimize": cmd_optimize, "opflip-scan": cmd_opflip_scan, "calibrate": cmd_calibrate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hammersim", description="Rowhammer attack and defense co-simulation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML scenario file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config")
    common.add_argument("--out", type=Path, help="report directory; overrides the config")
    common.add_argument("--profile", choices=("desktop", "server"), help="machine profile; overrides the config")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "template": "template memory for flips and write the offset histogram",
        "waylay": "eviction memory usage and relocation statistics",
        "escalate": "end-to-end privilege escalation with the defense suite",
        "dos": "seek and destroy against enclave memory",
        "optimize": "attack runtime optimizer and the runtime table",
        "opflip-scan": "verify the flip database and scan a binary for candidate flips",
        "calibrate": "fit the cell model to the templating targets",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve(args) -> ScenarioConfig:
    cfg = parse_config(args.config) if args.config else ScenarioConfig()
    overrides = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: expected a non-negative integer")
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.profile is not None:
        overrides["profile"] = args.profile
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = resolve(args)
    except (ConfigError, OSError) as exc:
        print(f"hammersim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    # the bundle records everything but its own location, so bundles compare across directories
    reports.out_path(out, "config").write_text(dump_config(cfg, omit=("out",)))
    return HANDLERS[args.command](cfg, out)


if __name__ == "__main__":
    sys.exit(main())
