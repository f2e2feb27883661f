"""Command-line operator surface.

Subcommands: calibrate, plan-inspect, run, bench, sweep, heatmap, rates.
Config files share the plan-file JSON dialect; explicit flags override
config values. Every subcommand is deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from .backbones import BackboneConfig, ScriptedProfile, build_backbone
from .bench import run_benchmark, sweep
from .planio import load_plan, save_plan, save_stats
from .planner import calibrate
from .presets import PRESETS, preset_fields, thresholds_from_fields
from .rates import collect_rates, export_heatmap, matrix_to_csv
from .sampler import SampleSchedule, make_inputs
from .scheduler import baseline_run, compare_runs, execute_plan

DEFAULT_CONFIG = {
    "backbone": {"kind": "toy_dit", "layers": 4, "tokens": 32, "channels": 32,
                 "heads": 4, "cond_classes": 4, "seed": 0},
    "schedule": {"steps": 12, "sigma_start": 1.0, "sigma_end": 0.0},
}


def _load_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            user = json.load(fh)
        for key in ("backbone", "schedule", "thresholds"):
            if key in user:
                cfg.setdefault(key, {}).update(user[key])
    for flag, (section, key) in {"steps": ("schedule", "steps"),
                                 "layers": ("backbone", "layers"),
                                 "seed": ("backbone", "seed")}.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


def _build(cfg: dict):
    b = cfg["backbone"]
    bcfg = BackboneConfig(kind=b["kind"], layers=b["layers"], tokens=b["tokens"],
                          channels=b["channels"], heads=b.get("heads", 4),
                          cond_classes=b.get("cond_classes", 1), seed=b.get("seed", 0))
    profile = None
    if bcfg.kind == "scripted":
        profile = ScriptedProfile.from_config(b.get("profile", {"ratio": 0.5}))
    backbone = build_backbone(bcfg, profile)
    s = cfg["schedule"]
    if "sigma" in s:
        schedule = SampleSchedule(steps=s["steps"], sigma=np.asarray(s["sigma"], dtype=float))
    else:
        schedule = SampleSchedule.linear(s["steps"], s.get("sigma_start", 1.0),
                                         s.get("sigma_end", 0.0))
    return backbone, schedule


def _thresholds(args, cfg, backbone):
    if getattr(args, "preset", None):
        name = args.preset
        if name in PRESETS:
            fields = preset_fields(name)
        else:
            with open(name, "r", encoding="utf-8") as fh:
                fields = json.load(fh)
    elif "thresholds" in cfg:
        fields = cfg["thresholds"]
    else:
        raise ValueError("no thresholds given; pass --preset or a config with thresholds")
    return thresholds_from_fields(fields, backbone.registry, backbone.cfg.kind)


def _calibration_inputs(args, backbone):
    count = getattr(args, "inputs", None) or 2
    return make_inputs(backbone.cfg.tokens, backbone.cfg.channels, count,
                       seed=backbone.cfg.seed + 1, cond_classes=backbone.cfg.cond_classes)


def _checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    backbone, schedule = _build(cfg)
    thresholds = _thresholds(args, cfg, backbone)
    inputs = _calibration_inputs(args, backbone)
    plan = calibrate(backbone, schedule, inputs, thresholds,
                     phase1_only=args.phase1_only, jobs=args.jobs)
    out = args.out or "plan.json"
    save_plan(plan, out)
    print(f"wrote {out} (phase={plan.phase}, reuse_entries={plan.count_reuse_entries()}, "
          f"step_skips={int(plan.step_gate.sum())})")
    return 0


def cmd_plan_inspect(args) -> int:
    plan = load_plan(args.plan)
    print(f"steps={plan.steps} layers={plan.layers} families={list(plan.families)}")
    print(f"phase={plan.phase}")
    for fam in plan.families:
        cut = plan.cut_values[fam]
        print(f"  {fam}: reuse_fraction={plan.family_reuse_fraction(fam):.4f} cut={cut:.6g}")
    print(f"  step: skips={plan.step_skip_list()} cut={plan.cut_values['step']:.6g}")
    print(f"thresholds={plan.thresholds.to_fields()}")
    print(f"provenance={json.dumps(plan.provenance, sort_keys=True)}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    backbone, schedule = _build(cfg)
    eval_seed = args.seed if args.seed is not None else 1234
    x_init, cond = make_inputs(backbone.cfg.tokens, backbone.cfg.channels, 1,
                               seed=eval_seed, cond_classes=backbone.cfg.cond_classes)[0]
    if args.baseline or not args.plan:
        x_final, trajectory, stats = baseline_run(backbone, schedule, x_init, cond)
        label = "baseline"
        fid = None
    else:
        plan = load_plan(args.plan)
        _, ref_traj, _ = baseline_run(backbone, schedule, x_init, cond)
        x_final, trajectory, stats = execute_plan(backbone, schedule, plan, x_init, cond,
                                                  allow_initial=True)
        fid = compare_runs(ref_traj, trajectory, peak=1.0)
        label = os.path.basename(args.plan)
    print(f"checksum={_checksum(x_final)}")
    print(f"flops={stats.flops} wall_time_s={stats.wall_time_s:.4f} "
          f"step_skips={stats.step_skips} reused={stats.reused}")
    if fid is not None:
        print(f"final_psnr={fid.final_psnr:.4f} final_mse={fid.final_mse:.6g}")
    if args.out:
        row = {"operating_point": label, "flops": stats.flops,
               "speedup_vs_baseline": stats.speedup_flops(),
               "latency_s": stats.wall_time_s,
               "step_skip_fraction": stats.step_skip_fraction(),
               "final_psnr": fid.final_psnr if fid else float("inf"),
               "final_mse": fid.final_mse if fid else 0.0}
        for fam in stats.families:
            row[f"skip_{fam}"] = stats.reuse_fraction(fam)
        save_stats([row], stats.families, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    backbone, schedule = _build(cfg)
    thresholds = _thresholds(args, cfg, backbone)
    rows = run_benchmark(backbone, schedule, thresholds,
                         calibration_inputs=_calibration_inputs(args, backbone),
                         repeats=args.repeats, phase1_only=args.phase1_only, jobs=args.jobs)
    for row in rows:
        print(f"{row['operating_point']}: flops={row['flops']} "
              f"speedup={row['speedup_vs_baseline']:.3f} latency_s={row['latency_s']:.4f} "
              f"cov={row.get('latency_cov', 0.0):.3f} psnr={row['final_psnr']:.2f}")
    if args.out:
        save_stats(rows, backbone.registry.families, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    backbone, schedule = _build(cfg)
    rows = sweep(backbone, schedule, calibration_inputs=_calibration_inputs(args, backbone),
                 repeats=args.repeats, jobs=args.jobs)
    out = args.out or "sweep.csv"
    save_stats(rows, backbone.registry.families, out)
    print(f"wrote {out} ({len(rows)} rows incl. baseline)")
    return 0


def cmd_rates(args) -> int:
    cfg = _load_config(args)
    backbone, schedule = _build(cfg)
    inputs = _calibration_inputs(args, backbone)
    collection = collect_rates(backbone, schedule, inputs, jobs=args.jobs)
    outdir = args.out or "rates_out"
    os.makedirs(outdir, exist_ok=True)
    for fam, matrix in collection.rates.items():
        path = os.path.join(outdir, f"rho_{fam}.csv")
        matrix_to_csv(matrix.values, path)
        print(f"wrote {path}")
    step_path = os.path.join(outdir, "rho_step.csv")
    matrix_to_csv(collection.step_rates.values.reshape(-1, 1), step_path)
    print(f"wrote {step_path}")
    return 0


def cmd_heatmap(args) -> int:
    cfg = _load_config(args)
    backbone, schedule = _build(cfg)
    inputs = _calibration_inputs(args, backbone)
    collection = collect_rates(backbone, schedule, inputs, jobs=args.jobs)
    outdir = args.out or "heatmaps"
    os.makedirs(outdir, exist_ok=True)
    for fam in collection.families:
        if args.mode == "log2-rho":
            source = collection.rates[fam]
        elif args.mode == "mse":
            source = collection.mse_maps[fam]
        else:
            source = collection.cos_maps[fam]
        path = os.path.join(outdir, f"{args.mode}_{fam}.pgm")
        export_heatmap(source, args.mode, path)
        print(f"wrote {path} (+.csv)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cacheplan",
                                     description="cache-plan calibration and scheduled execution")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset=False, inputs=False, repeats=False):
        p.add_argument("--config", help="JSON config file (backbone/schedule/thresholds)")
        p.add_argument("--steps", type=int, help="override schedule steps")
        p.add_argument("--layers", type=int, help="override backbone layers")
        p.add_argument("--seed", type=int, help="override backbone seed")
        p.add_argument("--jobs", type=int, default=1, help="calibration fan-out cap")
        p.add_argument("--out", help="output path")
        if preset:
            p.add_argument("--preset", help=f"preset name {sorted(PRESETS)} or a JSON file")
        if inputs:
            p.add_argument("--inputs", type=int, help="number of calibration inputs (default 2)")
        if repeats:
            p.add_argument("--repeats", type=int, default=3, help="timing repetitions")

    p = sub.add_parser("calibrate", help="two-phase calibration to a plan file")
    common(p, preset=True, inputs=True)
    p.add_argument("--phase1-only", action="store_true", help="emit the uncorrected plan")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("plan-inspect", help="summarize a plan file")
    p.add_argument("plan", help="plan JSON file")
    p.set_defaults(fn=cmd_plan_inspect)

    p = sub.add_parser("run", help="execute a plan (or the baseline)")
    common(p)
    p.add_argument("--plan", help="plan JSON file")
    p.add_argument("--baseline", action="store_true", help="run all-compute")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench", help="baseline vs scheduled benchmark")
    common(p, preset=True, inputs=True, repeats=True)
    p.add_argument("--phase1-only", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("sweep", help="bundle x tau_step operating-point sweep")
    common(p, inputs=True, repeats=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("rates", help="collect change rates and export CSVs")
    common(p, inputs=True)
    p.set_defaults(fn=cmd_rates)

    p = sub.add_parser("heatmap", help="collect change rates and export PGM heatmaps")
    common(p, inputs=True)
    p.add_argument("--mode", choices=("log2-rho", "mse", "cos"), default="log2-rho")
    p.set_defaults(fn=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
