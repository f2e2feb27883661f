"""Calibrate a plan, execute it, and compare against the full baseline.

The scheduler consults the step gate first (a skipped step reuses the whole
previous network output and masks layer caches at the next executed step),
then the per-(layer, module) plan. Work accounting is exact: FLOPs come
from the backbone's analytic table times the computed-site counts.
"""

from cacheplan import (BackboneConfig, SampleSchedule, build_backbone, baseline_run,
                       calibrate, compare_runs, execute_plan, make_inputs,
                       thresholds_from_fields, preset_fields)


def main():
    cfg = BackboneConfig(kind="toy_dit", layers=6, tokens=64, channels=64,
                         heads=4, cond_classes=8, seed=2)
    backbone = build_backbone(cfg)
    schedule = SampleSchedule.cosine(28)
    inputs = make_inputs(cfg.tokens, cfg.channels, 4, seed=3, cond_classes=8)

    thresholds = thresholds_from_fields(preset_fields("dit-fast"),
                                        backbone.registry, cfg.kind)
    plan = calibrate(backbone, schedule, inputs, thresholds)
    print(f"plan: phase={plan.phase} reuse_entries={plan.count_reuse_entries()} "
          f"step_skips={plan.step_skip_list()}")

    x0, cond = make_inputs(cfg.tokens, cfg.channels, 1, seed=1003, cond_classes=8)[0]
    _, ref_traj, base_stats = baseline_run(backbone, schedule, x0, cond)
    _, traj, stats = execute_plan(backbone, schedule, plan, x0, cond)
    fid = compare_runs(ref_traj, traj, peak=1.0)

    print(f"{'':16s}{'FLOPs':>14s}{'speedup':>9s}{'wall(s)':>9s}{'PSNR':>8s}")
    print(f"{'baseline':16s}{base_stats.flops:>14d}{1.0:>9.3f}"
          f"{base_stats.wall_time_s:>9.3f}{'':>8s}")
    print(f"{'scheduled':16s}{stats.flops:>14d}{stats.speedup_flops():>9.3f}"
          f"{stats.wall_time_s:>9.3f}{fid.final_psnr:>8.2f}")
    for fam in stats.families:
        print(f"  {fam}: reused {stats.reused.get(fam, 0)} of "
              f"{stats.sites_total(fam)} sites "
              f"({stats.reuse_fraction(fam):.1%})")
    print(f"  step skips: {stats.step_skips} of {stats.steps_total} "
          f"({stats.step_skip_fraction():.1%})")


if __name__ == "__main__":
    main()
