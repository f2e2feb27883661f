"""Trace the speed-quality frontier over bundle x step-threshold points.

Each of the seven module-threshold bundles is crossed with the step-gate
sweep; every operating point is calibrated (both phases), executed, and
timed against the baseline in a paired window. The step threshold controls
overall aggressiveness; the bundles shape the residual trade-off inside
executed steps. (The acceptance suite runs this grid at larger dims where
the FLOPs-vs-threshold trend is strict.)
"""

import os

from cacheplan import BackboneConfig, SampleSchedule, build_backbone, make_inputs, save_stats
from cacheplan.bench import sweep

OUT = os.path.join(os.path.dirname(__file__), "out")


def main():
    os.makedirs(OUT, exist_ok=True)
    cfg = BackboneConfig(kind="toy_dit", layers=6, tokens=48, channels=48,
                         heads=4, cond_classes=8, seed=2)
    backbone = build_backbone(cfg)
    schedule = SampleSchedule.cosine(28)
    rows = sweep(backbone, schedule,
                 calibration_inputs=make_inputs(cfg.tokens, cfg.channels, 3,
                                                seed=3, cond_classes=8),
                 repeats=3)
    path = os.path.join(OUT, "sweep.csv")
    save_stats(rows, backbone.registry.families, path)
    print(f"{'point':18s}{'flops':>13s}{'speedup':>9s}{'psnr':>8s}{'step skip':>10s}")
    for row in rows:
        print(f"{row['operating_point']:18s}{row['flops']:>13d}"
              f"{row['speedup_vs_baseline']:>9.3f}{row['final_psnr']:>8.2f}"
              f"{row['step_skip_fraction']:>10.2f}")
    print(f"\nwrote {path} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
