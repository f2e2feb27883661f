"""Show what the resampling correction does to an initial cache plan.

Phase 1 thresholds the measured rates, which assumes each reuse sees a
one-step-old cache. Once reuses chain, the cache content goes stale over
several steps, so Phase 2 replays the plan against shadow caches during
full-compute runs and re-thresholds the chained rates with the same cuts.
Entries whose chained rate blows past the cut flip back to compute.
"""

import numpy as np

from cacheplan import (BackboneConfig, SampleSchedule, ThresholdSet, build_backbone,
                       collect_rates, initial_plan, make_inputs, resample_correct)


def render(plan, family):
    s = plan.families.index(family)
    lines = []
    for l in range(plan.layers):
        row = "".join("#" if plan.gates[t, l, s] else "." for t in range(plan.steps))
        lines.append(f"  layer {l}: {row}")
    return "\n".join(lines)


def main():
    cfg = BackboneConfig(kind="toy_dit", layers=6, tokens=48, channels=48,
                         heads=4, cond_classes=8, seed=2)
    backbone = build_backbone(cfg)
    schedule = SampleSchedule.cosine(28)
    inputs = make_inputs(cfg.tokens, cfg.channels, 3, seed=3, cond_classes=8)

    thresholds = ThresholdSet(per_family={"mhsa": 0.5, "ffn": 0.5},
                              tau_step=0.5, tau_warmup=0.10)
    collection = collect_rates(backbone, schedule, inputs)
    plan0 = initial_plan(collection.rates, collection.step_rates, thresholds,
                         backbone.registry)
    plan1 = resample_correct(backbone, schedule, inputs, plan0, thresholds)

    for label, plan in (("initial (phase 1)", plan0), ("corrected (phase 2)", plan1)):
        print(f"{label}: reuse entries = {plan.count_reuse_entries()}, "
              f"step skips = {plan.step_skip_list()}")
        print(render(plan, "mhsa"))
        print()
    removed = int(((plan0.gates == 1) & (plan1.gates == 0)).sum())
    added = int(((plan0.gates == 0) & (plan1.gates == 1)).sum())
    print(f"correction removed {removed} chained entries and added {added} "
          f"that only look safe under chained bookkeeping")


if __name__ == "__main__":
    main()
