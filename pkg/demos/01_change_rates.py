"""Collect per-module change rates on a toy backbone and export heatmaps.

The rate at step t compares the t -> t+1 first difference of a module's
output against the t-1 -> t difference. Values near 1 mean the module keeps
changing at a steady pace; values well below 1 mark stretches where updates
shrink and cached outputs stay valid.
"""

import os

import numpy as np

from cacheplan import (BackboneConfig, SampleSchedule, build_backbone, collect_rates,
                       export_heatmap, make_inputs)

OUT = os.path.join(os.path.dirname(__file__), "out", "rates")


def main():
    os.makedirs(OUT, exist_ok=True)
    cfg = BackboneConfig(kind="toy_dit", layers=6, tokens=64, channels=64,
                         heads=4, cond_classes=8, seed=2)
    backbone = build_backbone(cfg)
    schedule = SampleSchedule.cosine(28)
    inputs = make_inputs(cfg.tokens, cfg.channels, 4, seed=3, cond_classes=8)

    collection = collect_rates(backbone, schedule, inputs)

    print("step-level rates (interior):")
    vec = collection.step_rates.values
    print(" ", np.array2string(vec[1:-1], precision=2, max_line_width=100))
    for fam in collection.families:
        m = collection.rates[fam].values
        print(f"{fam}: per-layer mean rate over interior steps:")
        print(" ", np.array2string(m[1:-1].mean(axis=0), precision=3))
        for mode, source in (("log2-rho", collection.rates[fam]),
                             ("mse", collection.mse_maps[fam]),
                             ("cos", collection.cos_maps[fam])):
            path = os.path.join(OUT, f"{mode}_{fam}.pgm")
            export_heatmap(source, mode, path)
            print(f"  wrote {path} (+ .csv)")
    print("\nheatmap axes: x = inference step, y = layer; brighter = larger value")


if __name__ == "__main__":
    main()
