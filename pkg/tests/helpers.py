"""Shared test utilities: random plan generation and an independent
plan-replay simulator for scripted backbones."""

import numpy as np

from cacheplan.planner import CachePlan, ThresholdSet


def random_plan(rng, steps, layers, families=("mhsa", "ffn"), p_gate=0.5, p_step=0.3,
                tau_warmup=0.0):
    gates = (rng.random((steps, layers, len(families))) < p_gate).astype(np.uint8)
    step_gate = (rng.random(steps) < p_step).astype(np.uint8)
    gates[0] = gates[steps - 1] = 0
    step_gate[0] = step_gate[steps - 1] = 0
    w = int(np.ceil(tau_warmup * steps))
    if w:
        gates[:w] = 0
        step_gate[:w] = 0
    thr = ThresholdSet(per_family={f: 0.5 for f in families}, tau_step=0.5,
                       tau_warmup=tau_warmup)
    cuts = {f: 0.5 for f in families}
    cuts["step"] = 0.5
    return CachePlan(steps=steps, layers=layers, families=tuple(families), gates=gates,
                     step_gate=step_gate, cut_values=cuts, thresholds=thr,
                     phase="corrected")


def replay_scripted_plan(backbone, schedule, plan, x_init):
    """Replay a plan on a scripted backbone with explicit substitution
    arithmetic: no caches, just last-computed-step bookkeeping per site.

    Mirrors the scheduler contract: step skips reuse the previous network
    output and mask all layer slots at the next executed step; a reuse
    whose slot is gone degrades to compute; computed sites refresh their
    slot.
    """
    steps = schedule.steps
    sig = schedule.sigma
    families = plan.families
    x = np.asarray(x_init, dtype=np.float64)
    trajectory = []
    z_prev = None
    last_computed: dict = {}
    mask_pending = False
    for t in range(steps):
        if plan.step_gate[t]:
            z = z_prev
            mask_pending = True
        else:
            if mask_pending:
                last_computed.clear()
                mask_pending = False
            total = np.zeros((backbone.cfg.tokens, backbone.cfg.channels))
            count = 0
            for l in range(plan.layers):
                for s, fam in enumerate(families):
                    key = (l, fam)
                    if plan.gates[t, l, s] and key in last_computed:
                        val = backbone.site_value(l, fam, last_computed[key])
                    else:
                        val = backbone.site_value(l, fam, t)
                        last_computed[key] = t
                    total += val
                    count += 1
            z = backbone.net_value(t) + total / count
        trajectory.append(z)
        x = x + (sig[t + 1] - sig[t]) * z
        z_prev = z
    return trajectory, x
