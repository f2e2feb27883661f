"""Plan-following execution: step gate first, then layer-wise reuse.

A skipped step substitutes the previous network output and raises the
one-shot mask flag; the next executed step drops every layer slot before
gating, so reuse requests that lost their slot silently degrade to compute.
Newly computed outputs always overwrite their slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gating import GateDirective, ModuleCache, SiteTouch
from .metrics import mse, psnr
from .planner import PHASE_CORRECTED, CachePlan
from .sampler import SampleSchedule, run_trajectory


@dataclass
class RunStats:
    """Work and timing accounting for one scheduled (or baseline) run."""

    steps_total: int
    layers: int
    families: tuple[str, ...]
    hook_counts: dict[str, int]
    step_skips: int
    computed: dict[str, int]
    reused: dict[str, int]
    flops: int
    baseline_flops: int
    wall_time_s: float
    touched: list[list[SiteTouch]] = field(default_factory=list)

    def sites_total(self, family: str) -> int:
        return self.steps_total * self.layers * self.hook_counts[family]

    def sites_under_skipped_steps(self, family: str) -> int:
        return self.step_skips * self.layers * self.hook_counts[family]

    def reuse_fraction(self, family: str) -> float:
        return self.reused.get(family, 0) / self.sites_total(family)

    def step_skip_fraction(self) -> float:
        return self.step_skips / self.steps_total

    def speedup_flops(self) -> float:
        return self.baseline_flops / self.flops if self.flops else float("inf")

    def work_identity_holds(self) -> bool:
        for fam in self.families:
            total = (self.computed.get(fam, 0) + self.reused.get(fam, 0)
                     + self.sites_under_skipped_steps(fam))
            if total != self.sites_total(fam):
                return False
        return True


class PlanExecutor:
    """Feeds per-step gate directives derived verbatim from a fixed plan."""

    def __init__(self, plan: CachePlan, registry):
        self.plan = plan
        self.registry = registry

    def gate_for_step(self, t: int, cache: ModuleCache) -> GateDirective:
        plan = self.plan
        if plan.step_gate[t]:
            cache.mask_pending = True
            return GateDirective.skip_step()
        if cache.mask_pending:
            cache.clear_layer_slots()
            cache.mask_pending = False
        reuse = np.zeros((plan.layers, len(plan.families)), dtype=bool)
        for s, fam in enumerate(plan.families):
            hooks = self.registry.hook_count_per_layer[fam]
            for l in range(plan.layers):
                if plan.gates[t, l, s] and all(cache.has(l, fam, k) for k in range(hooks)):
                    reuse[l, s] = True
        return GateDirective(families=plan.families, reuse=reuse)


def execute_plan(backbone, schedule: SampleSchedule, plan: CachePlan,
                 x_init: np.ndarray, cond: int, *, allow_initial: bool = False,
                 on_site=None, collect_touched: bool = False):
    """Run one trajectory under the plan; returns (x_final, trajectory, RunStats)."""
    registry = backbone.registry
    if plan.steps != schedule.steps or plan.layers != backbone.cfg.layers \
            or plan.families != registry.families:
        raise ValueError(
            f"plan dims (T={plan.steps}, L={plan.layers}, families={plan.families}) do not "
            f"match backbone/schedule (T={schedule.steps}, L={backbone.cfg.layers}, "
            f"families={registry.families})")
    if plan.step_gate[0]:
        raise ValueError("plan skips step 0; first step must compute")
    if plan.phase != PHASE_CORRECTED and not allow_initial:
        raise ValueError(f"plan phase is {plan.phase!r}; pass allow_initial=True to run it")
    executor = PlanExecutor(plan, registry)
    trajectory, x_final, raw = run_trajectory(backbone, schedule, x_init, cond, executor,
                                              on_site=on_site, collect_touched=collect_touched)
    stats = RunStats(
        steps_total=schedule.steps,
        layers=backbone.cfg.layers,
        families=registry.families,
        hook_counts=dict(registry.hook_count_per_layer),
        step_skips=raw.step_skips,
        computed=dict(raw.computed),
        reused=dict(raw.reused),
        flops=raw.flops,
        baseline_flops=backbone.baseline_flops(schedule.steps),
        wall_time_s=raw.wall_time_s,
    )
    if collect_touched:
        stats.touched = raw.touched
    return x_final, trajectory, stats


def baseline_run(backbone, schedule: SampleSchedule, x_init: np.ndarray, cond: int):
    """All-compute reference run with the same RunStats shape."""
    from .sampler import AllComputeExecutor

    executor = AllComputeExecutor(backbone.cfg.layers, backbone.registry.families)
    trajectory, x_final, raw = run_trajectory(backbone, schedule, x_init, cond, executor)
    stats = RunStats(
        steps_total=schedule.steps,
        layers=backbone.cfg.layers,
        families=backbone.registry.families,
        hook_counts=dict(backbone.registry.hook_count_per_layer),
        step_skips=0,
        computed=dict(raw.computed),
        reused=dict(raw.reused),
        flops=raw.flops,
        baseline_flops=backbone.baseline_flops(schedule.steps),
        wall_time_s=raw.wall_time_s,
    )
    return x_final, trajectory, stats


@dataclass
class FidelityReport:
    """Per-step and final MSE/PSNR of a cached run against its full reference."""

    per_step_mse: list[float]
    per_step_psnr: list[float]
    final_mse: float
    final_psnr: float

    def mismatched_steps(self) -> list[int]:
        return [t for t, m in enumerate(self.per_step_mse) if m > 0.0]


def compare_runs(full: list[np.ndarray], cached: list[np.ndarray],
                 peak: float = 1.0) -> FidelityReport:
    if len(full) != len(cached):
        raise ValueError(f"trajectory length mismatch: {len(full)} vs {len(cached)}")
    per_mse = [mse(c, f) for f, c in zip(full, cached)]
    per_psnr = [psnr(c, f, peak) for f, c in zip(full, cached)]
    return FidelityReport(per_step_mse=per_mse, per_step_psnr=per_psnr,
                          final_mse=per_mse[-1], final_psnr=per_psnr[-1])
