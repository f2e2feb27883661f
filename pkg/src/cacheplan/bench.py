"""End-to-end measurement: baseline vs scheduled runs, sweeps, studies.

FLOP figures come from the backbone's analytic per-site table applied to
the plan's computed-site counts; wall times are medians over repeated runs
with the coefficient of variation reported alongside, never a single-shot
number.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .metrics import PSNR_CAP
from .planner import CachePlan, ThresholdSet, calibrate, initial_plan, resample_correct_many
from .presets import STEP_TAU_SWEEP, sweep_bundles_for, thresholds_from_fields
from .rates import collect_rates
from .sampler import SampleSchedule, make_inputs
from .scheduler import RunStats, baseline_run, compare_runs, execute_plan


@dataclass
class Measurement:
    label: str
    plan: CachePlan | None
    stats: RunStats
    latency_s: float  # median over repeats
    latency_cov: float
    final_psnr: float
    final_mse: float
    latency_min_s: float = 0.0
    paired_speedup: float | None = None

    def to_row(self, baseline_latency: float) -> dict:
        # Speedup from the paired window when one was taken; the reported
        # latency stays the median.
        if self.paired_speedup is not None:
            speedup = self.paired_speedup
        else:
            speedup = baseline_latency / self.latency_s
        row = {
            "operating_point": self.label,
            "flops": self.stats.flops,
            "speedup_vs_baseline": speedup,
            "latency_s": self.latency_s,
            "step_skip_fraction": self.stats.step_skip_fraction(),
            "final_psnr": self.final_psnr,
            "final_mse": self.final_mse,
            # not part of the CSV schema; carried for reporting
            "latency_cov": self.latency_cov,
        }
        for fam in self.stats.families:
            row[f"skip_{fam}"] = self.stats.reuse_fraction(fam)
        return row


def _timed_runs(fn, repeats: int):
    """Run fn() repeats times after one warmup.

    Returns (result, median s, cov, min s). The median is the reported
    latency; the minimum is the noise-floor estimate used for speedup
    ratios, since interference on a shared machine only ever adds time.
    """
    result = fn()  # warmup: first-call allocations and code paths
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    cov = (statistics.pstdev(times) / statistics.fmean(times)) if len(times) > 1 else 0.0
    return result, med, cov, min(times)


def _paired_speedup(fn_ref, fn, repeats: int):
    """Noise-floor speedup of fn over fn_ref from one tight window.

    Reference and subject runs alternate back to back so machine-load drift
    cannot land on one side only; the minimum of each side estimates its
    quiet-state cost. Returns (result, speedup, subject median, subject cov).
    """
    fn_ref()
    result = fn()
    ref_times, times = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn_ref()
        t1 = time.perf_counter()
        result = fn()
        t2 = time.perf_counter()
        ref_times.append(t1 - t0)
        times.append(t2 - t1)
    med = statistics.median(times)
    cov = (statistics.pstdev(times) / statistics.fmean(times)) if len(times) > 1 else 0.0
    return result, min(ref_times) / min(times), med, cov


def measure_baseline(backbone, schedule: SampleSchedule, x_init, cond, repeats: int) -> Measurement:
    # The baseline is its own reference, so fidelity is exact by determinism.
    (x_final, trajectory, stats), med, cov, lo = _timed_runs(
        lambda: baseline_run(backbone, schedule, x_init, cond), repeats)
    return Measurement(label="baseline", plan=None, stats=stats, latency_s=med,
                       latency_cov=cov, final_psnr=PSNR_CAP, final_mse=0.0,
                       latency_min_s=lo)


def measure_plan(backbone, schedule: SampleSchedule, plan: CachePlan, x_init, cond,
                 reference_trajectory, repeats: int, label: str,
                 paired: bool = False) -> Measurement:
    run = lambda: execute_plan(backbone, schedule, plan, x_init, cond, allow_initial=True)
    speedup = None
    if paired:
        (x_final, trajectory, stats), speedup, med, cov = _paired_speedup(
            lambda: baseline_run(backbone, schedule, x_init, cond), run, repeats)
        lo = 0.0
    else:
        (x_final, trajectory, stats), med, cov, lo = _timed_runs(run, repeats)
    fidelity = compare_runs(reference_trajectory, trajectory, peak=1.0)
    return Measurement(label=label, plan=plan, stats=stats, latency_s=med,
                       latency_cov=cov, final_psnr=fidelity.final_psnr,
                       final_mse=fidelity.final_mse, latency_min_s=lo,
                       paired_speedup=speedup)


def run_benchmark(backbone, schedule: SampleSchedule, thresholds: ThresholdSet, *,
                  calibration_inputs=None, eval_input=None, repeats: int = 3,
                  phase1_only: bool = False, jobs: int = 1) -> list[dict]:
    """Calibrate, then benchmark baseline vs scheduled on a held-out input."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cfg = backbone.cfg
    if calibration_inputs is None:
        calibration_inputs = make_inputs(cfg.tokens, cfg.channels, 2, seed=cfg.seed + 1,
                                         cond_classes=cfg.cond_classes)
    if eval_input is None:
        eval_input = make_inputs(cfg.tokens, cfg.channels, 1, seed=cfg.seed + 1000,
                                 cond_classes=cfg.cond_classes)[0]
    plan = calibrate(backbone, schedule, calibration_inputs, thresholds,
                     phase1_only=phase1_only, jobs=jobs)
    x_init, cond = eval_input
    base = measure_baseline(backbone, schedule, x_init, cond, repeats)
    _, ref_traj, _ = baseline_run(backbone, schedule, x_init, cond)
    point = measure_plan(backbone, schedule, plan, x_init, cond, ref_traj, repeats, "scheduled")
    return [base.to_row(base.latency_s), point.to_row(base.latency_s)]


def sweep(backbone, schedule: SampleSchedule, *, bundles=None, step_taus=STEP_TAU_SWEEP,
          calibration_inputs=None, eval_input=None, repeats: int = 3,
          jobs: int = 1) -> list[dict]:
    """Bundle x tau_step cross product; one stats row per operating point.

    Rate collection runs once and is shared by every operating point; the
    Phase-2 correction re-runs per point because it depends on the plan.
    """
    cfg = backbone.cfg
    if bundles is None:
        bundles = sweep_bundles_for(cfg.kind)
    if not bundles or not step_taus:
        raise ValueError("sweep needs a non-empty bundle and tau_step grid")
    if calibration_inputs is None:
        calibration_inputs = make_inputs(cfg.tokens, cfg.channels, 2, seed=cfg.seed + 1,
                                         cond_classes=cfg.cond_classes)
    if eval_input is None:
        eval_input = make_inputs(cfg.tokens, cfg.channels, 1, seed=cfg.seed + 1000,
                                 cond_classes=cfg.cond_classes)[0]
    x_init, cond = eval_input
    collection = collect_rates(backbone, schedule, calibration_inputs, jobs=jobs)
    base = measure_baseline(backbone, schedule, x_init, cond, repeats)
    _, ref_traj, _ = baseline_run(backbone, schedule, x_init, cond)

    # Phase 1 for every operating point, then one shared Phase-2 pass.
    labels, thr_list, initial_plans = [], [], []
    for b, bundle in enumerate(bundles, start=1):
        for tau_step in step_taus:
            fields = dict(bundle)
            fields["tau_step"] = tau_step
            thresholds = thresholds_from_fields(fields, backbone.registry, cfg.kind)
            labels.append(f"bundle{b}-step{tau_step:.2f}")
            thr_list.append(thresholds)
            initial_plans.append(initial_plan(
                collection.rates, collection.step_rates, thresholds, backbone.registry,
                per_input_rates=collection.per_input_rates,
                per_input_step_rates=collection.per_input_step_rates))
    plans = resample_correct_many(backbone, schedule, calibration_inputs, initial_plans,
                                  thr_list, jobs=jobs)

    rows = [base.to_row(base.latency_s)]
    for label, plan in zip(labels, plans):
        point = measure_plan(backbone, schedule, plan, x_init, cond, ref_traj,
                             repeats, label, paired=True)
        rows.append(point.to_row(base.latency_s))
    return rows


def calibration_size_study(backbone, schedule: SampleSchedule, thresholds: ThresholdSet,
                           k_values, *, pool_seed: int = 7, eval_seed: int = 9000,
                           jobs: int = 1) -> list[dict]:
    """Calibrate with K inputs each and score fidelity on one held-out input."""
    cfg = backbone.cfg
    k_values = list(k_values)
    if any(k < 1 for k in k_values):
        raise ValueError("every K must be >= 1")
    pool = make_inputs(cfg.tokens, cfg.channels, max(k_values), seed=pool_seed,
                       cond_classes=cfg.cond_classes)
    x_eval, cond_eval = make_inputs(cfg.tokens, cfg.channels, 1, seed=eval_seed,
                                    cond_classes=cfg.cond_classes)[0]
    _, ref_traj, _ = baseline_run(backbone, schedule, x_eval, cond_eval)
    rows = []
    for k in k_values:
        plan = calibrate(backbone, schedule, pool[:k], thresholds, jobs=jobs)
        _, trajectory, stats = execute_plan(backbone, schedule, plan, x_eval, cond_eval)
        fid = compare_runs(ref_traj, trajectory, peak=1.0)
        rows.append({"k": k, "final_psnr": fid.final_psnr, "final_mse": fid.final_mse,
                     "flops": stats.flops,
                     "reuse_entries": plan.count_reuse_entries(),
                     "step_skips": int(plan.step_gate.sum())})
    return rows
