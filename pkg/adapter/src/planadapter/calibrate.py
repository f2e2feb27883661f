"""Two-phase calibration against a live pipeline via forward hooks.

Planning math mirrors the primary tool's documented decisions exactly: the
change rate at index t is the ratio of consecutive first-difference L1
norms (eps 1e-12, both-zero reads 0), the rate at t-1 governs reuse at
step t, quantile cuts are nearest-rank over the pooled defined entries,
the first/last steps and the warm-up prefix are forced to compute, and the
resampling pass re-thresholds chained-reuse rates against the frozen
Phase-1 cuts. No variant semantics are introduced here.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .mapping import FamilyMapping, load_mapping, resolve_module
from .plans import AdapterPlan, save_plan_file

RATE_EPS = 1e-12


class CalibrationError(RuntimeError):
    pass


def _l1(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(torch.abs(a.detach() - b.detach()).sum().item())


def quantile_cut(values: np.ndarray, tau: float) -> float:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tau == 0.0:
        return float("-inf")
    arr = np.sort(np.asarray(values, dtype=np.float64).ravel())
    return float(arr[math.ceil(tau * arr.size) - 1])


class _Recorder:
    """One pass of per-site first-difference norms (optionally against a
    plan-driven shadow cache instead of the true previous tensor)."""

    def __init__(self, steps, layers, families, shadow_plan: AdapterPlan | None = None):
        self.steps = steps
        self.families = families
        self.fam_index = {f: i for i, f in enumerate(families)}
        self.diff = np.zeros((steps, layers, len(families)))
        self.net_diff = np.zeros(steps)
        self.prev: dict = {}
        self.prev_net = None
        self.shadow_plan = shadow_plan
        self.t = 0
        self.calls = 0

    def site_hook(self, layer, family, sub):
        key = (layer, family, sub)
        s = self.fam_index[family]

        def hook(module, args, output):
            t = self.t
            prev = self.prev.get(key)
            if prev is not None:
                self.diff[t, layer, s] += _l1(output, prev)
            keep_stale = (self.shadow_plan is not None and prev is not None
                          and self.shadow_plan.gates[t, layer, s])
            if not keep_stale:
                self.prev[key] = output.detach()

        return hook

    def denoiser_pre_hook(self, module, args):
        self.t = self.calls

    def denoiser_hook(self, module, args, output):
        t = self.t
        if self.prev_net is not None:
            self.net_diff[t] = _l1(output, self.prev_net)
        keep_stale = (self.shadow_plan is not None
                      and self.shadow_plan.step_gate[t] and self.prev_net is not None)
        if not keep_stale:
            self.prev_net = output.detach()
        self.calls += 1

    def rates(self):
        rho = np.zeros_like(self.diff)
        rho_net = np.zeros(self.steps)
        for t in range(1, self.steps - 1):
            rho[t] = self.diff[t + 1] / (self.diff[t] + RATE_EPS)
            rho_net[t] = self.net_diff[t + 1] / (self.net_diff[t] + RATE_EPS)
        return rho, rho_net


def _parse_thresholds(fields: dict, families) -> tuple[dict, float, float]:
    per_family = {}
    tau_step = None
    tau_warmup = 0.0
    for key, value in fields.items():
        if key == "tau_step":
            tau_step = float(value)
        elif key == "tau_warmup":
            tau_warmup = float(value)
        elif key.startswith("tau_") and key[4:] in families:
            per_family[key[4:]] = float(value)
        else:
            raise CalibrationError(f"unknown threshold field {key!r}")
    if tau_step is None or set(per_family) != set(families):
        raise CalibrationError("thresholds must define tau_step and every tau_<family>")
    return per_family, tau_step, tau_warmup


def _threshold_pass(rho_mean, rho_net_mean, cuts, steps, layers, families, warm):
    gates = np.zeros((steps, layers, len(families)), dtype=np.uint8)
    step_gate = np.zeros(steps, dtype=np.uint8)
    for t in range(2, steps):  # rate at t-1 governs step t; t-1 >= 1 defined
        src = t - 1
        if src >= steps - 1:
            continue
        for s, fam in enumerate(families):
            gates[t, :, s] = rho_mean[src, :, s] <= cuts[fam]
        if rho_net_mean[src] <= cuts["step"]:
            step_gate[t] = 1
    gates[0] = gates[steps - 1] = 0
    step_gate[0] = step_gate[steps - 1] = 0
    if warm > 0:
        gates[:warm] = 0
        step_gate[:warm] = 0
    return gates, step_gate


def _run_passes(pipeline, prompts, runner, mapping, steps, layers, families,
                shadow_plan=None):
    recorders = []
    for prompt in prompts:
        rec = _Recorder(steps, layers, families, shadow_plan=shadow_plan)
        handles = []
        denoiser = resolve_module(pipeline, mapping.denoiser)
        handles.append(denoiser.register_forward_pre_hook(rec.denoiser_pre_hook))
        handles.append(denoiser.register_forward_hook(rec.denoiser_hook))
        for layer in range(layers):
            for family in families:
                for sub, pattern in enumerate(mapping.sub_sites(family)):
                    module = resolve_module(pipeline, pattern.format(layer=layer))
                    handles.append(module.register_forward_hook(
                        rec.site_hook(layer, family, sub)))
        try:
            with torch.no_grad():
                runner(pipeline, prompt)
        finally:
            for h in handles:
                h.remove()
        if rec.calls != steps:
            raise CalibrationError(
                f"pipeline ran {rec.calls} denoiser steps, expected {steps}")
        recorders.append(rec)
    rhos = [rec.rates() for rec in recorders]
    rho_mean = np.mean([r[0] for r in rhos], axis=0)
    rho_net_mean = np.mean([r[1] for r in rhos], axis=0)
    return rho_mean, rho_net_mean


def calibrate_external(pipeline, prompts, thresholds: dict, family_mapping, runner,
                       steps: int, layers: int, out_path: str | None = None,
                       phase1_only: bool = False) -> AdapterPlan:
    """Record rates over the prompts, build and correct the plan.

    ``runner(pipeline, prompt)`` must execute one full deterministic
    generation; the pipeline must advertise ``deterministic = True``
    (stochastic samplers are refused).
    """
    if not getattr(pipeline, "deterministic", False):
        raise CalibrationError("pipeline does not declare a deterministic sampler; "
                               "stochastic sampling is out of scope")
    if not prompts:
        raise CalibrationError("need at least one calibration prompt")
    mapping = family_mapping if isinstance(family_mapping, FamilyMapping) \
        else load_mapping(family_mapping)
    families = tuple(mapping.families.keys())
    per_family, tau_step, tau_warmup = _parse_thresholds(thresholds, families)
    warm = math.ceil(tau_warmup * steps)

    rho_mean, rho_net_mean = _run_passes(pipeline, prompts, runner, mapping,
                                         steps, layers, families)
    interior = slice(1, steps - 1)
    cuts = {fam: quantile_cut(rho_mean[interior, :, s], per_family[fam])
            for s, fam in enumerate(families)}
    cuts["step"] = quantile_cut(rho_net_mean[interior], tau_step)
    gates, step_gate = _threshold_pass(rho_mean, rho_net_mean, cuts, steps, layers,
                                       families, warm)
    thresh_fields = {"tau_step": tau_step, "tau_warmup": tau_warmup}
    thresh_fields.update({f"tau_{f}": per_family[f] for f in families})
    provenance = {"source": "planadapter", "prompts": [str(p) for p in prompts],
                  "denoiser": mapping.denoiser}
    plan = AdapterPlan(steps=steps, layers=layers, families=families, gates=gates,
                       step_gate=step_gate, cut_values=cuts, thresholds=thresh_fields,
                       phase="initial", provenance=provenance)

    if not phase1_only:
        rho_c, rho_net_c = _run_passes(pipeline, prompts, runner, mapping,
                                       steps, layers, families, shadow_plan=plan)
        gates, step_gate = _threshold_pass(rho_c, rho_net_c, cuts, steps, layers,
                                           families, warm)
        plan = AdapterPlan(steps=steps, layers=layers, families=families, gates=gates,
                           step_gate=step_gate, cut_values=cuts,
                           thresholds=thresh_fields, phase="corrected",
                           provenance=provenance)
    if out_path:
        save_plan_file(plan, out_path)
    return plan
