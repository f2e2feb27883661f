"""Turn rate statistics into a binary cache plan, then refine it.

Phase 1 pools the defined rate entries per family (tie groups pool
jointly), takes a nearest-rank quantile cut per pool, and marks a plan
entry reusable when the governing rate sits at or below the cut. Phase 2
re-runs the calibration trajectories at full compute while replaying the
initial plan against shadow caches: each site's difference is measured
between the fresh output and the (possibly stale) shadow, so chained reuse
shows up as inflated rates. Those rates are re-thresholded against the
frozen Phase-1 cuts, which can both drop entries (chains that drift) and
add ones that only look safe under the corrected bookkeeping.

The first step, the final step, and the warm-up prefix are always forced to
full compute in every emitted plan.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backbones import FamilyRegistry
from .rates import (RateCollection, RateMatrix, StepRateVector, collect_rates,
                    interior_mask, mean_rate_matrices, mean_step_rates, rho_layer)
from .sampler import AllComputeExecutor, SampleSchedule, run_trajectory

NEG_INF = float("-inf")

PHASE_INITIAL = "initial"
PHASE_CORRECTED = "corrected"


def rate_source_step(t: int) -> int:
    """Index of the rate entry governing the reuse decision at step t.

    The rate at index t-1 compares the t-1 -> t difference against the
    t-2 -> t-1 difference; a small value means step t changes little over
    step t-1, so step t may reuse. Kept in one place so the alignment can
    be flipped wholesale.
    """
    return t - 1


def warmup_steps(tau_warmup: float, steps: int) -> int:
    return math.ceil(tau_warmup * steps)


def quantile_cut(values, tau: float) -> float:
    """Nearest-rank quantile: element at 1-based index ceil(tau*n).

    tau=0 returns -inf (nothing at or below the cut); tau=1 returns the
    maximum.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("quantile over empty values")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tau == 0.0:
        return NEG_INF
    k = math.ceil(tau * arr.size)
    return float(np.sort(arr)[k - 1])


@dataclass(frozen=True)
class ThresholdSet:
    """Quantile fractions per family plus the step and warm-up fractions."""

    per_family: dict[str, float]
    tau_step: float
    tau_warmup: float
    tie_groups: tuple[frozenset[str], ...] = ()
    source_fields: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        for name, value in [("tau_step", self.tau_step), ("tau_warmup", self.tau_warmup),
                            *((f"tau_{f}", v) for f, v in self.per_family.items())]:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        for group in self.tie_groups:
            taus = {self.per_family[f] for f in group if f in self.per_family}
            if len(taus) > 1:
                raise ValueError(f"tied families {sorted(group)} carry unequal thresholds {sorted(taus)}")

    @classmethod
    def from_fields(cls, fields: dict, registry: FamilyRegistry,
                    aliases: dict[str, str] | None = None) -> "ThresholdSet":
        """Parse tau_step / tau_warmup / tau_<family> fields.

        ``aliases`` maps alternate field suffixes onto family names (the
        toy DiT accepts tau_attn for its mhsa family).
        """
        aliases = aliases or {}
        per_family: dict[str, float] = {}
        tau_step = tau_warmup = None
        for key, value in fields.items():
            if key == "tau_step":
                tau_step = float(value)
            elif key in ("tau_warmup", "tau_warm_up", "tau_warm-up"):
                tau_warmup = float(value)
            elif key.startswith("tau_"):
                name = key[4:]
                name = aliases.get(name, name)
                if name not in registry.families:
                    raise ValueError(f"threshold field {key!r} names unknown family {name!r}")
                per_family[name] = float(value)
            else:
                raise ValueError(f"unknown threshold field {key!r}")
        if tau_step is None:
            raise ValueError("missing tau_step")
        if tau_warmup is None:
            tau_warmup = 0.0
        missing = [f for f in registry.families if f not in per_family]
        if missing:
            raise ValueError(f"missing thresholds for families {missing}")
        return cls(per_family=per_family, tau_step=tau_step, tau_warmup=tau_warmup,
                   tie_groups=registry.tie_groups, source_fields=dict(fields))

    def to_fields(self) -> dict:
        out = {"tau_step": self.tau_step, "tau_warmup": self.tau_warmup}
        for fam, tau in self.per_family.items():
            out[f"tau_{fam}"] = tau
        return out


class PlanInvariantError(ValueError):
    pass


@dataclass
class CachePlan:
    """Binary reuse plan over (step, layer, family) plus the step gate."""

    steps: int
    layers: int
    families: tuple[str, ...]
    gates: np.ndarray  # (T, L, |families|) uint8
    step_gate: np.ndarray  # (T,) uint8
    cut_values: dict[str, float]  # per family plus "step"; -inf when tau=0
    thresholds: ThresholdSet
    provenance: dict = field(default_factory=dict)
    phase: str = PHASE_INITIAL
    tie_groups: tuple[frozenset[str], ...] = ()

    def __post_init__(self):
        self.gates = np.asarray(self.gates, dtype=np.uint8)
        self.step_gate = np.asarray(self.step_gate, dtype=np.uint8)
        self.validate()

    def validate(self) -> None:
        expect = (self.steps, self.layers, len(self.families))
        if self.gates.shape != expect:
            raise PlanInvariantError(f"gates shape {self.gates.shape} != {expect}")
        if self.step_gate.shape != (self.steps,):
            raise PlanInvariantError(f"step_gate shape {self.step_gate.shape} != ({self.steps},)")
        if not np.isin(self.gates, (0, 1)).all() or not np.isin(self.step_gate, (0, 1)).all():
            raise PlanInvariantError("plan entries must be 0 or 1")
        if self.gates[0].any() or self.gates[-1].any():
            raise PlanInvariantError("first and last step must be full compute (gates)")
        if self.step_gate[0] or self.step_gate[-1]:
            raise PlanInvariantError("first and last step must be full compute (step_gate)")
        w = warmup_steps(self.thresholds.tau_warmup, self.steps)
        if w > 0 and (self.gates[:w].any() or self.step_gate[:w].any()):
            raise PlanInvariantError(f"warm-up steps (first {w}) must be full compute")
        for group in self.tie_groups:
            members = sorted(group)
            idx = [self.families.index(f) for f in members if f in self.families]
            for other in idx[1:]:
                if not np.array_equal(self.gates[:, :, idx[0]], self.gates[:, :, other]):
                    raise PlanInvariantError(f"tied families {members} have unequal plan slices")

    def same_decisions(self, other: "CachePlan") -> bool:
        return (self.families == other.families
                and np.array_equal(self.gates, other.gates)
                and np.array_equal(self.step_gate, other.step_gate))

    def family_reuse_fraction(self, family: str) -> float:
        s = self.families.index(family)
        return float(self.gates[:, :, s].sum()) / (self.steps * self.layers)

    def step_skip_list(self) -> list[int]:
        return [int(t) for t in np.flatnonzero(self.step_gate)]

    def count_reuse_entries(self) -> int:
        return int(self.gates.sum())


def _group_cut(group: frozenset[str], rates: dict[str, RateMatrix],
               pool_sources: list[dict[str, RateMatrix]], tau: float) -> float:
    pool = []
    for source in pool_sources:
        for fam in sorted(group):
            pool.append(source[fam].defined_values())
    return quantile_cut(np.concatenate(pool), tau)


def initial_plan(rates: dict[str, RateMatrix], step_rates: StepRateVector,
                 thresholds: ThresholdSet, registry: FamilyRegistry,
                 pool_mode: str = "mean",
                 per_input_rates: list[dict[str, RateMatrix]] | None = None,
                 per_input_step_rates: list[StepRateVector] | None = None,
                 provenance: dict | None = None) -> CachePlan:
    """Threshold the averaged rates into the initial plan.

    ``pool_mode="mean"`` takes quantiles over the averaged matrices;
    ``"concat"`` pools every per-input entry instead (decisions still come
    from the averaged matrices). Families in a tie group share one pooled
    cut and one plan slice: an entry reuses only if every member family
    sits at or below the cut.
    """
    if pool_mode not in ("mean", "concat"):
        raise ValueError(f"unknown pool_mode {pool_mode!r}")
    if pool_mode == "concat" and per_input_rates is None:
        raise ValueError("concat pooling needs per-input rate matrices")
    families = registry.families
    steps = step_rates.steps
    layers = rates[families[0]].layers
    pool_sources = per_input_rates if pool_mode == "concat" else [rates]

    cuts: dict[str, float] = {}
    for fam in families:
        group = registry.tie_group_of(fam)
        cuts[fam] = _group_cut(group, rates, pool_sources, thresholds.per_family[fam])
    if pool_mode == "concat":
        step_pool = np.concatenate([v.defined_values() for v in per_input_step_rates])
    else:
        step_pool = step_rates.defined_values()
    cuts["step"] = quantile_cut(step_pool, thresholds.tau_step)

    gates = np.zeros((steps, layers, len(families)), dtype=np.uint8)
    step_gate = np.zeros(steps, dtype=np.uint8)
    for t in range(steps):
        src = rate_source_step(t)
        if not (0 <= src < steps):
            continue
        for s, fam in enumerate(families):
            group = registry.tie_group_of(fam)
            ok = np.ones(layers, dtype=bool)
            for member in sorted(group):
                m = rates[member]
                ok &= m.defined_mask[src] & (m.values[src, :] <= cuts[fam])
            gates[t, :, s] = ok
        if step_rates.defined_mask[src] and step_rates.values[src] <= cuts["step"]:
            step_gate[t] = 1

    _apply_forcing(gates, step_gate, thresholds)
    return CachePlan(steps=steps, layers=layers, families=families, gates=gates,
                     step_gate=step_gate, cut_values=cuts, thresholds=thresholds,
                     provenance=provenance or {}, phase=PHASE_INITIAL,
                     tie_groups=registry.tie_groups)


def _apply_forcing(gates: np.ndarray, step_gate: np.ndarray, thresholds: ThresholdSet) -> None:
    steps = step_gate.shape[0]
    gates[0] = 0
    gates[steps - 1] = 0
    step_gate[0] = 0
    step_gate[steps - 1] = 0
    w = warmup_steps(thresholds.tau_warmup, steps)
    if w > 0:
        gates[:w] = 0
        step_gate[:w] = 0


class _ShadowRecorder:
    """Chained-reuse bookkeeping for one full-compute trajectory.

    The shadow cache holds what the cache WOULD contain under the given
    plan; every fresh output is compared against it before the plan decides
    whether the shadow advances.
    """

    def __init__(self, plan: CachePlan):
        self.plan = plan
        self.fam_index = {f: i for i, f in enumerate(plan.families)}
        self.gap_l1 = np.zeros((plan.steps, plan.layers, len(plan.families)))
        self.net_gap_l1 = np.zeros(plan.steps)
        self.shadow: dict[tuple[int, str, int], np.ndarray] = {}
        self.shadow_net: np.ndarray | None = None

    def on_site(self, t, layer, family, sub_site, tensor, action):
        key = (layer, family, sub_site)
        prev = self.shadow.get(key)
        s = self.fam_index[family]
        if prev is not None:
            self.gap_l1[t, layer, s] += float(np.abs(tensor - prev).sum())
        if prev is None or not self.plan.gates[t, layer, s]:
            self.shadow[key] = tensor

    def on_net(self, t, z):
        if self.shadow_net is not None:
            self.net_gap_l1[t] = float(np.abs(z - self.shadow_net).sum())
        if self.shadow_net is None or not self.plan.step_gate[t]:
            self.shadow_net = z

    def rate_matrices(self) -> dict[str, RateMatrix]:
        mask = interior_mask(self.plan.steps)
        out = {}
        for fam, s in self.fam_index.items():
            values = np.zeros((self.plan.steps, self.plan.layers))
            for t in range(1, self.plan.steps - 1):
                for l in range(self.plan.layers):
                    values[t, l] = rho_layer(self.gap_l1[t + 1, l, s], self.gap_l1[t, l, s])
            out[fam] = RateMatrix(family=fam, values=values, defined_mask=mask.copy())
        return out

    def step_rate_vector(self) -> StepRateVector:
        values = np.zeros(self.plan.steps)
        for t in range(1, self.plan.steps - 1):
            values[t] = rho_layer(self.net_gap_l1[t + 1], self.net_gap_l1[t])
        return StepRateVector(values=values, defined_mask=interior_mask(self.plan.steps))


def resample_correct_many(backbone, schedule: SampleSchedule,
                          inputs: list[tuple[np.ndarray, int]], plans: list[CachePlan],
                          thresholds_list: list[ThresholdSet | None] | None = None,
                          jobs: int = 1) -> list[CachePlan]:
    """Correct several initial plans from one full-compute pass per input.

    The chained-reuse bookkeeping is per plan (each keeps its own shadow
    caches), but the underlying trajectories do not depend on the plan, so
    a shared pass feeds every recorder.
    """
    if not plans:
        return []
    registry = backbone.registry
    for plan0 in plans:
        if plan0.steps != schedule.steps or plan0.layers != backbone.cfg.layers \
                or plan0.families != registry.families:
            raise ValueError(
                f"plan dims (T={plan0.steps}, L={plan0.layers}, families={plan0.families}) do not "
                f"match backbone/schedule (T={schedule.steps}, L={backbone.cfg.layers}, "
                f"families={registry.families})")
    if thresholds_list is None:
        thresholds_list = [None] * len(plans)

    def one(pair):
        x_init, cond = pair
        recs = [_ShadowRecorder(p) for p in plans]

        def fan_out(t, layer, family, sub_site, tensor, action):
            for rec in recs:
                rec.on_site(t, layer, family, sub_site, tensor, action)

        executor = AllComputeExecutor(plans[0].layers, plans[0].families)
        trajectory, _, _ = run_trajectory(backbone, schedule, x_init, cond,
                                          executor, on_site=fan_out)
        for t, z in enumerate(trajectory):
            for rec in recs:
                rec.on_net(t, z)
        return recs

    if jobs > 1 and len(inputs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_input_recs = list(pool.map(one, inputs))
    else:
        per_input_recs = [one(pair) for pair in inputs]

    out = []
    for i, plan0 in enumerate(plans):
        recorders = [recs[i] for recs in per_input_recs]
        corrected = mean_rate_matrices([rec.rate_matrices() for rec in recorders])
        corrected_step = mean_step_rates([rec.step_rate_vector() for rec in recorders])
        thresholds = thresholds_list[i] or plan0.thresholds

        gates = np.zeros_like(plan0.gates)
        step_gate = np.zeros_like(plan0.step_gate)
        for t in range(plan0.steps):
            src = rate_source_step(t)
            if not (0 <= src < plan0.steps):
                continue
            for s, fam in enumerate(plan0.families):
                group = registry.tie_group_of(fam)
                ok = np.ones(plan0.layers, dtype=bool)
                for member in sorted(group):
                    m = corrected[member]
                    ok &= m.defined_mask[src] & (m.values[src, :] <= plan0.cut_values[fam])
                gates[t, :, s] = ok
            if corrected_step.defined_mask[src] \
                    and corrected_step.values[src] <= plan0.cut_values["step"]:
                step_gate[t] = 1
        _apply_forcing(gates, step_gate, thresholds)
        out.append(CachePlan(steps=plan0.steps, layers=plan0.layers, families=plan0.families,
                             gates=gates, step_gate=step_gate,
                             cut_values=dict(plan0.cut_values), thresholds=thresholds,
                             provenance=dict(plan0.provenance), phase=PHASE_CORRECTED,
                             tie_groups=plan0.tie_groups))
    return out


def resample_correct(backbone, schedule: SampleSchedule,
                     inputs: list[tuple[np.ndarray, int]], plan0: CachePlan,
                     thresholds: ThresholdSet | None = None, jobs: int = 1) -> CachePlan:
    """Phase-2 correction: re-threshold chained-reuse rates with the
    Phase-1 cut values (frozen numbers, not recomputed quantiles)."""
    return resample_correct_many(backbone, schedule, inputs, [plan0], [thresholds],
                                 jobs=jobs)[0]


def _input_descriptors(inputs) -> list[dict]:
    out = []
    for x_init, cond in inputs:
        digest = hashlib.sha256(np.ascontiguousarray(x_init).tobytes()).hexdigest()[:16]
        out.append({"cond": int(cond), "x_sha256_16": digest})
    return out


def calibrate(backbone, schedule: SampleSchedule, inputs, thresholds: ThresholdSet, *,
              phase1_only: bool = False, pool_mode: str = "mean", jobs: int = 1,
              collection: RateCollection | None = None) -> CachePlan:
    """Full two-phase calibration; pass ``collection`` to reuse Phase-1 rates."""
    if collection is None:
        collection = collect_rates(backbone, schedule, inputs, jobs=jobs)
    provenance = {
        "backbone": backbone.describe(),
        "schedule_hash": schedule.content_hash(),
        "thresholds": thresholds.source_fields or thresholds.to_fields(),
        "calibration_inputs": _input_descriptors(inputs),
        "pool_mode": pool_mode,
    }
    plan = initial_plan(collection.rates, collection.step_rates, thresholds,
                        backbone.registry, pool_mode=pool_mode,
                        per_input_rates=collection.per_input_rates,
                        per_input_step_rates=collection.per_input_step_rates,
                        provenance=provenance)
    if phase1_only:
        return plan
    return resample_correct(backbone, schedule, inputs, plan, thresholds, jobs=jobs)
