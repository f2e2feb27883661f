"""Module patching that replays a cache plan on a live pipeline.

The pipeline contract is structural: a denoiser module invoked exactly once
per sampling step, and gated submodules reachable by dotted paths. The
wrapped denoiser counts its own steps; when the plan's step gate fires, the
whole forward body is short-circuited and the previous prediction returned,
with all layer caches masked once at the next executed step. Inside an
executed step, each wrapped submodule either returns its cached output or
computes and overwrites the cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .mapping import FamilyMapping, MappingError, load_mapping, resolve_module
from .plans import AdapterPlan, load_plan_file


class AttachError(RuntimeError):
    pass


@dataclass
class AdapterState:
    plan: AdapterPlan
    step: int = 0
    denoiser_calls: int = 0
    mask_pending: bool = False
    last_net: torch.Tensor | None = None
    slots: dict = field(default_factory=dict)
    computed: dict = field(default_factory=dict)
    reused: dict = field(default_factory=dict)
    originals: list = field(default_factory=list)

    def reset(self) -> None:
        self.step = 0
        self.denoiser_calls = 0
        self.mask_pending = False
        self.last_net = None
        self.slots.clear()

    def _count(self, bucket: dict, family: str) -> None:
        bucket[family] = bucket.get(family, 0) + 1


def _wrap_site(module, state: AdapterState, layer: int, family: str, sub: int):
    original = module.forward
    fam_index = state.plan.families.index(family)
    key = (layer, family, sub)

    def forward(*args, **kwargs):
        t = state.step
        if state.plan.gates[t, layer, fam_index] and key in state.slots:
            state._count(state.reused, family)
            return state.slots[key]
        out = original(*args, **kwargs)
        state.slots[key] = out
        state._count(state.computed, family)
        return out

    module.forward = forward
    state.originals.append((module, original))


def _wrap_denoiser(module, state: AdapterState):
    original = module.forward

    def forward(*args, **kwargs):
        t = state.step
        if t >= state.plan.steps:
            raise AttachError(
                f"denoiser called {t + 1} times but the plan has {state.plan.steps} steps; "
                "call state.reset() between generations")
        if state.plan.step_gate[t]:
            if state.last_net is None:
                raise AttachError(f"step gate set at t={t} with no previous prediction")
            state.mask_pending = True
            state.step += 1
            out = state.last_net
        else:
            if state.mask_pending:
                state.slots.clear()
                state.mask_pending = False
            out = original(*args, **kwargs)
            state.denoiser_calls += 1
            state.last_net = out
            state.step += 1
        if state.step == state.plan.steps:
            # generation finished; caches do not carry across runs
            state.step = 0
            state.mask_pending = False
            state.slots.clear()
            state.last_net = None
        return out

    module.forward = forward
    state.originals.append((module, original))


def attach(pipeline, plan_file: str | AdapterPlan, family_mapping) -> AdapterState:
    """Patch the pipeline in place; returns the adapter state (counters).

    Refuses when the plan's step count does not match the pipeline or when
    a plan family has no module mapping.
    """
    plan = plan_file if isinstance(plan_file, AdapterPlan) else load_plan_file(plan_file)
    mapping = family_mapping if isinstance(family_mapping, FamilyMapping) \
        else load_mapping(family_mapping)
    steps = getattr(pipeline, "num_steps", None)
    if steps is not None and steps != plan.steps:
        raise AttachError(f"plan has {plan.steps} steps but the pipeline runs {steps}")
    missing = [f for f in plan.families if f not in mapping.families]
    if missing:
        raise AttachError(f"no module mapping for plan families {missing}")

    state = AdapterState(plan=plan)
    denoiser = resolve_module(pipeline, mapping.denoiser)
    for layer in range(plan.layers):
        for family in plan.families:
            for sub, pattern in enumerate(mapping.sub_sites(family)):
                path = pattern.format(layer=layer)
                try:
                    module = resolve_module(pipeline, path)
                except MappingError as exc:
                    raise AttachError(str(exc)) from None
                _wrap_site(module, state, layer, family, sub)
    _wrap_denoiser(denoiser, state)
    pipeline._cacheplan_state = state
    return state


def detach(pipeline) -> None:
    """Restore every patched forward."""
    state: AdapterState | None = getattr(pipeline, "_cacheplan_state", None)
    if state is None:
        return
    for module, original in state.originals:
        module.forward = original
    state.originals.clear()
    del pipeline._cacheplan_state
