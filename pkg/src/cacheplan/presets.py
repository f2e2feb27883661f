"""Built-in threshold presets and sweep bundles.

Preset dicts use the external field names (tau_step, tau_warmup,
tau_<family>); ``attn`` is accepted as an alias for the toy DiT's mhsa
family so the published DiT-style names load unchanged.
"""

from __future__ import annotations

from .backbones import FamilyRegistry
from .planner import ThresholdSet

# Field-name aliases per backbone kind.
THRESHOLD_ALIASES = {
    "toy_dit": {"attn": "mhsa"},
    "scripted": {"attn": "mhsa"},
    "toy_dual": {},
}

PRESETS: dict[str, dict] = {
    "dit-fast": {"tau_warmup": 0.00, "tau_step": 0.63, "tau_attn": 0.22, "tau_ffn": 0.22},
    "dit-slow": {"tau_warmup": 0.00, "tau_step": 0.61, "tau_attn": 0.20, "tau_ffn": 0.20},
    "flux-fast": {"tau_warmup": 0.10, "tau_step": 0.70, "tau_dual_attn": 0.68,
                  "tau_dual_ff": 0.68, "tau_dual_context_ff": 0.68,
                  "tau_single_attn": 0.68, "tau_single_ff": 0.68},
    "flux-slow": {"tau_warmup": 0.22, "tau_step": 0.72, "tau_dual_attn": 0.68,
                  "tau_dual_ff": 0.66, "tau_dual_context_ff": 0.00,
                  "tau_single_attn": 0.68, "tau_single_ff": 0.62},
}

# Module-threshold bundles for the speed-quality sweep; each is crossed
# with STEP_TAU_SWEEP to form one operating point per (bundle, tau_step).
DUAL_SWEEP_BUNDLES: tuple[dict, ...] = (
    {"tau_warmup": 0.10, "tau_dual_attn": 0.68, "tau_dual_ff": 0.68,
     "tau_dual_context_ff": 0.68, "tau_single_attn": 0.68, "tau_single_ff": 0.68},
    {"tau_warmup": 0.10, "tau_dual_attn": 0.68, "tau_dual_ff": 0.00,
     "tau_dual_context_ff": 0.00, "tau_single_attn": 0.68, "tau_single_ff": 0.00},
    {"tau_warmup": 0.15, "tau_dual_attn": 0.68, "tau_dual_ff": 0.00,
     "tau_dual_context_ff": 0.00, "tau_single_attn": 0.70, "tau_single_ff": 0.00},
    {"tau_warmup": 0.22, "tau_dual_attn": 0.68, "tau_dual_ff": 0.66,
     "tau_dual_context_ff": 0.00, "tau_single_attn": 0.68, "tau_single_ff": 0.62},
    {"tau_warmup": 0.22, "tau_dual_attn": 0.68, "tau_dual_ff": 0.40,
     "tau_dual_context_ff": 0.00, "tau_single_attn": 0.68, "tau_single_ff": 0.20},
    {"tau_warmup": 0.25, "tau_dual_attn": 0.68, "tau_dual_ff": 0.00,
     "tau_dual_context_ff": 0.00, "tau_single_attn": 0.68, "tau_single_ff": 0.00},
    {"tau_warmup": 0.25, "tau_dual_attn": 0.50, "tau_dual_ff": 0.00,
     "tau_dual_context_ff": 0.00, "tau_single_attn": 0.50, "tau_single_ff": 0.00},
)

# Toy-DiT analogs of the bundles above (warm-up kept, attention/ff columns
# mapped onto the two-family stack).
DIT_SWEEP_BUNDLES: tuple[dict, ...] = (
    {"tau_warmup": 0.10, "tau_attn": 0.68, "tau_ffn": 0.68},
    {"tau_warmup": 0.10, "tau_attn": 0.68, "tau_ffn": 0.00},
    {"tau_warmup": 0.15, "tau_attn": 0.68, "tau_ffn": 0.00},
    {"tau_warmup": 0.22, "tau_attn": 0.68, "tau_ffn": 0.66},
    {"tau_warmup": 0.22, "tau_attn": 0.68, "tau_ffn": 0.40},
    {"tau_warmup": 0.25, "tau_attn": 0.68, "tau_ffn": 0.00},
    {"tau_warmup": 0.25, "tau_attn": 0.50, "tau_ffn": 0.00},
)

STEP_TAU_SWEEP = (0.40, 0.50, 0.60, 0.70, 0.75)


def preset_fields(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return dict(PRESETS[name])


def thresholds_from_fields(fields: dict, registry: FamilyRegistry,
                           backbone_kind: str) -> ThresholdSet:
    aliases = THRESHOLD_ALIASES.get(backbone_kind, {})
    return ThresholdSet.from_fields(fields, registry, aliases=aliases)


def sweep_bundles_for(backbone_kind: str) -> tuple[dict, ...]:
    return DUAL_SWEEP_BUNDLES if backbone_kind == "toy_dual" else DIT_SWEEP_BUNDLES
