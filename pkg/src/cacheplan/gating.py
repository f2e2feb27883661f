"""Per-step gate directives and the module-output cache.

These are the two pieces of state shared between a backbone's gated forward
pass and the plan-following executor: the directive says which sites reuse
their cached output this step, and the cache owns those outputs plus the
one-shot mask flag raised after a whole-step skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

COMPUTE = "COMPUTE"
REUSE = "REUSE"


class SiteTouch(NamedTuple):
    layer: int
    family: str
    sub_site: int
    action: str  # COMPUTE | REUSE


@dataclass
class GateDirective:
    """Reuse decisions for one step: a (layers, families) boolean grid.

    ``step_skip`` short-circuits the whole forward pass; no per-site entry
    is consulted on a skipped step.
    """

    families: tuple[str, ...]
    reuse: np.ndarray  # (L, |families|) bool
    step_skip: bool = False

    @classmethod
    def all_compute(cls, layers: int, families: tuple[str, ...]) -> "GateDirective":
        return cls(families=tuple(families), reuse=np.zeros((layers, len(families)), dtype=bool))

    @classmethod
    def skip_step(cls) -> "GateDirective":
        return cls(families=(), reuse=np.zeros((0, 0), dtype=bool), step_skip=True)

    def wants_reuse(self, layer: int, family: str) -> bool:
        return bool(self.reuse[layer, self.families.index(family)])


@dataclass
class ModuleCache:
    """Holds the last stored output per (layer, family, sub_site) slot.

    ``last_net`` is the previous network output; ``mask_pending`` is set by
    a step-level reuse and tells the next executed step to drop every layer
    slot once before gating.
    """

    slots: dict[tuple[int, str, int], np.ndarray] = field(default_factory=dict)
    last_net: np.ndarray | None = None
    mask_pending: bool = False

    def get(self, layer: int, family: str, sub_site: int) -> np.ndarray | None:
        return self.slots.get((layer, family, sub_site))

    def put(self, layer: int, family: str, sub_site: int, value: np.ndarray) -> None:
        self.slots[(layer, family, sub_site)] = value

    def has(self, layer: int, family: str, sub_site: int) -> bool:
        return (layer, family, sub_site) in self.slots

    def clear_layer_slots(self) -> None:
        self.slots.clear()
