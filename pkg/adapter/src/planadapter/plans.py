"""Plan-file access in the shared JSON schema (format_version 1).

The adapter reads and writes exactly the fields the primary tool defines:
steps, layers, families, gates, step_gate, cut_values, thresholds,
tie_groups, phase, provenance. Nothing else is ever emitted, so files
produced here load unmodified on the other side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1


class PlanSchemaError(ValueError):
    pass


@dataclass
class AdapterPlan:
    steps: int
    layers: int
    families: tuple[str, ...]
    gates: np.ndarray  # (T, L, |families|) uint8
    step_gate: np.ndarray  # (T,)
    cut_values: dict[str, float]
    thresholds: dict[str, float]
    phase: str = "initial"
    tie_groups: list[list[str]] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.gates.shape != (self.steps, self.layers, len(self.families)):
            raise PlanSchemaError(f"gates shape {self.gates.shape} inconsistent with dims")
        if self.step_gate.shape != (self.steps,):
            raise PlanSchemaError("step_gate length inconsistent with steps")
        if self.gates[0].any() or self.gates[-1].any() or self.step_gate[0] or self.step_gate[-1]:
            raise PlanSchemaError("first and last step must be full compute")

    def to_obj(self) -> dict:
        cuts = {}
        for key in (*self.families, "step"):
            v = self.cut_values[key]
            cuts[key] = None if not math.isfinite(v) else v
        return {
            "format_version": FORMAT_VERSION,
            "steps": self.steps,
            "layers": self.layers,
            "families": list(self.families),
            "gates": self.gates.astype(int).tolist(),
            "step_gate": self.step_gate.astype(int).tolist(),
            "cut_values": cuts,
            "thresholds": dict(self.thresholds),
            "tie_groups": [sorted(g) for g in self.tie_groups],
            "phase": self.phase,
            "provenance": self.provenance,
        }


def save_plan_file(plan: AdapterPlan, path: str) -> None:
    plan.validate()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_obj(), fh)
        fh.write("\n")


def load_plan_file(path: str) -> AdapterPlan:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format_version") != FORMAT_VERSION:
        raise PlanSchemaError(
            f"unsupported format_version {obj.get('format_version')}; supported: [{FORMAT_VERSION}]")
    try:
        families = tuple(obj["families"])
        cuts = {k: (float("-inf") if v is None else float(v))
                for k, v in obj["cut_values"].items()}
        plan = AdapterPlan(
            steps=int(obj["steps"]),
            layers=int(obj["layers"]),
            families=families,
            gates=np.asarray(obj["gates"], dtype=np.uint8),
            step_gate=np.asarray(obj["step_gate"], dtype=np.uint8),
            cut_values=cuts,
            thresholds={k: float(v) for k, v in obj["thresholds"].items()},
            phase=obj.get("phase", "initial"),
            tie_groups=[list(g) for g in obj.get("tie_groups", [])],
            provenance=obj.get("provenance", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PlanSchemaError(f"malformed plan file: {exc}") from None
    plan.validate()
    return plan
