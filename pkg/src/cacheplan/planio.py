"""Versioned on-disk formats: plan JSON, stats CSV.

Plan files are UTF-8 JSON with a fixed key order and floats rendered with
17 significant digits so a round trip reproduces every value bit-exactly.
Loading validates the full set of plan invariants and rejects anything
inconsistent with a structured error naming the offending field.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .planner import CachePlan, PlanInvariantError, ThresholdSet

FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


class PlanFormatError(ValueError):
    """Raised for any unreadable or invariant-violating plan file."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.field_path = path


def _emit(value, out: list[str]) -> None:
    if value is None:
        out.append("null")
    elif isinstance(value, bool):
        out.append("true" if value else "false")
    elif isinstance(value, (int, np.integer)):
        out.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        v = float(value)
        out.append("null" if not math.isfinite(v) else format(v, ".17g"))
    elif isinstance(value, str):
        out.append(json.dumps(value))
    elif isinstance(value, dict):
        out.append("{")
        for i, (k, v) in enumerate(value.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _emit(v, out)
        out.append("}")
    elif isinstance(value, (list, tuple, np.ndarray)):
        seq = value.tolist() if isinstance(value, np.ndarray) else list(value)
        out.append("[")
        for i, v in enumerate(seq):
            if i:
                out.append(",")
            _emit(v, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_json(value) -> str:
    out: list[str] = []
    _emit(value, out)
    return "".join(out)


def plan_to_obj(plan: CachePlan) -> dict:
    cuts = {fam: plan.cut_values[fam] for fam in plan.families}
    cuts["step"] = plan.cut_values["step"]
    return {
        "format_version": FORMAT_VERSION,
        "steps": plan.steps,
        "layers": plan.layers,
        "families": list(plan.families),
        "gates": plan.gates,
        "step_gate": plan.step_gate,
        "cut_values": cuts,
        "thresholds": plan.thresholds.to_fields(),
        "tie_groups": [sorted(g) for g in plan.tie_groups],
        "phase": plan.phase,
        "provenance": plan.provenance,
    }


def dumps_plan(plan: CachePlan) -> str:
    return dumps_json(plan_to_obj(plan))


def save_plan(plan: CachePlan, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_plan(plan))
        fh.write("\n")


def _expect(obj: dict, key: str, kinds, path: str = ""):
    where = f"{path}.{key}" if path else key
    if key not in obj:
        raise PlanFormatError("missing required field", where)
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise PlanFormatError(f"expected {kinds}, got {type(value).__name__}", where)
    return value


def _reject_constant(name):
    raise PlanFormatError(f"non-finite JSON constant {name!r} not allowed")


def parse_plan(text: str | bytes) -> CachePlan:
    try:
        obj = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise PlanFormatError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise PlanFormatError("plan file must hold a JSON object")

    version = _expect(obj, "format_version", int)
    if version not in SUPPORTED_VERSIONS:
        raise PlanFormatError(
            f"unsupported format_version {version}; supported versions: {list(SUPPORTED_VERSIONS)}",
            "format_version")
    steps = _expect(obj, "steps", int)
    layers = _expect(obj, "layers", int)
    families = _expect(obj, "families", list)
    if not families or not all(isinstance(f, str) for f in families):
        raise PlanFormatError("must be a non-empty list of strings", "families")
    families = tuple(families)

    gates_raw = _expect(obj, "gates", list)
    if len(gates_raw) != steps:
        raise PlanFormatError(f"length {len(gates_raw)} != steps {steps}", "gates")
    gates = np.zeros((steps, layers, len(families)), dtype=np.uint8)
    for t, row in enumerate(gates_raw):
        if not isinstance(row, list) or len(row) != layers:
            raise PlanFormatError(f"expected {layers} layer rows", f"gates[{t}]")
        for l, cell in enumerate(row):
            if not isinstance(cell, list) or len(cell) != len(families):
                raise PlanFormatError(f"expected {len(families)} family entries", f"gates[{t}][{l}]")
            for s, bit in enumerate(cell):
                if isinstance(bit, bool) or not isinstance(bit, int) or bit not in (0, 1):
                    raise PlanFormatError(f"entries must be 0 or 1, got {bit!r}",
                                          f"gates[{t}][{l}][{s}]")
                gates[t, l, s] = bit

    step_raw = _expect(obj, "step_gate", list)
    if len(step_raw) != steps:
        raise PlanFormatError(f"length {len(step_raw)} != steps {steps}", "step_gate")
    step_gate = np.zeros(steps, dtype=np.uint8)
    for t, bit in enumerate(step_raw):
        if isinstance(bit, bool) or not isinstance(bit, int) or bit not in (0, 1):
            raise PlanFormatError(f"entries must be 0 or 1, got {bit!r}", f"step_gate[{t}]")
        step_gate[t] = bit

    cuts_raw = _expect(obj, "cut_values", dict)
    unknown_cuts = set(cuts_raw) - {*families, "step"}
    if unknown_cuts:
        raise PlanFormatError(f"unknown cut keys {sorted(unknown_cuts)}", "cut_values")
    cut_values: dict[str, float] = {}
    for key in (*families, "step"):
        if key not in cuts_raw:
            raise PlanFormatError("missing cut value", f"cut_values.{key}")
        v = cuts_raw[key]
        if v is None:
            cut_values[key] = float("-inf")
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            cut_values[key] = float(v)
        else:
            raise PlanFormatError(f"expected number or null, got {v!r}", f"cut_values.{key}")

    thr_raw = _expect(obj, "thresholds", dict)
    tie_raw = obj.get("tie_groups", [])
    if not isinstance(tie_raw, list):
        raise PlanFormatError("expected a list of family lists", "tie_groups")
    tie_groups = []
    for i, group in enumerate(tie_raw):
        if not isinstance(group, list) or not all(isinstance(f, str) for f in group):
            raise PlanFormatError("expected a list of family names", f"tie_groups[{i}]")
        for fam in group:
            if fam not in families:
                raise PlanFormatError(f"unknown family {fam!r}", f"tie_groups[{i}]")
        tie_groups.append(frozenset(group))
    tie_groups = tuple(tie_groups)

    try:
        per_family = {}
        tau_step = tau_warmup = None
        for key, value in thr_raw.items():
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise PlanFormatError(f"expected number, got {value!r}", f"thresholds.{key}")
            if key == "tau_step":
                tau_step = float(value)
            elif key == "tau_warmup":
                tau_warmup = float(value)
            elif key.startswith("tau_") and key[4:] in families:
                per_family[key[4:]] = float(value)
            else:
                raise PlanFormatError("unknown threshold field", f"thresholds.{key}")
        if tau_step is None or tau_warmup is None:
            raise PlanFormatError("missing tau_step or tau_warmup", "thresholds")
        missing = [f for f in families if f not in per_family]
        if missing:
            raise PlanFormatError(f"missing per-family thresholds for {missing}", "thresholds")
        thresholds = ThresholdSet(per_family=per_family, tau_step=tau_step,
                                  tau_warmup=tau_warmup, tie_groups=tie_groups)
    except ValueError as exc:
        if isinstance(exc, PlanFormatError):
            raise
        raise PlanFormatError(str(exc), "thresholds") from None

    phase = _expect(obj, "phase", str)
    if phase not in ("initial", "corrected"):
        raise PlanFormatError(f"unknown phase {phase!r}", "phase")
    provenance = obj.get("provenance", {})
    if not isinstance(provenance, dict):
        raise PlanFormatError("expected an object", "provenance")

    try:
        return CachePlan(steps=steps, layers=layers, families=families, gates=gates,
                         step_gate=step_gate, cut_values=cut_values, thresholds=thresholds,
                         provenance=provenance, phase=phase, tie_groups=tie_groups)
    except PlanInvariantError as exc:
        raise PlanFormatError(f"plan invariant violated: {exc}") from None


def load_plan(path: str) -> CachePlan:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_plan(fh.read())


STATS_FIXED_COLUMNS = ("operating_point", "flops", "speedup_vs_baseline", "latency_s")
STATS_TAIL_COLUMNS = ("step_skip_fraction", "final_psnr", "final_mse")


def stats_columns(families: tuple[str, ...]) -> tuple[str, ...]:
    return STATS_FIXED_COLUMNS + tuple(f"skip_{f}" for f in families) + STATS_TAIL_COLUMNS


def save_stats(rows: list[dict], families: tuple[str, ...], path: str) -> None:
    """Write one CSV row per operating point with the fixed column schema."""
    columns = stats_columns(families)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(columns) + "\r\n")
        for row in rows:
            cells = []
            for col in columns:
                v = row[col]
                if isinstance(v, float):
                    cells.append(format(v, ".17g"))
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\r\n")


def load_stats(path: str) -> list[dict]:
    import csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
