"""Family-to-submodule mapping files.

A mapping names the denoiser attribute on the pipeline and, per plan
family, the dotted module-path patterns (with a ``{layer}`` placeholder)
of every sub-site that family governs. A dual-stream attention family
lists two patterns, one for the image attention and one for the
context/text attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class FamilyMapping:
    denoiser: str
    families: dict[str, tuple[str, ...]]  # family -> sub-site path patterns

    def sub_sites(self, family: str) -> tuple[str, ...]:
        return self.families[family]


def load_mapping(source) -> FamilyMapping:
    """Parse a mapping from a dict or a JSON file path."""
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    else:
        obj = source
    if not isinstance(obj, dict) or "families" not in obj:
        raise MappingError("mapping must be an object with a 'families' table")
    denoiser = obj.get("denoiser", "denoiser")
    families = {}
    for fam, patterns in obj["families"].items():
        if isinstance(patterns, str):
            patterns = [patterns]
        if not patterns or not all(isinstance(p, str) for p in patterns):
            raise MappingError(f"family {fam!r} must map to one or more path patterns")
        for p in patterns:
            if "{layer}" not in p:
                raise MappingError(f"pattern {p!r} for family {fam!r} lacks a {{layer}} placeholder")
        families[fam] = tuple(patterns)
    if not families:
        raise MappingError("mapping defines no families")
    return FamilyMapping(denoiser=denoiser, families=families)


def resolve_module(root, path: str):
    node = root
    for part in path.split("."):
        if part.isdigit():
            node = node[int(part)]
        else:
            if not hasattr(node, part):
                raise MappingError(f"pipeline has no submodule at {path!r} (missing {part!r})")
            node = getattr(node, part)
    return node
