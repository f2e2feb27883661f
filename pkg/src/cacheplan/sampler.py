"""Deterministic iterative sampling loop.

One loop serves both calibration and scheduled inference: the executor hook
decides, per step, whether the forward pass runs (and with which gate) or the
previous network output is reused wholesale. The state update is an Euler
step on the deterministic flow, so two runs with identical inputs are
bit-identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .gating import GateDirective, ModuleCache, SiteTouch


@dataclass(frozen=True)
class SampleSchedule:
    """Step count plus a strictly monotone sigma grid of length steps + 1."""

    steps: int
    sigma: np.ndarray

    def __post_init__(self):
        if self.steps < 3:
            raise ValueError(f"need at least 3 steps, got {self.steps}")
        sig = np.asarray(self.sigma, dtype=np.float64)
        if sig.shape != (self.steps + 1,):
            raise ValueError(f"sigma must have length steps+1={self.steps + 1}, got {sig.shape}")
        d = np.diff(sig)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("sigma must be strictly monotone")
        object.__setattr__(self, "sigma", sig)

    @classmethod
    def linear(cls, steps: int, start: float = 1.0, end: float = 0.0) -> "SampleSchedule":
        return cls(steps=steps, sigma=np.linspace(start, end, steps + 1))

    @classmethod
    def cosine(cls, steps: int) -> "SampleSchedule":
        """Half-cosine from 1 to 0: increments grow to mid-run, then shrink."""
        grid = np.arange(steps + 1) / steps
        return cls(steps=steps, sigma=0.5 * (1.0 + np.cos(np.pi * grid)))

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(str(self.steps).encode())
        h.update(self.sigma.tobytes())
        return h.hexdigest()[:16]


@dataclass
class TrajectoryStats:
    """Raw per-run counters filled in by run_trajectory."""

    steps_total: int = 0
    step_skips: int = 0
    computed: dict[str, int] = field(default_factory=dict)
    reused: dict[str, int] = field(default_factory=dict)
    flops: int = 0
    wall_time_s: float = 0.0
    touched: list[list[SiteTouch]] = field(default_factory=list)


class AllComputeExecutor:
    """Baseline executor: every site computes at every step."""

    def __init__(self, layers: int, families: tuple[str, ...]):
        self._gate = GateDirective.all_compute(layers, families)

    def gate_for_step(self, t: int, cache: ModuleCache) -> GateDirective:
        return self._gate


def run_trajectory(backbone, schedule: SampleSchedule, x_init: np.ndarray, cond: int,
                   executor, on_site=None, collect_touched: bool = False):
    """Run all steps, returning (trajectory of z_t, x_final, TrajectoryStats).

    ``executor.gate_for_step(t, cache)`` supplies the per-step directive and
    may mutate the cache (mask events). A step-skip directive substitutes the
    cached network output; otherwise the backbone runs under the directive.
    ``on_site(t, layer, family, sub_site, tensor, action)`` observes every
    gated site of executed steps.
    """
    x = np.asarray(x_init, dtype=np.float64)
    if x.shape != (backbone.cfg.tokens, backbone.cfg.channels):
        raise ValueError(
            f"x_init shape {x.shape} does not match backbone "
            f"({backbone.cfg.tokens}, {backbone.cfg.channels})")
    sig = schedule.sigma
    cache = ModuleCache()
    stats = TrajectoryStats(steps_total=schedule.steps)
    trajectory: list[np.ndarray] = []
    t0 = time.perf_counter()
    for t in range(schedule.steps):
        gate = executor.gate_for_step(t, cache)
        if gate.step_skip:
            if cache.last_net is None:
                raise RuntimeError(f"step skip at t={t} with no previous network output")
            z = cache.last_net
            stats.step_skips += 1
            if collect_touched:
                stats.touched.append([])
        else:
            z, touched = backbone.forward_step(x, cond, t, gate, cache, on_site=on_site,
                                               sigma=float(sig[t]))
            cache.last_net = z
            for touch in touched:
                bucket = stats.computed if touch.action == "COMPUTE" else stats.reused
                bucket[touch.family] = bucket.get(touch.family, 0) + 1
            stats.flops += backbone.step_flops(touched)
            if collect_touched:
                stats.touched.append(touched)
        trajectory.append(z)
        x = x + (sig[t + 1] - sig[t]) * z
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state after step t={t}")
    stats.wall_time_s = time.perf_counter() - t0
    return trajectory, x, stats


def make_inputs(tokens: int, channels: int, count: int, *, seed: int = 0,
                cond_classes: int = 1) -> list[tuple[np.ndarray, int]]:
    """Seeded standard-normal initial latents with cycling class conditions."""
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        out.append((rng.standard_normal((tokens, channels)), i % cond_classes))
    return out
