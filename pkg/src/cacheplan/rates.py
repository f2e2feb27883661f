"""Change-rate statistics over calibration trajectories.

For every gated site the recorder keeps one rolling previous tensor and
accumulates first-difference L1 norms per (step, layer, family); the rate at
step t is the ratio of the step t->t+1 difference to the step t-1->t
difference. The same ratio over network outputs gives the step-level rate
vector. Rates are undefined at the first and last step (a neighbouring
difference is missing); those entries are masked out of all quantile pools
and painted by fixed conventions in exported heatmaps.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .metrics import cosine_sim, l1_diff_norm
from .sampler import AllComputeExecutor, SampleSchedule, run_trajectory

# Denominator guard for the rate ratio; a frozen feature (both differences
# zero) reads as rate 0 = maximally cacheable.
RATE_EPS = 1e-12

HEATMAP_MODES = ("log2-rho", "mse", "cos")


def interior_mask(steps: int) -> np.ndarray:
    mask = np.zeros(steps, dtype=bool)
    mask[1:steps - 1] = True
    return mask


@dataclass
class RateMatrix:
    """Per-family (steps, layers) grid of change rates with a defined mask."""

    family: str
    values: np.ndarray  # (T, L) float64
    defined_mask: np.ndarray  # (T,) bool, broadcast over layers

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.defined_mask = np.asarray(self.defined_mask, dtype=bool)
        if self.defined_mask.shape != (self.values.shape[0],):
            raise ValueError("defined_mask must have one entry per step")
        defined = self.values[self.defined_mask]
        if defined.size and not (np.all(np.isfinite(defined)) and np.all(defined >= 0)):
            raise ValueError(f"rate matrix for {self.family!r} has invalid defined entries")

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def layers(self) -> int:
        return self.values.shape[1]

    def defined_values(self) -> np.ndarray:
        return self.values[self.defined_mask].ravel()


@dataclass
class StepRateVector:
    values: np.ndarray  # (T,)
    defined_mask: np.ndarray  # (T,) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.defined_mask = np.asarray(self.defined_mask, dtype=bool)
        defined = self.values[self.defined_mask]
        if defined.size and not (np.all(np.isfinite(defined)) and np.all(defined >= 0)):
            raise ValueError("step rate vector has invalid defined entries")

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    def defined_values(self) -> np.ndarray:
        return self.values[self.defined_mask]


@dataclass
class RateCollection:
    """collect_rates output: per-input matrices plus their entrywise mean."""

    families: tuple[str, ...]
    rates: dict[str, RateMatrix]
    step_rates: StepRateVector
    per_input_rates: list[dict[str, RateMatrix]]
    per_input_step_rates: list[StepRateVector]
    mse_maps: dict[str, np.ndarray] = field(default_factory=dict)
    cos_maps: dict[str, np.ndarray] = field(default_factory=dict)


def rho_layer(d_next: float, d_prev: float, eps: float = RATE_EPS) -> float:
    """Ratio of consecutive first-difference norms, epsilon-guarded."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    return d_next / (d_prev + eps)


class _TrajectoryRecorder:
    """Online accumulator for one all-compute trajectory.

    Memory stays at one rolling previous tensor per sub-site plus scalar
    grids; the full tensor trace is never retained.
    """

    def __init__(self, steps: int, layers: int, families: tuple[str, ...]):
        self.steps = steps
        self.layers = layers
        self.families = families
        self.fam_index = {f: i for i, f in enumerate(families)}
        shape = (steps, layers, len(families))
        self.diff_l1 = np.zeros(shape)
        self.sq_diff = np.zeros(shape)
        self.count = np.zeros(shape)
        self.dot = np.zeros(shape)
        self.norm_cur = np.zeros(shape)
        self.norm_prev = np.zeros(shape)
        self.prev_site: dict[tuple[int, str, int], np.ndarray] = {}
        self.net_diff_l1 = np.zeros(steps)
        self.prev_net: np.ndarray | None = None

    def on_site(self, t: int, layer: int, family: str, sub_site: int,
                tensor: np.ndarray, action: str) -> None:
        key = (layer, family, sub_site)
        prev = self.prev_site.get(key)
        if prev is not None:
            s = self.fam_index[family]
            self.diff_l1[t, layer, s] += l1_diff_norm(tensor, prev)
            d = tensor - prev
            self.sq_diff[t, layer, s] += float((d * d).sum())
            self.count[t, layer, s] += d.size
            self.dot[t, layer, s] += float((tensor * prev).sum())
            self.norm_cur[t, layer, s] += float((tensor * tensor).sum())
            self.norm_prev[t, layer, s] += float((prev * prev).sum())
        self.prev_site[key] = tensor

    def on_net(self, t: int, z: np.ndarray) -> None:
        if self.prev_net is not None:
            self.net_diff_l1[t] = l1_diff_norm(z, self.prev_net)
        self.prev_net = z

    def rate_matrices(self) -> dict[str, RateMatrix]:
        mask = interior_mask(self.steps)
        out = {}
        for fam, s in self.fam_index.items():
            values = np.zeros((self.steps, self.layers))
            for t in range(1, self.steps - 1):
                for l in range(self.layers):
                    values[t, l] = rho_layer(self.diff_l1[t + 1, l, s], self.diff_l1[t, l, s])
            out[fam] = RateMatrix(family=fam, values=values, defined_mask=mask.copy())
        return out

    def step_rate_vector(self) -> StepRateVector:
        values = np.zeros(self.steps)
        for t in range(1, self.steps - 1):
            values[t] = rho_layer(self.net_diff_l1[t + 1], self.net_diff_l1[t])
        return StepRateVector(values=values, defined_mask=interior_mask(self.steps))

    def change_maps(self):
        """MSE-to-previous and cosine-to-previous per (t, l, family); t=0 column is 0."""
        mse_maps, cos_maps = {}, {}
        for fam, s in self.fam_index.items():
            m = np.zeros((self.steps, self.layers))
            c = np.zeros((self.steps, self.layers))
            for t in range(1, self.steps):
                for l in range(self.layers):
                    if self.count[t, l, s] > 0:
                        m[t, l] = self.sq_diff[t, l, s] / self.count[t, l, s]
                        na = np.sqrt(self.norm_cur[t, l, s])
                        nb = np.sqrt(self.norm_prev[t, l, s])
                        if na == 0.0 and nb == 0.0:
                            c[t, l] = 1.0
                        elif na == 0.0 or nb == 0.0:
                            c[t, l] = 0.0
                        else:
                            c[t, l] = min(1.0, max(-1.0, self.dot[t, l, s] / (na * nb)))
            mse_maps[fam] = m
            cos_maps[fam] = c
        return mse_maps, cos_maps


def mean_rate_matrices(per_input: list[dict[str, RateMatrix]]) -> dict[str, RateMatrix]:
    """Entrywise arithmetic mean across inputs, per family."""
    if not per_input:
        raise ValueError("need at least one input")
    out = {}
    for fam in per_input[0]:
        stack = np.stack([m[fam].values for m in per_input])
        out[fam] = RateMatrix(family=fam, values=stack.mean(axis=0),
                              defined_mask=per_input[0][fam].defined_mask.copy())
    return out


def mean_step_rates(per_input: list[StepRateVector]) -> StepRateVector:
    stack = np.stack([v.values for v in per_input])
    return StepRateVector(values=stack.mean(axis=0),
                          defined_mask=per_input[0].defined_mask.copy())


def collect_rates(backbone, schedule: SampleSchedule,
                  inputs: list[tuple[np.ndarray, int]], jobs: int = 1) -> RateCollection:
    """Run all-compute trajectories over the inputs and aggregate rates.

    Returns the per-entry mean matrices across inputs together with the
    per-input matrices (kept for concatenated-pool thresholding) and the
    averaged MSE/cosine change maps.
    """
    if not inputs:
        raise ValueError("need at least one calibration input")
    families = backbone.registry.families
    layers = backbone.cfg.layers

    def one(pair):
        x_init, cond = pair
        rec = _TrajectoryRecorder(schedule.steps, layers, families)
        executor = AllComputeExecutor(layers, families)
        trajectory, _, _ = run_trajectory(backbone, schedule, x_init, cond,
                                          executor, on_site=rec.on_site)
        for t, z in enumerate(trajectory):
            rec.on_net(t, z)
        return rec

    if jobs > 1 and len(inputs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            recorders = list(pool.map(one, inputs))
    else:
        recorders = [one(pair) for pair in inputs]

    per_rates = [rec.rate_matrices() for rec in recorders]
    per_steps = [rec.step_rate_vector() for rec in recorders]
    per_maps = [rec.change_maps() for rec in recorders]
    mse_stack = {fam: np.stack([m[0][fam] for m in per_maps]).mean(axis=0) for fam in families}
    cos_stack = {fam: np.stack([m[1][fam] for m in per_maps]).mean(axis=0) for fam in families}
    return RateCollection(
        families=families,
        rates=mean_rate_matrices(per_rates),
        step_rates=mean_step_rates(per_steps),
        per_input_rates=per_rates,
        per_input_step_rates=per_steps,
        mse_maps=mse_stack,
        cos_maps=cos_stack,
    )


def compare_rate_matrices(a: RateMatrix, b: RateMatrix) -> float:
    """Mean squared difference over jointly defined entries."""
    if a.family != b.family:
        raise ValueError(f"family mismatch: {a.family!r} vs {b.family!r}")
    if a.values.shape != b.values.shape:
        raise ValueError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    joint = a.defined_mask & b.defined_mask
    da = a.values[joint].ravel()
    db = b.values[joint].ravel()
    if da.size == 0:
        raise ValueError("no jointly defined entries")
    d = da - db
    return float((d * d).sum() / d.size)


def matrix_to_csv(values: np.ndarray, path: str) -> None:
    """Write a (T, L) matrix as t,l,value rows with round-trippable decimals."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t,l,value\r\n")
        for t in range(values.shape[0]):
            for l in range(values.shape[1]):
                fh.write(f"{t},{l},{values[t, l]:.17g}\r\n")


def matrix_from_csv(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "t,l,value":
            raise ValueError(f"unexpected CSV header {header!r}")
        entries = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            t_s, l_s, v_s = line.split(",")
            entries.append((int(t_s), int(l_s), float(v_s)))
    steps = max(e[0] for e in entries) + 1
    layers = max(e[1] for e in entries) + 1
    values = np.zeros((steps, layers))
    for t, l, v in entries:
        values[t, l] = v
    return values


def _display_matrix(matrix: RateMatrix | np.ndarray, mode: str) -> np.ndarray:
    """Apply the display transform and boundary painting for one mode."""
    if mode not in HEATMAP_MODES:
        raise ValueError(f"unknown heatmap mode {mode!r}; choose from {HEATMAP_MODES}")
    if mode == "log2-rho":
        if not isinstance(matrix, RateMatrix):
            raise ValueError("log2-rho mode requires a RateMatrix")
        vals = matrix.values.copy()
        vals[~matrix.defined_mask, :] = 1.0  # boundary steps painted as rate 1
        return np.log2(np.maximum(vals, 2.0 ** -40))
    vals = np.asarray(matrix.values if isinstance(matrix, RateMatrix) else matrix,
                      dtype=np.float64).copy()
    if mode == "mse":
        disp = np.log2(np.maximum(vals, 2.0 ** -40))
    else:
        disp = vals
    disp[0, :] = 0.0  # first step has no previous tensor
    return disp


def export_heatmap(matrix: RateMatrix | np.ndarray, mode: str, path: str) -> None:
    """Write the exact values as CSV and an 8-bit grayscale PGM next to it.

    ``path`` is the PGM target; the CSV uses the same path with a .csv
    suffix. The PGM maps the mode's display range linearly onto 0..255
    (larger = brighter); a constant display matrix renders mid-gray.
    """
    raw = matrix.values if isinstance(matrix, RateMatrix) else np.asarray(matrix)
    if not np.all(np.isfinite(raw)):
        raise ValueError("heatmap export requires finite matrix values")
    base = path[:-4] if path.endswith(".pgm") else path
    matrix_to_csv(raw, base + ".csv")
    disp = _display_matrix(matrix, mode)
    lo, hi = float(disp.min()), float(disp.max())
    if hi > lo:
        pixels = np.round((disp - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.full(disp.shape, 128, dtype=np.uint8)
    steps, layers = disp.shape
    # x axis = timestep, y axis = layer
    img = pixels.T
    with open(base + ".pgm", "wb") as fh:
        fh.write(f"P5\n{steps} {layers}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
