"""Dense token-tensor metrics.

A token tensor is a 2-D float64 array of shape (tokens, channels). All
comparisons here reduce a pair of equal-shape tensors to one scalar; these
scalars drive the change-rate statistics and the fidelity reports.
"""

from __future__ import annotations

import numpy as np

# PSNR reported for a zero-MSE pair (identical tensors).
PSNR_CAP = 200.0


class ShapeMismatchError(ValueError):
    pass


def as_token_tensor(x) -> np.ndarray:
    """Coerce to a float64 (tokens, channels) array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"token tensor must be 2-D, got shape {arr.shape}")
    return arr


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_diff_norm(a: np.ndarray, b: np.ndarray) -> float:
    """Entrywise L1 norm of a - b."""
    _check_shapes(a, b)
    return float(np.abs(a - b).sum())


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference over all entries."""
    _check_shapes(a, b)
    d = a - b
    return float((d * d).sum() / d.size)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between the flattened tensors.

    Both tensors zero -> 1.0 (identical); exactly one zero -> 0.0
    (orthogonal convention). Result clipped to [-1, 1].
    """
    _check_shapes(a, b)
    na = float(np.sqrt((a * a).sum()))
    nb = float(np.sqrt((b * b).sum()))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    c = float((a * b).sum()) / (na * nb)
    return min(1.0, max(-1.0, c))


def psnr(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    """Peak signal-to-noise ratio in dB; capped at PSNR_CAP when mse is 0."""
    if peak <= 0.0:
        raise ValueError(f"peak must be positive, got {peak}")
    m = mse(a, b)
    if m == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(peak * peak / m))
