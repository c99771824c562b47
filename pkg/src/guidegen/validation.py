"""Input validation helpers shared by the estimators and core modules."""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_label_volume",
    "check_probability_field",
    "check_intensity_volume",
    "check_same_shape",
]


def check_label_volume(m, n_classes: int) -> np.ndarray:
    """Validate a discrete semantic volume with values in {1..n_classes}."""
    m = np.asarray(m)
    if not np.issubdtype(m.dtype, np.integer):
        raise ValueError(f"label volume must be integer-typed, got {m.dtype}")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if m.size and (m.min() < 1 or m.max() > n_classes):
        raise ValueError(
            f"label values must lie in 1..{n_classes}, got range [{m.min()}, {m.max()}]"
        )
    return m


def check_probability_field(x, normalized: bool = True, tol: float = 1e-9) -> np.ndarray:
    """Validate a per-voxel categorical field of shape [n_classes, *dims]."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError(f"probability field needs a leading class axis, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("probability field contains non-finite values")
    if x.min() < -tol:
        raise ValueError(f"probability field has negative entries (min {x.min()})")
    if normalized:
        sums = x.sum(axis=0)
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > tol:
            raise ValueError(f"per-voxel sums deviate from 1 by {worst}")
    return x


def check_intensity_volume(v) -> np.ndarray:
    """Validate a real-valued intensity volume."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"intensity volume must be 3D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("intensity volume contains non-finite values")
    return v


def check_same_shape(a, b, what: str = "volumes"):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")
