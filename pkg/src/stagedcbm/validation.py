"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when an operation receives incompatible extents."""

    def __init__(self, kind, got, expected):
        self.kind = kind
        self.got = got
        self.expected = expected
        super().__init__(f"{kind}: got extents {got}, incompatible with {expected}")


class ValidationError(ValueError):
    """Raised for schema/config documents; collects all violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def check_image_batch(x, channels=None, name="images"):
    """Require float array (N, H, W, m) with values in [-1, 1]."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise ShapeMismatch(name, x.shape, "(N, H, W, m)")
    if channels is not None and x.shape[-1] != channels:
        raise ShapeMismatch(name, x.shape, f"m == {channels}")
    if x.size and (x.min() < -1.0 - 1e-9 or x.max() > 1.0 + 1e-9):
        raise ValueError(f"{name}: pixel intensities must lie in [-1, 1]")
    return x.astype(np.float64, copy=False)


def check_mask_batch(y, n_classes, name="masks"):
    """Require integer class maps (N, H, W) with labels below n_classes."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ShapeMismatch(name, y.shape, "(N, H, W)")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"{name}: class indices must lie in [0, {n_classes})")
    return y.astype(np.int64, copy=False)


def check_concept_matrix(c, d, name="concepts"):
    """Require (N, d) float matrix with entries in [0, 1]."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != d:
        raise ShapeMismatch(name, c.shape, f"(N, {d})")
    if c.size and (c.min() < -1e-12 or c.max() > 1.0 + 1e-12):
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return c


def check_labels(y, n_classes, name="labels"):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeMismatch(name, y.shape, "(N,)")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"{name}: class indices must lie in [0, {n_classes})")
    return y.astype(np.int64, copy=False)
