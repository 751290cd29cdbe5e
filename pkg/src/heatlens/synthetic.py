"""Seeded benchmark datasets with known structure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RegressionData:
    X: np.ndarray
    y: np.ndarray
    coords: np.ndarray
    names: list[str]
    truth: np.ndarray | None = None  # per-row coefficients or noise-free response
    regime: np.ndarray | None = None


def lattice_coords(side: int, spacing: float = 100.0) -> np.ndarray:
    """Cell centres of a ``side`` x ``side`` lattice, row-major from the south-west."""
    i, j = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    return np.column_stack([(j.ravel() + 0.5) * spacing, (i.ravel() + 0.5) * spacing])


def two_regime_linear(seed: int = 0, side: int = 20, noise: float = 0.5) -> RegressionData:
    """y = 2 + b(u) x + e with slope 1 in the west half and 4 in the east half."""
    rng = np.random.default_rng(seed)
    coords = lattice_coords(side)
    east = coords[:, 0] > side * 50.0
    slope = np.where(east, 4.0, 1.0)
    x = rng.normal(size=side * side)
    y = 2.0 + slope * x + rng.normal(0.0, noise, side * side)
    truth = np.column_stack([np.full(side * side, 2.0), slope])
    return RegressionData(x[:, None], y, coords, ["x"], truth, east.astype(np.int64))


def global_linear(seed: int = 0, side: int = 20, noise: float = 0.5) -> RegressionData:
    """Stationary counterpart of :func:`two_regime_linear` (slope 2.5 everywhere)."""
    rng = np.random.default_rng(seed)
    coords = lattice_coords(side)
    x = rng.normal(size=side * side)
    y = 2.0 + 2.5 * x + rng.normal(0.0, noise, side * side)
    truth = np.column_stack([np.full(side * side, 2.0), np.full(side * side, 2.5)])
    return RegressionData(x[:, None], y, coords, ["x"], truth)


def interaction_data(seed: int = 0, n: int = 500, p: int = 6, noise: float = 0.3) -> RegressionData:
    """Response driven by a pairwise interaction, so depth-2 trees are the generative depth.

    ``y = 3*1[x0>0]*1[x1>0] + e``: a sum of stumps cannot represent the
    product, while a greedy depth-2 tree finds it (the first split already
    shifts the mean). The remaining columns are noise.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, p))
    f = 3.0 * ((X[:, 0] > 0) & (X[:, 1] > 0))
    y = f + rng.normal(0.0, noise, n)
    coords = rng.uniform(0, 1000, size=(n, 2))
    return RegressionData(X, y, coords, [f"x{j}" for j in range(p)], f)


def two_regime_nonlinear(seed: int = 0, side: int = 20, noise: float = 0.3) -> RegressionData:
    """Spatially non-stationary nonlinear response for the geographically weighted booster.

    West: y = 3*tanh(2 x0) + x1. East: y = 1.5 - 3*tanh(2 x0) + x1. The
    shift makes a global model leave spatially clustered residuals.
    """
    rng = np.random.default_rng(seed)
    coords = lattice_coords(side)
    n = side * side
    east = coords[:, 0] > side * 50.0
    X = rng.normal(size=(n, 3))
    sign = np.where(east, -1.0, 1.0)
    f = sign * 3.0 * np.tanh(2.0 * X[:, 0]) + X[:, 1] + 1.5 * east
    y = f + rng.normal(0.0, noise, n)
    return RegressionData(X, y, coords, ["x0", "x1", "x2"], f, east.astype(np.int64))


def crossing_cloud(seed: int = 0, n: int = 400, crossing: float = 0.81, noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Dependence cloud whose mean crosses zero at ``crossing`` with unequal slopes either side."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    phi = np.where(x < crossing, 1.0 * (x - crossing), 3.0 * (x - crossing))
    return x, phi + rng.normal(0.0, noise, n)


def two_regime_dominance(seed: int = 0, side: int = 12, noise: float = 0.1) -> RegressionData:
    """x0 drives the response in the west half and x1 in the east half."""
    rng = np.random.default_rng(seed)
    coords = lattice_coords(side)
    n = side * side
    east = coords[:, 0] > side * 50.0
    X = rng.uniform(-1, 1, size=(n, 2))
    strong = 3.0 * np.tanh(2.0 * np.where(east, X[:, 1], X[:, 0]))
    weak = 0.3 * np.where(east, X[:, 0], X[:, 1])
    f = strong + weak
    return RegressionData(X, f + rng.normal(0.0, noise, n), coords, ["x0", "x1"], f, east.astype(np.int64))
