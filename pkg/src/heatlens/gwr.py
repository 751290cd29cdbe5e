"""Geographically weighted linear regression with a bi-square kernel."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class KernelSpec:
    """Bi-square kernel; ``bandwidth`` is metres (fixed) or a neighbour count (adaptive)."""

    mode: str = "adaptive"
    bandwidth: float = 50

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"kernel mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.mode == "adaptive" and self.bandwidth != int(self.bandwidth):
            raise ValueError("adaptive bandwidth is a whole number of neighbours")


def bisquare_weight(d, b):
    """``(1 - (d/b)^2)^2`` inside the bandwidth, 0 at and beyond it."""
    d = np.asarray(d, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(b <= 0):
        raise ValueError("bandwidth must be > 0")
    if np.any(d < 0):
        raise ValueError("distance must be >= 0")
    u = d / b
    return np.where(u < 1.0, (1.0 - u * u) ** 2, 0.0)


def kernel_bandwidths(dist: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Per-location radius: the fixed bandwidth, or the distance to the k-th nearest location (self included)."""
    n = dist.shape[0]
    if kernel.mode == "fixed":
        return np.full(n, float(kernel.bandwidth))
    k = int(kernel.bandwidth)
    if k > n:
        raise ValueError(f"adaptive bandwidth k={k} exceeds the number of locations {n}")
    b = np.partition(dist, k - 1, axis=1)[:, k - 1]
    if np.any(b <= 0):
        raise ValueError(f"adaptive bandwidth k={k} gives a zero radius (duplicate locations)")
    return b


def kernel_weights(coords: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """n x n matrix; row i holds the weights of every location in the fit at location i."""
    dist = cdist(coords, coords)
    return bisquare_weight(dist, kernel_bandwidths(dist, kernel)[:, None])


class SingularLocalFit(np.linalg.LinAlgError):
    pass


@dataclass
class GwrFit:
    coefficients: np.ndarray  # n x (p+1), intercept first, in original predictor units
    fitted: np.ndarray
    residuals: np.ndarray
    hat_diag: np.ndarray
    local_r2: np.ndarray
    kernel: KernelSpec
    names: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.fitted.size

    @property
    def tr_s(self) -> float:
        return float(self.hat_diag.sum())

    @property
    def rss(self) -> float:
        return float(self.residuals @ self.residuals)

    @property
    def aicc(self) -> float:
        return aicc(self.rss, self.n, self.tr_s)

    def to_csv(self, path, zone_ids: Sequence[int]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["zone_id", "beta_intercept", *[f"beta_{n}" for n in self.names], "local_r2"])
            for i, zid in enumerate(zone_ids):
                w.writerow([int(zid), *[repr(float(v)) for v in self.coefficients[i]], repr(float(self.local_r2[i]))])


def aicc(rss: float, n: int, tr_s: float) -> float:
    """Small-sample AIC of a GWR fit; infinite once tr(S) leaves no residual degrees of freedom."""
    if n - 2 - tr_s <= 0 or rss <= 0:
        return math.inf if n - 2 - tr_s <= 0 else -math.inf
    sigma = math.sqrt(rss / n)
    return 2 * n * math.log(sigma) + n * math.log(2 * math.pi) + n * (n + tr_s) / (n - 2 - tr_s)


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    if np.any(const):
        raise ValueError(f"constant predictor column(s) {np.flatnonzero(const).tolist()}; the intercept is added internally")
    return (X - mu) / sd, mu, sd


def _check(X, y, coords):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    coords = np.asarray(coords, dtype=np.float64)
    n, p = X.shape
    if y.size != n or coords.shape != (n, 2):
        raise ValueError("X, y and coords must describe the same n locations")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(coords))):
        raise ValueError("inputs must be finite")
    if n <= p + 2:
        raise ValueError(f"need more than p + 2 = {p + 2} locations, got {n}")
    return X, y, coords


def gwr_fit(X, y, coords, kernel: KernelSpec, names: Sequence[str] | None = None,
            cond_limit: float = 1e12) -> GwrFit:
    """Local weighted least squares at every location.

    Predictors are centred and scaled internally; coefficients are reported
    in the original units with the intercept first.
    """
    X, y, coords = _check(X, y, coords)
    n, p = X.shape
    if kernel.mode == "adaptive" and kernel.bandwidth < p + 2:
        raise ValueError(f"adaptive bandwidth must be >= p + 2 = {p + 2}")
    Xs, mu, sd = _standardize(X)
    D = np.column_stack([np.ones(n), Xs])
    W = kernel_weights(coords, kernel)

    beta_s = np.empty((n, p + 1))
    hat = np.empty(n)
    r2 = np.empty(n)
    for i in range(n):
        w = W[i]
        A = D.T @ (D * w[:, None])
        if np.linalg.cond(A) > cond_limit:
            raise SingularLocalFit(
                f"singular local fit at location {i} (kernel {kernel.mode}, bandwidth {kernel.bandwidth}); "
                "try a larger bandwidth"
            )
        Ainv = np.linalg.inv(A)
        b = Ainv @ (D.T @ (w * y))
        beta_s[i] = b
        hat[i] = D[i] @ Ainv @ D[i] * w[i]
        pred = D @ b
        ybar = np.dot(w, y) / w.sum()
        tss = np.dot(w, (y - ybar) ** 2)
        r2[i] = 1.0 - np.dot(w, (y - pred) ** 2) / tss if tss > 0 else math.nan

    fitted = np.einsum("ij,ij->i", D, beta_s)
    coef = np.empty_like(beta_s)
    coef[:, 1:] = beta_s[:, 1:] / sd
    coef[:, 0] = beta_s[:, 0] - coef[:, 1:] @ mu
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    return GwrFit(coef, fitted, y - fitted, hat, r2, kernel, names)


def hat_matrix(X, coords, kernel: KernelSpec) -> np.ndarray:
    """Full n x n hat matrix S with fitted = S @ y."""
    X, _, coords = _check(X, np.zeros(len(coords)), coords)
    Xs, _, _ = _standardize(X)
    D = np.column_stack([np.ones(X.shape[0]), Xs])
    W = kernel_weights(coords, kernel)
    S = np.empty((D.shape[0], D.shape[0]))
    for i in range(D.shape[0]):
        w = W[i]
        S[i] = D[i] @ np.linalg.solve(D.T @ (D * w[:, None]), D.T * w)
    return S


def ols(X, y) -> np.ndarray:
    """Global least-squares coefficients, intercept first."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    D = np.column_stack([np.ones(X.shape[0]), X])
    return np.linalg.lstsq(D, np.asarray(y, dtype=np.float64), rcond=None)[0]


@dataclass
class BandwidthSearch:
    best: KernelSpec
    trace: list[tuple[float, float]]  # (bandwidth, AICc), in evaluation order


def gwr_bandwidth_search(X, y, coords, mode: str = "adaptive", candidates: Sequence[float] | None = None,
                         bounds: tuple[float, float] | None = None, tol: float = 1.0) -> BandwidthSearch:
    """Bandwidth minimising AICc over explicit candidates or by golden-section search.

    Ties go to the larger bandwidth. Singular candidates score +inf.
    """
    X, y, coords = _check(X, y, coords)
    n, p = X.shape
    cache: dict[float, float] = {}
    trace = []

    def score(b):
        b = float(round(b)) if mode == "adaptive" else float(b)
        if b not in cache:
            try:
                cache[b] = gwr_fit(X, y, coords, KernelSpec(mode, b)).aicc
            except (SingularLocalFit, ValueError):
                cache[b] = math.inf
            trace.append((b, cache[b]))
        return cache[b]

    if candidates is not None:
        cands = sorted({float(c) for c in candidates})
        if not cands:
            raise ValueError("no candidate bandwidths")
        for c in cands:
            score(c)
    else:
        if bounds is None:
            if mode == "adaptive":
                bounds = (p + 2, n)
            else:
                d = cdist(coords, coords)
                bounds = (float(np.max(np.sort(d, axis=1)[:, min(p + 2, n - 1)])), float(d.max()) * 1.5)
        lo, hi = bounds
        g = (math.sqrt(5) - 1) / 2
        a, b = lo, hi
        c, d = b - g * (b - a), a + g * (b - a)
        score(a)
        score(b)
        while abs(b - a) > tol:
            if score(c) < score(d):
                b, d = d, c
                c = b - g * (b - a)
            else:
                a, c = c, d
                d = a + g * (b - a)
        score(c)
        score(d)
    finite = {b: s for b, s in cache.items() if math.isfinite(s)}
    if not finite:
        raise ValueError("every candidate bandwidth gives a singular fit")
    best_score = min(finite.values())
    best = max(b for b, s in finite.items() if s == best_score)
    return BandwidthSearch(KernelSpec(mode, best), trace)
