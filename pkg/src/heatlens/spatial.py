"""Contiguity weights, global Moran's I and LISA with permutation inference.

Random permutations come from numpy's Philox counter-based generator.
Every zone gets its own substream (``SeedSequence(seed).spawn``), so the
results do not depend on how the zones are split across threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from shapely.geometry import Polygon
from shapely.strtree import STRtree

from .raster import ZoneSet

SCHEMES = ("queen", "rook", "queen_nn_hybrid")


@dataclass
class SpatialWeights:
    """Sparse n x n weights; row i lists the neighbours of zone ``ids[i]``."""

    ids: np.ndarray
    matrix: sparse.csr_matrix
    row_standardized: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.matrix = sparse.csr_matrix(self.matrix, dtype=np.float64)
        self.matrix.sort_indices()
        if self.matrix.shape != (self.n, self.n):
            raise ValueError("weights matrix does not match the number of zones")
        if np.any(self.matrix.diagonal() != 0):
            raise ValueError("weights must not link a zone to itself")

    @property
    def n(self) -> int:
        return self.ids.size

    @property
    def s0(self) -> float:
        return float(self.matrix.sum())

    @property
    def cardinalities(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.matrix.indices[self.matrix.indptr[i]:self.matrix.indptr[i + 1]]

    def lag(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=np.float64)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def standardized(self) -> "SpatialWeights":
        """Copy with every nonempty row scaled to sum to one."""
        rows = np.asarray(self.matrix.sum(axis=1)).ravel()
        scale = np.where(rows > 0, 1.0 / np.where(rows > 0, rows, 1.0), 0.0)
        return SpatialWeights(self.ids.copy(), sparse.diags(scale) @ self.matrix, True)

    @classmethod
    def from_dense(cls, ids, w, row_standardize: bool = False) -> "SpatialWeights":
        out = cls(np.asarray(ids), sparse.csr_matrix(np.asarray(w, dtype=np.float64)))
        return out.standardized() if row_standardize else out


def _polygon(zone) -> Polygon:
    return Polygon(zone.outer, holes=[h for h in zone.holes])


def build_weights(zones: ZoneSet, scheme: str = "queen_nn_hybrid", row_standardize: bool = True) -> SpatialWeights:
    """Binary contiguity weights between zones, optionally row-standardized.

    ``queen`` links zones whose boundaries meet at a point or along an
    edge, ``rook`` only along an edge. ``queen_nn_hybrid`` adds, for every
    zone left without neighbours, a mirrored link to the zone with the
    nearest centroid (lowest id on ties).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown weights scheme {scheme!r}; expected one of {SCHEMES}")
    zl = list(zones)
    n = len(zl)
    if n < 2:
        raise ValueError("need at least two zones")
    order = np.argsort([z.zone_id for z in zl], kind="stable")
    zl = [zl[i] for i in order]
    ids = np.array([z.zone_id for z in zl], dtype=np.int64)
    polys = [_polygon(z) for z in zl]
    tree = STRtree(polys)
    edges = set()
    for i, p in enumerate(polys):
        for j in tree.query(p):
            j = int(j)
            if j <= i:
                continue
            q = polys[j]
            if not p.intersects(q):
                continue
            inter = p.boundary.intersection(q.boundary)
            if inter.is_empty:
                continue
            if scheme == "rook" and inter.length <= 0:
                continue
            edges.add((i, j))
    if scheme == "queen_nn_hybrid":
        linked = np.zeros(n, dtype=bool)
        for i, j in edges:
            linked[i] = linked[j] = True
        cent = np.array([z.centroid() for z in zl])
        for i in np.flatnonzero(~linked):
            d = np.hypot(cent[:, 0] - cent[i, 0], cent[:, 1] - cent[i, 1])
            d[i] = np.inf
            j = int(np.argmin(d))  # first minimum, i.e. lowest id
            edges.add((min(i, j), max(i, j)))
    if not edges:
        raise ValueError("disconnected weights: no zone has a neighbour")
    r = [a for a, b in edges] + [b for a, b in edges]
    c = [b for a, b in edges] + [a for a, b in edges]
    w = sparse.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    out = SpatialWeights(ids, w)
    return out.standardized() if row_standardize else out


def lattice_weights(nrows: int, ncols: int, scheme: str = "rook", row_standardize: bool = True) -> SpatialWeights:
    """Weights for a regular lattice of cells numbered row-major from 0."""
    n = nrows * ncols
    w = np.zeros((n, n))
    steps = [(0, 1), (1, 0), (0, -1), (-1, 0)]
    if scheme == "queen":
        steps += [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    elif scheme != "rook":
        raise ValueError(f"lattice weights support rook or queen, got {scheme!r}")
    for r in range(nrows):
        for c in range(ncols):
            for dr, dc in steps:
                rr, cc = r + dr, c + dc
                if 0 <= rr < nrows and 0 <= cc < ncols:
                    w[r * ncols + c, rr * ncols + cc] = 1.0
    return SpatialWeights.from_dense(np.arange(n), w, row_standardize)


# ---------------------------------------------------------------- Moran


def _centered(x, w: SpatialWeights) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != w.n:
        raise ValueError(f"{x.size} values for {w.n} zones")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    if x.size < 3:
        raise ValueError("need at least 3 zones")
    z = x - x.mean()
    if not np.sum(z * z) > 1e-24 * max(1.0, float(np.sum(x * x))):
        raise ValueError("zero variance in values")
    return z


def _moran(z: np.ndarray, w: SpatialWeights) -> float:
    return z.size / w.s0 * float(z @ w.lag(z)) / float(z @ z)


@dataclass
class MoranResult:
    I: float
    expected: float
    p_value: float
    permutations: int


def global_moran(x, w: SpatialWeights, permutations: int = 999, seed: int = 0) -> MoranResult:
    """Moran's I with a permutation p-value ``(#{|I_perm| >= |I|} + 1) / (permutations + 1)``."""
    z = _centered(x, w)
    obs = _moran(z, w)
    n = z.size
    p = math.nan
    if permutations > 0:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        hits = 0
        for _ in range(permutations):
            if abs(_moran(z[rng.permutation(n)], w)) >= abs(obs) - 1e-12 * abs(obs):
                hits += 1
        p = (hits + 1) / (permutations + 1)
    return MoranResult(obs, -1.0 / (n - 1), p, permutations)


LISA_CATEGORIES = ("HH", "LL", "HL", "LH", "not_significant")


@dataclass
class LisaResult:
    ids: np.ndarray
    Ii: np.ndarray
    p_value: np.ndarray
    category: list[str]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["zone_id", "Ii", "p", "category"])
            for i, zid in enumerate(self.ids):
                p = "" if not np.isfinite(self.p_value[i]) else repr(float(self.p_value[i]))
                wr.writerow([int(zid), repr(float(self.Ii[i])), p, self.category[i]])


def _local_pvalue(i, z, w, m2, observed, permutations, seq) -> float:
    nb = w.neighbors(i)
    k = nb.size
    if k == 0 or permutations == 0:
        return math.nan
    weights = w.matrix.data[w.matrix.indptr[i]:w.matrix.indptr[i + 1]]
    others = np.delete(z, i)
    m = others.size
    rng = np.random.Generator(np.random.Philox(seq))
    # partial Fisher-Yates: the first k columns are a uniform draw without replacement
    idx = np.tile(np.arange(m, dtype=np.int64), (permutations, 1))
    u = rng.random((permutations, k))
    rows = np.arange(permutations)
    for t in range(k):
        j = t + np.minimum((u[:, t] * (m - t)).astype(np.int64), m - t - 1)
        a = idx[rows, t].copy()
        idx[rows, t] = idx[rows, j]
        idx[rows, j] = a
    sims = z[i] / m2 * (others[idx[:, :k]] @ weights)
    larger = int(np.sum(sims >= observed))
    if permutations - larger < larger:
        larger = permutations - larger
    return (larger + 1) / (permutations + 1)


def lisa(x, w: SpatialWeights, permutations: int = 999, seed: int = 0, alpha: float = 0.05,
         n_jobs: int = 1) -> LisaResult:
    """Local Moran's I with conditional-permutation pseudo p-values.

    Zone i keeps its value and draws its neighbours' values from the other
    n-1 zones. The p-value is folded towards the tail of the observed
    statistic. Zones with p <= alpha get HH, LL, HL or LH from the signs of
    their deviation and spatial lag.
    """
    z = _centered(x, w)
    n = z.size
    m2 = float(z @ z) / n
    lag = w.lag(z)
    Ii = z / m2 * lag
    seqs = np.random.SeedSequence(seed).spawn(n)

    def one(i):
        return _local_pvalue(i, z, w, m2, Ii[i], permutations, seqs[i])

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            p = np.array(list(ex.map(one, range(n))))
    else:
        p = np.array([one(i) for i in range(n)])
    cats = []
    for i in range(n):
        if not (p[i] <= alpha) or z[i] == 0 or lag[i] == 0:
            cats.append("not_significant")
        elif z[i] > 0:
            cats.append("HH" if lag[i] > 0 else "HL")
        else:
            cats.append("LH" if lag[i] > 0 else "LL")
    return LisaResult(w.ids.copy(), Ii, p, cats)
