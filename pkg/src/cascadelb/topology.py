"""Cell deployments, offloading neighbour graphs and Laplacian spectra."""

from __future__ import annotations

import csv
import io
import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _cc
from scipy.spatial import Delaunay, QhullError

from .streams import as_generator

ZERO_EIG_TOL = 1e-9
SYMMETRY_TOL = 1e-12
PPP_MAX_DRAWS = 10


class GeometryError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class CellSite:
    id: int
    x: float
    y: float

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class NetworkTopology:
    sites: tuple[CellSite, ...]
    edges: frozenset
    region: tuple[float, float]
    seed: int | None = field(default=None, compare=False)
    prob: float | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        norm = set()
        n = len(self.sites)
        for e in self.edges:
            i, j = (int(v) for v in e)
            if i == j:
                raise ContractError(f"self-loop at cell {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ContractError(f"edge ({i}, {j}) references a missing cell")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))
        for k, s in enumerate(self.sites):
            if s.id != k:
                raise ContractError(f"site ids must be 0..N-1 in order, found {s.id} at position {k}")
        w, h = self.region
        if w <= 0 or h <= 0:
            raise GeometryError(f"degenerate region {self.region}")

    @property
    def n(self) -> int:
        return len(self.sites)

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sites], dtype=float).reshape(-1, 2)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    @cached_property
    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def subgraph(self, cells: Sequence[int]) -> "NetworkTopology":
        index = {c: k for k, c in enumerate(cells)}
        sites = tuple(CellSite(k, self.sites[c].x, self.sites[c].y) for k, c in enumerate(cells))
        edges = {(index[i], index[j]) for i, j in self.edges if i in index and j in index}
        return NetworkTopology(sites, frozenset(edges), self.region, self.seed, self.prob)

    def to_dict(self) -> dict:
        return {
            "region": [float(v) for v in self.region],
            "sites": [[s.x, s.y] for s in self.sites],
            "edges": [list(e) for e in self.sorted_edges()],
            "seed": self.seed,
            "P": self.prob,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkTopology":
        sites = tuple(CellSite(k, float(x), float(y)) for k, (x, y) in enumerate(d["sites"]))
        edges = frozenset(tuple(e) for e in d.get("edges", ()))
        return cls(sites, edges, tuple(d["region"]), d.get("seed"), d.get("P"))


def _region(region) -> tuple[float, float]:
    w, h = (float(v) for v in region)
    if not (w > 0 and h > 0 and np.isfinite(w) and np.isfinite(h)):
        raise GeometryError(f"degenerate region {region}")
    return w, h


def generate_ppp(intensity: float, region, seed) -> list[CellSite]:
    """Homogeneous Poisson point process of cell sites in ``[0, w] x [0, h]``.

    ``intensity`` is in sites per unit area of the region's units.  A draw
    with zero sites is retried; after ``PPP_MAX_DRAWS`` empty draws a
    :class:`GeometryError` is raised.
    """
    if not intensity > 0:
        raise GeometryError(f"intensity must be positive, got {intensity}")
    w, h = _region(region)
    rng = as_generator(seed)
    for _ in range(PPP_MAX_DRAWS):
        count = int(rng.poisson(intensity * w * h))
        if count > 0:
            break
    else:
        raise GeometryError(f"retry-exhausted: {PPP_MAX_DRAWS} PPP draws produced no sites")
    xy = rng.uniform(size=(count, 2)) * np.array([w, h])
    return [CellSite(k, float(x), float(y)) for k, (x, y) in enumerate(xy)]


def uniform_sites(n: int, region, seed) -> list[CellSite]:
    """Fixed-count (binomial) deployment, for experiments needing an exact N."""
    w, h = _region(region)
    rng = as_generator(seed)
    xy = rng.uniform(size=(int(n), 2)) * np.array([w, h])
    return [CellSite(k, float(x), float(y)) for k, (x, y) in enumerate(xy)]


def _incircle(pa, pb, pc, pd) -> float:
    m = np.array([
        [pa[0] - pd[0], pa[1] - pd[1]],
        [pb[0] - pd[0], pb[1] - pd[1]],
        [pc[0] - pd[0], pc[1] - pd[1]],
    ])
    sq = (m ** 2).sum(axis=1)
    return float(np.linalg.det(np.column_stack([m, sq])))


def _resolve_cocircular(pts: np.ndarray, triangles: set) -> set:
    # Flip diagonals of cocircular quads toward the lexicographically smallest id pair.
    scale = float(np.ptp(pts, axis=0).max()) or 1.0
    tol = 1e-10 * scale ** 4
    while True:
        owners = defaultdict(list)
        for t in triangles:
            for e in itertools.combinations(t, 2):
                owners[e].append(t)
        flipped = False
        for e in sorted(owners):
            ts = owners[e]
            if len(ts) != 2:
                continue
            a, b = e
            c = next(v for v in ts[0] if v not in e)
            d = next(v for v in ts[1] if v not in e)
            if abs(_incircle(pts[a], pts[b], pts[c], pts[d])) > tol:
                continue
            alt = (min(c, d), max(c, d))
            if alt < e:
                triangles -= set(ts)
                triangles |= {tuple(sorted((a, c, d))), tuple(sorted((b, c, d)))}
                flipped = True
                break
        if not flipped:
            return triangles


def delaunay_edges(positions) -> set[tuple[int, int]]:
    pts = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise GeometryError("need at least 2 sites for a neighbour graph")
    if n == 2:
        if np.allclose(pts[0], pts[1]):
            raise GeometryError("two coincident sites")
        return {(0, 1)}
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise GeometryError(f"degenerate site set (all sites collinear or coincident): {exc.args[0].splitlines()[0]}") from None
    triangles = set()
    for simplex in tri.simplices:
        a, b, c = pts[simplex]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area2 != 0.0:
            triangles.add(tuple(sorted(int(v) for v in simplex)))
    triangles = _resolve_cocircular(pts, triangles)
    edges = set()
    for t in triangles:
        edges.update(itertools.combinations(t, 2))
    return edges


def build_neighbor_graph(sites: Sequence[CellSite], prob: float, seed, region=None) -> NetworkTopology:
    """Delaunay neighbours of ``sites``, each kept independently with probability ``prob``."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"connection probability must lie in [0, 1], got {prob}")
    sites = tuple(sites)
    pts = np.array([s.position for s in sites], dtype=float).reshape(-1, 2)
    candidates = sorted(delaunay_edges(pts))
    rng = as_generator(seed)
    keep = rng.random(len(candidates)) < prob
    edges = frozenset(e for e, k in zip(candidates, keep) if k)
    if region is None:
        region = (max(1.0, float(pts[:, 0].max())), max(1.0, float(pts[:, 1].max())))
    seed_val = seed if isinstance(seed, (int, np.integer)) else None
    return NetworkTopology(sites, edges, _region(region), seed_val, float(prob))


def from_edges(n: int, edges: Iterable[Sequence[int]]) -> NetworkTopology:
    """Topology from an explicit edge list; sites are laid out on a circle for plotting."""
    ang = 2 * np.pi * np.arange(n) / max(n, 1)
    sites = tuple(CellSite(k, 1.0 + np.cos(a), 1.0 + np.sin(a)) for k, a in enumerate(ang))
    return NetworkTopology(sites, frozenset(tuple(e) for e in edges), (2.0, 2.0))


def erdos_renyi(n: int, p: float, seed) -> NetworkTopology:
    rng = as_generator(seed)
    pairs = list(itertools.combinations(range(n), 2))
    keep = rng.random(len(pairs)) < p
    return from_edges(n, [e for e, k in zip(pairs, keep) if k])


def adjacency_matrix(topology: NetworkTopology) -> np.ndarray:
    return topology.adjacency.copy()


def laplacian(topology: NetworkTopology) -> np.ndarray:
    A = topology.adjacency
    return np.diag(A.sum(axis=1)) - A


@dataclass(frozen=True)
class SpectralSummary:
    eigenvalues: tuple[float, ...]

    @property
    def algebraic_connectivity(self) -> float:
        return self.eigenvalues[1] if len(self.eigenvalues) > 1 else 0.0

    @property
    def spectral_radius(self) -> float:
        return self.eigenvalues[-1] if self.eigenvalues else 0.0

    @property
    def zero_multiplicity(self) -> int:
        return sum(1 for v in self.eigenvalues if v == 0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "eigenvalue"])
        for k, v in enumerate(self.eigenvalues):
            w.writerow([k, repr(float(v))])
        return buf.getvalue()


def spectrum(L) -> SpectralSummary:
    """Sorted eigenvalues of a symmetric (Laplacian) matrix, near-zeros clamped to 0."""
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {L.shape}")
    if L.size and np.max(np.abs(L - L.T)) > SYMMETRY_TOL:
        raise ContractError("spectrum() requires a symmetric matrix")
    vals = np.linalg.eigvalsh(L) if L.size else np.empty(0)
    vals = np.where(np.abs(vals) < ZERO_EIG_TOL, 0.0, vals)
    return SpectralSummary(tuple(float(v) for v in np.sort(vals)))


def connected_components(topology: NetworkTopology) -> list[list[int]]:
    """Components as sorted id lists, ordered by smallest member."""
    if topology.n == 0:
        return []
    count, labels = _cc(csr_matrix(topology.adjacency), directed=False)
    groups: dict[int, list[int]] = defaultdict(list)
    for i, lab in enumerate(labels):
        groups[int(lab)].append(i)
    return sorted(groups.values(), key=lambda g: g[0])
