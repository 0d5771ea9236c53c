"""Nonlinear integration of the coupled load dynamics and synchronization metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .policy import PolicyAssignment
from .streams import as_generator
from .topology import NetworkTopology

BLOWUP = 1e6
CLUSTER_GAP = 0.05


class IntegrationBlowup(FloatingPointError):
    pass


def _pad(rows: Sequence[Sequence[float]]) -> np.ndarray:
    width = max([len(r) for r in rows] + [1])
    out = np.zeros((len(rows), width))
    for k, r in enumerate(rows):
        out[k, : len(r)] = r
    return out


def _horner(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    # row k of coeffs is evaluated at x[k]
    acc = coeffs[:, -1].copy()
    for k in range(coeffs.shape[1] - 2, -1, -1):
        acc = acc * x + coeffs[:, k]
    return acc


class NetworkDynamics:
    """Vectorized right-hand side ``dl_i/dt = f_i(l_i) + sum_j a_ij g_ij(l_i, l_j)``.

    Each cell's branch is chosen from its current load, so a call made with an
    intermediate Runge-Kutta stage resolves modes from that stage.
    """

    def __init__(self, topology: NetworkTopology, assignment: PolicyAssignment):
        assignment.check_size(topology.n)
        self.n = topology.n
        pols = assignment.local
        self._active = _pad([p.coeffs for p in pols])
        self._below = _pad([p.below_threshold for p in pols])
        self.gamma = np.array([p.mode.gamma if p.mode.sleep_capable else -np.inf for p in pols])
        pairs = sorted(topology.edges)
        src = [i for i, j in pairs] + [j for i, j in pairs]
        dst = [j for i, j in pairs] + [i for i, j in pairs]
        self.src = np.array(src, dtype=int)
        self.dst = np.array(dst, dtype=int)
        gs = [assignment.coupling_for(i, j) for i, j in zip(src, dst)]
        self._p = _pad([g.p for g in gs])
        self._q = _pad([g.q for g in gs])
        self._c = np.array([g.c for g in gs], dtype=float)
        self._drain = _pad([g.sleep_drain for g in gs])

    def sleeping(self, state) -> np.ndarray:
        return np.asarray(state, dtype=float) < self.gamma

    def __call__(self, state) -> np.ndarray:
        l = np.asarray(state, dtype=float)
        if l.shape != (self.n,):
            raise ValueError(f"state must have shape ({self.n},), got {l.shape}")
        if not np.all(np.isfinite(l)):
            raise IntegrationBlowup("non-finite load in state")
        asleep = l < self.gamma
        f = np.where(asleep, _horner(self._below, l), _horner(self._active, l))
        if self.src.size == 0:
            return f
        li, lj = l[self.src], l[self.dst]
        g = (lj - li) * (_horner(self._p, li) + _horner(self._q, lj) + self._c)
        g = np.where(asleep[self.dst], 0.0, g)
        g = np.where(asleep[self.src], _horner(self._drain, li), g)
        return f + np.bincount(self.src, weights=g, minlength=self.n)


def rhs(state, topology: NetworkTopology, assignment: PolicyAssignment) -> np.ndarray:
    return NetworkDynamics(topology, assignment)(state)


@dataclass(frozen=True)
class SimulationConfig:
    dt: float = 0.01
    horizon: float = 20.0
    sync_tolerance: float = 1e-3
    perturbation: float = 0.01
    seed: int = 0
    record_stride: int = 1
    rate_window: tuple[float, float] = (10.0, 0.5)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 100 * self.dt:
            raise ValueError("horizon must cover at least 100 steps")
        if not 0 < self.sync_tolerance < 1:
            raise ValueError("sync_tolerance must lie in (0, 1)")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if self.perturbation < 0:
            raise ValueError("perturbation amplitude must be >= 0")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    sleeping: np.ndarray
    blowup: bool = False

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def mode_masks(self) -> list[int]:
        weights = [1 << i for i in range(self.n)]
        return [sum(w for w, s in zip(weights, row) if s) for row in self.sleeping]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"l_{i}" for i in range(self.n)] + ["modes"])
        for t, row, mask in zip(self.times, self.states, self.mode_masks()):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [format(mask, "x")])
        return buf.getvalue()


def integrate(
    config: SimulationConfig,
    initial,
    topology: NetworkTopology,
    assignment: PolicyAssignment,
    dynamics: NetworkDynamics | None = None,
) -> Trajectory:
    """Classic fixed-step RK4.  On blowup the partial trajectory is returned flagged."""
    F = dynamics or NetworkDynamics(topology, assignment)
    y = np.array(initial, dtype=float)
    if y.shape != (F.n,) or not np.all(np.isfinite(y)):
        raise ValueError("initial state must be a finite vector with one load per cell")
    dt, steps, stride = config.dt, config.steps, config.record_stride
    times, states, flags = [0.0], [y.copy()], [F.sleeping(y)]
    blown = False
    for k in range(1, steps + 1):
        try:
            k1 = F(y)
            k2 = F(y + 0.5 * dt * k1)
            k3 = F(y + 0.5 * dt * k2)
            k4 = F(y + dt * k3)
        except IntegrationBlowup:
            blown = True
        else:
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            blown = not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP
        if blown or k % stride == 0 or k == steps:
            times.append(k * dt)
            states.append(y.copy())
            flags.append(F.sleeping(y))
        if blown:
            break
    return Trajectory(np.array(times), np.array(states), np.array(flags, dtype=bool), blown)


def perturb(state, eps: float, seed) -> np.ndarray:
    """Add i.i.d. ``U(-eps, eps)`` noise per cell, clamped to non-negative loads."""
    state = np.array(state, dtype=float)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eps == 0:
        return state
    rng = as_generator(seed)
    return np.maximum(state + rng.uniform(-eps, eps, size=state.shape), 0.0)


def uniform_initial(n: int, low: float, high: float, seed) -> np.ndarray:
    return as_generator(seed).uniform(low, high, size=n)


def cluster_loads(loads, gap: float = CLUSTER_GAP) -> list[tuple[float, list[int]]]:
    """Single-linkage grouping of scalar loads; clusters ordered by load."""
    loads = np.asarray(loads, dtype=float)
    if loads.size == 0:
        return []
    order = np.argsort(loads, kind="stable")
    groups, current = [], [int(order[0])]
    for a, b in zip(order[:-1], order[1:]):
        if loads[b] - loads[a] > gap:
            groups.append(current)
            current = []
        current.append(int(b))
    groups.append(current)
    return [(float(np.mean(loads[g])), sorted(g)) for g in groups]


def fit_decay_rate(times, deviation, lower: float, upper: float) -> float | None:
    """Slope of ``log(deviation)`` against time over samples inside ``[lower, upper]``."""
    t = np.asarray(times, dtype=float)
    d = np.asarray(deviation, dtype=float)
    mask = (d >= lower) & (d <= upper) & (d > 0)
    if mask.sum() < 3:
        return None
    slope, _ = np.polyfit(t[mask], np.log(d[mask]), 1)
    return float(slope)


@dataclass(frozen=True)
class SyncMetrics:
    synchronized: bool
    sync_time: float | None
    empirical_rate: float | None
    disagreement_rate: float | None
    terminal_clusters: tuple[tuple[float, tuple[int, ...]], ...]
    blowup: bool = False

    def to_dict(self) -> dict:
        return {
            "synchronized": self.synchronized,
            "sync_time": self.sync_time,
            "empirical_rate": self.empirical_rate,
            "disagreement_rate": self.disagreement_rate,
            "terminal_clusters": [{"load": l, "cells": list(m)} for l, m in self.terminal_clusters],
            "blowup": self.blowup,
        }


def sync_metrics(traj: Trajectory, config: SimulationConfig) -> SyncMetrics:
    if traj.times.size == 0:
        raise ValueError("empty trajectory")
    if traj.blowup:
        return SyncMetrics(False, None, None, None, (), True)
    tol = config.sync_tolerance
    dev = np.max(np.abs(traj.states - 1.0), axis=1)
    spread = np.max(np.abs(traj.states - traj.states.mean(axis=1, keepdims=True)), axis=1)
    outside = np.flatnonzero(dev >= tol)
    first_in = 0 if outside.size == 0 else int(outside[-1]) + 1
    synced = first_in < len(dev)
    lo, hi = config.rate_window
    rate = fit_decay_rate(traj.times, dev, lo * tol, hi * dev[0])
    dis = fit_decay_rate(traj.times, spread, lo * tol, hi * spread[0])
    clusters = tuple((l, tuple(m)) for l, m in cluster_loads(traj.final))
    return SyncMetrics(
        synced,
        float(traj.times[first_in]) if synced else None,
        rate,
        dis,
        clusters,
    )


@dataclass(frozen=True)
class TerminalCluster:
    load: float
    members: tuple[int, ...]
    slept: tuple[int, ...]
    culprits: tuple[int, ...] = ()

    @property
    def mode(self) -> str:
        if not self.slept:
            return "active"
        return "sleep" if len(self.slept) == len(self.members) else "mixed"

    def to_dict(self) -> dict:
        return {
            "load": self.load,
            "cells": list(self.members),
            "mode": self.mode,
            "slept": list(self.slept),
            "culprits": list(self.culprits),
        }


def classify_terminal_states(
    traj: Trajectory, assignment: PolicyAssignment, culprits: Sequence[int] = ()
) -> list[TerminalCluster]:
    final = traj.final
    blamed = set(int(c) for c in culprits)
    out = []
    for load, members in cluster_loads(final):
        slept = tuple(i for i in members if assignment.local[i].mode.is_sleeping(final[i]))
        out.append(TerminalCluster(load, tuple(members), slept, tuple(i for i in members if i in blamed)))
    return out
