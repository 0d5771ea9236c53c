"""Analytic stability of the synchronized fully-loaded state ``l_i = 1``.

Homogeneous networks decouple into Laplacian eigenmodes with rates
``f'(s) + h(s, s) * lambda_i``.  Heterogeneous networks are assessed through
the variational matrices ``F``, ``H``, ``Q = A * H``, ``K = diag(rowsum Q)``
and ``J = F + K - Q`` with the identity Lyapunov function ``V = x.x``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import (
    PolicyAssignment,
    PolicyError,
    coupling_slope_h,
    drain_slope,
    local_derivative,
    sleep_branch_derivative,
)
from .topology import (
    ContractError,
    NetworkTopology,
    SpectralSummary,
    connected_components,
    laplacian,
    spectrum,
)

SYMMETRY_TOL = 1e-9
DENY = "deny-load-balancing"


class Verdict(str, enum.Enum):
    STABLE = "Stable"
    UNSTABLE = "Unstable"
    NOT_GUARANTEED = "NotGuaranteed"


SEVERITY = {Verdict.STABLE: 0, Verdict.NOT_GUARANTEED: 1, Verdict.UNSTABLE: 2}


@dataclass(frozen=True)
class StabilityVerdict:
    variant: Verdict
    rationale: str
    culprits: tuple[int, ...] = ()
    method: str = ""

    def __post_init__(self):
        object.__setattr__(self, "culprits", tuple(int(c) for c in self.culprits))
        if (self.variant is Verdict.STABLE) == bool(self.culprits):
            raise ContractError("culprits must be empty exactly when the verdict is Stable")


@dataclass(frozen=True)
class HomogeneousAssessment:
    f_prime: float
    h: float
    eigenvalues: tuple[float, ...]
    mode_rates: tuple[float, ...]
    verdict: StabilityVerdict

    @property
    def slowest_rate(self) -> float:
        return max(self.mode_rates)

    def mode_amplitudes(self, t: float, xi0) -> np.ndarray:
        """Decoupled mode coordinates ``xi_i(t) = exp(rate_i t) xi_i(0)``."""
        return np.exp(np.asarray(self.mode_rates) * t) * np.asarray(xi0, dtype=float)


def _eigs(spec) -> tuple[float, ...]:
    if isinstance(spec, SpectralSummary):
        return spec.eigenvalues
    return tuple(float(v) for v in spec)


def assess_homogeneous(f_prime: float, h: float, spec, cells: Sequence[int] | None = None) -> HomogeneousAssessment:
    eigs = _eigs(spec)
    rates = tuple(f_prime + h * lam for lam in eigs)
    cells = tuple(range(len(eigs))) if cells is None else tuple(cells)
    if all(r < 0 for r in rates):
        v = StabilityVerdict(Verdict.STABLE, "every eigenmode decays", (), "eigenmode")
    else:
        bad = [k for k, r in enumerate(rates) if r >= 0]
        if f_prime >= 0:
            why = f"uniform mode undamped: f'(1) = {f_prime:.4g} >= 0"
        else:
            why = f"{len(bad)} eigenmode(s) grow: h(1,1) = {h:.4g} amplifies disagreement"
        v = StabilityVerdict(Verdict.UNSTABLE, why, cells, "eigenmode")
    return HomogeneousAssessment(float(f_prime), float(h), eigs, rates, v)


@dataclass(frozen=True)
class ConvergenceRates:
    uniform: float
    disagreement: float | None


def convergence_rate_estimate(assessment: HomogeneousAssessment) -> ConvergenceRates:
    """Uniform-mode rate ``f'`` and the slowest disagreement-mode rate."""
    if assessment.verdict.variant is not Verdict.STABLE:
        raise ContractError("convergence rate is only defined for a Stable assessment")
    rest = assessment.mode_rates[1:]
    return ConvergenceRates(assessment.f_prime, max(rest) if rest else None)


@dataclass(frozen=True)
class VariationalMatrices:
    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    J: np.ndarray
    A: np.ndarray
    sleeping: tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def f_primes(self) -> np.ndarray:
        return np.diag(self.F).copy()

    def asymmetric_pairs(self, tol: float = SYMMETRY_TOL) -> list[tuple[int, int]]:
        diff = np.abs(self.Q - self.Q.T)
        i, j = np.nonzero(np.triu(diff > tol, 1))
        return list(zip(i.tolist(), j.tolist()))

    @property
    def h_symmetric(self) -> bool:
        return not self.asymmetric_pairs()


def build_variational_matrices(
    topology: NetworkTopology,
    assignment: PolicyAssignment,
    s: float = 1.0,
    sleeping: Sequence[int] = (),
) -> VariationalMatrices:
    """Linearization of the coupled system about the synchronized state ``s``.

    Cells listed in ``sleeping`` are linearized on their below-threshold
    branch with one-sided coupling slopes: ``h_ij`` is the drain slope and
    ``h_ji = 0``, since an active cell receives nothing from a sleeping one.
    """
    n = topology.n
    assignment.check_size(n)
    asleep = set(int(i) for i in sleeping)
    F = np.zeros(n)
    for i, pol in enumerate(assignment.local):
        if i in asleep:
            if not pol.mode.sleep_capable:
                raise PolicyError(f"cell {i} is not sleep-capable")
            F[i] = sleep_branch_derivative(pol, s)
        elif pol.mode.is_sleeping(s):
            raise PolicyError(
                f"linearization at s = {s} crosses sleep threshold gamma = {pol.mode.gamma} of cell {i}"
            )
        else:
            F[i] = local_derivative(pol, s)
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            g = assignment.coupling_for(i, j)
            if i in asleep:
                H[i, j] = drain_slope(g, s)
            elif j in asleep:
                H[i, j] = 0.0
            else:
                H[i, j] = coupling_slope_h(g, s)
    A = topology.adjacency
    Q = A * H
    K = np.diag(Q.sum(axis=1))
    Fm = np.diag(F)
    return VariationalMatrices(Fm, H, Q, K, Fm + K - Q, A.copy(), tuple(sorted(asleep)))


def symmetric_part_max_eig(J: np.ndarray) -> float:
    if J.size == 0:
        return -np.inf
    return float(np.linalg.eigvalsh((J + J.T) / 2).max())


def assess_heterogeneous(m: VariationalMatrices, cells: Sequence[int] | None = None) -> StabilityVerdict:
    labels = list(range(m.n)) if cells is None else list(cells)
    asym = m.asymmetric_pairs()
    if asym:
        involved = sorted({c for pair in asym for c in pair})
        if m.sleeping:
            blame = [c for c in involved if c in m.sleeping] or involved
        else:
            blame = involved
        return StabilityVerdict(
            Verdict.NOT_GUARANTEED,
            f"offloading slopes are asymmetric on {len(asym)} link(s); "
            "the identity Lyapunov function gives no conclusion",
            [labels[c] for c in blame],
            "asymmetry",
        )
    fp = m.f_primes
    linked = m.A > 0
    h_linked = m.H[linked]
    if np.all(fp < 0) and np.all(h_linked < 0):
        return StabilityVerdict(
            Verdict.STABLE, "f'_i(1) < 0 and h_ij(1,1) < 0 on every link: V = |x|^2 decreases", (), "lyapunov"
        )
    top = symmetric_part_max_eig(m.J)
    if top < 0:
        return StabilityVerdict(
            Verdict.STABLE,
            f"spectral test: largest eigenvalue of (J + J^T)/2 is {top:.4g} < 0",
            (),
            "spectral test",
        )
    blame = [i for i in range(m.n) if fp[i] >= 0]
    for i, j in zip(*np.nonzero(linked & (m.H >= 0))):
        blame.extend(c for c in (int(i), int(j)) if c not in blame)
    if not blame:
        vals, vecs = np.linalg.eigh((m.J + m.J.T) / 2)
        lead = np.abs(vecs[:, -1])
        blame = [int(i) for i in np.flatnonzero(lead >= lead.max() - 1e-12)]
    return StabilityVerdict(
        Verdict.UNSTABLE,
        f"spectral test: largest eigenvalue of (J + J^T)/2 is {top:.4g} >= 0",
        [labels[c] for c in blame],
        "spectral test",
    )


def lyapunov_decrement(m: VariationalMatrices, x) -> float:
    """``dV/dt = 2 (x'Fx + x'(K - Q)x)`` for ``V = x'x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (m.n,):
        raise ValueError(f"x must have shape ({m.n},), got {x.shape}")
    return float(2.0 * (x @ m.F @ x + x @ (m.K - m.Q) @ x))


@dataclass(frozen=True)
class Culprit:
    cell: int
    reason: str
    action: str = DENY

    def to_dict(self) -> dict:
        return {"cell": self.cell, "reason": self.reason, "action": self.action}


@dataclass(frozen=True)
class ComponentReport:
    cells: tuple[int, ...]
    verdict: StabilityVerdict
    mode_rates: tuple[float, ...]
    uniform_rate: float | None
    disagreement_rate: float | None
    algebraic_connectivity: float

    def to_dict(self) -> dict:
        return {
            "cells": list(self.cells),
            "verdict": self.verdict.variant.value,
            "method": self.verdict.method,
            "rationale": self.verdict.rationale,
            "mode_rates": list(self.mode_rates),
            "uniform_rate": self.uniform_rate,
            "disagreement_rate": self.disagreement_rate,
            "algebraic_connectivity": self.algebraic_connectivity,
        }


@dataclass(frozen=True)
class StabilityReport:
    verdict: Verdict
    rationale: str
    mode_rates: tuple[float, ...]
    culprits: tuple[Culprit, ...]
    uniform_rate: float | None
    disagreement_rate: float | None
    components: tuple[ComponentReport, ...]
    advisories: tuple[Culprit, ...] = field(default=())

    @property
    def culprit_ids(self) -> list[int]:
        return [c.cell for c in self.culprits]

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "rationale": self.rationale,
            "mode_rates": list(self.mode_rates),
            "culprits": [c.to_dict() for c in self.culprits],
            "uniform_rate": self.uniform_rate,
            "disagreement_rate": self.disagreement_rate,
            "components": [c.to_dict() for c in self.components],
            "advisories": [c.to_dict() for c in self.advisories],
        }


def _reasons(topology, assignment, at_risk, load_floor) -> dict[int, list[str]]:
    """Per-cell reasons in attribution order: local slope, coupling slope, sleep threshold."""
    out: dict[int, list[str]] = {}
    for i, pol in enumerate(assignment.local):
        fp = local_derivative(pol, 1.0)
        if fp >= 0:
            out.setdefault(i, []).append(f"destabilizing local dynamics (f'(1) = {fp:.4g})")
    for i, j in topology.sorted_edges():
        for a, b in ((i, j), (j, i)):
            h = coupling_slope_h(assignment.coupling_for(a, b), 1.0)
            if h >= 0:
                out.setdefault(a, []).append(f"non-negative coupling slope h = {h:.4g} toward cell {b}")
    for i in at_risk:
        g = assignment.local[i].mode.gamma
        out.setdefault(i, []).append(
            f"sleep threshold gamma = {g:.4g} above load floor {load_floor:.4g}: asymmetric offloading"
        )
    return out


def audit(topology: NetworkTopology, assignment: PolicyAssignment, load_floor: float | None = None) -> StabilityReport:
    """Whole-network stability check with per-cell blame.

    ``load_floor`` is the lowest load the network is expected to visit (for
    instance the bottom of the initial-load range).  Sleep-capable cells whose
    threshold lies above it can fall asleep and are analysed on their
    one-sided sleeping linearization; with no floor the analysis is local to
    ``l = 1`` and no cell is expected to sleep.
    """
    assignment.check_size(topology.n)
    at_risk = []
    if load_floor is not None:
        at_risk = [i for i in assignment.sleep_capable_cells() if load_floor < assignment.local[i].mode.gamma]
    risk = set(at_risk)

    comps = []
    for cells in connected_components(topology):
        sub = topology.subgraph(cells)
        sa = assignment.restrict(cells)
        local_risk = [k for k, c in enumerate(cells) if c in risk]
        lam2 = spectrum(laplacian(sub)).algebraic_connectivity
        if sa.homogeneous and not local_risk:
            fp = local_derivative(sa.local[0], 1.0)
            h = coupling_slope_h(sa.coupling, 1.0)
            ha = assess_homogeneous(fp, h, spectrum(laplacian(sub)), cells)
            dis = convergence_rate_estimate(ha).disagreement if ha.verdict.variant is Verdict.STABLE else None
            comps.append(ComponentReport(tuple(cells), ha.verdict, ha.mode_rates, fp, dis, lam2))
        else:
            m = build_variational_matrices(sub, sa, 1.0, sleeping=local_risk)
            v = assess_heterogeneous(m, cells)
            rates = tuple(sorted((float(r) for r in np.linalg.eigvals(m.J).real), reverse=True))
            comps.append(ComponentReport(tuple(cells), v, rates, None, None, lam2))

    worst = max((c.verdict.variant for c in comps), key=SEVERITY.__getitem__, default=Verdict.STABLE)
    blamed = sorted({c for comp in comps for c in comp.verdict.culprits})
    reasons = _reasons(topology, assignment, at_risk, load_floor)

    def rank(cell):
        text = reasons.get(cell, ["z"])[0]
        order = 0 if text.startswith("destabilizing") else 1 if text.startswith("non-negative") else 2
        return (order, cell)

    culprits = tuple(
        Culprit(c, "; ".join(reasons.get(c, ["participates in the leading unstable mode"])))
        for c in sorted(blamed, key=rank)
    )
    advisories = tuple(Culprit(c, "; ".join(r), "monitor") for c, r in sorted(reasons.items()) if c not in blamed)

    if len(comps) == 1:
        rationale = comps[0].verdict.rationale
    else:
        rationale = f"{len(comps)} connected components analysed separately; " + "; ".join(
            f"[{c.cells[0]}..] {c.verdict.variant.value}" for c in comps
        )
    uniform = comps[0].uniform_rate if comps and all(c.uniform_rate is not None for c in comps) else None
    if uniform is not None:
        uniform = max(c.uniform_rate for c in comps)
    dis_vals = [c.disagreement_rate for c in comps if len(c.cells) > 1]
    disagreement = max(dis_vals) if dis_vals and all(d is not None for d in dis_vals) else None
    rates = tuple(r for c in comps for r in c.mode_rates)
    return StabilityReport(worst, rationale, rates, culprits, uniform, disagreement, tuple(comps), advisories)
