"""Local load dynamics ``f_i`` and pairwise offloading dynamics ``g_ij``.

Polynomials are dense coefficient lists in ascending order, ``c[k]`` being
the coefficient of ``l**k``.  All policy objects are frozen dataclasses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

MAX_DEGREE = 6
EQUILIBRIUM_TOL = 1e-9


class PolicyError(ValueError):
    """Malformed policy or out-of-domain evaluation."""


class FitError(PolicyError):
    pass


def _coeffs(values: Sequence[float] | None, name: str) -> tuple[float, ...]:
    if values is None:
        return ()
    out = tuple(float(v) for v in values)
    if not all(np.isfinite(out)):
        raise PolicyError(f"{name} contains non-finite coefficients")
    return out


def _polyval(coeffs: Sequence[float], x):
    if not coeffs:
        return 0.0 * np.asarray(x, dtype=float)
    return P.polyval(x, coeffs)


def _polyder_val(coeffs: Sequence[float], x):
    if len(coeffs) < 2:
        return 0.0 * np.asarray(x, dtype=float)
    return P.polyval(x, P.polyder(coeffs))


@dataclass(frozen=True)
class ActivationMode:
    """Active (``gamma is None``) or sleep-capable with threshold ``gamma``."""

    gamma: float | None = None

    def __post_init__(self):
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise PolicyError(f"sleep threshold must satisfy 0 < gamma < 1, got {self.gamma}")

    @property
    def sleep_capable(self) -> bool:
        return self.gamma is not None

    def is_sleeping(self, load: float) -> bool:
        # strict: exactly at gamma the cell is active
        return self.gamma is not None and load < self.gamma

    @property
    def label(self) -> str:
        return "sleep" if self.sleep_capable else "active"


ACTIVE = ActivationMode()


def sleep_mode(gamma: float) -> ActivationMode:
    return ActivationMode(gamma=float(gamma))


@dataclass(frozen=True)
class FitInfo:
    """Bookkeeping attached to a policy produced by :func:`fit_policy`."""

    constant_shift: float
    rms_residual: float
    n_samples: int
    degree: int


@dataclass(frozen=True)
class LocalPolicy:
    """Self-load dynamics ``f(l)`` of one cell.

    ``coeffs`` is the active branch.  A sleep-capable policy may carry a
    separate ``sleep_coeffs`` branch used for ``l < gamma``; without it the
    active polynomial is used on both sides of the threshold.
    """

    coeffs: tuple[float, ...]
    mode: ActivationMode = ACTIVE
    sleep_coeffs: tuple[float, ...] | None = None
    fit: FitInfo | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _coeffs(self.coeffs, "coeffs"))
        if self.sleep_coeffs is not None:
            if not self.mode.sleep_capable:
                raise PolicyError("sleep_coeffs given for an active-only policy")
            object.__setattr__(self, "sleep_coeffs", _coeffs(self.sleep_coeffs, "sleep_coeffs"))
        if not self.coeffs:
            raise PolicyError("coeffs must be non-empty")
        for name, c in (("coeffs", self.coeffs), ("sleep_coeffs", self.sleep_coeffs or ())):
            if len(c) - 1 > MAX_DEGREE:
                raise PolicyError(f"{name} has degree {len(c) - 1} > {MAX_DEGREE}")
        at_one = float(_polyval(self.coeffs, 1.0))
        if abs(at_one) > EQUILIBRIUM_TOL:
            raise PolicyError(f"active branch must vanish at l = 1, got f(1) = {at_one:.3g}")

    @property
    def gamma(self) -> float | None:
        return self.mode.gamma

    @property
    def below_threshold(self) -> tuple[float, ...]:
        return self.sleep_coeffs if self.sleep_coeffs is not None else self.coeffs

    def branch(self, load: float) -> tuple[float, ...]:
        return self.below_threshold if self.mode.is_sleeping(load) else self.coeffs

    def to_dict(self) -> dict:
        d: dict = {"mode": self.mode.label, "coeffs": list(self.coeffs)}
        if self.mode.sleep_capable:
            d["gamma"] = self.mode.gamma
            if self.sleep_coeffs is not None:
                d["sleep_coeffs"] = list(self.sleep_coeffs)
        if self.fit is not None:
            d["fit"] = {
                "constant_shift": self.fit.constant_shift,
                "rms_residual": self.fit.rms_residual,
                "n_samples": self.fit.n_samples,
                "degree": self.fit.degree,
            }
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LocalPolicy":
        kind = d.get("mode", "active")
        if kind == "active":
            if "gamma" in d and d["gamma"] is not None:
                raise PolicyError("active policies carry no gamma")
            mode = ACTIVE
        elif kind == "sleep":
            if d.get("gamma") is None:
                raise PolicyError("sleep policies require gamma")
            mode = sleep_mode(d["gamma"])
        else:
            raise PolicyError(f"unknown mode {kind!r}")
        return cls(tuple(d["coeffs"]), mode, d.get("sleep_coeffs"))


@dataclass(frozen=True)
class CouplingPolicy:
    """Offloading dynamics ``g(l_i, l_j) = (l_j - l_i)(sum p_n l_i^n + sum q_m l_j^m + c)``.

    ``sleep_drain`` is the polynomial in ``l_i`` applied instead when cell
    ``i`` is asleep; it should be non-positive on ``[0, gamma)``.
    """

    p: tuple[float, ...] = ()
    q: tuple[float, ...] = ()
    c: float = 0.0
    sleep_drain: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "p", _coeffs(self.p, "p"))
        object.__setattr__(self, "q", _coeffs(self.q, "q"))
        object.__setattr__(self, "sleep_drain", _coeffs(self.sleep_drain, "sleep_drain"))
        object.__setattr__(self, "c", float(self.c))
        if not np.isfinite(self.c):
            raise PolicyError("c must be finite")

    @classmethod
    def linear(cls, beta: float) -> "CouplingPolicy":
        """``g = beta (l_i - l_j)`` between active cells, ``beta * l_i`` when asleep."""
        return cls(c=-float(beta), sleep_drain=(0.0, float(beta)))

    def to_dict(self) -> dict:
        return {"p": list(self.p), "q": list(self.q), "c": self.c, "sleep_drain": list(self.sleep_drain)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CouplingPolicy":
        return cls(tuple(d.get("p", ())), tuple(d.get("q", ())), d.get("c", 0.0), tuple(d.get("sleep_drain", ())))


def _check_load(l: float, name: str = "l") -> float:
    l = float(l)
    if not np.isfinite(l) or l < 0.0:
        raise PolicyError(f"{name} must be a finite non-negative load, got {l}")
    return l


def eval_local(policy: LocalPolicy, l: float) -> float:
    l = _check_load(l)
    return float(_polyval(policy.branch(l), l))


def local_derivative(policy: LocalPolicy, s: float) -> float:
    """Analytic ``f'(s)`` of the branch that is in force at ``s``."""
    if policy.mode.sleep_capable and s == policy.mode.gamma:
        raise PolicyError(f"derivative undefined at the switch point s = gamma = {s}")
    return float(_polyder_val(policy.branch(s), s))


def sleep_branch_derivative(policy: LocalPolicy, s: float) -> float:
    return float(_polyder_val(policy.below_threshold, s))


def eval_coupling(
    coupling: CouplingPolicy,
    l_i: float,
    l_j: float,
    mode_i: ActivationMode = ACTIVE,
    mode_j: ActivationMode = ACTIVE,
) -> float:
    """Load rate that cell ``i`` receives through its link to ``j``."""
    l_i = _check_load(l_i, "l_i")
    l_j = _check_load(l_j, "l_j")
    if mode_i.is_sleeping(l_i):
        return float(_polyval(coupling.sleep_drain, l_i))
    if mode_j.is_sleeping(l_j):
        return 0.0
    gain = _polyval(coupling.p, l_i) + _polyval(coupling.q, l_j) + coupling.c
    return float((l_j - l_i) * gain)


def coupling_slope_h(coupling: CouplingPolicy, s: float) -> float:
    """``h(s, s) = dg/dl_i`` on the diagonal; ``dg/dl_j = -h``."""
    return -float(_polyval(coupling.p, s) + _polyval(coupling.q, s) + coupling.c)


def drain_slope(coupling: CouplingPolicy, s: float) -> float:
    return float(_polyder_val(coupling.sleep_drain, s))


def fit_policy(samples, degree: int, mode: ActivationMode = ACTIVE) -> LocalPolicy:
    """Least-squares polynomial fit of ``(load, rate)`` samples.

    The constant term is then shifted so that ``f(1) = 0`` exactly; the shift
    and the RMS residual of the projected fit travel in ``policy.fit``.
    """
    data = np.asarray(samples, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise FitError("samples must be a sequence of (load, rate) pairs")
    if not 1 <= degree <= MAX_DEGREE:
        raise FitError(f"degree must be in 1..{MAX_DEGREE}, got {degree}")
    x, y = data[:, 0], data[:, 1]
    if len(x) < degree + 1:
        raise FitError(f"underdetermined: {len(x)} samples for {degree + 1} coefficients")
    V = P.polyvander(x, degree)
    coef, _, rank, _ = np.linalg.lstsq(V, y, rcond=None)
    if rank < degree + 1:
        raise FitError(
            f"rank-deficient design matrix: rank {rank} < {degree + 1} "
            f"({len(np.unique(x))} distinct load values)"
        )
    shift = -float(P.polyval(1.0, coef))
    coef = coef.copy()
    coef[0] += shift
    resid = y - V @ coef
    info = FitInfo(
        constant_shift=shift,
        rms_residual=float(np.sqrt(np.mean(resid**2))),
        n_samples=len(x),
        degree=degree,
    )
    return LocalPolicy(tuple(coef), mode, fit=info)


@dataclass(frozen=True)
class PolicyDiagnostics:
    equilibrium_value: float
    equilibrium_ok: bool
    sign_pattern_ok: bool
    sign_violations: tuple[float, ...]
    slope_at_one: float
    destabilizing: bool

    @property
    def ok(self) -> bool:
        return self.equilibrium_ok and self.sign_pattern_ok and not self.destabilizing

    @property
    def messages(self) -> list[str]:
        msgs = []
        if not self.equilibrium_ok:
            msgs.append(f"f(1) = {self.equilibrium_value:.3g} is not an equilibrium")
        if not self.sign_pattern_ok:
            msgs.append(f"sleep sign pattern violated at {len(self.sign_violations)} grid points")
        if self.destabilizing:
            msgs.append("destabilizing local dynamics")
        return msgs


def validate_policy(policy: LocalPolicy, grid_points: int = 1000) -> PolicyDiagnostics:
    f1 = float(_polyval(policy.coeffs, 1.0))
    slope = float(_polyder_val(policy.coeffs, 1.0))
    violations: list[float] = []
    gamma = policy.mode.gamma
    if gamma is not None:
        upper = max(1.5, gamma + 1.0)
        grid = np.linspace(0.0, upper, grid_points + 2)[1:-1]
        for l in grid:
            f = float(_polyval(policy.branch(l), l))
            if l < gamma and not f < 0.0:
                violations.append(float(l))
            elif gamma < l < 1.0 and not f > 0.0:
                violations.append(float(l))
    return PolicyDiagnostics(
        equilibrium_value=f1,
        equilibrium_ok=abs(f1) <= EQUILIBRIUM_TOL,
        sign_pattern_ok=not violations,
        sign_violations=tuple(violations),
        slope_at_one=slope,
        destabilizing=slope >= 0.0,
    )


def quadratic_active(alpha: float) -> LocalPolicy:
    """``f(l) = alpha (1 - l^2)``."""
    return LocalPolicy((alpha, 0.0, -alpha))


def linear_active(alpha: float) -> LocalPolicy:
    """``f(l) = alpha (1 - l)``."""
    return LocalPolicy((alpha, -alpha))


def threshold_sleep(alpha: float, gamma: float) -> LocalPolicy:
    """``f(l) = alpha (l - gamma)(1 - l)`` above ``gamma``.

    Below ``gamma`` the same curve is scaled by ``l / gamma`` so that an idle
    cell drains to zero load instead of running negative.
    """
    a, g = float(alpha), float(gamma)
    active = (-a * g, a * (1.0 + g), -a)
    below = tuple(np.concatenate(([0.0], np.asarray(active) / g)))
    return LocalPolicy(active, sleep_mode(g), below)


@dataclass(frozen=True)
class PolicyAssignment:
    """Per-cell local policies and per-ordered-pair couplings."""

    local: tuple[LocalPolicy, ...]
    coupling: CouplingPolicy
    pair_couplings: Mapping[tuple[int, int], CouplingPolicy] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "local", tuple(self.local))
        n = len(self.local)
        for (i, j) in self.pair_couplings:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise PolicyError(f"pair coupling ({i}, {j}) does not name two distinct cells")

    @classmethod
    def uniform(cls, n: int, local: LocalPolicy, coupling: CouplingPolicy) -> "PolicyAssignment":
        return cls((local,) * n, coupling)

    @property
    def n(self) -> int:
        return len(self.local)

    def coupling_for(self, i: int, j: int) -> CouplingPolicy:
        return self.pair_couplings.get((i, j), self.coupling)

    @property
    def homogeneous(self) -> bool:
        first = self.local[0] if self.local else None
        return (
            all(not p.mode.sleep_capable and p == first for p in self.local)
            and all(c == self.coupling for c in self.pair_couplings.values())
        )

    def sleep_capable_cells(self) -> list[int]:
        return [i for i, p in enumerate(self.local) if p.mode.sleep_capable]

    def check_size(self, n: int) -> None:
        if self.n != n:
            raise PolicyError(f"assignment covers {self.n} cells, topology has {n}")

    def restrict(self, cells: Sequence[int]) -> "PolicyAssignment":
        index = {c: k for k, c in enumerate(cells)}
        pairs = {
            (index[i], index[j]): g
            for (i, j), g in self.pair_couplings.items()
            if i in index and j in index
        }
        return PolicyAssignment(tuple(self.local[c] for c in cells), self.coupling, pairs)
