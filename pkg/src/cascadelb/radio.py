"""PRB-based cell loads and RSRP/CIO handover between cells."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .streams import as_generator
from .topology import CellSite


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class RadioConfig:
    tx_power_dbm: tuple[float, ...]
    prb_count: tuple[int, ...]
    cio: np.ndarray
    path_loss_exponent: float = 3.5
    reference_loss_db: float = 30.0
    noise_power_dbm: float = -116.0
    prb_bandwidth: float = 180e3
    hysteresis_db: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tx_power_dbm", tuple(float(v) for v in self.tx_power_dbm))
        object.__setattr__(self, "prb_count", tuple(int(v) for v in self.prb_count))
        cio = np.array(self.cio, dtype=float)
        n = len(self.tx_power_dbm)
        if cio.shape != (n, n) or len(self.prb_count) != n:
            raise ConfigurationError("tx_power_dbm, prb_count and cio must all cover the same cells")
        if any(b < 1 for b in self.prb_count):
            raise ConfigurationError("prb_count must be >= 1")
        if self.hysteresis_db < 0:
            raise ConfigurationError("hysteresis must be >= 0 dB")
        if np.any(np.diag(cio) != 0):
            raise ConfigurationError("cio diagonal must be zero")
        cio.setflags(write=False)
        object.__setattr__(self, "cio", cio)

    @classmethod
    def uniform(cls, n: int, tx_power_dbm: float = 40.0, prb_count: int = 100, **kw) -> "RadioConfig":
        return cls((tx_power_dbm,) * n, (prb_count,) * n, np.zeros((n, n)), **kw)

    @property
    def n(self) -> int:
        return len(self.tx_power_dbm)

    def to_dict(self) -> dict:
        return {
            "tx_power_dbm": list(self.tx_power_dbm),
            "prb_count": list(self.prb_count),
            "cio": self.cio.tolist(),
            "path_loss_exponent": self.path_loss_exponent,
            "reference_loss_db": self.reference_loss_db,
            "noise_power_dbm": self.noise_power_dbm,
            "prb_bandwidth": self.prb_bandwidth,
            "hysteresis_db": self.hysteresis_db,
        }

    @classmethod
    def from_dict(cls, d: Mapping, n: int | None = None) -> "RadioConfig":
        d = dict(d)
        if n is not None:
            for key, default in (("tx_power_dbm", 40.0), ("prb_count", 100)):
                v = d.get(key, default)
                if not isinstance(v, (list, tuple)):
                    d[key] = [v] * n
            if "cio" not in d:
                d["cio"] = np.zeros((n, n))
        return cls(**d)


@dataclass(frozen=True)
class User:
    x: float
    y: float
    demand: float
    serving_cell: int = -1

    def __post_init__(self):
        if not self.demand > 0:
            raise ConfigurationError(f"user demand must be positive, got {self.demand}")


def drop_users(count: int, region, demand: float, seed) -> list[User]:
    rng = as_generator(seed)
    xy = rng.uniform(size=(int(count), 2)) * np.asarray(region, dtype=float)
    return [User(float(x), float(y), float(demand)) for x, y in xy]


def rsrp(cell: CellSite, user: User, config: RadioConfig) -> float:
    """Log-distance received power in dBm; distances under 1 m are clamped to 1 m."""
    d = max(math.hypot(user.x - cell.x, user.y - cell.y), 1.0)
    return config.tx_power_dbm[cell.id] - config.reference_loss_db - 10.0 * config.path_loss_exponent * math.log10(d)


def evaluate_handover(m_i: float, m_j: float, theta_i_to_j: float, theta_j_to_i: float, hys: float) -> bool:
    """True iff a user on cell ``i`` requests handover to ``j``."""
    return m_j + theta_j_to_i > hys + m_i + theta_i_to_j


def assign_users(sites: Sequence[CellSite], users: Sequence[User], config: RadioConfig) -> list[User]:
    """Max-RSRP attachment followed by repeated handover checks until none fires."""
    if not sites:
        raise ConfigurationError("need at least one cell")
    n = len(sites)
    out = []
    for u in users:
        m = [rsrp(s, u, config) for s in sites]
        cur = int(np.argmax(m))
        handovers = 0
        moved = True
        while moved:
            moved = False
            for j in range(n):
                if j == cur:
                    continue
                if evaluate_handover(m[cur], m[j], config.cio[cur, j], config.cio[j, cur], config.hysteresis_db):
                    cur = j
                    handovers += 1
                    if handovers > n:
                        raise ConfigurationError(
                            f"handover oscillation for user at ({u.x:.1f}, {u.y:.1f}): inconsistent CIO settings"
                        )
                    moved = True
                    break
        out.append(replace(u, serving_cell=cur))
    return out


def harmonic_share(prb_count: int, users: int) -> Fraction | None:
    """Per-user PRB share ``(B / U) * sum_{x=1..U} 1/x``; undefined for an empty cell."""
    if users <= 0:
        return None
    return Fraction(prb_count, users) * sum(Fraction(1, x) for x in range(1, users + 1))


def rate_per_prb(rsrp_dbm: float, config: RadioConfig) -> float:
    snr = 10.0 ** ((rsrp_dbm - config.noise_power_dbm) / 10.0)
    return config.prb_bandwidth * math.log2(1.0 + snr)


@dataclass(frozen=True)
class CellLoadSnapshot:
    loads: np.ndarray
    user_counts: tuple[int, ...]
    prb_demand: tuple[int | None, ...]
    prb_share: tuple[float | None, ...]
    serving: tuple[int, ...]
    unservable: tuple[int, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "loads": [float(v) for v in self.loads],
            "user_counts": list(self.user_counts),
            "users": [
                {"cell": c, "min_prbs": b, "share": s}
                for c, b, s in zip(self.serving, self.prb_demand, self.prb_share)
            ],
            "unservable": list(self.unservable),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "load", "users"])
        for i, (l, u) in enumerate(zip(self.loads, self.user_counts)):
            w.writerow([i, repr(float(l)), u])
        return buf.getvalue()


def cell_loads(sites: Sequence[CellSite], users: Sequence[User], config: RadioConfig) -> CellLoadSnapshot:
    """Per-cell load ``l_i = sum_u ceil(Q_u / w_u) / B_i`` from assigned users."""
    n = len(sites)
    need = np.zeros(n)
    counts = [0] * n
    demand: list[int | None] = []
    bad = []
    for k, u in enumerate(users):
        i = u.serving_cell
        if not 0 <= i < n:
            raise ConfigurationError(f"user {k} has no valid serving cell")
        w = rate_per_prb(rsrp(sites[i], u, config), config)
        if not w > 0:
            bad.append(k)
            demand.append(None)
            continue
        b = math.ceil(u.demand / w)
        demand.append(b)
        need[i] += b
        counts[i] += 1
    shares = []
    for u, b in zip(users, demand):
        s = harmonic_share(config.prb_count[u.serving_cell], counts[u.serving_cell]) if b is not None else None
        shares.append(float(s) if s is not None else None)
    loads = need / np.array(config.prb_count, dtype=float)
    return CellLoadSnapshot(
        loads, tuple(counts), tuple(demand), tuple(shares), tuple(u.serving_cell for u in users), tuple(bad)
    )


def snapshot_to_initial_loads(snapshot: CellLoadSnapshot) -> np.ndarray:
    return np.array(snapshot.loads, dtype=float)
