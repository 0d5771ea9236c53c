"""End-to-end acceptance checks; each prints one PASS/FAIL line in the terminal summary."""

import itertools
import json
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import sympy

from cascadelb.cli import main
from cascadelb.policy import CouplingPolicy, LocalPolicy, PolicyAssignment, local_derivative, coupling_slope_h
from cascadelb.radio import (
    RadioConfig,
    assign_users,
    drop_users,
    evaluate_handover,
    harmonic_share,
    rsrp,
)
from cascadelb.scenario import Scenario
from cascadelb.simulate import (
    NetworkDynamics,
    SimulationConfig,
    classify_terminal_states,
    integrate,
    perturb,
    sync_metrics,
)
from cascadelb.stability import Verdict, audit, build_variational_matrices, lyapunov_decrement
from cascadelb.topology import (
    connected_components,
    erdos_renyi,
    from_edges,
    laplacian,
    spectrum,
    uniform_sites,
)

from conftest import charpoly_eigenvalues

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def load(name, **overrides):
    data = json.loads((SCENARIOS / f"{name}.json").read_text())
    data.update(overrides)
    return Scenario.load(data)


def fd_jacobian(F, x, h=1e-6):
    out = np.empty((x.size, x.size))
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h
        out[:, k] = (F(x + e) - F(x - e)) / (2 * h)
    return out


# 1 -----------------------------------------------------------------------

@pytest.mark.parametrize("seed", [11, 12, 13])
def test_ac1_homogeneous_synchronization(seed, acceptance_log):
    start = time.perf_counter()
    built = load("homogeneous", seed=seed).build()
    report = audit(built.topology, built.assignment, built.load_floor)
    traj = integrate(built.config, built.initial, built.topology, built.assignment)
    elapsed = time.perf_counter() - start
    final_dev = float(np.max(np.abs(traj.final - 1.0)))
    connected = len(connected_components(built.topology)) == 1
    lo, hi = float(built.initial.min()), float(built.initial.max())
    ok = (
        connected
        and report.verdict is Verdict.STABLE
        and traj.times[-1] == pytest.approx(20.0)
        and final_dev < 1e-3
        and elapsed < 5.0
        and 0.2 <= lo and hi <= 1.8
    )
    acceptance_log(
        "AC1",
        ok,
        f"seed {seed}: N={built.topology.n} connected={connected} verdict={report.verdict.value} "
        f"max|l-1| at t=20 = {final_dev:.2e} (< 1e-3), runtime {elapsed:.2f}s (< 5s)",
    )
    assert ok


# 2 -----------------------------------------------------------------------

# the fitting window runs from hi * initial deviation down to lo * tolerance;
# a tiny tolerance lets the fit see the asymptotic regime
RATE_CONFIG = SimulationConfig(dt=0.01, horizon=30.0, sync_tolerance=1e-13, rate_window=(10.0, 1e-3))


def _rates(topo, assignment, seed):
    report = audit(topo, assignment)
    x0 = perturb(np.ones(topo.n), 0.01, seed)
    m = sync_metrics(integrate(RATE_CONFIG, x0, topo, assignment), RATE_CONFIG)
    return report, m


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ac2_rate_agreement(seed, acceptance_log):
    built = load("homogeneous").build()
    report, m = _rates(built.topology, built.assignment, seed)
    analytic = max(report.uniform_rate, report.disagreement_rate)
    rel = abs(m.empirical_rate - analytic) / abs(analytic)
    ok = rel < 0.10
    acceptance_log(
        "AC2",
        ok,
        f"perturbation seed {seed}: empirical rate {m.empirical_rate:.4f} vs analytic worst mode "
        f"{analytic:.4f}, relative error {rel:.3f} (< 0.10)",
    )
    assert ok


def test_ac2_rate_ordering_follows_lambda2(acceptance_log):
    built = load("homogeneous").build()
    n = built.topology.n
    dense = built.topology
    sparse = from_edges(n, [(i, i + 1) for i in range(n - 1)])
    lam_dense = spectrum(laplacian(dense)).algebraic_connectivity
    lam_sparse = spectrum(laplacian(sparse)).algebraic_connectivity
    r_dense = _rates(dense, built.assignment, 0)[1].disagreement_rate
    r_sparse = _rates(sparse, built.assignment, 0)[1].disagreement_rate
    ratio = lam_dense / lam_sparse
    ok = ratio >= 3 and r_dense < r_sparse < 0
    acceptance_log(
        "AC2",
        ok,
        f"lambda_2 {lam_dense:.4f} (Delaunay) vs {lam_sparse:.4f} (path), ratio {ratio:.1f} (>= 3); "
        f"disagreement rates {r_dense:.4f} faster than {r_sparse:.4f}",
    )
    assert ok


# 3 -----------------------------------------------------------------------

def _random_local(rng):
    tail = rng.uniform(-1.5, 1.5, size=rng.integers(1, 4))
    return LocalPolicy((-tail.sum(),) + tuple(tail))


def _random_coupling(rng):
    return CouplingPolicy(
        p=tuple(rng.uniform(-1, 1, size=rng.integers(0, 3))),
        q=tuple(rng.uniform(-1, 1, size=rng.integers(0, 3))),
        c=float(rng.uniform(-1.5, 1.5)),
    )


def test_ac3_linearization_identity(acceptance_log):
    worst_het = worst_hom = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 16))
        topo = erdos_renyi(n, float(rng.uniform(0.2, 0.8)), seed)
        pairs = {}
        for i, j in topo.sorted_edges():
            if rng.random() < 0.3:
                pairs[(i, j)] = _random_coupling(rng)
        a = PolicyAssignment(tuple(_random_local(rng) for _ in range(n)), _random_coupling(rng), pairs)
        m = build_variational_matrices(topo, a)
        assert np.array_equal(m.J, m.F + m.K - m.Q)
        numeric = fd_jacobian(NetworkDynamics(topo, a), np.ones(n))
        worst_het = max(worst_het, float(np.max(np.abs(numeric - m.J))))

        hom = PolicyAssignment.uniform(n, a.local[0], a.coupling)
        fp, h = local_derivative(hom.local[0], 1.0), coupling_slope_h(hom.coupling, 1.0)
        closed = fp * np.eye(n) + h * laplacian(topo)
        numeric = fd_jacobian(NetworkDynamics(topo, hom), np.ones(n))
        worst_hom = max(worst_hom, float(np.max(np.abs(numeric - closed))))
    ok = worst_het < 1e-5 and worst_hom < 1e-5
    acceptance_log(
        "AC3",
        ok,
        f"50 random scenarios (N <= 15): max |J_fd - (F+K-Q)| = {worst_het:.2e}, "
        f"max |J_fd - (f'I + hL)| = {worst_hom:.2e} (< 1e-5)",
    )
    assert ok


# 4 -----------------------------------------------------------------------

def test_ac4_lyapunov_identity(acceptance_log):
    worst = 0.0
    for seed in range(500):
        rng = np.random.default_rng(10_000 + seed)
        n = int(rng.integers(2, 21))
        topo = erdos_renyi(n, float(rng.uniform(0.1, 0.9)), seed)
        betas = {e: float(rng.uniform(-3, 3)) for e in topo.sorted_edges()}
        pairs = {}
        for (i, j), b in betas.items():
            pairs[(i, j)] = pairs[(j, i)] = CouplingPolicy.linear(b)
        local = tuple(LocalPolicy((a, -a)) for a in rng.uniform(-1, 1, n))
        m = build_variational_matrices(topo, PolicyAssignment(local, CouplingPolicy.linear(-1.0), pairs))
        assert not m.asymmetric_pairs()
        x = rng.normal(size=n)
        lhs = float(x @ (m.K - m.Q) @ x)
        # both ordered pairs of every link, halved
        rhs = sum(b * (x[i] - x[j]) ** 2 for (i, j), b in betas.items())
        scale = max(abs(rhs), sum(abs(b) * (x[i] - x[j]) ** 2 for (i, j), b in betas.items()), 1e-300)
        worst = max(worst, abs(lhs - rhs) / scale)
        vdot = lyapunov_decrement(m, x)
        assert vdot == pytest.approx(2 * (x @ m.F @ x + rhs), rel=1e-9, abs=1e-12)
    ok = worst < 1e-9
    acceptance_log("AC4", ok, f"500 symmetric instances (N <= 20): max relative error {worst:.2e} (< 1e-9)")
    assert ok


# 5 -----------------------------------------------------------------------

def graphs_up_to_isomorphism(n):
    pairs = list(itertools.combinations(range(n), 2))
    perms = list(itertools.permutations(range(n)))
    seen, out = set(), []
    for mask in range(1 << len(pairs)):
        edges = [e for k, e in enumerate(pairs) if mask >> k & 1]
        canon = min(tuple(sorted(tuple(sorted((p[i], p[j]))) for i, j in edges)) for p in perms)
        if canon not in seen:
            seen.add(canon)
            out.append(list(canon))
    return out


def test_ac5_spectrum_oracle(acceptance_log):
    counts, worst = {}, 0.0
    for n in range(1, 6):
        graphs = graphs_up_to_isomorphism(n)
        counts[n] = len(graphs)
        for edges in graphs:
            L = laplacian(from_edges(n, edges))
            got = spectrum(L).eigenvalues
            worst = max(worst, float(np.max(np.abs(np.array(got) - charpoly_eigenvalues(L)))))
    ok_enum = counts == {1: 1, 2: 2, 3: 4, 4: 11, 5: 34}
    acceptance_log(
        "AC5",
        ok_enum and worst < 1e-8,
        f"{sum(counts.values())} graphs on <= 5 nodes ({counts[5]} on 5): max |eig - charpoly root| = {worst:.2e} (< 1e-8)",
    )
    assert ok_enum and worst < 1e-8


def test_ac5_closed_forms(acceptance_log):
    lam = sympy.Symbol("lam")
    exact_ok, worst = True, 0.0
    cases = [(f"K{n}", n, list(itertools.combinations(range(n), 2)), [0] + [n] * (n - 1)) for n in range(2, 9)]
    cases.append(("P3", 3, [(0, 1), (1, 2)], [0, 1, 3]))
    for name, n, edges, closed in cases:
        L = laplacian(from_edges(n, edges))
        roots = sympy.Poly(sympy.Matrix(L.astype(int).tolist()).charpoly(lam).as_expr(), lam).all_roots()
        exact_ok &= sorted(roots) == [sympy.Integer(v) for v in closed]
        worst = max(worst, float(np.max(np.abs(np.array(spectrum(L).eigenvalues) - closed))))
    # symbolic roots match exactly; the floating-point solver to within roundoff
    ok = exact_ok and worst < 1e-12
    acceptance_log(
        "AC5",
        ok,
        f"K_2..K_8 and P3: exact characteristic roots equal closed forms={exact_ok}, "
        f"float spectrum max error {worst:.1e} (< 1e-12)",
    )
    assert ok


# 6 -----------------------------------------------------------------------

def test_ac6_sleep_bifurcation(acceptance_log):
    start = time.perf_counter()
    low = load("sleep_low_gamma").build()
    low_report = audit(low.topology, low.assignment, low.load_floor)
    low_m = sync_metrics(integrate(low.config, low.initial, low.topology, low.assignment), low.config)
    low_dev = float(np.max(np.abs(integrate(low.config, low.initial, low.topology, low.assignment).final - 1)))

    high = load("sleep_high_gamma").build()
    high_report = audit(high.topology, high.assignment, high.load_floor)
    traj = integrate(high.config, high.initial, high.topology, high.assignment)
    high_m = sync_metrics(traj, high.config)
    clusters = classify_terminal_states(traj, high.assignment, high_report.culprit_ids)
    elapsed = time.perf_counter() - start

    sleep_cells = set(high.assignment.sleep_capable_cells())
    slept = [i for c in clusters for i in c.slept]
    near_zero = all(traj.final[i] < 0.05 for i in slept)
    culprits = set(high_report.culprit_ids)
    lo_in, hi_in = float(high.initial.min()), float(high.initial.max())
    ok_low = low_m.synchronized and low_dev < 1e-3
    ok_high = (
        0.2 <= lo_in and hi_in <= 1.8
        and len(slept) >= 1
        and near_zero
        and not high_m.synchronized
        and high_report.verdict is Verdict.NOT_GUARANTEED
        and culprits
        and culprits <= sleep_cells
    )
    ok = ok_low and ok_high and elapsed < 10.0
    acceptance_log(
        "AC6",
        ok,
        f"gamma=0.05: synchronized={low_m.synchronized} max|l-1|={low_dev:.1e} verdict={low_report.verdict.value}; "
        f"gamma=0.5: slept cells {sorted(slept)} at max load {max(traj.final[slept], default=np.nan):.1e}, "
        f"synchronized={high_m.synchronized}, verdict={high_report.verdict.value}, "
        f"culprits {sorted(culprits)} all sleep-capable={culprits <= sleep_cells}; runtime {elapsed:.2f}s (< 10s)",
    )
    assert ok


# 7 -----------------------------------------------------------------------

def test_ac7_radio_layer(acceptance_log):
    share_ok = all(
        harmonic_share(100, u) == Fraction(100, u) * sum(Fraction(1, x) for x in range(1, u + 1))
        and u * harmonic_share(100, u) == 100 * sum(Fraction(1, x) for x in range(1, u + 1))
        for u in range(1, 51)
    )

    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        # half-dB grid so ties at the strict boundary actually occur
        mi, mj = rng.integers(-260, -80, 2) / 2
        tij, tji = rng.integers(-12, 13, 2) / 2
        hys = rng.integers(0, 9) / 2
        direct = Fraction(mj) + Fraction(tji) > Fraction(hys) + Fraction(mi) + Fraction(tij)
        mismatches += evaluate_handover(float(mi), float(mj), float(tij), float(tji), float(hys)) != direct

    diffs = 0
    for seed in range(100):
        sites = uniform_sites(int(np.random.default_rng(seed).integers(2, 9)), (1000, 1000), seed)
        cfg = RadioConfig.uniform(len(sites))
        users = drop_users(20, (1000, 1000), 1e6, seed + 500)
        got = [u.serving_cell for u in assign_users(sites, users, cfg)]
        want = [int(np.argmax([rsrp(s, u, cfg) for s in sites])) for u in users]
        diffs += got != want
    ok = share_ok and mismatches == 0 and diffs == 0
    acceptance_log(
        "AC7",
        ok,
        f"harmonic share identity exact for U=1..50: {share_ok}; handover truth table mismatches "
        f"{mismatches}/1000; zero-offset assignment differs from max-RSRP in {diffs}/100 instances",
    )
    assert ok


# 8 -----------------------------------------------------------------------

def _pipeline(out):
    codes = [
        main(["generate", "--intensity", "25", "--seed", "5", "--out-dir", str(out / "generate")]),
        main(["audit", "--scenario", str(SCENARIOS / "sleep_high_gamma.json"), "--out-dir", str(out / "audit")]),
        main(["simulate", "--scenario", str(SCENARIOS / "sleep_high_gamma.json"), "--out-dir", str(out / "sim")]),
        main(["simulate", "--scenario", str(SCENARIOS / "radio.json"), "--format", "csv", "--out-dir", str(out / "radio")]),
        main(["report", "--scenario", str(SCENARIOS / "homogeneous.json"), "--out-dir", str(out / "report")]),
        main(["sweep", "--scenario", str(SCENARIOS / "sleep_low_gamma.json"), "--param", "gamma",
              "--values", "0.05,0.3", "--out-dir", str(out / "sweep")]),
    ]
    files = {
        p.relative_to(out).as_posix(): p.read_bytes()
        for p in sorted(out.rglob("*"))
        if p.suffix in (".csv", ".json")
    }
    return codes, files


def test_ac8_determinism(tmp_path, capsys, acceptance_log):
    codes_a, a = _pipeline(tmp_path / "a")
    codes_b, b = _pipeline(tmp_path / "b")
    capsys.readouterr()
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = codes_a == codes_b and a.keys() == b.keys() and not differing and len(a) >= 15
    acceptance_log(
        "AC8",
        ok,
        f"{len(a)} CSV/JSON files from two full pipeline runs, byte-identical: {not differing} "
        f"(exit codes {codes_a})",
    )
    assert ok
