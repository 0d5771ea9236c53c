import itertools

import numpy as np
import pytest
import sympy

ACCEPTANCE_LINES: list[str] = []


def charpoly_eigenvalues(L) -> list[float]:
    """Exact Laplacian spectrum via sympy's characteristic polynomial and real root isolation."""
    M = sympy.Matrix(np.asarray(L, dtype=int).tolist())
    lam = sympy.Symbol("lam")
    poly = sympy.Poly(M.charpoly(lam).as_expr(), lam)
    roots = poly.real_roots()
    return sorted(float(sympy.N(r, 30)) for r in roots)


def union_find_components(n, edges) -> list[list[int]]:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for v in range(n):
        groups.setdefault(find(v), []).append(v)
    return sorted(groups.values(), key=lambda g: g[0])


def brute_delaunay_edges(pts, tol=1e-9):
    """Edges of triangles whose circumcircle holds no other site strictly inside."""
    pts = np.asarray(pts, dtype=float)
    n = len(pts)
    edges = set()
    for a, b, c in itertools.combinations(range(n), 3):
        A, B, C = pts[a], pts[b], pts[c]
        d = 2 * (A[0] * (B[1] - C[1]) + B[0] * (C[1] - A[1]) + C[0] * (A[1] - B[1]))
        if abs(d) < 1e-12:
            continue
        ux = ((A @ A) * (B[1] - C[1]) + (B @ B) * (C[1] - A[1]) + (C @ C) * (A[1] - B[1])) / d
        uy = ((A @ A) * (C[0] - B[0]) + (B @ B) * (A[0] - C[0]) + (C @ C) * (B[0] - A[0])) / d
        r = np.hypot(A[0] - ux, A[1] - uy)
        dist = np.hypot(pts[:, 0] - ux, pts[:, 1] - uy)
        inside = [k for k in range(n) if k not in (a, b, c) and dist[k] < r - tol * max(r, 1.0)]
        if not inside:
            edges.update({(a, b), (a, c), (b, c)})
    return edges


@pytest.fixture
def acceptance_log():
    def record(criterion: str, passed: bool, detail: str):
        ACCEPTANCE_LINES.append(f"{criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
