"""``cascadelb`` command line: generate | fit | audit | simulate | sweep | report.

Exit codes: 0 ok / Stable, 1 bad input, 2 Unstable, 3 NotGuaranteed, 4 blowup.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .policy import ACTIVE, FitError, PolicyError, fit_policy, sleep_mode
from .scenario import Scenario, ScenarioError, canonical_json
from .simulate import classify_terminal_states, integrate, sync_metrics
from .stability import Verdict, audit
from .streams import substream
from .topology import (
    GeometryError,
    build_neighbor_graph,
    connected_components,
    generate_ppp,
    laplacian,
    spectrum,
)

EXIT_OK, EXIT_INPUT, EXIT_UNSTABLE, EXIT_NOT_GUARANTEED, EXIT_BLOWUP = 0, 1, 2, 3, 4
VERDICT_EXIT = {Verdict.STABLE: EXIT_OK, Verdict.UNSTABLE: EXIT_UNSTABLE, Verdict.NOT_GUARANTEED: EXIT_NOT_GUARANTEED}


class Outputs:
    """Collects written files for the run manifest."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def write(self, name: str, text: str) -> Path:
        path = self.dir / name
        path.write_text(text)
        self.files.append(name)
        return path

    def add(self, path: Path):
        self.files.append(path.name)

    def manifest(self, scenario_digest, seeds: dict, verdict: dict):
        digests = {
            f: hashlib.sha256((self.dir / f).read_bytes()).hexdigest()
            for f in self.files
            if not f.endswith(".png")
        }
        self.write("manifest.json", canonical_json({
            "scenario_hash": scenario_digest,
            "tool_version": __version__,
            "seeds": seeds,
            "files": sorted(self.files),
            "sha256": digests,
            "verdict": verdict,
        }))


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _parse_region(text: str) -> tuple[float, float]:
    try:
        w, h = text.lower().split("x")
        return float(w), float(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"region must look like 1000x1000, got {text!r}") from None


def _load_scenario(args) -> Scenario:
    if not args.scenario:
        raise ScenarioError(["--scenario is required for this command"])
    return Scenario.load(args.scenario).with_seed(args.seed)


def _seeds(sc: Scenario) -> dict:
    return {"scenario": sc.seed, "streams": ["topology", "edges", "assignment", "initial", "perturbation", "users"]}


def _topology_outputs(out: Outputs, topo):
    spec = spectrum(laplacian(topo))
    comps = connected_components(topo)
    out.write("topology.json", canonical_json(topo.to_dict()))
    out.write("spectrum.csv", spec.to_csv())
    return spec, comps


def cmd_generate(args) -> int:
    if args.intensity is None:
        raise ScenarioError(["generate needs --intensity (sites per km^2)"])
    seed = 0 if args.seed is None else args.seed
    sites = generate_ppp(args.intensity / 1e6, args.region, substream(seed, "topology"))
    topo = build_neighbor_graph(sites, args.prob, substream(seed, "edges"), args.region)
    topo = type(topo)(topo.sites, topo.edges, topo.region, seed, args.prob)
    out = Outputs(args.out_dir)
    spec, comps = _topology_outputs(out, topo)
    print(f"cells: {topo.n}  links: {len(topo.edges)}")
    print(f"lambda_2 = {spec.algebraic_connectivity:.6g}  lambda_N = {spec.spectral_radius:.6g}  components: {len(comps)}")
    if len(comps) > 1:
        print("warning: graph disconnected; per-component analysis will apply", file=sys.stderr)
    out.manifest(None, {"scenario": seed}, {"components": len(comps)})
    return EXIT_OK


def _read_samples(path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "load" not in cols or "rate" not in cols:
            raise ScenarioError([f"samples CSV needs columns 'load' and 'rate', found {cols}"])
        try:
            return [(float(r["load"]), float(r["rate"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise ScenarioError([f"samples CSV: {exc}"]) from None


def cmd_fit(args) -> int:
    samples = _read_samples(args.samples)
    mode = sleep_mode(args.gamma) if args.gamma is not None else ACTIVE
    policy = fit_policy(samples, args.degree, mode)
    out = Outputs(args.out_dir)
    out.write(args.output, canonical_json(policy.to_dict()))
    coeffs = ", ".join(f"{c:.6g}" for c in policy.coeffs)
    print(f"coefficients: [{coeffs}]")
    print(f"constant shift to enforce f(1)=0: {policy.fit.constant_shift:.3g}  rms residual: {policy.fit.rms_residual:.3g}")
    return EXIT_OK


def _audit_outputs(out: Outputs, report, fmt: str):
    if fmt == "csv":
        out.write("mode_rates.csv", _rows_csv(["mode", "rate"], [(k, repr(r)) for k, r in enumerate(report.mode_rates)]))
        out.write("culprits.csv", _rows_csv(["cell", "reason", "action"],
                                            [(c.cell, c.reason, c.action) for c in report.culprits]))
    else:
        out.write("report.json", canonical_json(report.to_dict()))


def cmd_audit(args) -> int:
    sc = _load_scenario(args)
    built = sc.build()
    report = audit(built.topology, built.assignment, built.load_floor)
    out = Outputs(args.out_dir)
    _audit_outputs(out, report, args.format)
    print(f"verdict: {report.verdict.value} ({report.rationale})")
    for c in report.culprits:
        print(f"cell {c.cell}: {c.reason}")
    out.manifest(sc.digest, _seeds(sc), {"audit": report.verdict.value})
    return VERDICT_EXIT[report.verdict]


def _simulate(sc: Scenario, initial_kind, out: Outputs, fmt: str):
    built = sc.build(initial_kind)
    report = audit(built.topology, built.assignment, built.load_floor)
    traj = integrate(built.config, built.initial, built.topology, built.assignment)
    metrics = sync_metrics(traj, built.config)
    clusters = classify_terminal_states(traj, built.assignment, report.culprit_ids)
    out.write("trajectory.csv", traj.to_csv())
    if fmt == "csv":
        m = metrics.to_dict()
        out.write("metrics.csv", _rows_csv(["key", "value"], [
            (k, "" if m[k] is None else m[k]) for k in ("synchronized", "sync_time", "empirical_rate", "disagreement_rate", "blowup")
        ]))
        out.write("clusters.csv", _rows_csv(["load", "mode", "cells"], [
            (repr(c.load), c.mode, " ".join(map(str, c.members))) for c in clusters
        ]))
    else:
        out.write("metrics.json", canonical_json(metrics.to_dict()))
        out.write("clusters.json", canonical_json([c.to_dict() for c in clusters]))
    if built.snapshot is not None:
        out.write("radio_loads.csv", built.snapshot.to_csv())
    return built, report, traj, metrics, clusters


def _append_ledger(out: Outputs, sc: Scenario, report, metrics):
    path = out.dir / "concordance.csv"
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["scenario_hash", "seed", "analytic_verdict", "synchronized", "blowup"])
        w.writerow([sc.digest[:16], sc.seed, report.verdict.value, metrics.synchronized, metrics.blowup])


def _print_sim(report, metrics, clusters):
    if metrics.blowup:
        print("integration blew up; partial trajectory written")
        return
    if metrics.synchronized:
        print(f"synchronized at t={metrics.sync_time:.4g}")
    else:
        desc = ", ".join(f"{c.load:.3g} x{len(c.members)} ({c.mode})" for c in clusters)
        print(f"not synchronized; clusters: {desc}")
    print(f"analytic verdict: {report.verdict.value}")
    if metrics.empirical_rate is not None and report.uniform_rate is not None:
        analytic = max(report.uniform_rate, report.disagreement_rate or -np.inf)
        print(f"empirical decay rate {metrics.empirical_rate:.4g} vs analytic worst mode {analytic:.4g}")


def cmd_simulate(args) -> int:
    sc = _load_scenario(args)
    out = Outputs(args.out_dir)
    built, report, traj, metrics, clusters = _simulate(sc, args.initial, out, args.format)
    _print_sim(report, metrics, clusters)
    _append_ledger(out, sc, report, metrics)
    out.manifest(sc.digest, _seeds(sc), {"audit": report.verdict.value, "synchronized": metrics.synchronized})
    return EXIT_BLOWUP if metrics.blowup else EXIT_OK


def _apply(data: dict, param: str, value: float) -> dict:
    d = json.loads(json.dumps(data))
    if param == "seed":
        d["seed"] = int(value)
    elif param == "prob":
        d["topology"]["P"] = float(value)
    elif param == "gamma":
        for p in d["policies"].values():
            if p.get("mode") == "sleep" or p.get("form") == "threshold_sleep":
                p["gamma"] = float(value)
    return d


def _sweep_one(job):
    data, param, value = job
    sc = Scenario.load(_apply(data, param, value))
    built = sc.build()
    report = audit(built.topology, built.assignment, built.load_floor)
    traj = integrate(built.config, built.initial, built.topology, built.assignment)
    m = sync_metrics(traj, built.config)
    slept = sum(len(c.slept) for c in classify_terminal_states(traj, built.assignment)) if not m.blowup else 0
    return [value, report.verdict.value, m.synchronized, "" if m.sync_time is None else repr(m.sync_time), slept, m.blowup]


def cmd_sweep(args) -> int:
    sc = _load_scenario(args)
    values = [float(v) for v in args.values.split(",")]
    jobs = [(sc.data, args.param, v) for v in values]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    out = Outputs(args.out_dir)
    out.write("sweep.csv", _rows_csv([args.param, "verdict", "synchronized", "sync_time", "slept_cells", "blowup"], rows))
    for r in rows:
        print(f"{args.param}={r[0]:g}: {r[1]}, synchronized={r[2]}, slept={r[4]}")
    out.manifest(sc.digest, _seeds(sc), {"sweep": args.param, "points": len(rows)})
    return EXIT_OK


def cmd_report(args) -> int:
    from .figures import render_report

    sc = _load_scenario(args)
    out = Outputs(args.out_dir)
    built, report, traj, metrics, clusters = _simulate(sc, args.initial, out, args.format)
    spec, _ = _topology_outputs(out, built.topology)
    _audit_outputs(out, report, args.format)
    for p in render_report(out.dir, built.topology, built.assignment, spec.eigenvalues, traj):
        out.add(p)
    print(f"verdict: {report.verdict.value}")
    for c in report.culprits:
        print(f"cell {c.cell}: {c.reason}")
    _print_sim(report, metrics, clusters)
    out.manifest(sc.digest, _seeds(sc), {"audit": report.verdict.value, "synchronized": metrics.synchronized})
    return EXIT_BLOWUP if metrics.blowup else VERDICT_EXIT[report.verdict]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out-dir", default="out", help="directory for produced files (default: out)")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="format of report/metrics files")

    parser = argparse.ArgumentParser(prog="cascadelb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="PPP deployment, neighbour graph and spectrum")
    g.add_argument("--intensity", type=float, help="sites per km^2")
    g.add_argument("--region", type=_parse_region, default=(1000.0, 1000.0), help="WxH in metres")
    g.add_argument("--prob", type=float, default=1.0, help="probability of keeping each neighbour link")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", parents=[common], help="fit a polynomial load policy to (load, rate) samples")
    f.add_argument("--samples", required=True, help="CSV with columns load,rate")
    f.add_argument("--degree", type=int, required=True)
    f.add_argument("--gamma", type=float, help="mark the fitted policy sleep-capable with this threshold")
    f.add_argument("--output", default="policy.json")
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("audit", parents=[common], help="analytic cascade-stability verdict")
    a.set_defaults(func=cmd_audit)

    for name, func, text in (
        ("simulate", cmd_simulate, "integrate the nonlinear dynamics"),
        ("report", cmd_report, "audit + simulate + figures"),
    ):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--initial", choices=("uniform", "perturb", "from-radio"), help="initial-load recipe")
        s.set_defaults(func=func)

    w = sub.add_parser("sweep", parents=[common], help="vary one parameter across scenario variants")
    w.add_argument("--param", choices=("gamma", "prob", "seed"), required=True)
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--workers", type=int, default=1)
    w.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GeometryError, FitError, PolicyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
