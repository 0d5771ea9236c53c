"""Scenario files: one JSON document describing a reproducible experiment."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import numpy as np

from . import policy as pol
from .radio import CellLoadSnapshot, RadioConfig, assign_users, cell_loads, drop_users, snapshot_to_initial_loads
from .simulate import SimulationConfig, perturb, uniform_initial
from .streams import substream
from .topology import (
    NetworkTopology,
    build_neighbor_graph,
    from_edges,
    generate_ppp,
    uniform_sites,
)

SCHEMA_VERSION = 1

_coeffs = {"type": "array", "items": {"type": "number"}}
_region = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 2, "maxItems": 2}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["schema", "seed", "topology", "policies", "couplings", "assignment"],
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "topology": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["ppp", "uniform", "edges", "inline"]},
                "intensity": {"type": "number", "exclusiveMinimum": 0},
                "n": {"type": "integer", "minimum": 1},
                "region": _region,
                "P": {"type": "number", "minimum": 0, "maximum": 1},
                "edges": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
                "sites": {"type": "array"},
            },
            "allOf": [
                {"if": {"properties": {"kind": {"const": "ppp"}}},
                 "then": {"required": ["intensity", "region"]}},
                {"if": {"properties": {"kind": {"const": "uniform"}}},
                 "then": {"required": ["n", "region"]}},
                {"if": {"properties": {"kind": {"const": "edges"}}},
                 "then": {"required": ["n", "edges"]}},
                {"if": {"properties": {"kind": {"const": "inline"}}},
                 "then": {"required": ["sites", "region"]}},
            ],
        },
        "policies": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "oneOf": [
                    {"required": ["coeffs"], "properties": {
                        "mode": {"enum": ["active", "sleep"]}, "gamma": {"type": "number"},
                        "coeffs": _coeffs, "sleep_coeffs": _coeffs}},
                    {"required": ["form", "alpha"], "properties": {
                        "form": {"enum": ["quadratic", "linear", "threshold_sleep"]},
                        "alpha": {"type": "number"}, "gamma": {"type": "number"}}},
                ],
            },
        },
        "couplings": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "properties": {
                    "p": _coeffs, "q": _coeffs, "c": {"type": "number"}, "sleep_drain": _coeffs,
                    "form": {"const": "linear"}, "beta": {"type": "number"},
                },
            },
        },
        "assignment": {
            "type": "object",
            "required": ["default", "coupling"],
            "properties": {
                "default": {"type": "string"},
                "coupling": {"type": "string"},
                "cells": {"type": "object", "additionalProperties": {"type": "string"}},
                "random": {"type": "array", "items": {
                    "type": "object", "required": ["policy", "fraction"],
                    "properties": {"policy": {"type": "string"},
                                   "fraction": {"type": "number", "minimum": 0, "maximum": 1}}}},
                "pairs": {"type": "array", "items": {
                    "type": "array", "prefixItems": [{"type": "integer"}, {"type": "integer"}, {"type": "string"}],
                    "minItems": 3, "maxItems": 3}},
            },
        },
        "simulation": {
            "type": "object",
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "sync_tolerance": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "perturbation": {"type": "number", "minimum": 0},
                "record_stride": {"type": "integer", "minimum": 1},
                "rate_window": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "initial": {"enum": ["uniform", "perturb", "from-radio"]},
                "initial_range": {"type": "array", "items": {"type": "number", "minimum": 0},
                                  "minItems": 2, "maxItems": 2},
            },
            "additionalProperties": False,
        },
        "radio": {
            "type": "object",
            "properties": {
                "users": {"type": "integer", "minimum": 0},
                "demand": {"type": "number", "exclusiveMinimum": 0},
                "config": {"type": "object"},
            },
        },
        "audit": {"type": "object", "properties": {"load_floor": {"type": ["number", "null"]}}},
    },
}


class ScenarioError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid scenario:\n  " + "\n  ".join(problems))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def scenario_hash(data: Mapping) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _local_from_json(d: Mapping) -> pol.LocalPolicy:
    form = d.get("form")
    if form is None:
        return pol.LocalPolicy.from_dict(d)
    if form == "quadratic":
        return pol.quadratic_active(d["alpha"])
    if form == "linear":
        return pol.linear_active(d["alpha"])
    if "gamma" not in d:
        raise pol.PolicyError("threshold_sleep requires gamma")
    return pol.threshold_sleep(d["alpha"], d["gamma"])


def _coupling_from_json(d: Mapping) -> pol.CouplingPolicy:
    if d.get("form") == "linear":
        return pol.CouplingPolicy.linear(d["beta"])
    return pol.CouplingPolicy.from_dict(d)


@dataclass
class Built:
    topology: NetworkTopology
    assignment: pol.PolicyAssignment
    config: SimulationConfig
    initial: np.ndarray
    initial_kind: str
    load_floor: float | None
    snapshot: CellLoadSnapshot | None = None


@dataclass
class Scenario:
    data: dict

    @classmethod
    def load(cls, source) -> "Scenario":
        if isinstance(source, Mapping):
            data = copy.deepcopy(dict(source))
        else:
            try:
                data = json.loads(Path(source).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ScenarioError([f"cannot read scenario: {exc}"]) from None
        validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
        problems = [
            f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
            for e in sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
        ]
        a = data.get("assignment", {}) if isinstance(data, dict) else {}
        names = set(data.get("policies", {})) if isinstance(data, dict) else set()
        cnames = set(data.get("couplings", {})) if isinstance(data, dict) else set()
        refs = [a.get("default")] + list(a.get("cells", {}).values()) + [r.get("policy") for r in a.get("random", [])]
        problems += [f"assignment: unknown policy {r!r}" for r in refs if r is not None and r not in names]
        crefs = [a.get("coupling")] + [p[2] for p in a.get("pairs", []) if len(p) == 3]
        problems += [f"assignment: unknown coupling {r!r}" for r in crefs if r is not None and r not in cnames]
        if problems:
            raise ScenarioError(problems)
        return cls(data)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def digest(self) -> str:
        return scenario_hash(self.data)

    def with_seed(self, seed: int | None) -> "Scenario":
        if seed is None:
            return self
        d = copy.deepcopy(self.data)
        d["seed"] = int(seed)
        return Scenario(d)

    def simulation_config(self) -> SimulationConfig:
        s = dict(self.data.get("simulation", {}))
        for k in ("initial", "initial_range"):
            s.pop(k, None)
        if "rate_window" in s:
            s["rate_window"] = tuple(s["rate_window"])
        return SimulationConfig(seed=self.seed, **s)

    def build_topology(self) -> NetworkTopology:
        t = self.data["topology"]
        kind = t["kind"]
        if kind == "edges":
            return from_edges(t["n"], t["edges"])
        if kind == "inline":
            return NetworkTopology.from_dict(t)
        region = tuple(t["region"])
        if kind == "ppp":
            sites = generate_ppp(t["intensity"], region, substream(self.seed, "topology"))
        else:
            sites = uniform_sites(t["n"], region, substream(self.seed, "topology"))
        topo = build_neighbor_graph(sites, t.get("P", 1.0), substream(self.seed, "edges"), region)
        return NetworkTopology(topo.sites, topo.edges, topo.region, self.seed, topo.prob)

    def build_assignment(self, n: int) -> pol.PolicyAssignment:
        try:
            library = {k: _local_from_json(v) for k, v in self.data["policies"].items()}
            couplings = {k: _coupling_from_json(v) for k, v in self.data["couplings"].items()}
        except (pol.PolicyError, KeyError, TypeError) as exc:
            raise ScenarioError([f"policies: {exc}"]) from None
        a = self.data["assignment"]
        cells = [library[a["default"]]] * n
        rng = substream(self.seed, "assignment")
        for rule in a.get("random", []):
            picks = rng.random(n) < rule["fraction"]
            for i in np.flatnonzero(picks):
                cells[i] = library[rule["policy"]]
        for key, name in a.get("cells", {}).items():
            i = int(key)
            if not 0 <= i < n:
                raise ScenarioError([f"assignment/cells: cell {i} outside 0..{n - 1}"])
            cells[i] = library[name]
        pairs = {}
        for i, j, name in a.get("pairs", []):
            pairs[(i, j)] = couplings[name]
        try:
            return pol.PolicyAssignment(tuple(cells), couplings[a["coupling"]], pairs)
        except pol.PolicyError as exc:
            raise ScenarioError([f"assignment: {exc}"]) from None

    def radio_snapshot(self, topology: NetworkTopology) -> CellLoadSnapshot:
        r = self.data.get("radio")
        if r is None:
            raise ScenarioError(["initial 'from-radio' requires a radio section"])
        config = RadioConfig.from_dict(r.get("config", {}), n=topology.n)
        users = drop_users(r.get("users", 10 * topology.n), topology.region, r.get("demand", 1e6),
                           substream(self.seed, "users"))
        users = assign_users(topology.sites, users, config)
        return cell_loads(topology.sites, users, config)

    def build(self, initial: str | None = None) -> Built:
        topo = self.build_topology()
        assignment = self.build_assignment(topo.n)
        config = self.simulation_config()
        sim = self.data.get("simulation", {})
        kind = initial or sim.get("initial", "uniform")
        snapshot = None
        if kind == "uniform":
            lo, hi = sim.get("initial_range", (0.2, 1.8))
            init = uniform_initial(topo.n, lo, hi, substream(self.seed, "initial"))
            floor = float(lo)
        elif kind == "perturb":
            init = perturb(np.ones(topo.n), config.perturbation, substream(self.seed, "perturbation"))
            floor = max(0.0, 1.0 - config.perturbation)
        else:
            snapshot = self.radio_snapshot(topo)
            init = snapshot_to_initial_loads(snapshot)
            floor = float(init.min()) if init.size else None
        audit = self.data.get("audit", {})
        if "load_floor" in audit:
            floor = audit["load_floor"]
        return Built(topo, assignment, config, init, kind, floor, snapshot)
