"""Discrete factor graphs in energy form.

Every factor is an energy table E(x_scope); the corresponding factor value
is exp(-E / kT).  Tables are stored flat in row-major order with the last
scope variable varying fastest, so ``energies.reshape(cards)`` gives the
natural numpy view.  ``+inf`` marks a forbidden configuration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import GraphParseError, GraphValidationError, InputError
from .formatting import dumps
from .logspace import DEFAULT_CAP

Assignment = Dict[str, int]


@dataclass(frozen=True)
class VariableSpec:
    id: str
    cardinality: int


@dataclass(frozen=True)
class EnergyTable:
    """Energies over an ordered scope, flat and row-major."""

    scope: Tuple[str, ...]
    energies: np.ndarray

    def __post_init__(self):
        arr = np.array(self.energies, dtype=float).ravel()
        arr.setflags(write=False)
        object.__setattr__(self, "scope", tuple(self.scope))
        object.__setattr__(self, "energies", arr)

    def __eq__(self, other):
        if not isinstance(other, EnergyTable):
            return NotImplemented
        return self.scope == other.scope and np.array_equal(self.energies, other.energies)

    __hash__ = None

    def shifted(self, c: float) -> "EnergyTable":
        return EnergyTable(self.scope, self.energies + c)


@dataclass(frozen=True, eq=False)
class FactorGraph:
    """Variables, unary prior energies, non-prior factor energies and kT.

    Missing priors default to all-zero (uniform) tables.  The optional
    ``regions`` map (region id -> factor ids) is carried through file I/O
    for callers that want a stored decomposition.
    """

    variables: Tuple[VariableSpec, ...]
    factors: Mapping[str, EnergyTable] = field(default_factory=dict)
    priors: Mapping[str, EnergyTable] = field(default_factory=dict)
    temperature: float = 1.0
    regions: Optional[Mapping[str, Tuple[str, ...]]] = None

    def __post_init__(self):
        variables = tuple(self.variables)
        priors = dict(self.priors)
        for v in variables:
            if v.id not in priors:
                priors[v.id] = EnergyTable((v.id,), np.zeros(max(int(v.cardinality), 0)))
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "factors", dict(self.factors))
        if self.regions is not None:
            object.__setattr__(
                self, "regions", {r: tuple(fs) for r, fs in self.regions.items()}
            )

    def __eq__(self, other):
        if not isinstance(other, FactorGraph):
            return NotImplemented
        return (
            self.variables == other.variables
            and self.temperature == other.temperature
            and dict(self.factors) == dict(other.factors)
            and dict(self.priors) == dict(other.priors)
            and self.regions == other.regions
        )

    __hash__ = None

    @cached_property
    def cards(self) -> Dict[str, int]:
        return {v.id: int(v.cardinality) for v in self.variables}

    @property
    def var_ids(self) -> List[str]:
        return [v.id for v in self.variables]

    @property
    def kT(self) -> float:
        return float(self.temperature)

    def shape(self, scope: Sequence[str]) -> Tuple[int, ...]:
        return tuple(self.cards[v] for v in scope)

    def energy_array(self, table: EnergyTable) -> np.ndarray:
        return table.energies.reshape(self.shape(table.scope))

    def log_factor(self, fid: str) -> np.ndarray:
        """-E/kT for a non-prior factor, shaped by its scope."""
        return self._log_factors[fid]

    def log_prior(self, var: str) -> np.ndarray:
        return self._log_priors[var]

    @cached_property
    def _log_factors(self) -> Dict[str, np.ndarray]:
        return {fid: -self.energy_array(t) / self.kT for fid, t in self.factors.items()}

    @cached_property
    def _log_priors(self) -> Dict[str, np.ndarray]:
        return {v: -self.priors[v].energies / self.kT for v in self.var_ids}

    @cached_property
    def neighbors(self) -> Dict[str, List[str]]:
        """Non-prior factors adjacent to each variable, in factor order."""
        nb: Dict[str, List[str]] = {v: [] for v in self.var_ids}
        for fid, t in self.factors.items():
            for v in t.scope:
                nb[v].append(fid)
        return nb

    def state_space_size(self, scope: Optional[Sequence[str]] = None) -> int:
        scope = self.var_ids if scope is None else scope
        return math.prod(self.cards[v] for v in scope)


def validate_graph(graph: FactorGraph) -> List[str]:
    """Return a list of invariant violations; empty means the graph is valid."""
    problems: List[str] = []
    seen = set()
    for v in graph.variables:
        if v.id in seen:
            problems.append(f"variable {v.id!r}: duplicate id")
        seen.add(v.id)
        if not isinstance(v.cardinality, (int, np.integer)) or v.cardinality < 1:
            problems.append(f"variable {v.id!r}: cardinality must be a positive integer")
    if problems:
        return problems
    if not (graph.temperature > 0 and math.isfinite(graph.temperature)):
        problems.append("temperature must be a positive finite number")

    def check_table(kind: str, name: str, t: EnergyTable):
        if len(set(t.scope)) != len(t.scope):
            problems.append(f"{kind} {name!r}: repeated variable in scope")
        unknown = [v for v in t.scope if v not in graph.cards]
        if unknown:
            problems.append(f"{kind} {name!r}: unknown variable {unknown[0]!r}")
            return
        expected = graph.state_space_size(t.scope)
        if t.energies.size != expected:
            problems.append(
                f"{kind} {name!r}: table length mismatch "
                f"(got {t.energies.size}, expected {expected})"
            )
            return
        if np.any(np.isnan(t.energies)) or np.any(t.energies == -np.inf):
            problems.append(f"{kind} {name!r}: energies must be finite reals or +inf")
        elif not np.any(np.isfinite(t.energies)):
            problems.append(f"{kind} {name!r}: every entry is +inf")

    for fid, t in graph.factors.items():
        if len(t.scope) == 0:
            problems.append(f"factor {fid!r}: empty scope")
        check_table("factor", fid, t)
    for vid, t in graph.priors.items():
        if vid not in graph.cards:
            problems.append(f"prior {vid!r}: unknown variable {vid!r}")
            continue
        if t.scope != (vid,):
            problems.append(f"prior {vid!r}: scope must be exactly ({vid!r},)")
            continue
        check_table("prior", vid, t)
    if graph.regions is not None:
        for rid, fids in graph.regions.items():
            for f in fids:
                if f not in graph.factors:
                    problems.append(f"region {rid!r}: unknown factor {f!r}")
    if problems:
        return problems
    problems.extend(_satisfiability_problems(graph))
    return problems


def _satisfiability_problems(graph: FactorGraph) -> List[str]:
    # Exact check needs the joint space; skipped above the enumeration cap.
    if graph.state_space_size() > DEFAULT_CAP:
        return []
    logw = joint_log_weights(graph)
    if not np.any(np.isfinite(logw)):
        return ["graph: every global configuration has infinite energy"]
    return []


def check_graph(graph: FactorGraph) -> FactorGraph:
    problems = validate_graph(graph)
    if problems:
        raise GraphValidationError(problems)
    return graph


def expand(table: np.ndarray, scope: Sequence[str], order: Sequence[str]) -> np.ndarray:
    """Broadcast a table over ``scope`` to the axis layout of ``order``."""
    pos = {v: i for i, v in enumerate(order)}
    axes = sorted(range(len(scope)), key=lambda k: pos[scope[k]])
    arr = np.transpose(table, axes)
    shape = [1] * len(order)
    for k in axes:
        shape[pos[scope[k]]] = table.shape[k]
    return arr.reshape(shape)


def joint_log_weights(graph: FactorGraph, order: Optional[Sequence[str]] = None) -> np.ndarray:
    """-E(x)/kT over the full configuration grid (no capacity check)."""
    order = list(graph.var_ids if order is None else order)
    logw = np.zeros(graph.shape(order))
    for fid, t in graph.factors.items():
        logw = logw + expand(graph.log_factor(fid), t.scope, order)
    for v in order:
        logw = logw + expand(graph.log_prior(v), (v,), order)
    return logw


def total_energy(graph: FactorGraph, x: Mapping[str, int]) -> float:
    """Sum of all factor and prior energies at a full assignment."""
    for v in graph.var_ids:
        if v not in x:
            raise InputError(f"assignment is missing variable {v!r}")
        s = x[v]
        if not (0 <= int(s) < graph.cards[v]):
            raise InputError(f"state {s} out of range for variable {v!r}")
    total = 0.0
    tables = list(graph.factors.values()) + [graph.priors[v] for v in graph.var_ids]
    for t in tables:
        idx = tuple(int(x[v]) for v in t.scope)
        e = float(graph.energy_array(t)[idx])
        if e == math.inf:
            return math.inf
        total += e
    return total


# ---------------------------------------------------------------------------
# JSON file format


def _energy_to_json(e: float):
    return "inf" if e == math.inf else float(e)


def _energy_from_json(raw, where: str) -> float:
    if isinstance(raw, str):
        if raw == "inf":
            return math.inf
        raise GraphParseError(f"{where}: expected a number or \"inf\", got {raw!r}")
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise GraphParseError(f"{where}: expected a number or \"inf\", got {raw!r}")
    return float(raw)


def graph_to_dict(graph: FactorGraph) -> dict:
    doc = {
        "temperature": float(graph.temperature),
        "variables": [{"id": v.id, "cardinality": int(v.cardinality)} for v in graph.variables],
        "priors": {
            v: [_energy_to_json(e) for e in graph.priors[v].energies] for v in graph.var_ids
        },
        "factors": {
            fid: {"scope": list(t.scope), "energies": [_energy_to_json(e) for e in t.energies]}
            for fid, t in graph.factors.items()
        },
    }
    if graph.regions is not None:
        doc["regions"] = {r: list(fs) for r, fs in graph.regions.items()}
    return doc


def serialize_graph(graph: FactorGraph) -> str:
    return dumps(graph_to_dict(graph)) + "\n"


def graph_from_dict(doc) -> FactorGraph:
    if not isinstance(doc, dict):
        raise GraphParseError("document root: expected an object")
    if "variables" not in doc:
        raise GraphParseError("document root: missing 'variables'")
    raw_vars = doc["variables"]
    if not isinstance(raw_vars, list):
        raise GraphParseError("variables: expected a list")
    variables = []
    for i, rv in enumerate(raw_vars):
        if not isinstance(rv, dict) or "id" not in rv or "cardinality" not in rv:
            raise GraphParseError(f"variables[{i}]: expected {{'id', 'cardinality'}}")
        card = rv["cardinality"]
        if isinstance(card, bool) or not isinstance(card, int):
            raise GraphParseError(f"variables[{i}].cardinality: expected an integer")
        variables.append(VariableSpec(str(rv["id"]), card))

    temperature = doc.get("temperature", 1.0)
    if isinstance(temperature, bool) or not isinstance(temperature, (int, float)):
        raise GraphParseError("temperature: expected a number")

    priors = {}
    raw_priors = doc.get("priors", {}) or {}
    if not isinstance(raw_priors, dict):
        raise GraphParseError("priors: expected an object")
    for vid, entries in raw_priors.items():
        if not isinstance(entries, list):
            raise GraphParseError(f"priors.{vid}: expected a list of energies")
        es = [_energy_from_json(e, f"priors.{vid}[{k}]") for k, e in enumerate(entries)]
        priors[vid] = EnergyTable((vid,), np.array(es))

    factors = {}
    raw_factors = doc.get("factors", {}) or {}
    if not isinstance(raw_factors, dict):
        raise GraphParseError("factors: expected an object")
    for fid, rf in raw_factors.items():
        if not isinstance(rf, dict) or "scope" not in rf or "energies" not in rf:
            raise GraphParseError(f"factors.{fid}: expected {{'scope', 'energies'}}")
        if not isinstance(rf["scope"], list) or not isinstance(rf["energies"], list):
            raise GraphParseError(f"factors.{fid}: scope and energies must be lists")
        es = [
            _energy_from_json(e, f"factors.{fid}.energies[{k}]")
            for k, e in enumerate(rf["energies"])
        ]
        factors[fid] = EnergyTable(tuple(str(s) for s in rf["scope"]), np.array(es))

    regions = None
    if "regions" in doc and doc["regions"] is not None:
        if not isinstance(doc["regions"], dict):
            raise GraphParseError("regions: expected an object")
        regions = {}
        for rid, fs in doc["regions"].items():
            if not isinstance(fs, list):
                raise GraphParseError(f"regions.{rid}: expected a list of factor ids")
            regions[rid] = tuple(str(f) for f in fs)

    return FactorGraph(tuple(variables), factors, priors, float(temperature), regions)


def parse_graph(text: str) -> FactorGraph:
    """Parse and validate a graph document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return check_graph(graph_from_dict(doc))


def load_graph(path) -> FactorGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())
