"""Region decompositions and direct regional belief propagation.

A decomposition partitions the non-prior factors into regions.  Variables
shared by two or more regions are boundary variables; the rest are interior
and have their priors folded into the region's augmented energy.  Messages
only flow between regions and boundary variables.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .bethe import BPOptions, _normalized, along, factor_message
from .errors import CapacityError, InputError, PartitionError
from .graph import EnergyTable, FactorGraph, expand
from .logspace import (
    DEFAULT_CAP,
    damp,
    entropy_term,
    expected_energy,
    log_normalize,
    marginal_log,
)
from .results import CONVERGED, MAX_ITERS, InferenceResult

DEFAULT_REGION_BUDGET = 2**16


@dataclass(frozen=True)
class RegionDecomposition:
    regions: Dict[str, Tuple[str, ...]]
    support: Dict[str, Tuple[str, ...]]
    boundary: Dict[str, Tuple[str, ...]]
    interior: Dict[str, Tuple[str, ...]]
    counts: Dict[str, int]
    regions_of: Dict[str, Tuple[str, ...]]

    @property
    def region_ids(self) -> List[str]:
        return list(self.regions)

    @property
    def boundary_variables(self) -> List[str]:
        return [v for v, c in self.counts.items() if c >= 2]

    def owner(self, var: str) -> Optional[str]:
        """The unique region holding an interior variable."""
        rs = self.regions_of.get(var, ())
        return rs[0] if len(rs) == 1 else None

    def pairs(self) -> List[Tuple[str, str]]:
        """(boundary variable, region) pairs, grouped by region."""
        return [(v, r) for r in self.regions for v in self.boundary[r]]

    def to_partition(self) -> Dict[str, List[str]]:
        return {r: list(fs) for r, fs in self.regions.items()}


def build_decomposition(
    graph: FactorGraph, partition: Mapping[str, Sequence[str]]
) -> RegionDecomposition:
    seen: Dict[str, str] = {}
    for rid, fids in partition.items():
        if len(fids) == 0:
            raise PartitionError(f"region {rid!r} is empty")
        for f in fids:
            if f not in graph.factors:
                raise PartitionError(f"region {rid!r} names unknown factor {f!r}")
            if f in seen:
                raise PartitionError(f"factor {f!r} is in both {seen[f]!r} and {rid!r}")
            seen[f] = rid
    missing = [f for f in graph.factors if f not in seen]
    if missing:
        raise PartitionError(f"factor {missing[0]!r} is not assigned to any region")

    order = {v: i for i, v in enumerate(graph.var_ids)}
    regions = {r: tuple(fs) for r, fs in partition.items()}
    support = {}
    for r, fs in regions.items():
        vs = {v for f in fs for v in graph.factors[f].scope}
        support[r] = tuple(sorted(vs, key=order.__getitem__))
    regions_of: Dict[str, List[str]] = {v: [] for v in graph.var_ids}
    for r, vs in support.items():
        for v in vs:
            regions_of[v].append(r)
    counts = {v: len(rs) for v, rs in regions_of.items()}
    boundary = {r: tuple(v for v in vs if counts[v] >= 2) for r, vs in support.items()}
    interior = {r: tuple(v for v in vs if counts[v] == 1) for r, vs in support.items()}
    return RegionDecomposition(
        regions, support, boundary, interior, counts, {v: tuple(rs) for v, rs in regions_of.items()}
    )


def auto_partition(
    graph: FactorGraph, budget: int = DEFAULT_REGION_BUDGET
) -> Dict[str, List[str]]:
    """Greedy BFS over the factor incidence graph.

    Regions grow from the first unassigned factor, absorbing neighbouring
    factors while the region's joint state space stays within ``budget``.
    """
    fids = list(graph.factors)
    adj: Dict[str, List[str]] = {f: [] for f in fids}
    for v, nbrs in graph.neighbors.items():
        for f in nbrs:
            for g in nbrs:
                if g != f and g not in adj[f]:
                    adj[f].append(g)
    assigned: Dict[str, str] = {}
    partition: Dict[str, List[str]] = {}
    for seed in fids:
        if seed in assigned:
            continue
        rid = f"R{len(partition) + 1}"
        members = [seed]
        assigned[seed] = rid
        support = set(graph.factors[seed].scope)
        queue = deque(adj[seed])
        while queue:
            f = queue.popleft()
            if f in assigned:
                continue
            grown = support | set(graph.factors[f].scope)
            if graph.state_space_size(sorted(grown)) > budget:
                continue
            members.append(f)
            assigned[f] = rid
            support = grown
            queue.extend(adj[f])
        partition[rid] = members
    return partition


def load_partition(path) -> Dict[str, List[str]]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or not all(isinstance(v, list) for v in doc.values()):
        raise InputError("partition file must map region ids to lists of factor ids")
    return {str(k): [str(f) for f in v] for k, v in doc.items()}


def _check_table_cap(graph, decomp, rid, cap):
    size = graph.state_space_size(decomp.support[rid])
    if size > cap:
        raise CapacityError(f"region {rid!r} has {size} states, above the table cap {cap}")


def region_energy(
    graph: FactorGraph,
    decomp: RegionDecomposition,
    rid: str,
    with_interior_priors: bool = True,
    cap: int = DEFAULT_CAP,
) -> np.ndarray:
    """Energy array over support(R): sum of member factors, plus interior priors if asked."""
    _check_table_cap(graph, decomp, rid, cap)
    sup = decomp.support[rid]
    E = np.zeros(graph.shape(sup))
    for f in decomp.regions[rid]:
        t = graph.factors[f]
        E = E + expand(graph.energy_array(t), t.scope, sup)
    if with_interior_priors:
        for v in decomp.interior[rid]:
            E = E + expand(graph.priors[v].energies, (v,), sup)
    return E


def augmented_energy(
    graph: FactorGraph, decomp: RegionDecomposition, rid: str, cap: int = DEFAULT_CAP
) -> EnergyTable:
    """Member factor energies plus the priors of interior variables (boundary priors excluded)."""
    if rid not in decomp.regions:
        raise InputError(f"unknown region {rid!r}")
    return EnergyTable(decomp.support[rid], region_energy(graph, decomp, rid, True, cap))


def augmented_energy_evaluator(
    graph: FactorGraph, decomp: RegionDecomposition, rid: str
) -> Callable[[Mapping[str, int]], float]:
    """Pointwise evaluator of the augmented energy, for regions too large to tabulate."""
    if rid not in decomp.regions:
        raise InputError(f"unknown region {rid!r}")
    tables = [graph.factors[f] for f in decomp.regions[rid]]
    tables += [graph.priors[v] for v in decomp.interior[rid]]
    arrays = [graph.energy_array(t) for t in tables]

    def energy(x: Mapping[str, int]) -> float:
        return float(sum(a[tuple(int(x[v]) for v in t.scope)] for a, t in zip(arrays, tables)))

    return energy


def augmented_log_tables(
    graph: FactorGraph, decomp: RegionDecomposition, cap: int = DEFAULT_CAP
) -> Dict[str, np.ndarray]:
    return {r: -region_energy(graph, decomp, r, True, cap) / graph.kT for r in decomp.regions}


# ---------------------------------------------------------------------------
# Regional BP


@dataclass
class RegionalMessageState:
    region_to_var: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)
    var_to_region: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    residual: float = float("inf")


@dataclass
class RegionalBeliefs:
    region: Dict[str, np.ndarray]
    variable: Dict[str, np.ndarray]


def regional_initial_state(graph: FactorGraph, decomp: RegionDecomposition) -> RegionalMessageState:
    state = RegionalMessageState()
    for v, r in decomp.pairs():
        k = graph.cards[v]
        state.region_to_var[(r, v)] = np.full(k, -np.log(k))
        state.var_to_region[(v, r)] = _normalized(graph.log_prior(v), f"{v}->{r}")
    return state


def regional_bp_iterate(
    graph: FactorGraph,
    decomp: RegionDecomposition,
    state: RegionalMessageState,
    opts: BPOptions,
    tables: Optional[Dict[str, np.ndarray]] = None,
) -> RegionalMessageState:
    tables = tables if tables is not None else augmented_log_tables(graph, decomp)
    g = opts.damping
    residual = 0.0
    r2v = {}
    for r in decomp.regions:
        sup = decomp.support[r]
        bset = set(decomp.boundary[r])
        incoming = [state.var_to_region[(v, r)] if v in bset else None for v in sup]
        for axis, v in enumerate(sup):
            if v not in bset:
                continue
            proposed = _normalized(factor_message(tables[r], incoming, axis), f"{r}->{v}")
            old = state.region_to_var[(r, v)]
            r2v[(r, v)] = damp(old, proposed, g)
            residual = max(residual, float(np.max(np.abs(r2v[(r, v)] - old))))
    v2r = {}
    for v in decomp.boundary_variables:
        rs = decomp.regions_of[v]
        for r in rs:
            acc = graph.log_prior(v) + sum(
                (r2v[(s, v)] for s in rs if s != r), np.zeros(graph.cards[v])
            )
            proposed = _normalized(acc, f"{v}->{r}")
            old = state.var_to_region[(v, r)]
            v2r[(v, r)] = damp(old, proposed, g)
            residual = max(residual, float(np.max(np.abs(v2r[(v, r)] - old))))
    return RegionalMessageState(r2v, v2r, state.iteration + 1, residual)


def regional_beliefs(
    graph: FactorGraph,
    decomp: RegionDecomposition,
    state: RegionalMessageState,
    tables: Optional[Dict[str, np.ndarray]] = None,
) -> RegionalBeliefs:
    tables = tables if tables is not None else augmented_log_tables(graph, decomp)
    region_b = {}
    var_b: Dict[str, np.ndarray] = {}
    for r in decomp.regions:
        sup = decomp.support[r]
        acc = tables[r]
        for axis, v in enumerate(sup):
            if decomp.counts[v] >= 2:
                acc = acc + along(state.var_to_region[(v, r)], axis, acc.ndim)
        logb = log_normalize(acc)
        region_b[r] = np.exp(logb)
        for axis, v in enumerate(sup):
            if decomp.counts[v] == 1:
                var_b[v] = np.exp(marginal_log(logb, [axis]))
    for v in graph.var_ids:
        if decomp.counts[v] >= 2:
            acc = graph.log_prior(v) + sum(state.region_to_var[(r, v)] for r in decomp.regions_of[v])
            var_b[v] = np.exp(log_normalize(acc))
        elif decomp.counts[v] == 0:
            var_b[v] = np.exp(log_normalize(graph.log_prior(v)))
    return RegionalBeliefs(region_b, {v: var_b[v] for v in graph.var_ids})


def regional_bp_run(
    graph: FactorGraph,
    decomp: RegionDecomposition,
    opts: Optional[BPOptions] = None,
    cap: int = DEFAULT_CAP,
) -> InferenceResult:
    opts = opts or BPOptions()
    tables = augmented_log_tables(graph, decomp, cap)
    state = regional_initial_state(graph, decomp)
    status = CONVERGED
    if not state.region_to_var:
        state.residual = 0.0
    else:
        while True:
            if state.iteration >= opts.max_iterations:
                status = MAX_ITERS
                break
            state = regional_bp_iterate(graph, decomp, state, opts, tables)
            if state.residual <= opts.tolerance:
                break
    beliefs = regional_beliefs(graph, decomp, state, tables)
    result = InferenceResult(
        method="regional-bp",
        marginals=beliefs.variable,
        status=status,
        iterations=state.iteration,
        residual=state.residual,
        region_beliefs=beliefs.region,
        free_energy={"regional": regional_free_energy(graph, decomp, beliefs)},
    )
    result.state = state
    return result


def regional_free_energy(
    graph: FactorGraph, decomp: RegionDecomposition, beliefs: RegionalBeliefs
) -> float:
    """Regional approximate free energy (unconstrained part).

    Region terms use E_R without any priors; every variable, boundary or
    interior, contributes its prior energy and a -(C_j - 1) entropy correction.
    """
    kT = graph.kT
    total = 0.0
    for r in decomp.regions:
        b = np.asarray(beliefs.region[r], dtype=float)
        if np.any(b < 0) or abs(b.sum() - 1.0) > 1e-6:
            raise InputError(f"region belief {r!r} is not normalized")
        E = region_energy(graph, decomp, r, with_interior_priors=False)
        total += expected_energy(b.reshape(E.shape), E) + kT * entropy_term(b)
    for v in graph.var_ids:
        b = np.asarray(beliefs.variable[v], dtype=float)
        if np.any(b < 0) or abs(b.sum() - 1.0) > 1e-6:
            raise InputError(f"variable belief {v!r} is not normalized")
        c = decomp.counts[v]
        total += expected_energy(b, graph.priors[v].energies) - kT * (c - 1) * entropy_term(b)
    return total
