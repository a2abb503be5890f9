"""Sum-product belief propagation and the Bethe free energy.

Messages are kept as normalized log-distributions.  Prior factors are never
stored as messages: their contribution ``f_j`` enters every
variable-to-factor update directly, so ``C_j`` in the update rules counts
only non-prior factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import DegeneracyError, InputError
from .graph import FactorGraph
from .logspace import (
    damp,
    entropy_term,
    expected_energy,
    floor_normalize,
    log_normalize,
    marginal_log,
)
from .results import CONVERGED, MAX_ITERS, InferenceResult

Key = Tuple[str, str]


@dataclass(frozen=True)
class BPOptions:
    max_iterations: int = 1000
    tolerance: float = 1e-8
    damping: float = 0.5

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InputError("tolerance must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise InputError("damping must lie in [0, 1)")
        if self.max_iterations < 0:
            raise InputError("max_iterations must be nonnegative")


@dataclass
class BPMessageState:
    factor_to_var: Dict[Key, np.ndarray] = field(default_factory=dict)
    var_to_factor: Dict[Key, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    residual: float = float("inf")


def along(vec: np.ndarray, axis: int, ndim: int) -> np.ndarray:
    """Reshape a 1-d array so it broadcasts along ``axis`` of an ndim table."""
    shape = [1] * ndim
    shape[axis] = vec.shape[0]
    return vec.reshape(shape)


def _normalized(logm: np.ndarray, name: str) -> np.ndarray:
    try:
        return floor_normalize(logm)
    except ZeroDivisionError:
        raise DegeneracyError(f"message {name} has all-zero support") from None


def initial_state(graph: FactorGraph) -> BPMessageState:
    """Uniform factor-to-variable messages; variable-to-factor messages
    obtained from them by the variable update, i.e. proportional to the prior."""
    state = BPMessageState()
    for fid, t in graph.factors.items():
        for v in t.scope:
            k = graph.cards[v]
            state.factor_to_var[(fid, v)] = np.full(k, -np.log(k))
    for fid, t in graph.factors.items():
        for v in t.scope:
            state.var_to_factor[(v, fid)] = _normalized(graph.log_prior(v), f"{v}->{fid}")
    return state


def factor_message(log_table: np.ndarray, incoming, axis: int) -> np.ndarray:
    """log sum_{x_a \\ x_j} f_a(x_a) prod_{k != j} M_{k->a}(x_k), unnormalized."""
    acc = log_table
    nd = log_table.ndim
    for i, m in enumerate(incoming):
        if i != axis and m is not None:
            acc = acc + along(m, i, nd)
    return marginal_log(acc, [axis])


def bp_iterate(graph: FactorGraph, state: BPMessageState, opts: BPOptions) -> BPMessageState:
    """One synchronous round: all factor-to-variable messages from the old
    variable-to-factor messages, then all variable-to-factor messages from
    the new factor-to-variable ones."""
    g = opts.damping
    residual = 0.0
    f2v: Dict[Key, np.ndarray] = {}
    for fid, t in graph.factors.items():
        incoming = [state.var_to_factor[(v, fid)] for v in t.scope]
        L = graph.log_factor(fid)
        for axis, v in enumerate(t.scope):
            proposed = _normalized(factor_message(L, incoming, axis), f"{fid}->{v}")
            old = state.factor_to_var[(fid, v)]
            f2v[(fid, v)] = damp(old, proposed, g)
            residual = max(residual, float(np.max(np.abs(f2v[(fid, v)] - old))))
    v2f: Dict[Key, np.ndarray] = {}
    for v, nbrs in graph.neighbors.items():
        if not nbrs:
            continue
        for fid in nbrs:
            # Recompute the product without fid; dividing it out would lose floor entries.
            acc = graph.log_prior(v) + sum(
                (f2v[(b, v)] for b in nbrs if b != fid), np.zeros(graph.cards[v])
            )
            proposed = _normalized(acc, f"{v}->{fid}")
            old = state.var_to_factor[(v, fid)]
            v2f[(v, fid)] = damp(old, proposed, g)
            residual = max(residual, float(np.max(np.abs(v2f[(v, fid)] - old))))
    return BPMessageState(f2v, v2f, state.iteration + 1, residual)


def beliefs(graph: FactorGraph, state: BPMessageState):
    """Variable and factor beliefs (probability arrays) implied by the messages."""
    var_b: Dict[str, np.ndarray] = {}
    for v in graph.var_ids:
        acc = graph.log_prior(v) + sum(
            (state.factor_to_var[(b, v)] for b in graph.neighbors[v]),
            np.zeros(graph.cards[v]),
        )
        var_b[v] = np.exp(log_normalize(acc))
    fac_b: Dict[str, np.ndarray] = {}
    for fid, t in graph.factors.items():
        L = graph.log_factor(fid)
        acc = L
        for i, v in enumerate(t.scope):
            acc = acc + along(state.var_to_factor[(v, fid)], i, L.ndim)
        fac_b[fid] = np.exp(log_normalize(acc))
    return var_b, fac_b


def bp_run(
    graph: FactorGraph,
    opts: Optional[BPOptions] = None,
    state: Optional[BPMessageState] = None,
) -> InferenceResult:
    opts = opts or BPOptions()
    state = state or initial_state(graph)
    status = CONVERGED
    if not state.factor_to_var:
        state.residual = 0.0
    else:
        while True:
            if state.iteration >= opts.max_iterations:
                status = MAX_ITERS
                break
            state = bp_iterate(graph, state, opts)
            if state.residual <= opts.tolerance:
                break
    var_b, fac_b = beliefs(graph, state)
    result = InferenceResult(
        method="bp",
        marginals=var_b,
        status=status,
        iterations=state.iteration,
        residual=state.residual,
        factor_beliefs=fac_b,
        free_energy={"bethe": bethe_free_energy(graph, var_b, fac_b)},
    )
    result.state = state
    return result


def _check_normalized(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or abs(float(np.sum(p)) - 1.0) > 1e-6:
        raise InputError(f"belief {name} is not normalized")


def bethe_free_energy(
    graph: FactorGraph,
    var_beliefs: Mapping[str, np.ndarray],
    factor_beliefs: Mapping[str, np.ndarray],
) -> float:
    """Bethe approximate free energy with priors treated as unary factors.

    Each prior factor's belief is the variable belief itself, and ``C_j``
    counts the prior together with the non-prior factors touching ``j``.
    """
    kT = graph.kT
    total = 0.0
    for fid in graph.factors:
        if fid not in factor_beliefs:
            raise InputError(f"missing belief for factor {fid!r}")
        b = np.asarray(factor_beliefs[fid], dtype=float).reshape(graph.shape(graph.factors[fid].scope))
        _check_normalized(b, fid)
        total += expected_energy(b, graph.energy_array(graph.factors[fid])) + kT * entropy_term(b)
    for v in graph.var_ids:
        if v not in var_beliefs:
            raise InputError(f"missing belief for variable {v!r}")
        b = np.asarray(var_beliefs[v], dtype=float)
        _check_normalized(b, v)
        # prior factor {j} with belief b_j
        total += expected_energy(b, graph.priors[v].energies) + kT * entropy_term(b)
        c = len(graph.neighbors[v]) + 1
        total += kT * (1 - c) * entropy_term(b)
    return total
