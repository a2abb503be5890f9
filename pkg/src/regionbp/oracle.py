"""Brute-force ground truth by enumerating every joint configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CapacityError, DegeneracyError, InputError
from .graph import FactorGraph, joint_log_weights
from .logspace import DEFAULT_CAP, entropy_term, expected_energy, logsumexp, marginal_log


@dataclass(frozen=True, eq=False)
class DenseDistribution:
    """A normalized table over ``scope``; ``probabilities`` is shaped by the scope cards."""

    scope: Tuple[str, ...]
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-12):
            raise InputError(f"distribution over {self.scope} is not normalized")
        object.__setattr__(self, "scope", tuple(self.scope))
        object.__setattr__(self, "probabilities", p)

    @property
    def flat(self) -> np.ndarray:
        return self.probabilities.ravel()

    @classmethod
    def from_log(cls, scope: Sequence[str], logp: np.ndarray) -> "DenseDistribution":
        p = np.exp(logp - logsumexp(logp))
        return cls(tuple(scope), p / p.sum())


@dataclass(frozen=True)
class FreeEnergyReport:
    internal_energy: float
    entropy_times_T: float
    free_energy: float
    log_partition: Optional[float] = None
    kl_to_boltzmann: Optional[float] = None
    temperature: float = 1.0

    @property
    def identity_gap(self) -> Optional[float]:
        """|A - (-kT log Z + kT KL)|, when log Z and KL were computed."""
        if self.log_partition is None or self.kl_to_boltzmann is None:
            return None
        rhs = self.temperature * (self.kl_to_boltzmann - self.log_partition)
        if math.isinf(self.free_energy) and math.isinf(rhs):
            return 0.0
        return abs(self.free_energy - rhs)


def _check_cap(graph: FactorGraph, cap: int) -> None:
    size = graph.state_space_size()
    if size > cap:
        raise CapacityError(
            f"joint state space has {size} configurations, above the enumeration cap {cap}"
        )


def _joint_log_boltzmann(graph: FactorGraph, cap: int) -> Tuple[np.ndarray, float]:
    _check_cap(graph, cap)
    logw = joint_log_weights(graph)
    logz = float(logsumexp(logw))
    if not np.isfinite(logz):
        raise DegeneracyError("every configuration has infinite energy (Z = 0)")
    return logw - logz, logz


def partition_function(graph: FactorGraph, cap: int = DEFAULT_CAP) -> float:
    """log Z = log sum_x exp(-E(x)/kT)."""
    return _joint_log_boltzmann(graph, cap)[1]


def boltzmann(graph: FactorGraph, cap: int = DEFAULT_CAP) -> DenseDistribution:
    logp, _ = _joint_log_boltzmann(graph, cap)
    return DenseDistribution.from_log(graph.var_ids, logp)


def exact_marginals(
    graph: FactorGraph, targets: Iterable[Sequence[str]], cap: int = DEFAULT_CAP
) -> List[DenseDistribution]:
    targets = [tuple(t) for t in targets]
    pos = {v: i for i, v in enumerate(graph.var_ids)}
    for t in targets:
        for v in t:
            if v not in pos:
                raise InputError(f"unknown variable {v!r}")
    logp, _ = _joint_log_boltzmann(graph, cap)
    return [
        DenseDistribution.from_log(t, marginal_log(logp, [pos[v] for v in t])) for t in targets
    ]


def variable_marginals(graph: FactorGraph, cap: int = DEFAULT_CAP) -> dict:
    """Exact single-variable marginals keyed by variable id."""
    ms = exact_marginals(graph, [(v,) for v in graph.var_ids], cap)
    return {v: m.probabilities for v, m in zip(graph.var_ids, ms)}


def kl_divergence(p: DenseDistribution, q: DenseDistribution) -> float:
    """D(p || q) in nats; +inf when p puts mass where q has none."""
    if p.scope != q.scope or p.probabilities.shape != q.probabilities.shape:
        raise InputError("KL divergence needs distributions over the same scope")
    pp, qq = p.flat, q.flat
    mask = pp > 0
    if np.any(qq[mask] == 0):
        return math.inf
    return max(0.0, float(np.sum(pp[mask] * (np.log(pp[mask]) - np.log(qq[mask])))))


def helmholtz_free_energy(
    graph: FactorGraph,
    p: DenseDistribution,
    with_partition: bool = True,
    cap: int = DEFAULT_CAP,
) -> FreeEnergyReport:
    """A(p) = U(p) - T H(p), optionally with log Z and D(p || p_0).

    When ``with_partition`` is set the report also carries the gap of the
    identity A(p) = -kT log Z + kT D(p || p_0) (see ``identity_gap``).
    """
    if p.scope != tuple(graph.var_ids):
        raise InputError("distribution scope must list every graph variable in order")
    if p.probabilities.shape != graph.shape(graph.var_ids):
        raise InputError("distribution shape does not match variable cardinalities")
    kT = graph.kT
    energies = -joint_log_weights(graph) * kT
    U = expected_energy(p.probabilities, energies)
    TH = -kT * entropy_term(p.probabilities)
    A = U - TH
    if not with_partition:
        return FreeEnergyReport(U, TH, A, temperature=kT)
    logp0, logz = _joint_log_boltzmann(graph, cap)
    p0 = DenseDistribution.from_log(graph.var_ids, logp0)
    kl = kl_divergence(p, p0)
    return FreeEnergyReport(U, TH, A, logz, kl, kT)
