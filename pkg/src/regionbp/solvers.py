"""Region black boxes: exact and Gibbs-sampling solvers of the modified
regional free energy's critical-point relations.

A critical point is parameterized by one log-field per boundary variable:

    b_R(x_R) ∝ exp(-Ẽ_R(x_R)/kT) · ∏_j m_j(x_j)
    m_j      ∝ μ_j^(C_j - 1) · exp(-V_j/kT),   μ_j = marginal of b_R at j

The self-consistency residual is the sup-norm gap between the two sides of
the second relation, both normalized in log space.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numba
import numpy as np
from scipy.optimize import least_squares

from .bethe import along
from .errors import CapacityError, DegeneracyError, ErgodicityError, InputError
from .graph import FactorGraph
from .logspace import (
    DEFAULT_CAP,
    LOG_FLOOR,
    damp,
    entropy_term,
    expected_energy,
    log_normalize,
    marginal_log,
)
from .regions import RegionDecomposition, augmented_energy_evaluator, region_energy
from .results import CONVERGED, MAX_ITERS

EnergyFn = Callable[[Mapping[str, int]], float]


@dataclass(frozen=True)
class BoundarySpec:
    var: str
    count: int
    potential: np.ndarray


@dataclass
class RegionProblem:
    """One region's solve: augmented energy, boundary potentials, temperature.

    Exactly one of ``energy`` (array shaped by ``cards``) or ``evaluator``
    must be given.  ``init_fields`` optionally warm-starts the log-fields.
    """

    region_id: str
    support: Tuple[str, ...]
    cards: Tuple[int, ...]
    boundary: Tuple[BoundarySpec, ...] = ()
    kT: float = 1.0
    energy: Optional[np.ndarray] = None
    evaluator: Optional[EnergyFn] = None
    init_fields: Optional[Dict[str, np.ndarray]] = None

    def __post_init__(self):
        self.support = tuple(self.support)
        self.cards = tuple(int(k) for k in self.cards)
        if len(self.support) != len(self.cards):
            raise InputError("support and cards differ in length")
        if (self.energy is None) == (self.evaluator is None):
            raise InputError("give exactly one of an energy table or an evaluator")
        if self.energy is not None:
            self.energy = np.asarray(self.energy, dtype=float).reshape(self.cards)
        if not self.kT > 0:
            raise InputError("temperature must be positive")
        pos = self.axis
        bs = []
        for b in self.boundary:
            if b.var not in pos:
                raise InputError(f"boundary variable {b.var!r} is not in the region support")
            if b.count < 2:
                raise InputError(f"boundary variable {b.var!r} needs C_j >= 2, got {b.count}")
            v = np.asarray(b.potential, dtype=float)
            if v.shape != (self.cards[pos[b.var]],) or not np.all(np.isfinite(v)):
                raise InputError(f"potential for {b.var!r} must be finite with one entry per state")
            bs.append(BoundarySpec(b.var, int(b.count), v))
        self.boundary = tuple(bs)

    @property
    def axis(self) -> Dict[str, int]:
        return {v: i for i, v in enumerate(self.support)}

    @property
    def boundary_vars(self) -> List[str]:
        return [b.var for b in self.boundary]

    def uniform_fields(self) -> Dict[str, np.ndarray]:
        pos = self.axis
        return {b.var: np.full(self.cards[pos[b.var]], -math.log(self.cards[pos[b.var]])) for b in self.boundary}

    def start_fields(self) -> Dict[str, np.ndarray]:
        fields = self.uniform_fields()
        for v, f in (self.init_fields or {}).items():
            if v in fields:
                fields[v] = log_normalize(np.maximum(np.asarray(f, dtype=float), LOG_FLOOR))
        return fields


@dataclass
class RegionSolution:
    region_id: str
    boundary_marginals: Dict[str, np.ndarray]
    internal_marginals: Dict[str, np.ndarray]
    residual: float
    status: str
    iterations: int
    log_fields: Dict[str, np.ndarray]
    log_belief: Optional[np.ndarray] = None
    samples: int = 0
    standard_errors: Dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def region_problem(
    graph: FactorGraph,
    decomp: RegionDecomposition,
    rid: str,
    potentials: Mapping[str, np.ndarray],
    init_fields: Optional[Mapping[str, np.ndarray]] = None,
    cap: int = DEFAULT_CAP,
) -> RegionProblem:
    """Assemble the RegionProblem for region ``rid``; large regions get an evaluator."""
    sup = decomp.support[rid]
    boundary = tuple(
        BoundarySpec(v, decomp.counts[v], np.asarray(potentials[v], dtype=float))
        for v in decomp.boundary[rid]
    )
    kw = dict(region_id=rid, support=sup, cards=graph.shape(sup), boundary=boundary, kT=graph.kT,
              init_fields=dict(init_fields) if init_fields else None)
    if graph.state_space_size(sup) <= cap:
        return RegionProblem(energy=region_energy(graph, decomp, rid, True, cap), **kw)
    return RegionProblem(evaluator=augmented_energy_evaluator(graph, decomp, rid), **kw)


# ---------------------------------------------------------------------------
# shared relations


def _floored_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(p), LOG_FLOOR)


def field_targets(problem: RegionProblem, log_mu: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """normalize(μ_j^(C_j-1) e^(-V_j/kT)) in log space, with floored log μ_j."""
    out = {}
    for b in problem.boundary:
        t = (b.count - 1) * np.maximum(log_mu[b.var], LOG_FLOOR) - b.potential / problem.kT
        out[b.var] = log_normalize(t)
    return out


def self_consistency_residual(
    problem: RegionProblem, log_fields: Mapping[str, np.ndarray], log_mu: Mapping[str, np.ndarray]
) -> float:
    targets = field_targets(problem, log_mu)
    res = 0.0
    for v, t in targets.items():
        res = max(res, float(np.max(np.abs(log_normalize(log_fields[v]) - t))))
    return res


def _log_base(problem: RegionProblem) -> np.ndarray:
    if problem.energy is None:
        raise CapacityError(
            f"region {problem.region_id!r} has no energy table; the exact solver needs one"
        )
    return -problem.energy / problem.kT


def _log_belief(problem, base, log_fields):
    acc = base
    pos = problem.axis
    for v, f in log_fields.items():
        acc = acc + along(f, pos[v], base.ndim)
    try:
        return log_normalize(acc)
    except ZeroDivisionError:
        raise DegeneracyError(f"region {problem.region_id!r} belief has all-zero support") from None


def _boundary_log_marginals(problem, logb):
    pos = problem.axis
    return {b.var: marginal_log(logb, [pos[b.var]]) for b in problem.boundary}


def _internal(problem, logb, internal):
    if internal is None:
        return {}
    names = problem.support if internal == "all" else internal
    pos = problem.axis
    out = {}
    for v in names:
        if v not in pos:
            raise InputError(f"variable {v!r} is not in region {problem.region_id!r}")
        out[v] = np.exp(marginal_log(logb, [pos[v]]))
    return out


def modified_free_energy(problem: RegionProblem, b_R) -> float:
    """Σ b_R Ẽ_R + kT Σ b_R log b_R + Σ_j [Σ b_j V_j − kT (C_j−1) Σ b_j log b_j],
    with b_j the marginals of the supplied b_R."""
    E = _log_base(problem) * -problem.kT
    p = np.asarray(getattr(b_R, "probabilities", b_R), dtype=float)
    if p.size != E.size:
        raise InputError("region belief does not cover the region support")
    p = p.reshape(E.shape)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InputError("region belief is not normalized")
    kT = problem.kT
    total = expected_energy(p, E) + kT * entropy_term(p)
    pos = problem.axis
    for b in problem.boundary:
        axes = tuple(i for i in range(p.ndim) if i != pos[b.var])
        bj = p.sum(axis=axes)
        total += float(np.dot(bj, b.potential)) - kT * (b.count - 1) * entropy_term(bj)
    return total


# ---------------------------------------------------------------------------
# exact solver


def solve_region_exact(
    problem: RegionProblem,
    max_iters: int = 500,
    tol: float = 1e-10,
    damping: float = 0.5,
    method: str = "newton",
    internal: Union[None, str, Sequence[str]] = None,
    trace: bool = False,
) -> RegionSolution:
    """Find fields satisfying the critical-point relations by exact marginalization.

    ``method="newton"`` solves the gauge-fixed relations with Levenberg-Marquardt,
    falling back to the damped map and to seeded restarts when it stalls;
    ``method="fixed-point"`` only iterates the damped map m_j <- target_j.  With
    ``max_iters=0`` the solution is evaluated at the starting fields.
    """
    if method not in ("newton", "fixed-point"):
        raise InputError(f"unknown exact solver method {method!r}")
    if max_iters < 0 or not tol > 0:
        raise InputError("max_iters must be nonnegative and tol positive")
    base = _log_base(problem)
    fields = problem.start_fields()
    history: List[float] = []

    def evaluate(f):
        logb = _log_belief(problem, base, f)
        return logb, _boundary_log_marginals(problem, logb)

    logb, log_mu = evaluate(fields)
    res = self_consistency_residual(problem, fields, log_mu)
    if trace:
        history.append(modified_free_energy(problem, np.exp(logb)))
    iters = 0
    if problem.boundary and res > tol and max_iters > 0:
        if method == "fixed-point":
            while res > tol and iters < max_iters:
                targets = field_targets(problem, log_mu)
                fields = {v: log_normalize(damp(fields[v], targets[v], damping)) for v in fields}
                iters += 1
                logb, log_mu = evaluate(fields)
                res = self_consistency_residual(problem, fields, log_mu)
                if trace:
                    history.append(modified_free_energy(problem, np.exp(logb)))
        else:
            fields, iters = _hybrid(problem, evaluate, fields, max_iters, tol, damping)
            logb, log_mu = evaluate(fields)
            res = self_consistency_residual(problem, fields, log_mu)
            if trace:
                history.append(modified_free_energy(problem, np.exp(logb)))
    status = CONVERGED if res <= tol else MAX_ITERS
    diagnostics = {"method": method}
    if trace:
        diagnostics["free_energy_trace"] = history
    return RegionSolution(
        region_id=problem.region_id,
        boundary_marginals={v: np.exp(m) for v, m in log_mu.items()},
        internal_marginals=_internal(problem, logb, internal),
        residual=res,
        status=status,
        iterations=iters,
        log_fields=fields,
        log_belief=logb,
        diagnostics=diagnostics,
    )


NEWTON_RESTARTS = 32


def _hybrid(problem, evaluate, start, max_iters, tol, damping):
    """Levenberg-Marquardt from the start; if it stalls in a local minimum of the
    squared residual, the damped map from the start, then seeded LM restarts."""

    def residual(f):
        return self_consistency_residual(problem, f, evaluate(f)[1])

    fields, iters = _newton(problem, evaluate, start, max_iters)
    best, best_res = fields, residual(fields)
    if best_res <= tol:
        return best, iters
    f = start
    for _ in range(max_iters):
        log_mu = evaluate(f)[1]
        targets = field_targets(problem, log_mu)
        f = {v: log_normalize(damp(f[v], targets[v], damping)) for v in f}
        iters += 1
        r = residual(f)
        if r <= tol:
            return f, iters
    if residual(f) < best_res:
        best, best_res = f, residual(f)
    for k in range(NEWTON_RESTARTS):
        rng = rng_stream(0, problem.region_id + "#restart", 0, k)
        init = {v: log_normalize(2.0 * rng.standard_normal(len(f0))) for v, f0 in start.items()}
        fields, n = _newton(problem, evaluate, init, max_iters)
        iters += n
        r = residual(fields)
        if r < best_res:
            best, best_res = fields, r
        if r <= tol:
            break
    return best, iters


def _newton(problem, evaluate, fields, max_iters):
    # gauge: first entry of each log-field pinned to 0
    vars_ = problem.boundary_vars
    sizes = [len(fields[v]) for v in vars_]
    x0 = np.concatenate([fields[v][1:] - fields[v][0] for v in vars_])
    if x0.size == 0:
        return fields, 0

    def unpack(x):
        out, k = {}, 0
        for v, n in zip(vars_, sizes):
            out[v] = np.concatenate([[0.0], x[k:k + n - 1]])
            k += n - 1
        return out

    def fun(x):
        f = unpack(x)
        _, log_mu = evaluate(f)
        parts = []
        for b in problem.boundary:
            t = (b.count - 1) * np.maximum(log_mu[b.var], LOG_FLOOR) - b.potential / problem.kT
            d = t - f[b.var]
            parts.append(d[1:] - d[0])
        return np.concatenate(parts)

    sol = least_squares(fun, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=max_iters * (x0.size + 1))
    return {v: log_normalize(f) for v, f in unpack(sol.x).items()}, int(sol.nfev)


# ---------------------------------------------------------------------------
# Gibbs sampling


@dataclass(frozen=True)
class SamplerOptions:
    samples: int = 10000
    burn_in: Optional[int] = None
    thinning: int = 1
    seed: int = 0
    batches: int = 20

    def __post_init__(self):
        if self.samples <= 0:
            raise InputError("number of kept sweeps must be positive")
        if self.thinning <= 0:
            raise InputError("thinning must be positive")
        if self.burn_in is not None and self.burn_in < 0:
            raise InputError("burn-in must be nonnegative")

    @property
    def burn(self) -> int:
        return self.samples // 10 if self.burn_in is None else self.burn_in


@dataclass
class GibbsResult:
    marginals: List[np.ndarray]
    standard_errors: List[np.ndarray]
    kept: int
    final_state: np.ndarray


def rng_stream(seed: int, region_id: str = "", outer: int = 0, inner: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (seed, region, outer iteration, inner iteration)."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(region_id.encode("utf-8")), int(outer), int(inner)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@numba.njit(cache=True, nogil=True)
def _gibbs_chunk(table, strides, cards, state, uniforms, kT, start, burn, thin, counts, batch_counts, batch_len):
    n = state.shape[0]
    kmax = counts.shape[1]
    w = np.empty(kmax)
    sweeps = uniforms.shape[0] // n
    offset = 0
    for i in range(n):
        offset += state[i] * strides[i]
    for s in range(sweeps):
        for i in range(n):
            base = offset - state[i] * strides[i]
            lo = np.inf
            for k in range(cards[i]):
                e = table[base + k * strides[i]]
                w[k] = e
                if e < lo:
                    lo = e
            tot = 0.0
            for k in range(cards[i]):
                w[k] = np.exp(-(w[k] - lo) / kT)
                tot += w[k]
            u = uniforms[s * n + i] * tot
            acc = 0.0
            pick = cards[i] - 1
            for k in range(cards[i]):
                acc += w[k]
                if u < acc:
                    pick = k
                    break
            state[i] = pick
            offset = base + pick * strides[i]
        t = start + s
        if t >= burn and (t - burn) % thin == 0:
            kept = (t - burn) // thin
            b = kept // batch_len
            for i in range(n):
                counts[i, state[i]] += 1
                if b < batch_counts.shape[0]:
                    batch_counts[b, i, state[i]] += 1


def _python_sweeps(energy, names, cards, state, uniforms, kT, start, burn, thin, counts, batch_counts, batch_len):
    n = len(cards)
    x = {v: int(s) for v, s in zip(names, state)}
    for s in range(uniforms.shape[0] // n):
        for i, v in enumerate(names):
            es = []
            for k in range(cards[i]):
                x[v] = k
                es.append(float(energy(x)))
            es = np.asarray(es)
            w = np.exp(-(es - es.min()) / kT)
            u = uniforms[s * n + i] * w.sum()
            pick = int(min(np.searchsorted(np.cumsum(w), u, side="right"), cards[i] - 1))
            x[v] = pick
            state[i] = pick
        t = start + s
        if t >= burn and (t - burn) % thin == 0:
            kept = (t - burn) // thin
            b = kept // batch_len
            for i in range(n):
                counts[i, state[i]] += 1
                if b < batch_counts.shape[0]:
                    batch_counts[b, i, state[i]] += 1


def _initial_state(energy, names, cards):
    if isinstance(energy, np.ndarray):
        idx = int(np.argmin(energy))
        if not np.isfinite(energy.ravel()[idx]):
            raise ErgodicityError("no finite-energy configuration; soften hard constraints")
        return np.array(np.unravel_index(idx, energy.shape), dtype=np.int64)
    state = np.zeros(len(cards), dtype=np.int64)
    x = dict(zip(names, (0,) * len(cards)))
    # greedy coordinate descent from all-zeros
    for _ in range(2 * len(cards) + 1):
        changed = False
        for i, v in enumerate(names):
            es = []
            for k in range(cards[i]):
                x[v] = k
                es.append(float(energy(x)))
            k = int(np.argmin(es))
            x[v] = k
            if k != state[i]:
                state[i] = k
                changed = True
        if not changed:
            break
    if not np.isfinite(energy(x)):
        raise ErgodicityError("greedy search found no finite-energy configuration; soften hard constraints")
    return state


CHUNK_SWEEPS = 4096


def gibbs_sample(
    energy: Union[np.ndarray, EnergyFn],
    cards: Sequence[int],
    opts: SamplerOptions,
    kT: float = 1.0,
    names: Optional[Sequence[str]] = None,
    init: Optional[Mapping[str, int]] = None,
    rng: Optional[np.random.Generator] = None,
) -> GibbsResult:
    """Systematic-scan single-site Gibbs sampler at temperature kT.

    ``energy`` is either an energy array shaped by ``cards`` or a callable
    taking an assignment dict keyed by ``names``.  Returns empirical
    marginals of every variable with batch-means standard errors.
    """
    cards = [int(k) for k in cards]
    names = list(names) if names is not None else [f"v{i}" for i in range(len(cards))]
    if isinstance(energy, np.ndarray):
        energy = np.asarray(energy, dtype=float).reshape(cards)
    rng = rng if rng is not None else rng_stream(opts.seed)
    if init is not None:
        state = np.array([int(init[v]) for v in names], dtype=np.int64)
        e0 = energy[tuple(state)] if isinstance(energy, np.ndarray) else energy(dict(zip(names, state.tolist())))
        if not np.isfinite(e0):
            raise ErgodicityError("initial assignment has infinite energy; soften hard constraints")
    else:
        state = _initial_state(energy, names, cards)
    n = len(cards)
    kmax = max(cards) if cards else 1
    counts = np.zeros((n, kmax), dtype=np.int64)
    nb = min(opts.batches, opts.samples)
    batch_len = opts.samples // nb
    batch_counts = np.zeros((nb, n, kmax), dtype=np.int64)
    burn = opts.burn
    total = burn + (opts.samples - 1) * opts.thinning + 1
    if n:
        if isinstance(energy, np.ndarray):
            flat = np.ascontiguousarray(energy.ravel())
            strides = np.array([int(np.prod(cards[i + 1:])) for i in range(n)], dtype=np.int64)
            cards_arr = np.array(cards, dtype=np.int64)
        done = 0
        while done < total:
            m = min(CHUNK_SWEEPS, total - done)
            u = rng.random(m * n)
            if isinstance(energy, np.ndarray):
                _gibbs_chunk(flat, strides, cards_arr, state, u, float(kT), done, burn,
                             opts.thinning, counts, batch_counts, batch_len)
            else:
                _python_sweeps(energy, names, cards, state, u, kT, done, burn, opts.thinning,
                               counts, batch_counts, batch_len)
            done += m
    kept = opts.samples
    marg = [counts[i, : cards[i]] / kept for i in range(n)]
    ses = []
    for i in range(n):
        means = batch_counts[:, i, : cards[i]] / batch_len
        ses.append(means.std(axis=0, ddof=1) / math.sqrt(nb) if nb > 1 else np.full(cards[i], np.nan))
    return GibbsResult(marg, ses, kept, state)


@dataclass(frozen=True)
class GibbsSolverOptions:
    max_iters: int = 10
    tol: float = 1e-3
    damping: float = 0.5
    sampler: SamplerOptions = SamplerOptions()


def solve_region_gibbs(
    problem: RegionProblem,
    opts: Optional[GibbsSolverOptions] = None,
    outer: int = 0,
    internal: Union[None, str, Sequence[str]] = None,
) -> RegionSolution:
    """The damped field map with empirical marginals of b_R from Gibbs sampling.

    Inner step ``k`` draws from the stream keyed by (seed, region, outer, k).
    """
    opts = opts or GibbsSolverOptions()
    fields = problem.start_fields()
    pos = problem.axis
    res = 0.0
    iters = 0
    used = 0
    while True:
        if problem.energy is not None:
            E = problem.energy.copy()
            for v, f in fields.items():
                E = E - problem.kT * along(f, pos[v], E.ndim)
            target = E
        else:
            fs = dict(fields)

            def target(x, _f=fs):
                return problem.evaluator(x) - problem.kT * sum(float(f[x[v]]) for v, f in _f.items())

        rng = rng_stream(opts.sampler.seed, problem.region_id, outer, iters)
        g = gibbs_sample(target, problem.cards, opts.sampler, problem.kT, problem.support, rng=rng)
        used += g.kept
        log_mu = {b.var: _floored_log(g.marginals[pos[b.var]]) for b in problem.boundary}
        res = self_consistency_residual(problem, fields, log_mu) if problem.boundary else 0.0
        if res <= opts.tol or iters >= opts.max_iters:
            break
        targets = field_targets(problem, log_mu)
        fields = {v: log_normalize(damp(fields[v], targets[v], opts.damping)) for v in fields}
        iters += 1
    names = problem.support if internal == "all" else (internal or [])
    return RegionSolution(
        region_id=problem.region_id,
        boundary_marginals={b.var: g.marginals[pos[b.var]] for b in problem.boundary},
        internal_marginals={v: g.marginals[pos[v]] for v in names},
        residual=res,
        status=CONVERGED if res <= opts.tol else MAX_ITERS,
        iterations=iters,
        log_fields=fields,
        samples=used,
        standard_errors={v: g.standard_errors[pos[v]] for v in problem.support},
        diagnostics={"method": "gibbs"},
    )
