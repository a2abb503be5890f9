"""LDPC decoding graphs and a seeded bit-error-rate harness."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import oracle
from .bethe import BPOptions, bp_run
from .dd import DDOptions, dd_run
from .errors import CapacityError, InputError, RegionBPError
from .formatting import format_float
from .graph import EnergyTable, FactorGraph, VariableSpec
from .regions import build_decomposition, regional_bp_run
from .results import CONVERGED

METHODS = ("exact", "bp", "regional-bp", "dd")
CSV_COLUMNS = ("method", "p", "trials", "bit_errors", "frame_errors", "avg_iters", "converged_frac")


@dataclass(frozen=True)
class ParityCheckCode:
    n: int
    checks: Tuple[Tuple[int, ...], ...]
    dv: Optional[int] = None
    dc: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        checks = tuple(tuple(int(i) for i in c) for c in self.checks)
        for c in checks:
            if not c:
                raise InputError("empty parity check")
            if len(set(c)) != len(c):
                raise InputError(f"check {c} repeats a bit")
            if any(i < 0 or i >= self.n for i in c):
                raise InputError(f"check {c} has a bit index outside [0, {self.n})")
        object.__setattr__(self, "checks", checks)

    @property
    def m(self) -> int:
        return len(self.checks)

    def syndrome(self, bits: Sequence[int]) -> List[int]:
        return [int(sum(bits[i] for i in c) % 2) for c in self.checks]


def generate_ldpc(n: int, dv: int, dc: int, seed: int = 0, retries: int = 100) -> ParityCheckCode:
    """(dv, dc)-regular code from a configuration model with swap repair of repeated bits."""
    if n <= 0 or dv <= 0 or dc <= 0:
        raise InputError("n, dv and dc must be positive")
    if (n * dv) % dc:
        raise InputError(f"n*dv = {n * dv} is not divisible by dc = {dc}")
    if dc > n:
        raise InputError(f"dc = {dc} exceeds n = {n}; checks cannot have distinct bits")
    m = n * dv // dc
    rng = np.random.default_rng(seed)
    sockets = np.repeat(np.arange(n), dv)
    for _ in range(retries):
        checks = [list(c) for c in rng.permutation(sockets).reshape(m, dc)]
        if _repair(checks, rng, budget=20 * n * dv):
            return ParityCheckCode(n, tuple(tuple(sorted(c)) for c in checks), dv, dc, seed)
    raise InputError(f"could not build a ({dv},{dc}) code on {n} bits within {retries} retries")


def _repair(checks: List[List[int]], rng: np.random.Generator, budget: int) -> bool:
    m = len(checks)
    for _ in range(budget):
        bad = next((a for a in range(m) if len(set(checks[a])) < len(checks[a])), None)
        if bad is None:
            return True
        row = checks[bad]
        seen = set()
        pos = next(i for i, x in enumerate(row) if x in seen or seen.add(x))
        other = int(rng.integers(m))
        if other == bad:
            continue
        j = int(rng.integers(len(checks[other])))
        x, y = row[pos], checks[other][j]
        if y in row or x in checks[other]:
            continue
        row[pos], checks[other][j] = y, x
    return all(len(set(c)) == len(c) for c in checks)


@dataclass(frozen=True)
class ChannelModel:
    """Binary symmetric channel with flip probability p."""

    p: float
    kind: str = "bsc"

    def __post_init__(self):
        if self.kind != "bsc":
            raise InputError(f"unsupported channel {self.kind!r}")
        if not 0.0 < self.p < 0.5:
            raise InputError("BSC flip probability must lie in (0, 0.5)")

    def prior_energies(self, received: int, kT: float = 1.0) -> List[float]:
        """-kT log P(received | b) for b = 0, 1."""
        keep, flip = -kT * math.log1p(-self.p), -kT * math.log(self.p)
        return [keep, flip] if received == 0 else [flip, keep]

    def transmit(self, codeword: Sequence[int], rng: np.random.Generator) -> List[int]:
        flips = rng.random(len(codeword)) < self.p
        return [int(b) ^ int(f) for b, f in zip(codeword, flips)]


def bit_name(i: int) -> str:
    return f"x{i + 1}"


def check_name(a: int) -> str:
    return f"c{a + 1}"


def parity_energies(size: int, penalty: float) -> np.ndarray:
    """Energy table over `size` bits, last bit fastest: 0 on even parity."""
    idx = np.arange(2**size)
    ones = np.zeros_like(idx)
    for k in range(size):
        ones += (idx >> k) & 1
    return np.where(ones % 2 == 0, 0.0, penalty)


def build_decoding_graph(
    code: ParityCheckCode,
    channel: ChannelModel,
    received: Sequence[int],
    mode: str = "hard",
    delta: Optional[float] = None,
    kT: float = 1.0,
) -> FactorGraph:
    if len(received) != code.n:
        raise InputError(f"received word has length {len(received)}, code length is {code.n}")
    if mode not in ("hard", "soft"):
        raise InputError(f"constraint mode must be hard or soft, got {mode!r}")
    penalty = math.inf if mode == "hard" else (8.0 * kT if delta is None else float(delta))
    if not penalty > 0:
        raise InputError("soft-constraint penalty must be positive")
    variables = tuple(VariableSpec(bit_name(i), 2) for i in range(code.n))
    priors = {
        bit_name(i): EnergyTable((bit_name(i),), channel.prior_energies(int(r), kT))
        for i, r in enumerate(received)
    }
    factors = {
        check_name(a): EnergyTable(tuple(bit_name(i) for i in c), parity_energies(len(c), penalty))
        for a, c in enumerate(code.checks)
    }
    return FactorGraph(variables, factors, priors, temperature=kT)


def block_partition(code: ParityCheckCode, block_size: Optional[int] = None) -> Dict[str, List[str]]:
    """Contiguous blocks of checks; one region holding every check when block_size is None."""
    size = code.m if not block_size else int(block_size)
    if size <= 0:
        raise InputError("block size must be positive")
    names = [check_name(a) for a in range(code.m)]
    return {f"B{k // size + 1}": names[k:k + size] for k in range(0, code.m, size)}


@dataclass
class DecodeResult:
    bits: List[int]
    marginals: np.ndarray
    syndrome_ok: bool
    status: str
    iterations: int = 0
    consistency_gap: Optional[float] = None


def _has_hard(graph: FactorGraph) -> bool:
    return any(np.isinf(t.energies).any() for t in graph.factors.values())


def decode(
    code: ParityCheckCode,
    graph: FactorGraph,
    method: str = "bp",
    bp_opts: Optional[BPOptions] = None,
    dd_opts: Optional[DDOptions] = None,
    block_size: Optional[int] = None,
) -> DecodeResult:
    """Run one engine; hard decision is argmax of p(b) with ties going to 0."""
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    gap = None
    iters = 0
    status = CONVERGED
    if method == "exact":
        marg = oracle.variable_marginals(graph)
    elif method == "bp":
        r = bp_run(graph, bp_opts)
        marg, iters, status = r.marginals, r.iterations, r.status
    else:
        decomp = build_decomposition(graph, block_partition(code, block_size))
        if method == "regional-bp":
            r = regional_bp_run(graph, decomp, bp_opts)
        else:
            dd_opts = dd_opts or DDOptions()
            if dd_opts.solver == "gibbs" and _has_hard(graph):
                raise InputError(
                    "the Gibbs solver cannot cross hard parity constraints; "
                    "rebuild the graph with soft constraints (--constraint soft --delta D)"
                )
            r = dd_run(graph, decomp, dd_opts)
            gap = r.consistency_gap
        marg, iters, status = r.marginals, r.iterations, r.status
    p1 = np.array([float(marg[bit_name(i)][1]) for i in range(code.n)])
    p0 = np.array([float(marg[bit_name(i)][0]) for i in range(code.n)])
    bits = [int(a > b) for a, b in zip(p1, p0)]
    return DecodeResult(bits, p1, not any(code.syndrome(bits)), status, iters, gap)


@dataclass
class ExperimentRow:
    method: str
    p: float
    trials: int = 0
    bit_errors: int = 0
    frame_errors: int = 0
    total_iters: int = 0
    converged: int = 0
    failures: int = 0
    gaps: List[float] = field(default_factory=list)
    n: int = 1

    @property
    def avg_iters(self) -> float:
        return self.total_iters / self.trials if self.trials else 0.0

    @property
    def converged_frac(self) -> float:
        return self.converged / self.trials if self.trials else 0.0

    @property
    def ber(self) -> float:
        return self.bit_errors / (self.trials * self.n) if self.trials else 0.0

    def csv_fields(self) -> List[str]:
        return [self.method, format_float(self.p), str(self.trials), str(self.bit_errors),
                str(self.frame_errors), format_float(self.avg_iters), format_float(self.converged_frac)]


def trial_rng(seed: int, p_index: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(p_index), int(trial)]))


def ber_experiment(
    code: ParityCheckCode,
    p_values: Iterable[float],
    trials: int,
    methods: Sequence[str] = ("bp",),
    seed: int = 0,
    mode: str = "hard",
    delta: Optional[float] = None,
    block_size: Optional[int] = None,
    bp_opts: Optional[BPOptions] = None,
    dd_opts: Optional[DDOptions] = None,
) -> List[ExperimentRow]:
    """Send the all-zeros codeword over a BSC and decode with each method.

    Noise for trial ``t`` at the ``k``-th flip probability comes from a stream
    keyed by (seed, k, t), so every method sees the same received words.
    A decode that raises an engine error counts as a frame error with the
    received word as its decision, and is tallied in ``failures``.
    """
    if trials <= 0:
        raise InputError("trials must be positive")
    for mth in methods:
        if mth not in METHODS:
            raise InputError(f"unknown method {mth!r}")
    rows: List[ExperimentRow] = []
    for k, p in enumerate(p_values):
        channel = ChannelModel(float(p))
        batch = {mth: ExperimentRow(mth, float(p), n=code.n) for mth in methods}
        for t in range(trials):
            received = channel.transmit([0] * code.n, trial_rng(seed, k, t))
            graph = build_decoding_graph(code, channel, received, mode, delta)
            for mth in methods:
                row = batch[mth]
                row.trials += 1
                try:
                    res = decode(code, graph, mth, bp_opts, dd_opts, block_size)
                    bits = res.bits
                    row.total_iters += res.iterations
                    row.converged += res.status == CONVERGED
                    if res.consistency_gap is not None:
                        row.gaps.append(res.consistency_gap)
                except CapacityError:
                    raise
                except (RegionBPError, ArithmeticError) as exc:
                    if isinstance(exc, InputError):
                        raise
                    bits = list(received)
                    row.failures += 1
                errs = sum(bits)
                row.bit_errors += errs
                row.frame_errors += errs > 0
        rows.extend(batch[mth] for mth in methods)
    return rows


def rows_to_csv(rows: Iterable[ExperimentRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()
