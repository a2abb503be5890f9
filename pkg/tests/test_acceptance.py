"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the log) or
``python tests/test_acceptance.py`` for the bare report.
"""

from __future__ import annotations

import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from builders import (
    LN2,
    g2,
    g2_r1_problem,
    max_tv,
    planted_problem,
    random_graph,
    random_region_tree,
    random_tree,
)
from regionbp import oracle
from regionbp.bethe import BPOptions, bp_iterate, bp_run, initial_state
from regionbp.dd import DDOptions, dd_run, soundness_check
from regionbp.graph import FactorGraph, VariableSpec, serialize_graph
from regionbp.ldpc import ChannelModel, ParityCheckCode, ber_experiment, build_decoding_graph, decode, generate_ldpc
from regionbp.logspace import entropy_term
from regionbp.regions import build_decomposition, regional_bp_iterate, regional_bp_run, regional_initial_state
from regionbp.solvers import (
    GibbsSolverOptions,
    SamplerOptions,
    gibbs_sample,
    modified_free_energy,
    solve_region_exact,
    solve_region_gibbs,
)

TIGHT_BP = BPOptions(tolerance=1e-13, max_iterations=5000)
TIGHT_DD = DDOptions(tolerance=1e-10, max_iterations=2000)


def report(number, title, passed, detail, capsys=None):
    line = f"[{number:>3}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)
    return passed


def _dirichlet(rng, n):
    p = rng.dirichlet(np.full(n, 0.5))
    return p / p.sum()


# ---------------------------------------------------------------------------


def check_helmholtz_identity(capsys=None):
    rng = np.random.default_rng(1001)
    worst_kl, worst_min = 0.0, 0.0
    for _ in range(200):
        g = random_graph(rng, max_vars=12, max_card=2)
        logz = oracle.partition_function(g)
        shape = g.shape(g.var_ids)
        p = oracle.DenseDistribution(g.var_ids, _dirichlet(rng, int(np.prod(shape))).reshape(shape))
        worst_kl = max(worst_kl, oracle.helmholtz_free_energy(g, p).identity_gap)
        a0 = oracle.helmholtz_free_energy(g, oracle.boltzmann(g), with_partition=False).free_energy
        worst_min = max(worst_min, abs(a0 + g.kT * logz))
    ok = worst_kl <= 1e-9 and worst_min <= 1e-10
    return report(1, "A(p) = -kT log Z + kT KL(p||p0) on 200 graphs", ok,
                  f"max identity gap {worst_kl:.2e} (tol 1e-9), max |A(p0) + kT log Z| {worst_min:.2e} (tol 1e-10)", capsys)


def check_entropy_overcount(capsys=None):
    rng = np.random.default_rng(1002)
    worst = 0.0
    for _ in range(50):
        cards = [int(c) for c in rng.integers(2, 5, size=3)]
        g = FactorGraph(tuple(VariableSpec(f"x{i + 1}", c) for i, c in enumerate(cards)))
        p = oracle.boltzmann(g)
        b1, b2 = oracle.exact_marginals(g, [("x2", "x3"), ("x1", "x3")])
        over = -entropy_term(b1.probabilities) - entropy_term(b2.probabilities) + entropy_term(p.probabilities)
        worst = max(worst, abs(over - math.log(cards[2])))
    return report(2, "entropy over-count H(b1)+H(b2)-H(p) = log|O3|", worst <= 1e-12,
                  f"max deviation {worst:.2e} over 50 uniform products (tol 1e-12)", capsys)


def check_bp_on_trees(capsys=None):
    rng = np.random.default_rng(1003)
    tv = fe = cons = 0.0
    unconverged = 0
    for _ in range(100):
        g = random_tree(rng)
        r = bp_run(g, TIGHT_BP)
        unconverged += not r.converged
        tv = max(tv, max_tv(r.marginals, oracle.variable_marginals(g)))
        fe = max(fe, abs(r.free_energy["bethe"] + g.kT * oracle.partition_function(g)))
        for fid, t in g.factors.items():
            b = r.factor_beliefs[fid]
            for i, v in enumerate(t.scope):
                m = b.sum(axis=tuple(k for k in range(b.ndim) if k != i))
                cons = max(cons, float(np.max(np.abs(m - r.marginals[v]))))
    ok = unconverged == 0 and tv <= 1e-8 and fe <= 1e-6 and cons <= 1e-7
    return report(3, "BP fixed points on 100 random trees", ok,
                  f"max TV {tv:.2e} (1e-8), Bethe vs -kT log Z {fe:.2e} (1e-6), "
                  f"marginal consistency {cons:.2e} (1e-7), unconverged {unconverged}", capsys)


def check_regional_reduction(capsys=None):
    rng = np.random.default_rng(1004)
    msg = 0.0
    graphs = 0
    while graphs < 20:
        g = random_graph(rng, max_vars=8, max_card=3)
        if not g.factors:
            continue
        graphs += 1
        d = build_decomposition(g, {f: [f] for f in g.factors})
        opts = BPOptions(damping=float(rng.uniform(0.0, 0.7)))
        s1, s2 = initial_state(g), regional_initial_state(g, d)
        for _ in range(15):
            s1, s2 = bp_iterate(g, s1, opts), regional_bp_iterate(g, d, s2, opts)
            for (r, v), m in s2.region_to_var.items():
                msg = max(msg, float(np.max(np.abs(m - s1.factor_to_var[(r, v)]))))
            for key, m in s2.var_to_region.items():
                msg = max(msg, float(np.max(np.abs(m - s1.var_to_factor[key]))))
    tv = fe = 0.0
    for _ in range(50):
        g, part = random_region_tree(rng)
        d = build_decomposition(g, part)
        r = regional_bp_run(g, d, TIGHT_BP)
        tv = max(tv, max_tv(r.marginals, oracle.variable_marginals(g)))
        fe = max(fe, abs(r.free_energy["regional"] + g.kT * oracle.partition_function(g)))
    ok = msg <= 1e-9 and tv <= 1e-8 and fe <= 1e-6
    return report(4, "regional BP reduces to BP and is exact on region trees", ok,
                  f"singleton message gap {msg:.2e} (1e-9, 20 graphs x 15 rounds), region-tree TV {tv:.2e} (1e-8), "
                  f"regional FE vs -kT log Z {fe:.2e} (1e-6)", capsys)


def _region_problems():
    rng = np.random.default_rng(1005)
    return [planted_problem(rng, f"R{k}") for k in range(50)]


def check_solver_residual(capsys=None):
    worst = max(solve_region_exact(p).residual for p in _region_problems())
    return report("5a", "exact region solver self-consistency on 50 problems", worst <= 1e-10,
                  f"max residual {worst:.2e} (tol 1e-10)", capsys)


def check_solver_below_uniform(capsys=None):
    below = 0
    worst = -math.inf
    for p in _region_problems():
        sol = solve_region_exact(p)
        at_sol = modified_free_energy(p, np.exp(sol.log_belief))
        at_uniform = modified_free_energy(p, np.full(p.cards, 1.0 / np.prod(p.cards)))
        below += at_sol <= at_uniform
        worst = max(worst, at_sol - at_uniform)
    return report("5b", "solver modified free energy <= value at uniform b_R", below == 50,
                  f"{below}/50 problems below uniform, worst excess {worst:.3g}", capsys)


def check_dd_on_region_trees(capsys=None):
    rng = np.random.default_rng(1006)
    gap = sound = tv_rbp = tv_exact = 0.0
    unconverged = 0
    for _ in range(50):
        g, part = random_region_tree(rng)
        d = build_decomposition(g, part)
        r = dd_run(g, d, TIGHT_DD)
        unconverged += not r.converged
        gap = max(gap, r.consistency_gap)
        sound = max(sound, soundness_check(g, d, r.state).residual)
        tv_rbp = max(tv_rbp, max_tv(r.marginals, regional_bp_run(g, d, TIGHT_BP).marginals))
        tv_exact = max(tv_exact, max_tv(r.marginals, oracle.variable_marginals(g)))
    ok = unconverged == 0 and gap <= 1e-5 and sound <= 1e-5 and tv_rbp <= 1e-6 and tv_exact <= 1e-6
    return report(6, "dd on 50 region trees", ok,
                  f"consistency gap {gap:.2e} (1e-5), soundness {sound:.2e} (1e-5), TV vs regional BP {tv_rbp:.2e} "
                  f"(1e-6), TV vs exact {tv_exact:.2e} (1e-6), unconverged {unconverged}", capsys)


def check_single_region(capsys=None):
    rng = np.random.default_rng(1007)
    worst = 0.0
    done = 0
    while done < 30:
        g = random_graph(rng, max_vars=10, max_card=3, hard=bool(done % 2))
        if not g.factors:
            continue
        done += 1
        r = dd_run(g, build_decomposition(g, {"R": list(g.factors)}))
        worst = max(worst, max_tv(r.marginals, oracle.variable_marginals(g)))
    return report(7, "dd with one region equals exact marginals", worst <= 1e-9,
                  f"max TV {worst:.2e} over 30 graphs (tol 1e-9)", capsys)


def check_sampler(capsys=None):
    opts = SamplerOptions(samples=100_000, seed=8)
    single = gibbs_sample(np.array([0.0, LN2]), [2], opts)
    err1 = abs(single.marginals[0][0] - 2 / 3)
    prob = g2_r1_problem()
    exact = solve_region_exact(prob, internal="all")
    gopts = GibbsSolverOptions(sampler=opts)
    gibbs = solve_region_gibbs(prob, gopts, internal="all")
    err2 = max(float(np.max(np.abs(gibbs.internal_marginals[v] - exact.internal_marginals[v]))) for v in prob.support)
    again = solve_region_gibbs(prob, gopts, internal="all")
    same = all(gibbs.internal_marginals[v].tobytes() == again.internal_marginals[v].tobytes() for v in prob.support)
    same &= single.marginals[0].tobytes() == gibbs_sample(np.array([0.0, LN2]), [2], opts).marginals[0].tobytes()
    ok = err1 <= 0.01 and err2 <= 0.01 and same
    return report(8, "Gibbs sampler statistics", ok,
                  f"single-variable error {err1:.2e} (0.01), G2/R1 max error vs exact {err2:.2e} (0.01), "
                  f"same-seed identical {same}", capsys)


def check_ldpc(capsys=None):
    p3 = ParityCheckCode(3, ((0, 1, 2),))
    graph = build_decoding_graph(p3, ChannelModel(0.1), [1, 1, 0])
    target = 0.738 / 0.756
    worst = 0.0
    bits_ok = True
    for method in ("exact", "bp", "dd"):
        res = decode(p3, graph, method, bp_opts=TIGHT_BP, dd_opts=TIGHT_DD)
        worst = max(worst, abs(res.marginals[0] - target))
        bits_ok &= res.bits == [1, 1, 0]
    code = generate_ldpc(12, 3, 6, seed=9)
    rows = ber_experiment(code, [1e-6], 20, ["exact", "bp", "dd"], seed=9, block_size=2)
    ber = max(r.ber for r in rows)
    ok = worst <= 1e-6 and bits_ok and ber == 0.0
    return report(9, "LDPC P3 posterior and near-noiseless BER", ok,
                  f"max |p(x1=1) - 0.976190| {worst:.2e} (1e-6), decisions (1,1,0) {bits_ok}, "
                  f"max BER at p=1e-6 {ber:g}", capsys)


def _cli(args, env_threads=None):
    env = {k: v for k, v in os.environ.items() if k != "REGIONBP_THREADS"}
    if env_threads is not None:
        env["REGIONBP_THREADS"] = env_threads
    out = subprocess.run([sys.executable, "-m", "regionbp", *args], capture_output=True, env=env, check=False)
    return out.returncode, out.stdout


def check_cli_determinism(tmp: Path, capsys=None):
    g = tmp / "g2.json"
    g.write_text(serialize_graph(g2(with_regions=True)))
    invocations = [
        ["infer", "--graph", str(g), "--method", m] for m in ("exact", "bp", "regional-bp", "dd")
    ] + [
        ["infer", "--graph", str(g), "--method", "dd", "--solver", "gibbs", "--samples", "5000",
         "--max-iters", "4", "--seed", "5"],
        ["compare", "--graph", str(g)],
        ["ldpc", "--n", "12", "--p", "0.02,0.05", "--trials", "3", "--methods", "bp,dd",
         "--block-size", "2", "--seed", "4"],
        ["ldpc", "--n", "12", "--p", "0.03", "--trials", "2", "--methods", "dd", "--block-size", "3",
         "--constraint", "soft", "--solver", "gibbs", "--samples", "2000", "--max-iters", "3", "--seed", "4"],
    ]
    mismatched = []
    for args in invocations:
        code, ref = _cli(args)
        variants = [_cli(args)[1], _cli(args + ["--threads", "4"])[1], _cli(args, env_threads="3")[1]]
        if not ref or code not in (0, 2) or any(v != ref for v in variants):
            mismatched.append(" ".join(args[:1] + args[2:5]))
    return report(10, "CLI byte-reproducible across runs and thread counts", not mismatched,
                  f"{len(invocations) - len(mismatched)}/{len(invocations)} invocations identical"
                  + (f"; differing: {mismatched}" if mismatched else ""), capsys)


# ---------------------------------------------------------------------------


def test_helmholtz_identity(capsys):
    assert check_helmholtz_identity(capsys)


def test_entropy_overcount(capsys):
    assert check_entropy_overcount(capsys)


def test_bp_fixed_points_on_trees(capsys):
    assert check_bp_on_trees(capsys)


def test_regional_reduction(capsys):
    assert check_regional_reduction(capsys)


def test_region_solver_residual(capsys):
    assert check_solver_residual(capsys)


def test_region_solver_below_uniform(capsys):
    assert check_solver_below_uniform(capsys)


def test_dd_on_region_trees(capsys):
    assert check_dd_on_region_trees(capsys)


def test_single_region_dd(capsys):
    assert check_single_region(capsys)


def test_sampler_statistics(capsys):
    assert check_sampler(capsys)


def test_ldpc_instance(capsys):
    assert check_ldpc(capsys)


def test_cli_determinism(tmp_path, capsys):
    assert check_cli_determinism(tmp_path, capsys)


if __name__ == "__main__":
    import tempfile

    checks = [check_helmholtz_identity, check_entropy_overcount, check_bp_on_trees, check_regional_reduction,
              check_solver_residual, check_solver_below_uniform, check_dd_on_region_trees, check_single_region,
              check_sampler, check_ldpc]
    results = [c() for c in checks]
    with tempfile.TemporaryDirectory() as d:
        results.append(check_cli_determinism(Path(d)))
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
