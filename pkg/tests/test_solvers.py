from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import LN2, g1, g2_r1_problem, planted_problem, random_potential_problem
from regionbp.errors import CapacityError, ErgodicityError, InputError
from regionbp.graph import EnergyTable, FactorGraph, VariableSpec
from regionbp.logspace import log_normalize, marginal_log
from regionbp.oracle import partition_function, variable_marginals
from regionbp.solvers import (
    BoundarySpec,
    GibbsSolverOptions,
    RegionProblem,
    SamplerOptions,
    gibbs_sample,
    modified_free_energy,
    rng_stream,
    solve_region_exact,
    solve_region_gibbs,
)


def _g1_region():
    g = g1()
    # fa plus the prior of x1, both variables interior
    E = np.array([[0, LN2], [LN2, 0]]) + np.array([[0, 0], [LN2, LN2]])
    return g, RegionProblem("G1", ("x1", "x2"), (2, 2), energy=E)


def test_no_boundary_is_boltzmann():
    g, p = _g1_region()
    s = solve_region_exact(p, internal="all")
    assert s.boundary_marginals == {} and s.residual == 0.0
    np.testing.assert_allclose(s.internal_marginals["x1"], variable_marginals(g)["x1"], atol=1e-14)
    assert modified_free_energy(p, np.exp(s.log_belief)) == pytest.approx(-math.log(2.25), abs=1e-12)


def test_g2_r1_fixed_point_potential():
    for method in ("newton", "fixed-point"):
        s = solve_region_exact(g2_r1_problem(), method=method)
        np.testing.assert_allclose(s.boundary_marginals["x2"], [5 / 9, 4 / 9], atol=1e-8)
        assert s.converged


def test_symmetric_region_gives_uniform():
    E = np.array([[0.0, 1.0], [1.0, 0.0]])
    p = RegionProblem("S", ("a", "b"), (2, 2), (BoundarySpec("a", 3, np.zeros(2)), BoundarySpec("b", 2, np.zeros(2))), energy=E)
    for method in ("newton", "fixed-point"):
        s = solve_region_exact(p, method=method)
        for mu in s.boundary_marginals.values():
            np.testing.assert_allclose(mu, [0.5, 0.5], atol=1e-12)


def test_zero_potential_map_reads_normalize_mu():
    p = random_potential_problem(np.random.default_rng(4))
    p = RegionProblem(p.region_id, p.support, p.cards,
                      tuple(BoundarySpec(b.var, 2, np.zeros_like(b.potential)) for b in p.boundary), p.kT, energy=p.energy)
    s = solve_region_exact(p, max_iters=0)
    from regionbp.solvers import field_targets

    targets = field_targets(p, {v: np.log(m) for v, m in s.boundary_marginals.items()})
    for v, m in s.boundary_marginals.items():
        np.testing.assert_allclose(np.exp(targets[v]), m, atol=1e-14)


def test_exact_output_is_self_consistent():
    rng = np.random.default_rng(8)
    for _ in range(10):
        p = planted_problem(rng)
        s = solve_region_exact(p)
        assert s.residual <= 1e-10
        pos = p.axis
        for v, mu in s.boundary_marginals.items():
            np.testing.assert_allclose(mu, np.exp(marginal_log(s.log_belief, [pos[v]])), atol=1e-10)


def test_max_iters_zero_evaluates_start():
    p = g2_r1_problem((0.3, -0.2))
    p.init_fields = {"x2": np.log([0.2, 0.8])}
    s = solve_region_exact(p, max_iters=0)
    assert s.iterations == 0
    np.testing.assert_allclose(np.exp(s.log_fields["x2"]), [0.2, 0.8])


def test_nonconvergence_is_status_not_error():
    # C = 2 with potentials off the planted manifold: no interior critical point exists
    s = solve_region_exact(g2_r1_problem((0.0, 1.0)), max_iters=20, method="fixed-point")
    assert s.status == "max-iters" and s.residual > 1e-10


def test_problem_validation():
    with pytest.raises(InputError):
        RegionProblem("R", ("a",), (2,), (BoundarySpec("a", 1, np.zeros(2)),), energy=np.zeros(2))
    with pytest.raises(InputError):
        RegionProblem("R", ("a",), (2,), (BoundarySpec("a", 2, np.array([0, np.inf])),), energy=np.zeros(2))
    with pytest.raises(InputError):
        RegionProblem("R", ("a",), (2,), (BoundarySpec("zz", 2, np.zeros(2)),), energy=np.zeros(2))
    evaluated = RegionProblem("R", ("a",), (2,), evaluator=lambda x: 0.0)
    with pytest.raises(CapacityError):
        solve_region_exact(evaluated)


def test_modified_free_energy_isolated_region():
    rng = np.random.default_rng(0)
    E = rng.normal(size=(2, 3))
    p = RegionProblem("R", ("a", "b"), (2, 3), kT=1.7, energy=E)
    b = np.exp(log_normalize(-E / 1.7))
    logz = math.log(np.exp(-E / 1.7).sum())
    assert modified_free_energy(p, b) == pytest.approx(-1.7 * logz, abs=1e-12)
    with pytest.raises(InputError):
        modified_free_energy(p, np.full(6, 0.2))


def test_sampler_single_variable():
    g = gibbs_sample(np.array([0.0, LN2]), [2], SamplerOptions(samples=100_000, seed=3))
    assert abs(g.marginals[0][0] - 2 / 3) <= 0.01
    again = gibbs_sample(np.array([0.0, LN2]), [2], SamplerOptions(samples=100_000, seed=3))
    assert g.marginals[0].tobytes() == again.marginals[0].tobytes()


def test_sampler_g1_region():
    g, p = _g1_region()
    out = gibbs_sample(p.energy, p.cards, SamplerOptions(samples=200_000, seed=1))
    assert abs(out.marginals[0][0] - 2 / 3) <= 0.01


def test_callable_path_matches_table_path():
    rng = np.random.default_rng(2)
    E = rng.normal(size=(2, 3, 2))
    opts = SamplerOptions(samples=3000, seed=5)
    fast = gibbs_sample(E, E.shape, opts, names=["a", "b", "c"])
    slow = gibbs_sample(lambda x: E[x["a"], x["b"], x["c"]], E.shape, opts, names=["a", "b", "c"],
                        init={v: int(s) for v, s in zip("abc", np.unravel_index(np.argmin(E), E.shape))})
    for a, b in zip(fast.marginals, slow.marginals):
        np.testing.assert_array_equal(a, b)


def test_sampler_errors():
    with pytest.raises(ErgodicityError, match="soften"):
        gibbs_sample(np.array([np.inf, np.inf]), [2], SamplerOptions(samples=10))
    with pytest.raises(InputError):
        SamplerOptions(samples=0)
    with pytest.raises(ErgodicityError):
        gibbs_sample(np.array([0.0, np.inf]), [2], SamplerOptions(samples=10), names=["a"], init={"a": 1})


def test_streams_are_keyed():
    a = rng_stream(1, "R1", 0, 0).random(4)
    assert np.array_equal(a, rng_stream(1, "R1", 0, 0).random(4))
    assert not np.array_equal(a, rng_stream(1, "R2", 0, 0).random(4))
    assert not np.array_equal(a, rng_stream(1, "R1", 1, 0).random(4))


def test_gibbs_solver_matches_exact_on_g2_r1():
    exact = solve_region_exact(g2_r1_problem())
    opts = GibbsSolverOptions(sampler=SamplerOptions(samples=100_000, seed=9))
    s = solve_region_gibbs(g2_r1_problem(), opts)
    assert np.max(np.abs(s.boundary_marginals["x2"] - exact.boundary_marginals["x2"])) <= 0.01
    again = solve_region_gibbs(g2_r1_problem(), opts)
    assert s.boundary_marginals["x2"].tobytes() == again.boundary_marginals["x2"].tobytes()
    assert s.samples >= 100_000 and set(s.standard_errors) == {"x1", "x2"}


def test_gibbs_solver_without_boundary():
    g, p = _g1_region()
    s = solve_region_gibbs(p, GibbsSolverOptions(sampler=SamplerOptions(samples=50_000)), internal="all")
    assert s.iterations == 0 and abs(s.internal_marginals["x1"][0] - 2 / 3) < 0.01


@pytest.mark.parametrize("k", range(20))
def test_sampler_within_four_standard_errors(k):
    rng = np.random.default_rng(1000 + k)
    cards = tuple(int(c) for c in rng.integers(2, 4, size=3))
    E = rng.normal(size=cards)
    out = gibbs_sample(E, cards, SamplerOptions(samples=100_000, seed=k))
    p = np.exp(log_normalize(-E))
    for i in range(3):
        truth = p.sum(axis=tuple(j for j in range(3) if j != i))
        se = np.maximum(out.standard_errors[i], 1e-4)
        assert np.all(np.abs(out.marginals[i] - truth) <= 4 * se)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_planted_problems_solve(seed):
    p = planted_problem(np.random.default_rng(seed))
    s = solve_region_exact(p)
    assert s.residual <= 1e-10 and s.converged
    for mu in s.boundary_marginals.values():
        assert abs(mu.sum() - 1) <= 1e-9
