from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import LN2, g1, g2, random_graph
from regionbp.errors import GraphParseError, GraphValidationError, InputError
from regionbp.graph import (
    EnergyTable,
    FactorGraph,
    VariableSpec,
    check_graph,
    parse_graph,
    serialize_graph,
    total_energy,
    validate_graph,
)


def test_g1_is_valid():
    assert validate_graph(g1()) == []


def test_unknown_scope_variable_reported():
    g = FactorGraph((VariableSpec("x1", 2),), {"f": EnergyTable(("x1", "zz"), [0, 0, 0, 0])})
    problems = validate_graph(g)
    assert any("unknown variable" in p and "'f'" in p for p in problems)


def test_short_table_reported():
    g = FactorGraph((VariableSpec("a", 2), VariableSpec("b", 2)), {"f": EnergyTable(("a", "b"), [0, 0, 0])})
    assert any("table length mismatch" in p for p in validate_graph(g))
    with pytest.raises(GraphValidationError) as err:
        check_graph(g)
    assert err.value.violations


def test_other_violations():
    g = FactorGraph(
        (VariableSpec("a", 2), VariableSpec("a", 2)),
    )
    assert any("duplicate" in p for p in validate_graph(g))
    g = FactorGraph((VariableSpec("a", 2),), {"f": EnergyTable(("a", "a"), [0, 0, 0, 0])})
    assert any("repeated" in p for p in validate_graph(g))
    g = FactorGraph((VariableSpec("a", 2),), {"f": EnergyTable(("a",), [math.inf, math.inf])})
    assert any("every entry" in p for p in validate_graph(g))
    g = FactorGraph((VariableSpec("a", 2),), temperature=0.0)
    assert any("temperature" in p for p in validate_graph(g))


def test_jointly_unsatisfiable_graph_reported():
    g = FactorGraph(
        (VariableSpec("a", 2),),
        {"f": EnergyTable(("a",), [0, math.inf]), "h": EnergyTable(("a",), [math.inf, 0])},
    )
    assert any("infinite energy" in p for p in validate_graph(g))


def test_total_energy_examples():
    g = g1()
    assert total_energy(g, {"x1": 0, "x2": 0}) == 0.0
    assert total_energy(g, {"x1": 1, "x2": 0}) == pytest.approx(2 * LN2, abs=1e-12)
    hard = FactorGraph((VariableSpec("a", 2),), {"f": EnergyTable(("a",), [0, math.inf])})
    assert total_energy(hard, {"a": 1}) == math.inf


def test_total_energy_rejects_bad_assignment():
    with pytest.raises(InputError):
        total_energy(g1(), {"x1": 0})
    with pytest.raises(InputError):
        total_energy(g1(), {"x1": 0, "x2": 2})


def test_round_trip_g1_and_inf_token():
    g = g1()
    assert parse_graph(serialize_graph(g)) == g
    text = serialize_graph(g).replace("0.69314718055994529, 0.0]", '"inf", 0.0]', 1)
    h = parse_graph(text)
    assert math.inf in list(h.factors["fa"].energies) or math.inf in list(h.priors["x1"].energies)


def test_regions_block_round_trips():
    g = g2(with_regions=True)
    h = parse_graph(serialize_graph(g))
    assert h == g and dict(h.regions) == {"R1": ("fa",), "R2": ("fb",)}


def test_missing_priors_default_to_zero():
    g = parse_graph('{"variables": [{"id": "a", "cardinality": 3}], "factors": {}}')
    assert list(g.priors["a"].energies) == [0.0, 0.0, 0.0]


def test_truncated_document_has_location():
    text = serialize_graph(g1())[:-20]
    with pytest.raises(GraphParseError, match=r"line \d+ column \d+"):
        parse_graph(text)


def test_bad_energy_token_names_path():
    with pytest.raises(GraphParseError, match="factors.f"):
        parse_graph('{"variables": [{"id": "a", "cardinality": 2}], "factors": {"f": {"scope": ["a"], "energies": [0, "oops"]}}}')


def test_parse_validates():
    with pytest.raises(GraphValidationError):
        parse_graph('{"variables": [{"id": "a", "cardinality": 2}], "factors": {"f": {"scope": ["b"], "energies": [0, 0]}}}')


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_random(seed):
    g = random_graph(np.random.default_rng(seed), max_vars=6, max_card=3, hard=True)
    assert parse_graph(serialize_graph(g)) == g


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_constant_shift_adds_exactly(seed, c):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, max_vars=5, n_factors=3)
    fid = next(iter(g.factors))
    shifted = FactorGraph(
        g.variables, {**g.factors, fid: g.factors[fid].shifted(c)}, g.priors, g.temperature
    )
    for x in itertools.islice(itertools.product(*[range(k) for k in g.shape(g.var_ids)]), 16):
        a = dict(zip(g.var_ids, x))
        assert total_energy(shifted, a) == pytest.approx(total_energy(g, a) + c, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_factor_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, max_vars=5)
    items = list(g.factors.items())
    rev = FactorGraph(g.variables, dict(reversed(items)), g.priors, g.temperature)
    x = {v: int(rng.integers(k)) for v, k in g.cards.items()}
    assert total_energy(rev, x) == pytest.approx(total_energy(g, x), abs=1e-12)
