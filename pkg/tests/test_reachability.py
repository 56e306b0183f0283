import random

import numpy as np
import pytest

from cpctl.builtins import example1, gridworld, gridworld_formula
from cpctl.formula import FALSE, TRUE, Formula, NegAtom, parse_formula
from cpctl.reachability import (
    almost_sure_globally,
    continuation_projection,
    initial_value_vector,
    safe_sets_by_flags,
)
from cpctl.verify import max_safety_vi

from helpers import random_boolean, random_mdp


def names(m, states):
    return {m.state_names[s] for s in states}


def test_avoid_a_text_labeling():
    m = example1(labeling="text")
    safe = almost_sure_globally(m, NegAtom("a"))
    assert names(m, safe.states) == {"s2", "s4", "s8"}


def test_avoid_a_figure_labeling():
    m = example1()
    safe = almost_sure_globally(m, NegAtom("a"))
    assert names(m, safe.states) == {"s2", "s5", "s7"}


def test_true_and_false():
    m = example1()
    assert almost_sure_globally(m, TRUE).states == frozenset(range(m.n_states))
    assert almost_sure_globally(m, FALSE).states == frozenset()


def test_safe_action_stays_inside():
    rng = random.Random(3)
    for _ in range(30):
        m = random_mdp(rng, 10)
        safe = almost_sure_globally(m, random_boolean(rng))
        assert set(safe.safe_action) == set(safe.states)
        for s, a in safe.safe_action.items():
            assert m.transitions[s][a].support() <= safe.states


@pytest.mark.parametrize("seed", range(20))
def test_safe_set_is_exactly_the_value_one_set(seed):
    rng = random.Random(seed)
    m = random_mdp(rng, 10)
    b = random_boolean(rng)
    safe = almost_sure_globally(m, b)
    v = max_safety_vi(m, b)
    assert {s for s in range(m.n_states) if v[s] >= 1 - 1e-9} == set(safe.states)


def test_projection_of_gridworld_counters():
    f = parse_formula(gridworld_formula(0.0, 0.6))
    assert [continuation_projection(f, j) for j in range(f.pf)] == [NegAtom("d"), NegAtom("d")]
    g = parse_formula(gridworld_formula(0.5, 0.0))
    assert [continuation_projection(g, j) for j in range(g.pf)] == [NegAtom("d"), TRUE]


def test_joint_flags_use_intersection():
    f = parse_formula("P>=0.5 [ G a ] & P>=0.5 [ G b ]")
    rng = random.Random(11)
    m = random_mdp(rng, 10, atoms=("a", "b"))
    sets = safe_sets_by_flags(m, f)
    both = sets[frozenset({0, 1})].states
    assert both <= sets[frozenset({0})].states & sets[frozenset({1})].states


def test_goal_cell_has_both_counters_one():
    m = gridworld(1)
    f = parse_formula(gridworld_formula())
    V = initial_value_vector(m, f)
    goal = m.state("r0c3")
    assert any(np.all(p.nu == 1.0) for p in V[goal])


def test_unsafe_cells_only_have_zero_points():
    m = gridworld(1)
    f = parse_formula(gridworld_formula(0.1, 0.6))
    V = initial_value_vector(m, f)
    for s in range(m.n_states):
        if "d" in m.labels[s]:
            assert [list(p.nu) for p in V[s]] == [[0.0, 0.0]]


def test_example1_sink_has_inner_one():
    m = example1(labeling="text")
    f = parse_formula("P>=7/12 [ G P>=7/12 [ G !a ] ]")
    V = initial_value_vector(m, f)
    inner = f.nu_index[f.prob_nodes[0]]
    assert any(p.nu[inner] == 1.0 for p in V[m.state("s4")])


def test_initial_points_are_canonical_and_maximal():
    rng = random.Random(8)
    from helpers import random_cpctl

    for _ in range(20):
        m = random_mdp(rng, 8)
        f = Formula(random_cpctl(rng, 2))
        V = initial_value_vector(m, f)
        for s in range(m.n_states):
            pts = V[s]
            for p in pts:
                assert np.array_equal(p.mu, f.canonical_valuation(m.labels[s], p.nu))
                assert set(np.unique(p.nu)) <= {0.0, 1.0}
            for p in pts:
                for q in pts:
                    if p is not q:
                        assert not (np.all(p.mu <= q.mu) and np.all(p.nu <= q.nu))
