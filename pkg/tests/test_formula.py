import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpctl.builtins import gridworld_formula
from cpctl.formula import (
    CPCTL,
    FALSE,
    SAFE_PCTL,
    TRUE,
    And,
    Atom,
    ContinuingWeakUntil,
    Formula,
    FormulaSyntaxError,
    FragmentError,
    NegAtom,
    Or,
    ProbGeq,
    Until,
    alit,
    depths,
    eval_boolean,
    fd_transform,
    literal_projection,
    parse_formula,
    parse_tree,
    slater_transform,
    to_text,
)
from cpctl.verify import compare_with_fd, exact_check

from helpers import random_chain, random_cpctl


def test_globally_desugars_to_continuing_weak_until_false():
    f = parse_formula("P>=7/12 [ G !a ]")
    assert f.tree == ProbGeq(7 / 12, ContinuingWeakUntil(NegAtom("a"), FALSE))


def test_atom():
    assert parse_tree("a") == Atom("a")


def test_continuing_goal_with_repeated_left_conjunct():
    f = parse_formula("P>=0.6 [ !d W (!d & G) ]")
    assert f.tree == ProbGeq(0.6, ContinuingWeakUntil(NegAtom("d"), Atom("G")))


def test_gridworld_formula_parses():
    f = parse_formula(gridworld_formula())
    assert f.pf == 2
    assert [f.nodes[i].kind for i in f.path_subs] == ["cwu", "cwu"]


def test_fraction_and_decimal_thresholds():
    assert parse_tree("P>=1/2 [ G a ]").p == 0.5
    assert parse_tree("P>=0.25 [ G a ]").p == 0.25


def test_syntax_error_reports_position():
    with pytest.raises(FormulaSyntaxError) as err:
        parse_formula("a & & b")
    assert err.value.position == 4


@pytest.mark.parametrize("text", ["", "P>=0.5 [ G a", "a b", "P>= [G a]", "(a"])
def test_malformed_inputs_rejected(text):
    with pytest.raises(FormulaSyntaxError):
        parse_formula(text)


def test_threshold_out_of_range():
    with pytest.raises(ValueError):
        parse_formula("P>=3/2 [ G a ]")


@pytest.mark.parametrize(
    "text, op",
    [("P>=0.5 [ X a ]", "X"), ("P>=0.5 [ a W b ]", "W (non-continuing)")],
)
def test_fragment_violations_name_the_operator(text, op):
    with pytest.raises(FragmentError) as err:
        parse_formula(text)
    assert err.value.operator == op
    parse_formula(text, fragment=SAFE_PCTL)


def test_continuing_normalize_rewrites_goal():
    f = parse_formula("P>=0.5 [ !d W G ]", continuing_normalize=True)
    assert f.tree == ProbGeq(0.5, ContinuingWeakUntil(NegAtom("d"), Atom("G")))


def test_state_subs_are_children_first():
    f = parse_formula("a & P>=0.5 [ (a & !b) W ((a & !b) & c) ]")
    pos = {nid: k for k, nid in enumerate(f.state_subs)}
    for nid in f.state_subs:
        node = f.nodes[nid]
        kids = node.children
        if node.kind == "prob":
            kids = f.nodes[kids[0]].children
        for c in kids:
            assert pos[c] < pos[nid]


def test_identical_subtrees_get_distinct_ids():
    f = parse_formula("P>=0.5 [ G a ] & P>=0.5 [ G a ]")
    assert f.pf == 2
    assert len(set(f.prob_nodes)) == 2


# literal projection


def test_alit_of_continuing_formula():
    t = parse_tree("P>=0.7 [ (a & !b) W ((a & !b) & c) ]")
    assert literal_projection(t) == And(Atom("a"), NegAtom("b"))


def test_alit_zero_threshold_is_true():
    assert literal_projection(parse_tree("P>=0 [ G a ]")) == TRUE


def test_alit_literal():
    assert alit(parse_formula("a")) == Atom("a")


def test_alit_rejects_non_cpctl():
    with pytest.raises(ValueError):
        literal_projection(parse_tree("P>=0.5 [ X a ]", fragment=SAFE_PCTL))


# Slater transform


def test_slater_single():
    f = slater_transform(parse_formula("P>=0.5 [ G a ]"), [0.6])
    assert f.tree.p == 0.6


def test_slater_keeps_atoms():
    f = slater_transform(parse_formula("a & P>=0.3 [ G b ]"), [0.4])
    assert f.tree == And(Atom("a"), ProbGeq(0.4, ContinuingWeakUntil(Atom("b"), FALSE)))


def test_slater_nested_round_trips_through_text():
    f = parse_formula(gridworld_formula(0.2, 0.6))
    d = [0.61, 0.21]  # ordered like nu: inner first
    g = slater_transform(f, d)
    again = parse_formula(to_text(g.tree))
    assert list(again.thresholds) == d


def test_slater_dimension_mismatch():
    with pytest.raises(ValueError):
        slater_transform(parse_formula("P>=0.5 [ G a ]"), [0.1, 0.2])


# canonical valuation


def test_xi_boundary():
    f = parse_formula("P>=0.5 [ G a ]")
    mu = f.canonical_valuation(set(), [0.5])
    assert mu[f.mu_index[f.root]] == 1


def test_xi_conjunction_gating():
    f = parse_formula("a & P>=0.5 [ G b ]")
    mu = f.canonical_valuation(set(), [0.9])
    atom = next(i for i in f.state_subs if f.nodes[i].kind == "atom" and f.nodes[i].name == "a")
    assert mu[f.mu_index[atom]] == 0
    assert mu[f.mu_index[f.root]] == 0
    assert mu[f.mu_index[f.prob_nodes[0]]] == 1


def test_xi_example1_s3():
    f = parse_formula("P>=2/3 [ G P>=7/12 [ G !a ] ]")
    inner = f.prob_nodes[0]
    mu = f.canonical_valuation(set(), [0.5, 0.0])
    assert mu[f.mu_index[inner]] == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_xi_monotone(seed):
    rng = random.Random(seed)
    f = Formula(random_cpctl(rng, 2))
    labels = {a for a in "abc" if rng.random() < 0.5}
    nu = np.array([rng.random() for _ in range(f.pf)])
    nu2 = np.minimum(1.0, nu + np.array([rng.random() * 0.3 for _ in range(f.pf)]))
    assert np.all(f.canonical_valuation(labels, nu) <= f.canonical_valuation(labels, nu2))


# depths


def test_depths_boolean():
    f = parse_formula("a & !b")
    assert depths(f)[f.root] == (0, 0)


def test_depth_single_layer():
    f = parse_formula("P>=0.5 [ a W (a & b) ]")
    assert depths(f)[f.root][0] == 1


def test_depth_gridworld():
    f = parse_formula(gridworld_formula())
    assert depths(f)[f.root][0] == 2


# printing


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_print_parse_round_trip(seed):
    tree = random_cpctl(random.Random(seed), 3)
    assert parse_tree(to_text(tree)) == tree


# FD


def test_fd_literal_fixed_point():
    assert fd_transform(parse_formula("a")).tree == Atom("a")


def test_fd_shape():
    g = fd_transform(parse_formula("P>=0.5 [ a W (a & b) ]")).tree
    left = Atom("a")
    surely = ProbGeq(1.0, ContinuingWeakUntil(left, FALSE))
    assert g == ProbGeq(0.5, Until(left, Or(surely, And(left, Atom("b")))))


def test_fd_agrees_on_a_random_chain():
    rng = random.Random(5)
    chain = random_chain(rng, 5)
    f = Formula(random_cpctl(rng, 2))
    assert compare_with_fd(chain, f) == []


@pytest.mark.parametrize("seed", range(25))
def test_satisfaction_implies_literal_projection(seed):
    rng = random.Random(seed)
    chain = random_chain(rng, 8)
    f = Formula(random_cpctl(rng, 2))
    res = exact_check(chain, f)
    b = alit(f)
    for s in range(chain.n_states):
        if res.holds(s):
            assert eval_boolean(b, chain.labels[s])


def test_fragments_are_distinct_constants():
    assert CPCTL != SAFE_PCTL
