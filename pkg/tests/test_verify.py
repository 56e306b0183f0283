import random

import numpy as np
import pytest
from scipy import sparse

from cpctl.builtins import example1, gridworld, gridworld_formula
from cpctl.engine import run_vi
from cpctl.formula import (
    SAFE_PCTL,
    FALSE,
    TRUE,
    And,
    ContinuingWeakUntil,
    Formula,
    NegAtom,
    ProbGeq,
    WeakUntil,
    literal_projection,
    parse_formula,
)
from cpctl.model import MemorylessPolicy, chain_from_mdp, induce_chain, make_mdp
from cpctl.policy import ATOMIC, FiniteMemoryPolicy, MemoryState, extract_policy
from cpctl.verify import (
    check_thm1_chain,
    compare_with_fd,
    exact_check,
    greedy_safety_policy,
    max_safety_vi,
    prob_until,
    product_chain,
    product_chain_check,
    simulate,
    simulate_chain,
    wilson,
)

from helpers import random_boolean, random_chain, random_cpctl, random_mdp, random_path

EX1 = "P>=2/3 [ G P>=7/12 [ G !a ] ]"


def pi(m, k):
    return induce_chain(m, MemorylessPolicy.dirac(m, {0: k}))


def test_example1_avoid_probability():
    m = example1()
    f = parse_formula(EX1)
    res = exact_check(pi(m, 0), f)
    assert res.probs[0, 0] == pytest.approx(3 / 4, abs=1e-12)


def test_example1_outer_values():
    m = example1()
    f = parse_formula(EX1)
    assert exact_check(pi(m, 0), f).probs[0, 1] == pytest.approx(1 / 2, abs=1e-12)
    assert exact_check(pi(m, 1), f).probs[0, 1] == pytest.approx(2 / 3, abs=1e-12)


def test_example1_inner_annotations():
    m = example1()
    res = exact_check(pi(m, 0), parse_formula(EX1))
    got = [res.probs[m.state(s), 0] for s in ("s1", "s6", "s2", "s3", "s7", "s8", "s4", "s5")]
    assert got == pytest.approx([3 / 4, 2 / 3, 1, 1 / 2, 1, 0, 0, 1], abs=1e-12)


def test_example1_inner_satisfaction_set():
    m = example1()
    f = parse_formula(EX1)
    res = exact_check(pi(m, 0), f)
    assert res.satisfying_states(f.prob_nodes[0]) == {"s0", "s1", "s2", "s5", "s6", "s7"}


def test_thm1_examples():
    assert check_thm1_chain(0.5, 0.0) is True
    assert check_thm1_chain(1 / 3, 0.0) is False


@pytest.mark.parametrize("eps", [0.0, 0.01, 0.1])
def test_thm1_closed_form(eps):
    # position 0 already needs c W (c & a) with probability 1/2: (1 - eps) * alpha >= 1/2
    for k in range(11):
        alpha = k / 10
        assert check_thm1_chain(alpha, eps) == ((1 - eps) * alpha >= 0.5 - 1e-12)


def test_until_by_hand():
    p = sparse.csr_matrix(np.array([[0.5, 0.25, 0.25], [0, 1, 0], [0, 0, 1.0]]))
    x = prob_until(p, np.array([True, False, False]), np.array([False, True, False]))
    assert x == pytest.approx([0.5, 1.0, 0.0])


def test_next_and_or_formulas():
    m = example1()
    f = parse_formula("P>=0.5 [ X !a ]", fragment=SAFE_PCTL)
    res = exact_check(pi(m, 0), f)
    assert res.probs[m.state("s6"), 0] == pytest.approx(2 / 3)
    assert res.probs[m.state("s3"), 0] == pytest.approx(1 / 2)


def test_check_result_dict():
    m = example1()
    d = exact_check(pi(m, 1), parse_formula(EX1)).to_dict(0)
    assert d["states"][0]["state"] == "s0"
    assert d["states"][0]["satisfied"] is True


@pytest.mark.parametrize("seed", range(30))
def test_fd_agrees(seed):
    rng = random.Random(seed)
    assert compare_with_fd(random_chain(rng, 10), Formula(random_cpctl(rng, 2))) == []


@pytest.mark.parametrize("seed", range(30))
def test_literal_projection_lemma(seed):
    rng = random.Random(1000 + seed)
    chain = random_chain(rng, 10)
    path = random_path(rng, 2)
    f = Formula(ProbGeq(0.0, path), SAFE_PCTL)
    g = Formula(ProbGeq(0.0, WeakUntil(literal_projection(path.left), And(path.left, path.goal))), SAFE_PCTL)
    a = exact_check(chain, f).probs[:, f.nu_index[f.root]] >= 1 - 1e-9
    b = exact_check(chain, g).probs[:, g.nu_index[g.root]] >= 1 - 1e-9
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_probabilities_in_unit_interval(seed):
    rng = random.Random(seed)
    chain = random_chain(rng, 12)
    f = Formula(random_cpctl(rng, 3))
    res = exact_check(chain, f)
    assert np.all(res.probs >= 0) and np.all(res.probs <= 1)


# max safety


def test_max_safety_example1():
    m = example1()
    v = max_safety_vi(m, NegAtom("a"))
    assert v[0] == pytest.approx(3 / 4, abs=1e-9)
    assert greedy_safety_policy(m, NegAtom("a")).per_state[0] == {m.action_index(0, "a1"): 1.0}


def test_max_safety_all_safe():
    m = example1()
    assert np.allclose(max_safety_vi(m, TRUE), 1.0)


def test_max_safety_gridworld_baseline():
    m = gridworld(1)
    v = max_safety_vi(m, NegAtom("d"))[m.initial]
    assert 0 < v < 1
    assert v == pytest.approx(0.8374715744404573, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_greedy_policy_attains_value(seed):
    rng = random.Random(seed)
    m = random_mdp(rng, 12)
    b = random_boolean(rng)
    v = max_safety_vi(m, b)
    chain = induce_chain(m, greedy_safety_policy(m, b))
    f = Formula(ProbGeq(0.0, ContinuingWeakUntil(b, FALSE)))
    assert exact_check(chain, f).probs[:, 0] == pytest.approx(v, abs=1e-9)


# product chains and simulation


def _example1_pi2():
    m = example1()
    f = parse_formula(EX1)
    res = run_vi(m, f)
    return m, f, extract_policy(m, f, res.target_point())


def test_product_chain_example1():
    m, f, fm = _example1_pi2()
    res = product_chain_check(m, fm, f)
    assert res.probs[0, 1] == pytest.approx(2 / 3, abs=1e-12)
    assert res.holds(0)


def test_product_chain_trivial_atomic():
    m = make_mdp(["x"], "x", ["a"], {}, {})
    f = parse_formula("P>=1 [ G true ]")
    fm = FiniteMemoryPolicy(m, f, [MemoryState(0, ATOMIC)], {(0, 0): {0: 1.0}}, {(0, 0, 0): 0}, 0)
    assert np.all(product_chain_check(m, fm, f).probs == 1.0)


def test_product_chain_size_cap():
    m, f, fm = _example1_pi2()
    with pytest.raises(ValueError):
        product_chain(m, fm, cap=2)


def test_simulate_always_safe_loop():
    m = make_mdp(["x"], "x", ["a"], {}, {})
    f = parse_formula("P>=1 [ G !a ]")
    est = simulate_chain(chain_from_mdp(m), f, 1000, 10)[0]
    assert (est.lower, est.upper) == (1.0, 1.0)


def test_simulate_example1():
    m, f, fm = _example1_pi2()
    for e in simulate(m, fm, f, 100_000, 100, seed=42):
        assert e.contains(2 / 3)


def test_simulate_from_unsafe_start():
    m = make_mdp(["x"], "x", ["d"], {"x": ["d"]}, {})
    f = parse_formula("P>=0.5 [ !d W (!d & G) ]")
    est = simulate_chain(chain_from_mdp(m), f, 500, 10)[0]
    assert (est.lower, est.upper) == (0.0, 0.0)


def test_simulate_is_seed_deterministic_and_thread_independent():
    m, f, fm = _example1_pi2()
    a = simulate(m, fm, f, 30_000, 50, seed=7)
    b = simulate(m, fm, f, 30_000, 50, seed=7, threads=3)
    assert [e.to_dict() for e in a] == [e.to_dict() for e in b]


def test_simulate_interval_coverage():
    m = make_mdp(["s", "t", "u"], "s", ["a"], {"u": ["a"]}, {"s": {"go": {"s": 0.5, "t": 0.2, "u": 0.3}}})
    chain = chain_from_mdp(m)
    f = parse_formula("P>=0.5 [ G !a ]")
    exact = exact_check(chain, f).probs[0, 0]
    hits = sum(simulate_chain(chain, f, 1000, 200, seed)[0].contains(exact) for seed in range(1000))
    assert hits >= 990


def test_simulate_rejects_bad_arguments():
    m = make_mdp(["x"], "x", [], {}, {})
    with pytest.raises(ValueError):
        simulate_chain(chain_from_mdp(m), parse_formula("P>=1 [ G true ]"), 0, 10)


def test_wilson_interval():
    lo, hi = wilson(50, 100)
    assert lo < 0.5 < hi
    assert wilson(0, 0) == (0.0, 1.0)
    assert wilson(100, 100)[1] == 1.0


def test_gridworld_policy_dominates_claim():
    m = gridworld(1)
    f = parse_formula(gridworld_formula())
    res = run_vi(m, f, ignore_target=True)
    pts = res.initial_points
    knee = pts[len(pts) // 2]
    exact = product_chain_check(m, extract_policy(m, f, knee), f).probs[0]
    assert np.all(exact >= knee.nu - 1e-9)
