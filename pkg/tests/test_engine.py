import random

import numpy as np
import pytest

from cpctl.builtins import example1, gridworld, gridworld_formula
from cpctl.engine import (
    CONVERGED_TARGET_UNMET,
    EXIT_CODES,
    ITER_CAP,
    TARGET_MET,
    Bellman,
    EngineConfig,
    bellman_step,
    frontier_curve,
    max_achievable,
    run_vi,
    slater_check,
)
from cpctl.formula import Formula, parse_formula
from cpctl.model import make_mdp
from cpctl.reachability import initial_value_vector

from helpers import random_cpctl, random_mdp

EX1 = "P>=2/3 [ G P>=7/12 [ G !a ] ]"


def test_example1_target_met():
    m = example1()
    res = run_vi(m, parse_formula(EX1))
    assert res.status == TARGET_MET
    best = res.target_point()
    assert best.nu[1] >= 2 / 3 - 1e-12
    assert best.witness.delta == {m.action_index(0, "a4"): 1.0}


def test_example1_higher_threshold_unmet():
    res = run_vi(example1(), parse_formula("P>=0.7 [ G P>=7/12 [ G !a ] ]"))
    assert res.status == CONVERGED_TARGET_UNMET
    assert max(p.nu[1] for p in res.initial_points) == pytest.approx(2 / 3)


def test_zero_threshold_met_immediately():
    res = run_vi(example1(), parse_formula("P>=0 [ G a ]"))
    assert res.status == TARGET_MET and res.iterations == 0


def test_iteration_cap():
    res = run_vi(gridworld(1), parse_formula(gridworld_formula(0.99, 0.6)), EngineConfig(max_iters=2))
    assert res.status == ITER_CAP
    assert EXIT_CODES[res.status] == 3


def test_one_step_from_sinks():
    m = example1()
    f = parse_formula("P>=0.5 [ G !a ]")
    V1 = bellman_step(m, f, initial_value_vector(m, f))
    assert max(p.nu[0] for p in V1[m.state("s6")]) == pytest.approx(2 / 3)


def test_counter_cases():
    m = example1()
    f = parse_formula("P>=0.5 [ !a W b ]", fragment="SAFE_PCTL")
    with pytest.raises(ValueError):
        Bellman(m, f, EngineConfig())
    f = parse_formula("P>=0.5 [ !a W (!a & true) ]")
    op = Bellman(m, f, EngineConfig())
    sigma = np.array([[0.3]])
    _, nu_bad, _ = op.evaluate(m.state("s4"), sigma)  # labeled a: left operand false
    _, nu_good, used = op.evaluate(m.state("s1"), sigma)  # !a and goal true
    assert nu_bad[0, 0] == 0.0
    assert nu_good[0, 0] == 1.0 and not used[0]
    g = parse_formula("P>=0.5 [ G !a ]")
    op = Bellman(m, g, EngineConfig())
    _, nu_mid, used = op.evaluate(m.state("s1"), sigma)
    assert nu_mid[0, 0] == 0.3 and used[0]


def test_bellman_step_is_pure():
    m = example1()
    f = parse_formula(EX1)
    V0 = initial_value_vector(m, f)
    before = [[p.key() for p in V0[s]] for s in range(m.n_states)]
    V1 = bellman_step(m, f, V0)
    assert [[p.key() for p in V0[s]] for s in range(m.n_states)] == before
    again = bellman_step(m, f, V0)
    assert [[p.key() for p in V1[s]] for s in range(m.n_states)] == [[p.key() for p in again[s]] for s in range(m.n_states)]


@pytest.mark.parametrize("seed", range(8))
def test_iterates_are_monotone(seed):
    rng = random.Random(seed)
    m = random_mdp(rng, 8)
    f = Formula(random_cpctl(rng, 2))
    cfg = EngineConfig(epsilon=1e-3)
    V = initial_value_vector(m, f)
    for _ in range(6):
        W = bellman_step(m, f, V, cfg)
        for s in range(m.n_states):
            for p in V[s]:
                assert any(np.all(q.nu >= p.nu - cfg.epsilon) for q in W[s])
        V = W


def test_frontier_curve_example1():
    curve, res = max_achievable(example1(), parse_formula(EX1))
    outer = {round(y, 9) for _, y in curve}
    assert {round(0.5, 9), round(7 / 12, 9), round(2 / 3, 9)} <= outer
    xs = [x for x, _ in curve]
    ys = [y for _, y in curve]
    assert xs == sorted(xs) and ys == sorted(ys, reverse=True)


def test_safe_sink_curve_has_top_corner():
    m = make_mdp(["x"], "x", ["a"], {"x": ["a"]}, {})
    curve, _ = max_achievable(m, parse_formula("P>=0.5 [ G P>=0.5 [ G a ] ]"))
    assert (1.0, 1.0) in curve


def test_frontier_curve_handles_empty():
    assert frontier_curve([], 0, 0) == []


def test_slater_check_example1():
    rep = slater_check(example1(), parse_formula("P>=0.6 [ G P>=7/12 [ G !a ] ]"))
    assert rep.plausible and rep.thresholds == pytest.approx([7 / 12 + 0.01, 0.61])
    rep = slater_check(example1(), parse_formula(EX1))
    assert not rep.plausible


@pytest.mark.parametrize(
    "kwargs",
    [dict(epsilon=0), dict(max_iters=0), dict(w_mix=0), dict(max_points=0), dict(convergence_delta=1.0)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        EngineConfig(**kwargs)


def test_config_echo():
    assert EngineConfig().as_dict()["w_mix"] == 4


def test_repeat_runs_identical():
    m = gridworld(2)
    f = parse_formula(gridworld_formula())
    a = run_vi(m, f, ignore_target=True)
    b = run_vi(m, f, ignore_target=True)
    assert [p.key()[1:] for p in a.initial_points] == [p.key()[1:] for p in b.initial_points]
