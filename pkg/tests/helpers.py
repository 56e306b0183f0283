"""Random models and formulas shared by the property tests."""
from __future__ import annotations

import random

from cpctl.formula import (
    FALSE,
    TRUE,
    And,
    Atom,
    ContinuingWeakUntil,
    NegAtom,
    ProbGeq,
)
from cpctl.model import Distribution, MarkovChain, Mdp, chain_from_mdp

ATOMS = ("a", "b", "c")
THRESHOLDS = (0.0, 0.25, 0.5, 0.7, 0.9, 1.0)


def random_distribution(rng: random.Random, n: int, max_support: int = 3) -> Distribution:
    k = rng.randint(1, min(max_support, n))
    targets = rng.sample(range(n), k)
    # dyadic weights keep some probabilities exact, which exercises ties
    weights = [rng.choice((1, 1, 2, 3, 4)) for _ in targets]
    total = sum(weights)
    return Distribution.from_pairs((t, w / total) for t, w in zip(targets, weights))


def random_mdp(rng: random.Random, max_states: int = 12, max_actions: int = 3, atoms=ATOMS) -> Mdp:
    n = rng.randint(1, max_states)
    names = [f"q{i}" for i in range(n)]
    actions, transitions, labels = [], [], []
    for s in range(n):
        k = rng.randint(1, max_actions)
        actions.append([f"m{i}" for i in range(k)])
        transitions.append([random_distribution(rng, n) for _ in range(k)])
        labels.append(frozenset(a for a in atoms if rng.random() < 0.5))
    return Mdp(names, actions, transitions, 0, list(atoms), labels)


def random_chain(rng: random.Random, max_states: int = 12, atoms=ATOMS) -> MarkovChain:
    return chain_from_mdp(random_mdp(rng, max_states, 1, atoms))


def random_literal(rng: random.Random, atoms=ATOMS):
    r = rng.random()
    if r < 0.06:
        return TRUE
    a = rng.choice(atoms)
    return Atom(a) if r < 0.55 else NegAtom(a)


def random_state(rng: random.Random, depth: int, atoms=ATOMS):
    """A random CPCTL state formula with at most ``depth`` nested probability operators."""
    r = rng.random()
    if depth <= 0 or r < 0.3:
        return random_literal(rng, atoms)
    if r < 0.55:
        return And(random_state(rng, depth, atoms), random_state(rng, depth - 1, atoms))
    return ProbGeq(rng.choice(THRESHOLDS), random_path(rng, depth - 1, atoms))


def random_path(rng: random.Random, depth: int, atoms=ATOMS) -> ContinuingWeakUntil:
    left = random_state(rng, depth, atoms)
    goal = FALSE if rng.random() < 0.3 else random_state(rng, depth, atoms)
    return ContinuingWeakUntil(left, goal)


def random_cpctl(rng: random.Random, depth: int = 2, atoms=ATOMS):
    """A random CPCTL formula whose root is a ``P>=`` node."""
    return ProbGeq(rng.choice(THRESHOLDS), random_path(rng, depth, atoms))


def random_boolean(rng: random.Random, atoms=ATOMS):
    b = random_literal(rng, atoms)
    if rng.random() < 0.4:
        b = And(b, random_literal(rng, atoms))
    return b
