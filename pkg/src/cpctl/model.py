"""Finite labelled MDPs, Markov chains, memoryless policies and the JSON model format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import sparse

SUM_TOLERANCE = 1e-9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Distribution:
    """Sparse distribution over state ids."""

    targets: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_pairs(cls, pairs) -> "Distribution":
        acc: dict[int, float] = {}
        for t, p in pairs:
            if p < 0:
                raise ModelError(f"negative probability {p}")
            if p > 0:
                acc[int(t)] = acc.get(int(t), 0.0) + float(p)
        keys = sorted(acc)
        return cls(np.array(keys, dtype=np.int64), np.array([acc[k] for k in keys], dtype=float))

    def support(self) -> frozenset[int]:
        return frozenset(int(t) for t in self.targets)

    def items(self):
        return zip(self.targets.tolist(), self.probs.tolist())

    def total(self) -> float:
        return float(self.probs.sum())


@dataclass
class Mdp:
    """A finite MDP with integer state ids.

    ``transitions[s][k]`` is the distribution of the ``k``-th action of state
    ``s``, named ``actions[s][k]``.  Rewards are stored and exported but play
    no part in synthesis.
    """

    state_names: list[str]
    actions: list[list[str]]
    transitions: list[list[Distribution]]
    initial: int
    atoms: list[str]
    labels: list[frozenset[str]]
    rewards: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.rewards:
            self.rewards = [0.0] * len(self.state_names)
        self.validate()
        self.index = {name: i for i, name in enumerate(self.state_names)}

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    def validate(self) -> None:
        n = len(self.state_names)
        if len(set(self.state_names)) != n:
            raise ModelError("duplicate state names")
        for what, seq in (("actions", self.actions), ("transitions", self.transitions), ("labels", self.labels)):
            if len(seq) != n:
                raise ModelError(f"{what}: expected {n} entries, got {len(seq)}")
        if not 0 <= self.initial < n:
            raise ModelError(f"initial state {self.initial} out of range")
        atoms = set(self.atoms)
        for s in range(n):
            name = self.state_names[s]
            if not self.actions[s]:
                raise ModelError(f"state {name!r} has no actions")
            if len(self.actions[s]) != len(self.transitions[s]):
                raise ModelError(f"state {name!r}: action names and distributions differ in length")
            if len(set(self.actions[s])) != len(self.actions[s]):
                raise ModelError(f"state {name!r}: duplicate action names")
            extra = set(self.labels[s]) - atoms
            if extra:
                raise ModelError(f"state {name!r}: labels {sorted(extra)} not declared in atoms")
            for a, dist in zip(self.actions[s], self.transitions[s]):
                if len(dist.targets) and (dist.targets.min() < 0 or dist.targets.max() >= n):
                    raise ModelError(f"state {name!r}, action {a!r}: successor out of range")
                if abs(dist.total() - 1.0) > SUM_TOLERANCE:
                    raise ModelError(
                        f"state {name!r}, action {a!r}: probabilities sum to {dist.total():.12g}, not 1"
                    )

    def successors(self, s: int) -> list[int]:
        out: set[int] = set()
        for dist in self.transitions[s]:
            out |= dist.support()
        return sorted(out)

    def action_index(self, s: int, name: str) -> int:
        return self.actions[s].index(name)

    def state(self, name: str) -> int:
        return self.index[name]


@dataclass
class MarkovChain:
    state_names: list[str]
    matrix: sparse.csr_matrix
    initial: int
    labels: list[frozenset[str]]

    def __post_init__(self):
        self.matrix = sparse.csr_matrix(self.matrix, dtype=float)
        rows = np.asarray(self.matrix.sum(axis=1)).ravel()
        bad = np.nonzero(np.abs(rows - 1.0) > SUM_TOLERANCE)[0]
        if len(bad):
            s = int(bad[0])
            raise ModelError(f"row of state {self.state_names[s]!r} sums to {rows[s]:.12g}")

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True)
class MemorylessPolicy:
    """``per_state[s]`` maps action indices of state ``s`` to probabilities."""

    per_state: tuple

    @classmethod
    def dirac(cls, mdp: Mdp, choice: dict[int, int] | None = None) -> "MemorylessPolicy":
        choice = choice or {}
        return cls(tuple({choice.get(s, 0): 1.0} for s in range(mdp.n_states)))

    @classmethod
    def uniform(cls, mdp: Mdp) -> "MemorylessPolicy":
        return cls(
            tuple({k: 1.0 / len(mdp.actions[s]) for k in range(len(mdp.actions[s]))} for s in range(mdp.n_states))
        )

    def validate(self, mdp: Mdp) -> None:
        if len(self.per_state) != mdp.n_states:
            raise ModelError("policy does not cover every state")
        for s, dist in enumerate(self.per_state):
            if any(k < 0 or k >= len(mdp.actions[s]) for k in dist):
                raise ModelError(f"policy uses an unknown action at {mdp.state_names[s]!r}")
            if any(p < 0 for p in dist.values()) or abs(sum(dist.values()) - 1.0) > SUM_TOLERANCE:
                raise ModelError(f"policy distribution at {mdp.state_names[s]!r} is not a distribution")


def induce_chain(mdp: Mdp, policy: MemorylessPolicy) -> MarkovChain:
    policy.validate(mdp)
    rows, cols, vals = [], [], []
    for s in range(mdp.n_states):
        for k, w in policy.per_state[s].items():
            if w == 0:
                continue
            dist = mdp.transitions[s][k]
            rows.extend([s] * len(dist.targets))
            cols.extend(dist.targets.tolist())
            vals.extend((w * dist.probs).tolist())
    n = mdp.n_states
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return MarkovChain(list(mdp.state_names), mat, mdp.initial, list(mdp.labels))


def chain_from_mdp(mdp: Mdp) -> MarkovChain:
    """View an MDP with a single action per state as a Markov chain."""
    if any(len(a) != 1 for a in mdp.actions):
        raise ModelError("model has states with several actions; a policy is required")
    return induce_chain(mdp, MemorylessPolicy.dirac(mdp))


@dataclass(frozen=True)
class History:
    states: tuple[int, ...]

    def __post_init__(self):
        if not self.states:
            raise ValueError("a history is nonempty")

    @property
    def last(self) -> int:
        return self.states[-1]

    def check(self, mdp: Mdp) -> None:
        for s, t in zip(self.states, self.states[1:]):
            if t not in mdp.successors(s):
                raise ModelError(f"{mdp.state_names[t]!r} is not a successor of {mdp.state_names[s]!r}")


# --------------------------------------------------------------------------
# JSON model files


def _prob(value, where: str) -> float:
    if isinstance(value, bool):
        raise ModelError(f"{where}: probability must be a number or 'a/b' string")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            pass
    raise ModelError(f"{where}: bad probability {value!r}")


def _field(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ModelError(f"{where}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise ModelError(f"{where}: field {key!r} has the wrong type")
    return value


def model_from_dict(data: dict) -> Mdp:
    atoms = [str(a) for a in _field(data, "atoms", list, "model")]
    initial = _field(data, "initial", str, "model")
    states = _field(data, "states", list, "model")
    names = [str(_field(st, "name", str, f"states[{i}]")) for i, st in enumerate(states)]
    index = {n: i for i, n in enumerate(names)}
    if len(index) != len(names):
        raise ModelError("states: duplicate state names")
    if initial not in index:
        raise ModelError(f"initial: unknown state {initial!r}")
    actions, transitions, labels, rewards = [], [], [], []
    for st, name in zip(states, names):
        where = f"state {name!r}"
        labels.append(frozenset(str(x) for x in st.get("labels", [])))
        reward = st.get("reward", 0.0)
        if isinstance(reward, bool) or not isinstance(reward, (int, float)):
            raise ModelError(f"{where}: field 'reward' has the wrong type")
        rewards.append(float(reward))
        acts = _field(st, "actions", list, where)
        names_here, dists = [], []
        for act in acts:
            aname = str(_field(act, "name", str, where))
            awhere = f"{where}, action {aname!r}"
            pairs = []
            for entry in _field(act, "to", list, awhere):
                if not isinstance(entry, list) or len(entry) != 2:
                    raise ModelError(f"{awhere}: 'to' entries are [state, probability] pairs")
                target, p = entry
                if target not in index:
                    raise ModelError(f"{awhere}: unknown successor {target!r}")
                pairs.append((index[target], _prob(p, awhere)))
            dist = Distribution.from_pairs(pairs)
            if abs(dist.total() - 1.0) > SUM_TOLERANCE:
                raise ModelError(f"{awhere}: probabilities sum to {dist.total():.12g}, not 1")
            names_here.append(aname)
            dists.append(dist)
        actions.append(names_here)
        transitions.append(dists)
    return Mdp(names, actions, transitions, index[initial], atoms, labels, rewards)


def model_to_dict(mdp: Mdp) -> dict:
    states = []
    for s, name in enumerate(mdp.state_names):
        acts = []
        for a, dist in zip(mdp.actions[s], mdp.transitions[s]):
            acts.append({"name": a, "to": [[mdp.state_names[t], p] for t, p in dist.items()]})
        states.append(
            {
                "name": name,
                "labels": sorted(mdp.labels[s]),
                "reward": mdp.rewards[s],
                "actions": acts,
            }
        )
    return {"atoms": list(mdp.atoms), "initial": mdp.state_names[mdp.initial], "states": states}


def load_model(raw: bytes | str) -> Mdp:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ModelError(f"not valid JSON: {exc}") from exc
    return model_from_dict(data)


def save_model(mdp: Mdp) -> bytes:
    return (json.dumps(model_to_dict(mdp), indent=2) + "\n").encode("utf-8")


def make_mdp(
    states: Sequence[str],
    initial: str,
    atoms: Sequence[str],
    labels: dict[str, Sequence[str]],
    actions: dict[str, dict[str, dict[str, float]]],
) -> Mdp:
    """Convenience constructor; states without actions get a self-loop ``stay``."""
    index = {n: i for i, n in enumerate(states)}
    acts, trans = [], []
    for name in states:
        spec = actions.get(name) or {"stay": {name: 1.0}}
        acts.append(list(spec))
        trans.append([Distribution.from_pairs((index[t], p) for t, p in d.items()) for d in spec.values()])
    return Mdp(
        list(states),
        acts,
        trans,
        index[initial],
        list(atoms),
        [frozenset(labels.get(n, ())) for n in states],
    )
