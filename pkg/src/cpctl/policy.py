"""Augmented states, valued policies, finite-memory policies and the compatibility certifier.

A finite-memory policy is extracted from the witness DAG of a frontier
point.  Its memory states come in three modes:

* ``RECURSIVE``: bound to one MDP state, plays the witness distribution and
  moves to the successor point's memory.
* ``ATOMIC``: plays the first action.  When bound to a state it carries the
  claimed values there; the unbound ``ATOMIC`` memory is the null memory,
  whose claim at ``s`` is the canonical valuation of all-zero counters.
* ``SAFE_LOCK``: absorbing; plays the stored safe action and claims counter
  value 1 for its flagged path formulas.

Certification works on the valued policy read off the product of the MDP and
the memory: an augmented state is ``(s, mu, nu)``.
"""
from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .formula import TIE_TOLERANCE, Formula
from .frontier import RECURSIVE as W_RECURSIVE
from .frontier import SAFE_SET, ZERO, FrontierPoint
from .model import Mdp

RECURSIVE = "RECURSIVE"
ATOMIC = "ATOMIC"
SAFE_LOCK = "SAFE_LOCK"

PRE_INITIAL = "PRE_INITIAL"
PATH_TOLERANCE = 1e-9
DEFAULT_EXPLORATION_CAP = 1_000_000


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentedState:
    base: object  # state id, or PRE_INITIAL
    mu: tuple = ()
    nu: tuple = ()

    def __post_init__(self):
        if self.base == PRE_INITIAL and (self.mu or self.nu):
            raise ValueError("the pre-initial marker carries no valuation")

    @classmethod
    def of(cls, s: int, mu, nu) -> "AugmentedState":
        return cls(int(s), tuple(int(b) for b in mu), tuple(float(x) for x in nu))


# --------------------------------------------------------------------------
# finite-memory policies


@dataclass(frozen=True)
class MemoryState:
    id: int
    mode: str
    state: int | None = None  # bound state; None for lock and null memories
    mu: tuple | None = None
    nu: tuple | None = None
    flags: tuple = ()


@dataclass
class FiniteMemoryPolicy:
    mdp: Mdp
    formula: Formula
    memory: list
    action_rule: dict  # (s, m) -> {action index: prob}
    update: dict  # (s, m, s') -> m'
    initial_memory: int

    def act(self, s: int, m: int) -> dict:
        try:
            return self.action_rule[(s, m)]
        except KeyError:
            raise PolicyError(f"no action rule for state {self.mdp.state_names[s]!r}, memory {m}") from None

    def next_memory(self, s: int, m: int, t: int) -> int:
        try:
            return self.update[(s, m, t)]
        except KeyError:
            raise PolicyError(
                f"no memory update for {self.mdp.state_names[s]!r} -> {self.mdp.state_names[t]!r}, memory {m}"
            ) from None

    def claim(self, s: int, m: int) -> tuple[tuple, tuple]:
        """The (mu, nu) this memory promises at state ``s``."""
        mem = self.memory[m]
        f = self.formula
        if mem.state is not None:
            if mem.state != s:
                raise PolicyError(f"memory {m} is bound to another state")
            return mem.mu, mem.nu
        nu = np.zeros(f.pf)
        if mem.mode == SAFE_LOCK:
            nu[list(mem.flags)] = 1.0
        mu = f.canonical_valuation(self.mdp.labels[s], nu)
        return tuple(int(b) for b in mu), tuple(float(x) for x in nu)

    @property
    def initial_claim(self) -> tuple[tuple, tuple]:
        return self.claim(self.mdp.initial, self.initial_memory)

    def reachable_pairs(self) -> list[tuple[int, int]]:
        """(state, memory) pairs reachable from the initial pair, in BFS order."""
        start = (self.mdp.initial, self.initial_memory)
        seen = {start}
        order = [start]
        queue = deque([start])
        while queue:
            s, m = queue.popleft()
            for a, w in self.act(s, m).items():
                if w <= 0:
                    continue
                for t in self.mdp.transitions[s][a].targets.tolist():
                    nxt = (t, self.next_memory(s, m, t))
                    if nxt not in seen:
                        seen.add(nxt)
                        order.append(nxt)
                        queue.append(nxt)
        return order

    def check_locks(self) -> list[str]:
        """SAFE_LOCK memories must be absorbing and must never leave their safe set."""
        problems = []
        pairs = set(self.reachable_pairs())
        for (s, m) in pairs:
            if self.memory[m].mode != SAFE_LOCK:
                continue
            for a in self.act(s, m):
                for t in self.mdp.transitions[s][a].targets.tolist():
                    if self.next_memory(s, m, t) != m:
                        problems.append(f"lock {m} changes memory at {self.mdp.state_names[s]!r}")
        return problems

    # JSON ------------------------------------------------------------------
    def to_dict(self) -> dict:
        names = self.mdp.state_names
        mems = []
        for mem in self.memory:
            entry = {"id": mem.id, "mode": mem.mode}
            if mem.state is not None:
                entry.update(state=names[mem.state], mu=list(mem.mu), nu=list(mem.nu))
            if mem.mode == SAFE_LOCK:
                entry["flags"] = list(mem.flags)
            mems.append(entry)
        actions = [
            {
                "state": names[s],
                "memory": m,
                "dist": {self.mdp.actions[s][a]: p for a, p in sorted(d.items())},
            }
            for (s, m), d in sorted(self.action_rule.items())
        ]
        updates = [
            {"state": names[s], "memory": m, "next": names[t], "to": to}
            for (s, m, t), to in sorted(self.update.items())
        ]
        mu0, nu0 = self.initial_claim
        return {
            "format": "cpctl-policy/1",
            "formula": str(self.formula),
            "initial_state": names[self.mdp.initial],
            "initial_memory": self.initial_memory,
            "achieved": {"mu": list(mu0), "nu": list(nu0)},
            "memory": mems,
            "actions": actions,
            "updates": updates,
        }

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=2) + "\n").encode("utf-8")

    @classmethod
    def from_dict(cls, data: dict, mdp: Mdp, formula: Formula) -> "FiniteMemoryPolicy":
        try:
            idx = mdp.index
            memory = []
            for k, entry in enumerate(data["memory"]):
                if entry["id"] != k:
                    raise PolicyError("memory ids must be 0..n-1 in order")
                state = idx[entry["state"]] if "state" in entry else None
                memory.append(
                    MemoryState(
                        k,
                        entry["mode"],
                        state,
                        tuple(int(b) for b in entry["mu"]) if state is not None else None,
                        tuple(float(x) for x in entry["nu"]) if state is not None else None,
                        tuple(int(j) for j in entry.get("flags", ())),
                    )
                )
            rule = {}
            for entry in data["actions"]:
                s = idx[entry["state"]]
                rule[(s, int(entry["memory"]))] = {
                    mdp.action_index(s, a): float(p) for a, p in entry["dist"].items()
                }
            update = {}
            for entry in data["updates"]:
                update[(idx[entry["state"]], int(entry["memory"]), idx[entry["next"]])] = int(entry["to"])
            if data.get("initial_state", mdp.state_names[mdp.initial]) != mdp.state_names[mdp.initial]:
                raise PolicyError("policy initial state differs from the model's")
            return cls(mdp, formula, memory, rule, update, int(data["initial_memory"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, PolicyError):
                raise
            raise PolicyError(f"malformed policy file: {exc!r}") from exc

    @classmethod
    def from_json(cls, raw: bytes | str, mdp: Mdp, formula: Formula) -> "FiniteMemoryPolicy":
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise PolicyError(f"policy file is not valid JSON: {exc}") from exc
        return cls.from_dict(data, mdp, formula)


def extract_policy(mdp: Mdp, f: Formula, point: FrontierPoint) -> FiniteMemoryPolicy:
    """Finite-memory policy realising ``point`` (a frontier point at the initial state)."""
    if point.state != mdp.initial:
        raise PolicyError("the point does not belong to the initial state")
    memory: list[MemoryState] = []
    keys: dict = {}
    lock_actions: dict = {}

    def memory_for(p: FrontierPoint | None) -> int:
        w = None if p is None else p.witness
        if p is not None and w is None:
            raise PolicyError(f"point {p!r} has no witness")
        if p is None or w.kind == ZERO:
            key = ("null",)
        elif w.kind == SAFE_SET:
            key = ("lock", tuple(sorted(w.flags)))
            lock_actions.setdefault(key, {}).update(w.safe_actions)
        else:
            key = ("point", p.uid)
        if key not in keys:
            k = len(memory)
            keys[key] = k
            if key[0] == "null":
                memory.append(MemoryState(k, ATOMIC))
            elif key[0] == "lock":
                memory.append(MemoryState(k, SAFE_LOCK, flags=key[1]))
            else:
                mode = RECURSIVE if w.kind == W_RECURSIVE else ATOMIC
                memory.append(
                    MemoryState(k, mode, p.state, tuple(int(b) for b in p.mu), tuple(float(x) for x in p.nu))
                )
                points[k] = p
        return keys[key]

    points: dict[int, FrontierPoint] = {}
    m0 = memory_for(point)
    rule: dict = {}
    update: dict = {}
    queue = deque([(mdp.initial, m0)])
    seen = {(mdp.initial, m0)}
    while queue:
        s, m = queue.popleft()
        mem = memory[m]
        if mem.mode == RECURSIVE:
            w = points[m].witness
            dist = {int(a): float(p) for a, p in w.delta.items() if p > 0}
        elif mem.mode == SAFE_LOCK:
            acts = lock_actions[("lock", mem.flags)]
            if s not in acts:
                raise PolicyError(f"safe lock {mem.flags} reached {mdp.state_names[s]!r} outside its safe set")
            dist = {acts[s]: 1.0}
        else:
            dist = {0: 1.0}
        rule[(s, m)] = dist
        for a in dist:
            for t in mdp.transitions[s][a].targets.tolist():
                if mem.mode == RECURSIVE:
                    succ = points[m].witness.successors
                    if t not in succ:
                        raise PolicyError(f"witness of memory {m} lacks successor {mdp.state_names[t]!r}")
                    nxt = memory_for(succ[t])
                elif mem.mode == SAFE_LOCK:
                    nxt = m
                else:
                    nxt = memory_for(None)
                update[(s, m, t)] = nxt
                if (t, nxt) not in seen:
                    seen.add((t, nxt))
                    queue.append((t, nxt))
    return FiniteMemoryPolicy(mdp, f, memory, rule, update, m0)


# --------------------------------------------------------------------------
# valued policies


@dataclass
class ValuedPolicy:
    """Theta and Delta on the reachable augmented states, keyed by (s, mu, nu)."""

    initial: AugmentedState
    delta: dict  # AugmentedState -> {action index: prob}
    theta: dict  # AugmentedState -> {successor state: AugmentedState}

    def copy(self) -> "ValuedPolicy":
        return ValuedPolicy(self.initial, dict(self.delta), {k: dict(v) for k, v in self.theta.items()})


def to_valued_policy(fm: FiniteMemoryPolicy) -> ValuedPolicy:
    """Read the valued policy off the reachable product; the first pair with a given label wins."""
    labels = {}
    for s, m in fm.reachable_pairs():
        labels[(s, m)] = AugmentedState.of(s, *fm.claim(s, m))
    delta, theta = {}, {}
    for (s, m), lab in labels.items():
        if lab in delta:
            continue
        dist = fm.act(s, m)
        delta[lab] = dict(dist)
        th = {}
        for a in dist:
            for t in fm.mdp.transitions[s][a].targets.tolist():
                th[t] = labels[(t, fm.next_memory(s, m, t))]
        theta[lab] = th
    initial = labels[(fm.mdp.initial, fm.initial_memory)]
    return ValuedPolicy(initial, delta, theta)


def project_policy(vp: ValuedPolicy, mdp: Mdp):
    """History-dependent policy on the original MDP obtained by replaying Theta."""

    def evaluate(history) -> dict:
        states = list(history)
        if not states:
            raise PolicyError("empty history")
        lab = vp.initial
        if states[0] != lab.base:
            raise PolicyError("history does not start at the initial state")
        for t in states[1:]:
            th = vp.theta.get(lab)
            if th is None or t not in th:
                raise PolicyError(f"history not realisable: no continuation to {mdp.state_names[t]!r}")
            lab = th[t]
        return dict(vp.delta[lab])

    return evaluate


# --------------------------------------------------------------------------
# certifier


@dataclass(frozen=True)
class Violation:
    clause: str
    state: str
    label: AugmentedState
    index: int
    slack: float  # rhs - lhs (negative when violated)

    def describe(self) -> str:
        return f"{self.clause} at {self.state} (index {self.index}, slack {self.slack:.3g})"


@dataclass
class CompatibilityReport:
    kind: str
    checked: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def reachable_labels(mdp: Mdp, vp: ValuedPolicy, cap: int = DEFAULT_EXPLORATION_CAP) -> list:
    if vp.initial not in vp.delta:
        raise PolicyError("the valued policy has no entry for its initial choice")
    order = [vp.initial]
    seen = {vp.initial}
    queue = deque(order)
    while queue:
        lab = queue.popleft()
        for t, nxt in vp.theta.get(lab, {}).items():
            if nxt not in seen:
                if len(seen) >= cap:
                    raise PolicyError(f"more than {cap} reachable augmented states")
                seen.add(nxt)
                order.append(nxt)
                queue.append(nxt)
    return order


def check_state_compatibility(mdp: Mdp, f: Formula, vp: ValuedPolicy, labels=None) -> CompatibilityReport:
    labels = reachable_labels(mdp, vp) if labels is None else labels
    out = []
    for lab in labels:
        s = lab.base
        name = mdp.state_names[s]
        mu, nu = lab.mu, lab.nu
        if len(mu) != f.sf or len(nu) != f.pf:
            out.append(Violation("dimension", name, lab, -1, -1.0))
            continue
        for k, nid in enumerate(f.state_subs):
            if not mu[k]:
                continue
            node = f.nodes[nid]
            if node.kind == "prob":
                j = f.nu_index[nid]
                slack = nu[j] - node.p
                if slack < -TIE_TOLERANCE:
                    out.append(Violation("state(i) threshold", name, lab, k, slack))
            elif node.kind == "and":
                a, b = (f.mu_index[c] for c in node.children)
                if not (mu[a] and mu[b]):
                    out.append(Violation("state(ii) conjunction", name, lab, k, -1.0))
            elif node.kind == "or":
                a, b = (f.mu_index[c] for c in node.children)
                if not (mu[a] or mu[b]):
                    out.append(Violation("state(iii) disjunction", name, lab, k, -1.0))
            else:
                labels_s = mdp.labels[s]
                truth = {
                    "atom": node.name in labels_s if node.kind == "atom" else None,
                    "neg": node.name not in labels_s if node.kind == "neg" else None,
                    "true": True,
                    "false": False,
                }[node.kind]
                if not truth:
                    out.append(Violation("state(iv) literal", name, lab, k, -1.0))
    return CompatibilityReport("state", len(labels), out)


def _successor_sum(mdp: Mdp, lab: AugmentedState, delta: dict, theta: dict, value):
    total = 0.0
    for a, w in delta.items():
        dist = mdp.transitions[lab.base][a]
        for t, p in dist.items():
            total += w * p * value(theta[t])
    return total


def check_path_compatibility(mdp: Mdp, f: Formula, vp: ValuedPolicy, labels=None) -> CompatibilityReport:
    """Counter inequalities between each reachable augmented state and its successors.

    Continuing W uses ``max(mu1 * sum, mu1 * mu2)``, general W uses
    ``max(mu1 * sum, mu2)`` and X uses the expected next-state bit of its
    operand.
    """
    labels = reachable_labels(mdp, vp) if labels is None else labels
    out = []
    for lab in labels:
        name = mdp.state_names[lab.base]
        delta = vp.delta.get(lab)
        theta = vp.theta.get(lab, {})
        if delta is None:
            out.append(Violation("path: missing action distribution", name, lab, -1, -1.0))
            continue
        if any(a < 0 or a >= len(mdp.actions[lab.base]) for a in delta) or abs(sum(delta.values()) - 1) > 1e-9:
            out.append(Violation("path: invalid action distribution", name, lab, -1, -1.0))
            continue
        missing = [
            t for a, w in delta.items() if w > 0 for t in mdp.transitions[lab.base][a].targets.tolist() if t not in theta
        ]
        if missing:
            out.append(Violation("path: missing successor choice", name, lab, missing[0], -1.0))
            continue
        for j in range(f.pf):
            path = f.nodes[f.path_subs[j]]
            left, right = f.path_operands(j)
            m1, m2 = lab.mu[f.mu_index[left]], lab.mu[f.mu_index[right]]
            if path.kind == "next":
                k1 = f.mu_index[left]
                rhs = _successor_sum(mdp, lab, delta, theta, lambda x: x.mu[k1])
                clause = "path X"
            else:
                total = _successor_sum(mdp, lab, delta, theta, lambda x: x.nu[j])
                if path.kind == "cwu":
                    rhs = max(m1 * total, m1 * m2)
                    clause = "path continuing-W"
                else:
                    rhs = max(m1 * total, m2)
                    clause = "path general-W"
            slack = rhs - lab.nu[j]
            if slack < -PATH_TOLERANCE:
                out.append(Violation(clause, name, lab, j, slack))
    return CompatibilityReport("path", len(labels), out)


class CertificationRefused(PolicyError):
    def __init__(self, violations: list):
        first = violations[0].describe() if violations else "no initial choice"
        super().__init__(f"certification refused: {len(violations)} violation(s); first: {first}")
        self.violations = violations


@dataclass
class Certificate:
    initial: AugmentedState
    states: list
    edges: list  # (from index, to index, probability)
    root_claimed: bool
    clause_counts: dict

    def bounds(self) -> list[float]:
        return list(self.initial.nu)

    def to_dict(self, mdp: Mdp, f: Formula) -> dict:
        return {
            "format": "cpctl-certificate/1",
            "formula": str(f),
            "initial": {"state": mdp.state_names[self.initial.base], "mu": list(self.initial.mu), "nu": list(self.initial.nu)},
            "root_claimed": self.root_claimed,
            "states": [
                {"id": i, "state": mdp.state_names[lab.base], "mu": list(lab.mu), "nu": list(lab.nu)}
                for i, lab in enumerate(self.states)
            ],
            "edges": [[a, b, p] for a, b, p in self.edges],
            "clauses": self.clause_counts,
        }


def certify_coherence(mdp: Mdp, f: Formula, vp: ValuedPolicy) -> Certificate:
    """Check both compatibility conditions on every reachable augmented state.

    Raises :class:`CertificationRefused` listing the located violations when
    any clause fails.
    """
    labels = reachable_labels(mdp, vp)
    st = check_state_compatibility(mdp, f, vp, labels)
    pa = check_path_compatibility(mdp, f, vp, labels)
    if st.violations or pa.violations:
        raise CertificationRefused(st.violations + pa.violations)
    index = {lab: i for i, lab in enumerate(labels)}
    edges = []
    for lab in labels:
        acc: dict = {}
        for a, w in vp.delta[lab].items():
            for t, p in mdp.transitions[lab.base][a].items():
                k = index[vp.theta[lab][t]]
                acc[k] = acc.get(k, 0.0) + w * p
        edges.extend((index[lab], k, p) for k, p in sorted(acc.items()))
    root = bool(vp.initial.mu[f.mu_index[f.root]])
    counts = {"state": st.checked * f.sf, "path": pa.checked * f.pf}
    return Certificate(vp.initial, labels, edges, root, counts)


# --------------------------------------------------------------------------
# mutation testing


def _rekey(vp: ValuedPolicy, old: AugmentedState, new: AugmentedState) -> ValuedPolicy:
    out = ValuedPolicy(new if vp.initial == old else vp.initial, {}, {})
    for lab, d in vp.delta.items():
        out.delta[new if lab == old else lab] = d
    for lab, th in vp.theta.items():
        out.theta[new if lab == old else lab] = {t: (new if x == old else x) for t, x in th.items()}
    return out


def mutation_candidates(f: Formula, lab: AugmentedState) -> list[tuple[str, int]]:
    """Single-entry corruptions of a tight label that always break a clause."""
    out = [("mu", k) for k in range(f.sf) if lab.mu[k] == 0]
    for j in range(f.pf):
        left, right = f.path_operands(j)
        if lab.nu[j] <= 0.75 and not (lab.mu[f.mu_index[left]] and lab.mu[f.mu_index[right]]):
            out.append(("nu", j))
    return out


def mutate(mdp: Mdp, f: Formula, vp: ValuedPolicy, rng: random.Random):
    """Corrupt one reachable augmented state (a valuation bit or a counter) and re-key it everywhere.

    Returns the mutated policy and a description, or None when no eligible
    entry exists.
    """
    labels = reachable_labels(mdp, vp)
    options = [(lab, c) for lab in labels for c in mutation_candidates(f, lab)]
    rng.shuffle(options)
    for lab, (what, k) in options:
        if what == "mu":
            mu = list(lab.mu)
            mu[k] = 1
            new = AugmentedState(lab.base, tuple(mu), lab.nu)
        else:
            nu = list(lab.nu)
            nu[k] = nu[k] + 0.25
            new = AugmentedState(lab.base, lab.mu, tuple(nu))
        if new in vp.delta:
            continue
        return _rekey(vp, lab, new), (what, k, mdp.state_names[lab.base])
    return None
