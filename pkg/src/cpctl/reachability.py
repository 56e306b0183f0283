"""Qualitative precomputation: almost-sure invariance sets and the initial value vector."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .formula import Formula, TRUE, conjoin, eval_boolean, literal_projection
from .model import Mdp


@dataclass(frozen=True)
class SafeSet:
    """Greatest set inside ``[[b]]`` that some memoryless policy never leaves."""

    states: frozenset
    safe_action: dict  # state -> action index whose support stays in ``states``

    def __contains__(self, s: int) -> bool:
        return s in self.states


def almost_sure_globally(mdp: Mdp, b) -> SafeSet:
    """Greatest fixpoint of "inside [[b]] and some action keeps all mass inside".

    A worklist removes a state once none of its actions stays inside the
    current set; predecessors of removed states are rechecked.  The safe
    action is the lowest-indexed action whose support stays inside.
    """
    n = mdp.n_states
    inside = np.array([eval_boolean(b, mdp.labels[s]) for s in range(n)], dtype=bool)
    supports = [[d.support() for d in mdp.transitions[s]] for s in range(n)]
    preds: list[set[int]] = [set() for _ in range(n)]
    for s in range(n):
        for sup in supports[s]:
            for t in sup:
                preds[t].add(s)

    def has_safe_action(s: int) -> bool:
        return any(all(inside[t] for t in sup) for sup in supports[s])

    work = [s for s in range(n - 1, -1, -1) if inside[s]]
    queued = set(work)
    while work:
        s = work.pop()
        queued.discard(s)
        if inside[s] and not has_safe_action(s):
            inside[s] = False
            for p in sorted(preds[s], reverse=True):
                if inside[p] and p not in queued:
                    work.append(p)
                    queued.add(p)
    states = frozenset(int(s) for s in np.nonzero(inside)[0])
    safe_action = {}
    for s in sorted(states):
        for k, sup in enumerate(supports[s]):
            if sup <= states:
                safe_action[s] = k
                break
    return SafeSet(states, safe_action)


def continuation_projection(f: Formula, j: int):
    """Boolean formula that must hold forever for counter ``j`` to be 1 via a safe lock.

    This is the literal projection of the left operand of path formula ``j``.
    """
    left, _ = f.path_operands(j)
    return literal_projection(f.subtree(left))


def safe_sets_by_flags(mdp: Mdp, f: Formula) -> dict[frozenset, SafeSet]:
    """Safe set of the conjunction of projections, for every subset of counters."""
    projections = [continuation_projection(f, j) for j in range(f.pf)]
    out: dict[frozenset, SafeSet] = {}
    cache: dict = {}
    for size in range(1, f.pf + 1):
        for flags in combinations(range(f.pf), size):
            parts = []
            for j in flags:
                if projections[j] not in parts:
                    parts.append(projections[j])
            b = conjoin(parts) if parts else TRUE
            if b not in cache:
                cache[b] = almost_sure_globally(mdp, b)
            out[frozenset(flags)] = cache[b]
    return out


def initial_value_vector(mdp: Mdp, f: Formula, safe_sets: dict | None = None):
    """Per-state maximal points with counters in {0, 1}.

    A counter set to 1 is backed by a memoryless policy that keeps the
    conjunction of the flagged projections true forever; the witness stores
    that policy's actions.
    """
    from .frontier import FrontierPoint, ValueVector, WitnessRecord, prune_maximal

    if safe_sets is None:
        safe_sets = safe_sets_by_flags(mdp, f)
    per_state = []
    for s in range(mdp.n_states):
        pts = []
        zero = np.zeros(f.pf)
        pts.append(FrontierPoint(s, f.canonical_valuation(mdp.labels[s], zero), zero, WitnessRecord.zero()))
        for flags, safe in safe_sets.items():
            if s not in safe:
                continue
            nu = np.zeros(f.pf)
            nu[sorted(flags)] = 1.0
            mu = f.canonical_valuation(mdp.labels[s], nu)
            pts.append(FrontierPoint(s, mu, nu, WitnessRecord.safe_set(flags, safe.safe_action)))
        per_state.append(prune_maximal(pts))
    return ValueVector(per_state)

