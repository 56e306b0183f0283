"""Finite Pareto point sets of (valuation, counter) pairs.

A frontier is kept as a finite list of mutually non-dominated points.  Each
point carries a witness telling how it was obtained, which is all the policy
module needs to rebuild a finite-memory policy realising it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ZERO = "ZERO"
SAFE_SET = "SAFE_SET"
TERMINAL_ONE = "TERMINAL_ONE"
RECURSIVE = "RECURSIVE"


@dataclass(frozen=True)
class WitnessRecord:
    """How a frontier point is realised.

    ZERO and TERMINAL_ONE points need nothing from the future (any action,
    then no obligations).  SAFE_SET points follow ``safe_actions`` forever.
    RECURSIVE points play ``delta`` and hand over to ``successors[s']`` when
    the next state is ``s'``.
    """

    kind: str
    delta: dict | None = None  # action index -> probability
    successors: dict | None = None  # state -> FrontierPoint of the previous iterate
    flags: frozenset | None = None
    safe_actions: dict | None = None  # state -> action index

    @classmethod
    def zero(cls) -> "WitnessRecord":
        return cls(ZERO)

    @classmethod
    def terminal(cls) -> "WitnessRecord":
        return cls(TERMINAL_ONE)

    @classmethod
    def safe_set(cls, flags, safe_actions: dict) -> "WitnessRecord":
        return cls(SAFE_SET, flags=frozenset(flags), safe_actions=dict(safe_actions))

    @classmethod
    def recursive(cls, delta: dict, successors: dict) -> "WitnessRecord":
        return cls(RECURSIVE, delta=dict(delta), successors=dict(successors))

    def __post_init__(self):
        if self.kind == RECURSIVE:
            if self.delta is None or self.successors is None:
                raise ValueError("recursive witness needs delta and successors")
        elif self.kind == SAFE_SET:
            if self.flags is None or self.safe_actions is None:
                raise ValueError("safe-set witness needs flags and safe actions")
        elif self.kind not in (ZERO, TERMINAL_ONE):
            raise ValueError(f"unknown witness kind {self.kind!r}")


class FrontierPoint:
    """A realisable (mu, nu) pair at one state; compared by identity."""

    __slots__ = ("state", "mu", "nu", "witness", "uid")
    _next_uid = 0

    def __init__(self, state: int, mu, nu, witness: WitnessRecord | None = None):
        self.state = int(state)
        self.mu = np.asarray(mu, dtype=np.int8)
        self.nu = np.asarray(nu, dtype=float)
        self.witness = witness
        self.uid = FrontierPoint._next_uid
        FrontierPoint._next_uid += 1

    def __repr__(self) -> str:
        nu = ", ".join(f"{x:.6g}" for x in self.nu)
        mu = "".join(str(int(b)) for b in self.mu)
        kind = self.witness.kind if self.witness else None
        return f"FrontierPoint(s={self.state}, mu={mu}, nu=({nu}), {kind})"

    def key(self) -> tuple:
        return (self.state, tuple(int(b) for b in self.mu), tuple(float(x) for x in self.nu))


@dataclass
class ValueVector:
    per_state: list
    _cache: dict = field(default_factory=dict, repr=False)

    def __getitem__(self, s: int) -> list:
        return self.per_state[s]

    def __len__(self) -> int:
        return len(self.per_state)

    def nu_array(self, s: int) -> np.ndarray:
        arr = self._cache.get(s)
        if arr is None:
            pts = self.per_state[s]
            arr = np.array([p.nu for p in pts], dtype=float).reshape(len(pts), -1)
            self._cache[s] = arr
        return arr

    def sizes(self) -> list[int]:
        return [len(p) for p in self.per_state]


def dominates(p, q) -> bool:
    """True when ``q <= p`` in every valuation bit and every counter."""
    if len(p.mu) != len(q.mu) or len(p.nu) != len(q.nu):
        raise ValueError("points of different dimensions")
    return bool(np.all(q.mu <= p.mu) and np.all(q.nu <= p.nu))


# --------------------------------------------------------------------------
# array-level primitives


def pareto_indices(values: np.ndarray) -> np.ndarray:
    """Indices of the non-dominated rows; of exact duplicates the first is kept.

    Output is sorted by position in the input.
    """
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    d = values.shape[1]
    if d == 0:
        return np.zeros(1, dtype=np.int64)
    # stable descending lexicographic order: dominators always come first
    order = np.lexsort(tuple(-values[:, k] for k in reversed(range(d))))
    if d == 1:
        return order[:1]
    if d == 2:
        ys = values[order, 1]
        best = np.maximum.accumulate(ys)
        keep = np.ones(n, dtype=bool)
        keep[1:] = ys[1:] > best[:-1]
        return np.sort(order[keep])
    kept: list[int] = []
    kept_vals = np.empty((0, d))
    for i in order:
        row = values[i]
        if len(kept) and np.any(np.all(kept_vals >= row, axis=1)):
            continue
        kept.append(int(i))
        kept_vals = np.vstack([kept_vals, row])
    return np.sort(np.array(kept, dtype=np.int64))


def coordinate_maxima(values: np.ndarray, candidates: Sequence[int]) -> list[int]:
    """For each coordinate, the first candidate attaining its maximum."""
    out: list[int] = []
    cand = np.asarray(candidates, dtype=np.int64)
    if len(cand) == 0:
        return out
    sub = values[cand]
    for k in range(values.shape[1]):
        i = int(cand[int(np.argmax(sub[:, k]))])
        if i not in out:
            out.append(i)
    return out


def thin_indices(values: np.ndarray, order: Sequence[int], epsilon: float, extra=None) -> list[int]:
    """Greedy epsilon-thinning following ``order``.

    A row is dropped when an already kept row is at least as large minus
    ``epsilon`` in every coordinate (and, if ``extra`` is given, at least as
    large in every ``extra`` column, exactly).
    """
    kept: list[int] = []
    if epsilon <= 0:
        return list(order)
    for i in order:
        if kept:
            kv = values[kept]
            ok = np.all(kv >= values[i] - epsilon, axis=1)
            if extra is not None:
                ok &= np.all(extra[kept] >= extra[i], axis=1)
            if np.any(ok):
                continue
        kept.append(int(i))
    return kept


def cap_indices(values: np.ndarray, order: Sequence[int], cap: int) -> list[int]:
    """Keep at most ``cap`` rows: coordinate maxima first, then farthest-point sampling in L-inf."""
    order = list(order)
    if cap is None or len(order) <= cap:
        return order
    chosen = coordinate_maxima(values, order)[:cap]
    rest = [i for i in order if i not in chosen]
    if not chosen:
        chosen = [rest.pop(0)]
    rest_arr = np.array(rest, dtype=np.int64)
    dist = np.full(len(rest), np.inf)
    for c in chosen:
        dist = np.minimum(dist, np.max(np.abs(values[rest_arr] - values[c]), axis=1))
    alive = np.ones(len(rest), dtype=bool)
    while len(chosen) < cap and alive.any():
        masked = np.where(alive, dist, -1.0)
        k = int(np.argmax(masked))
        chosen.append(int(rest_arr[k]))
        alive[k] = False
        dist = np.minimum(dist, np.max(np.abs(values[rest_arr] - values[rest_arr[k]]), axis=1))
    position = {i: n for n, i in enumerate(order)}
    return sorted(chosen, key=position.__getitem__)


def reduce_indices(values: np.ndarray, epsilon: float = 0.0, cap: int | None = None, n_old: int = 0) -> list[int]:
    """Maximal elements, then thinning, then the cap.

    Rows ``[0, n_old)`` are treated as already-present points: after the
    per-coordinate maxima they take precedence over newer rows, which are
    visited in descending lexicographic order.
    """
    values = np.asarray(values, dtype=float)
    maximal = pareto_indices(values)
    if len(maximal) <= 1:
        return maximal.tolist()
    first = coordinate_maxima(values, maximal)
    old = [int(i) for i in maximal if i < n_old and i not in first]
    new = [int(i) for i in maximal if i >= n_old and i not in first]
    if new:
        sub = values[new]
        lex = np.lexsort(tuple(-sub[:, k] for k in reversed(range(sub.shape[1]))))
        new = [new[k] for k in lex]
    order = first + old + new
    kept = thin_indices(values, order, epsilon)
    return cap_indices(values, kept, cap)


def prune_maximal(points: Sequence, epsilon: float = 0.0, cap: int | None = None, n_old: int = 0) -> list:
    """Non-dominated subset of ``points`` (valuations and counters), thinned and capped."""
    points = list(points)
    if not points:
        return []
    mu = np.array([p.mu for p in points], dtype=float).reshape(len(points), -1)
    nu = np.array([p.nu for p in points], dtype=float).reshape(len(points), -1)
    values = np.hstack([mu, nu])
    maximal = pareto_indices(values)
    first = coordinate_maxima(nu, maximal) if nu.shape[1] else []
    old = [int(i) for i in maximal if i < n_old and i not in first]
    new = [int(i) for i in maximal if i >= n_old and i not in first]
    if new:
        sub = nu[new]
        lex = np.lexsort(tuple(-sub[:, k] for k in reversed(range(sub.shape[1])))) if sub.shape[1] else range(len(new))
        new = [new[k] for k in lex]
    order = first + old + new
    kept = thin_indices(nu, order, epsilon, extra=mu)
    kept = cap_indices(nu, kept, cap) if nu.shape[1] else kept
    return [points[i] for i in sorted(kept)]


def improvement(new: np.ndarray, old: np.ndarray) -> float:
    """How far rows of ``new`` stick out above the set ``old`` (0 when covered)."""
    if len(new) == 0:
        return 0.0
    if len(old) == 0:
        return float(np.max(new)) if new.size else 0.0
    gaps = np.max(np.maximum(new[:, None, :] - old[None, :, :], 0.0), axis=2)
    return float(np.max(np.min(gaps, axis=1)))


# --------------------------------------------------------------------------
# mixing


@dataclass
class Candidate:
    """An action distribution plus one successor point per successor state."""

    delta: dict
    assignment: dict
    nu: np.ndarray | None = None
    mu: np.ndarray | None = None


def mix_weights(w_mix: int) -> list[float]:
    return [k / w_mix for k in range(w_mix + 1)]


def mix_candidates(
    cands: Sequence[Candidate],
    w_mix: int,
    evaluate: Callable[[dict, dict], tuple],
) -> list[Candidate]:
    """Pairwise mixtures ``w*delta1 + (1-w)*delta2`` on the grid ``k / w_mix``.

    Successors reached by only one side keep that side's point; successors
    reached by both take the point of the side with the larger weight (the
    first side on a tie).  Counters are recomputed by ``evaluate(delta,
    assignment) -> (mu, nu)``, never interpolated.
    """
    out: list[Candidate] = []
    weights = mix_weights(w_mix)
    for x in range(len(cands)):
        for y in range(x + 1, len(cands)):
            c1, c2 = cands[x], cands[y]
            for w in weights:
                delta: dict = {}
                for a, p in c1.delta.items():
                    delta[a] = delta.get(a, 0.0) + w * p
                for a, p in c2.delta.items():
                    delta[a] = delta.get(a, 0.0) + (1 - w) * p
                delta = {a: p for a, p in delta.items() if p > 0}
                heavy, light = (c1, c2) if w >= 0.5 else (c2, c1)
                assignment = dict(light.assignment)
                assignment.update(heavy.assignment)
                if w == 1.0:
                    assignment = dict(c1.assignment)
                elif w == 0.0:
                    assignment = dict(c2.assignment)
                mu, nu = evaluate(delta, assignment)
                out.append(Candidate(delta, assignment, nu, mu))
    return out
