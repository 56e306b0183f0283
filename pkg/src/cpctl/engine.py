"""Set-valued value iteration for CPCTL synthesis."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .formula import TIE_TOLERANCE, Formula, slater_transform
from .frontier import (
    FrontierPoint,
    ValueVector,
    WitnessRecord,
    improvement,
    pareto_indices,
    reduce_indices,
)
from .model import Mdp
from .reachability import initial_value_vector

TARGET_MET = "TARGET_MET"
CONVERGED_TARGET_UNMET = "CONVERGED_TARGET_UNMET"
ITER_CAP = "ITER_CAP"

EXIT_CODES = {TARGET_MET: 0, CONVERGED_TARGET_UNMET: 2, ITER_CAP: 3}


@dataclass(frozen=True)
class EngineConfig:
    epsilon: float = 1e-3
    max_iters: int = 100_000
    convergence_delta: float = 1e-6
    w_mix: int = 4
    max_points: int = 64
    mix_pool: int = 16  # per-action candidates entering pairwise mixing
    slater_margin: float = 0.01

    def __post_init__(self):
        if self.epsilon <= 0 or self.convergence_delta <= 0 or self.slater_margin <= 0:
            raise ValueError("epsilon, convergence_delta and slater_margin must be positive")
        if self.max_iters <= 0 or self.w_mix <= 0 or self.max_points <= 0 or self.mix_pool <= 0:
            raise ValueError("max_iters, w_mix, max_points and mix_pool must be positive")
        if self.convergence_delta > self.epsilon:
            raise ValueError("convergence_delta must not exceed epsilon")

    def as_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "max_iters": self.max_iters,
            "convergence_delta": self.convergence_delta,
            "w_mix": self.w_mix,
            "max_points": self.max_points,
            "mix_pool": self.mix_pool,
            "slater_margin": self.slater_margin,
        }


@dataclass
class VIResult:
    status: str
    frontiers: ValueVector
    iterations: int
    mdp: Mdp
    formula: Formula
    config: EngineConfig
    changes: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def initial_points(self) -> list:
        return list(self.frontiers[self.mdp.initial])

    def satisfying_points(self) -> list:
        k = self.formula.mu_index[self.formula.root]
        return [p for p in self.initial_points if p.mu[k] == 1]

    def target_point(self) -> FrontierPoint | None:
        """A point at the initial state whose valuation makes the root formula true."""
        pts = self.satisfying_points()
        if not pts:
            return None
        return max(pts, key=lambda p: (float(np.sum(p.nu)), -p.uid))


class Bellman:
    """The extended Bellman operator for one (model, formula) pair."""

    def __init__(self, mdp: Mdp, f: Formula, cfg: EngineConfig):
        self.mdp, self.f, self.cfg = mdp, f, cfg
        n = mdp.n_states
        self.static_mu = []
        for s in range(n):
            self.static_mu.append(f.canonical_valuation(mdp.labels[s], np.zeros(f.pf)).astype(bool))
        self.plan = []
        for nid in f.state_subs:
            node = f.nodes[nid]
            k = f.mu_index[nid]
            if node.kind == "and":
                self.plan.append(("and", k, f.mu_index[node.children[0]], f.mu_index[node.children[1]]))
            elif node.kind == "prob":
                j = f.nu_index[nid]
                left, goal = f.path_operands(j)
                self.plan.append(("prob", k, j, f.mu_index[left], f.mu_index[goal], node.p))
            elif node.kind in ("atom", "neg", "true", "false"):
                self.plan.append(("lit", k))
            else:
                raise ValueError(f"the engine does not support {node.kind!r} subformulas")
        for j in range(f.pf):
            if f.nodes[f.path_subs[j]].kind != "cwu":
                raise ValueError("the engine synthesises CPCTL formulas only")
        self.preds: list[set[int]] = [set() for _ in range(n)]
        for s in range(n):
            for t in mdp.successors(s):
                self.preds[t].add(s)

    # counters and valuations of a batch of candidate sums at state s
    def evaluate(self, s: int, sigma: np.ndarray):
        f = self.f
        rows = len(sigma)
        mu = np.zeros((rows, f.sf), dtype=bool)
        nu = np.zeros((rows, f.pf))
        used = np.zeros(rows, dtype=bool)
        static = self.static_mu[s]
        for step in self.plan:
            if step[0] == "lit":
                mu[:, step[1]] = static[step[1]]
            elif step[0] == "and":
                _, k, a, b = step
                mu[:, k] = mu[:, a] & mu[:, b]
            else:
                _, k, j, left, goal, p = step
                ml, mg = mu[:, left], mu[:, goal]
                mid = ml & ~mg
                v = np.where(ml & mg, 1.0, np.where(mid, sigma[:, j], 0.0))
                used |= mid
                nu[:, j] = v
                mu[:, k] = v >= p - TIE_TOLERANCE
        return mu.astype(np.int8), nu, used

    def _action_sums(self, s: int, a: int, V: ValueVector):
        pf = self.f.pf
        dist = self.mdp.transitions[s][a]
        sums = np.zeros((1, pf))
        assign = np.zeros((1, 0), dtype=np.int64)
        for t, q in zip(dist.targets.tolist(), dist.probs.tolist()):
            succ = V.nu_array(t)
            k = len(succ)
            comb = (sums[:, None, :] + q * succ[None, :, :]).reshape(-1, pf)
            prev = np.repeat(np.arange(len(sums)), k)
            pick = np.tile(np.arange(k), len(sums))
            if len(comb) > 1:
                keep = np.asarray(reduce_indices(comb, self.cfg.epsilon, 4 * self.cfg.max_points), dtype=np.int64)
            else:
                keep = np.zeros(1, dtype=np.int64)
            sums = comb[keep]
            assign = np.hstack([assign[prev[keep]], pick[keep][:, None]])
        return dist.targets.tolist(), dist.probs.tolist(), sums, assign

    def _shared_sums(self, V, targets_x, assign_x, targets_y, probs_y, shared):
        """Sum over shared successors t of P_y(t) * nu of the point chosen by side x."""
        pos_x = {t: i for i, t in enumerate(targets_x)}
        out = np.zeros((len(assign_x), self.f.pf))
        py = dict(zip(targets_y, probs_y))
        for t in shared:
            out += py[t] * V.nu_array(t)[assign_x[:, pos_x[t]]]
        return out

    def candidates(self, s: int, V: ValueVector):
        """Candidate sums and the metadata needed to rebuild their witnesses."""
        cfg = self.cfg
        per_action = []
        sigmas, metas = [], []
        for a in range(len(self.mdp.transitions[s])):
            targets, probs, sums, assign = self._action_sums(s, a, V)
            _, nu, _ = self.evaluate(s, sums)
            pool = np.asarray(reduce_indices(nu, cfg.epsilon, cfg.mix_pool), dtype=np.int64)
            per_action.append((a, targets, probs, sums[pool], assign[pool]))
            sigmas.append(sums)
            metas.append(("pure", a, assign))
        weights = [k / cfg.w_mix for k in range(1, cfg.w_mix)]
        for x in range(len(per_action)):
            for y in range(x + 1, len(per_action)):
                a, ta, pa, sa, aa = per_action[x]
                b, tb, pb, sb, ab = per_action[y]
                shared = sorted(set(ta) & set(tb))
                ya = self._shared_sums(V, ta, aa, ta, pa, shared)
                xab = self._shared_sums(V, ta, aa, tb, pb, shared)
                yb = self._shared_sums(V, tb, ab, tb, pb, shared)
                xba = self._shared_sums(V, tb, ab, ta, pa, shared)
                ia = np.repeat(np.arange(len(sa)), len(sb))
                ib = np.tile(np.arange(len(sb)), len(sa))
                for w in weights:
                    if w >= 0.5:
                        sig = w * sa[ia] + (1 - w) * (sb[ib] - yb[ib] + xab[ia])
                    else:
                        sig = w * (sa[ia] - ya[ia] + xba[ib]) + (1 - w) * sb[ib]
                    sigmas.append(sig)
                    metas.append(("mix", (a, ta, aa), (b, tb, ab), ia, ib, w))
        return sigmas, metas

    def _witness(self, s: int, V: ValueVector, meta, row: int, used: bool) -> WitnessRecord:
        if not used:
            return WitnessRecord.terminal()
        if meta[0] == "pure":
            _, a, assign = meta
            targets = self.mdp.transitions[s][a].targets.tolist()
            succ = {t: V[t][int(assign[row, i])] for i, t in enumerate(targets)}
            return WitnessRecord.recursive({a: 1.0}, succ)
        _, (a, ta, aa), (b, tb, ab), ia, ib, w = meta
        i, j = int(ia[row]), int(ib[row])
        light, heavy = ((b, tb, ab[j]), (a, ta, aa[i])) if w >= 0.5 else ((a, ta, aa[i]), (b, tb, ab[j]))
        succ = {}
        for _, ts, row_assign in (light, heavy):
            for pos, t in enumerate(ts):
                succ[t] = V[t][int(row_assign[pos])]
        return WitnessRecord.recursive({a: w, b: 1 - w}, succ)

    def update_state(self, s: int, V: ValueVector):
        """New point list for ``s`` and the improvement over the old list."""
        cfg = self.cfg
        old = list(V[s])
        old_nu = V.nu_array(s)
        sigmas, metas = self.candidates(s, V)
        counts = [len(x) for x in sigmas]
        sigma = np.vstack(sigmas) if sigmas else np.zeros((0, self.f.pf))
        mu, nu, used = self.evaluate(s, sigma)
        values = np.vstack([old_nu, nu])
        keep = reduce_indices(values, cfg.epsilon, cfg.max_points, n_old=len(old))
        offsets = np.cumsum([0] + counts)
        out, fresh = [], []
        for idx in keep:
            if idx < len(old):
                out.append(old[idx])
                continue
            r = idx - len(old)
            m = int(np.searchsorted(offsets, r, side="right") - 1)
            wit = self._witness(s, V, metas[m], r - offsets[m], bool(used[r]))
            out.append(FrontierPoint(s, mu[r], nu[r], wit))
            fresh.append(nu[r])
        change = improvement(np.array(fresh).reshape(len(fresh), -1), old_nu) if fresh else 0.0
        return out, change

    def step(self, V: ValueVector, dirty=None):
        n = self.mdp.n_states
        dirty = range(n) if dirty is None else dirty
        per_state = list(V.per_state)
        cache = dict(V._cache)
        changes = np.zeros(n)
        changed = []
        for s in sorted(dirty):
            pts, change = self.update_state(s, V)
            if [p.uid for p in pts] != [p.uid for p in V[s]]:
                per_state[s] = pts
                cache.pop(s, None)
                changed.append(s)
            changes[s] = change
        return ValueVector(per_state, cache), changes, changed


def bellman_step(mdp: Mdp, f: Formula, V: ValueVector, cfg: EngineConfig | None = None) -> ValueVector:
    """One application of the operator to every state (union with the previous sets)."""
    cfg = cfg or EngineConfig()
    if len(V) != mdp.n_states:
        raise ValueError("value vector and model disagree on the number of states")
    for pts in V.per_state:
        for p in pts:
            if len(p.mu) != f.sf or len(p.nu) != f.pf:
                raise ValueError("value vector points do not match the formula dimensions")
    new, _, _ = Bellman(mdp, f, cfg).step(V)
    return new


def _met(f: Formula, V: ValueVector, s0: int) -> bool:
    k = f.mu_index[f.root]
    return any(p.mu[k] == 1 for p in V[s0])


def run_vi(
    mdp: Mdp,
    f: Formula,
    cfg: EngineConfig | None = None,
    ignore_target: bool = False,
    on_iteration=None,
) -> VIResult:
    """Iterate from the initial value vector until the target is met, the frontiers settle, or the cap.

    With ``ignore_target`` the loop runs to convergence regardless of the
    target, which is what frontier export needs.
    """
    cfg = cfg or EngineConfig()
    start = time.perf_counter()
    op = Bellman(mdp, f, cfg)
    V = initial_value_vector(mdp, f)
    changes: list[float] = []

    def done(status: str, it: int) -> VIResult:
        return VIResult(status, V, it, mdp, f, cfg, changes, time.perf_counter() - start)

    if not ignore_target and _met(f, V, mdp.initial):
        return done(TARGET_MET, 0)
    dirty = set(range(mdp.n_states))
    for it in range(1, cfg.max_iters + 1):
        V, delta, changed = op.step(V, dirty)
        worst = float(delta.max()) if len(delta) else 0.0
        changes.append(worst)
        if on_iteration is not None:
            on_iteration(it, V, worst)
        if not ignore_target and _met(f, V, mdp.initial):
            return done(TARGET_MET, it)
        if worst < cfg.convergence_delta:
            status = TARGET_MET if _met(f, V, mdp.initial) else CONVERGED_TARGET_UNMET
            return done(status, it)
        dirty = set()
        for s in changed:
            dirty |= op.preds[s]
    status = TARGET_MET if _met(f, V, mdp.initial) else ITER_CAP
    return done(status, cfg.max_iters)


def frontier_curve(points, objective: int, inner: int) -> list[tuple[float, float]]:
    """Non-dominated (inner, objective) pairs sorted by the inner coordinate."""
    if not points:
        return []
    xy = np.array([[p.nu[inner], p.nu[objective]] for p in points], dtype=float)
    keep = pareto_indices(xy)
    pairs = sorted({(float(xy[i, 0]), float(xy[i, 1])) for i in keep})
    return pairs


def max_achievable(
    mdp: Mdp,
    f: Formula,
    objective: int | None = None,
    cfg: EngineConfig | None = None,
    inner: int | None = None,
) -> tuple[list[tuple[float, float]], VIResult]:
    """Run to convergence and project the initial frontier onto (inner, objective) counters.

    ``objective`` defaults to the first top-level counter and ``inner`` to the
    deepest other counter (or the objective itself when there is only one).
    """
    if objective is None:
        top = f.top_level_thresholds()
        objective = top[0][0] if top else f.pf - 1
    if not 0 <= objective < f.pf:
        raise ValueError(f"objective index {objective} out of range")
    if inner is None:
        others = [j for j in range(f.pf) if j != objective]
        inner = others[0] if others else objective
    result = run_vi(mdp, f, cfg, ignore_target=True)
    return frontier_curve(result.initial_points, objective, inner), result


@dataclass
class SlaterReport:
    thresholds: list
    status: str
    plausible: bool


def slater_check(mdp: Mdp, f: Formula, cfg: EngineConfig | None = None) -> SlaterReport:
    """Rerun with every threshold raised by the configured margin (capped at 1)."""
    cfg = cfg or EngineConfig()
    d = [min(1.0, float(p) + cfg.slater_margin) for p in f.thresholds]
    res = run_vi(mdp, slater_transform(f, d), cfg)
    return SlaterReport(d, res.status, res.status == TARGET_MET)
