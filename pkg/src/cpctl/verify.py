"""Exact safe-PCTL evaluation on Markov chains, scalar max-safety, product chains and simulation."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .builtins import thm1_chain
from .formula import SAFE_PCTL, TIE_TOLERANCE, Formula, eval_boolean, fd_counter_map, fd_transform, parse_formula
from .model import MarkovChain, Mdp, MemorylessPolicy, chain_from_mdp, induce_chain
from .reachability import almost_sure_globally

RESIDUAL_TOLERANCE = 1e-10
DENSE_LIMIT = 2000
PRODUCT_TRANSITION_CAP = 10_000_000
WILSON_Z99 = 2.5758293035489004
SIM_BATCH = 10_000

THM1_FORMULA = "P>=1 [ c W P>=1/2 [ c W (c & a) ] ]"


class SolverError(RuntimeError):
    pass


@dataclass
class CheckResult:
    formula: Formula
    state_names: list
    sat: np.ndarray  # (n, sf) booleans, columns ordered like mu
    probs: np.ndarray  # (n, pf) path probabilities, columns ordered like nu

    def holds(self, s: int, node_id: int | None = None) -> bool:
        nid = self.formula.root if node_id is None else node_id
        return bool(self.sat[s, self.formula.mu_index[nid]])

    def satisfying_states(self, node_id: int | None = None) -> set[str]:
        nid = self.formula.root if node_id is None else node_id
        col = self.sat[:, self.formula.mu_index[nid]]
        return {self.state_names[s] for s in np.nonzero(col)[0]}

    def prob(self, s: int, j: int) -> float:
        return float(self.probs[s, j])

    def to_dict(self, s: int | None = None) -> dict:
        f = self.formula
        rows = range(len(self.state_names)) if s is None else [s]
        return {
            "formula": str(f),
            "states": [
                {
                    "state": self.state_names[r],
                    "satisfied": bool(self.sat[r, f.mu_index[f.root]]),
                    "sat": [bool(x) for x in self.sat[r]],
                    "probabilities": [float(x) for x in self.probs[r]],
                }
                for r in rows
            ],
        }


# --------------------------------------------------------------------------
# graph helpers and linear solves


def _backward_reach(pt: sparse.csr_matrix, start: np.ndarray, through: np.ndarray) -> np.ndarray:
    """States that reach ``start`` by a path whose intermediate states lie in ``through``.

    ``pt`` is the transposed transition matrix (row t lists predecessors of t).
    """
    seen = start.copy()
    stack = list(np.nonzero(start)[0])
    indptr, indices = pt.indptr, pt.indices
    while stack:
        t = stack.pop()
        for s in indices[indptr[t] : indptr[t + 1]]:
            if not seen[s] and through[s]:
                seen[s] = True
                stack.append(s)
    return seen


def _solve(a, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b``; dense LU with partial pivoting for small systems, sparse LU otherwise."""
    n = len(b)
    if n == 0:
        return b.copy()
    if n <= DENSE_LIMIT:
        dense = a.toarray() if sparse.issparse(a) else a
        try:
            x = np.linalg.solve(dense, b)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular system: {exc}") from exc
        residual = np.max(np.abs(dense @ x - b))
    else:
        a = sparse.csc_matrix(a)
        x = splinalg.spsolve(a, b)
        residual = np.max(np.abs(a @ x - b))
    if not np.all(np.isfinite(x)) or residual > RESIDUAL_TOLERANCE:
        raise SolverError(f"linear solve residual {residual:.3g} exceeds {RESIDUAL_TOLERANCE}")
    return x


def prob_until(p: sparse.csr_matrix, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """P(a U b) per state of a finite chain."""
    n = p.shape[0]
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    pt = p.T.tocsr()
    can = _backward_reach(pt, b, a & ~b)
    no = ~can
    # states that can reach a zero state while staying in a & ~b cannot have probability 1
    not_one = _backward_reach(pt, no, a & ~b)
    yes = ~not_one
    maybe = ~(yes | no)
    x = np.zeros(n)
    x[yes] = 1.0
    idx = np.nonzero(maybe)[0]
    if len(idx):
        sub = p[idx][:, idx]
        rhs = np.asarray(p[idx][:, np.nonzero(yes)[0]].sum(axis=1)).ravel()
        sol = _solve(sparse.identity(len(idx), format="csr") - sub, rhs)
        x[idx] = np.clip(sol, 0.0, 1.0)
    return x


def prob_weak_until(p: sparse.csr_matrix, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """P(a W b) = 1 - P((a & ~b) U (~a & ~b))."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    return 1.0 - prob_until(p, a & ~b, ~a & ~b)


def prob_next(p: sparse.csr_matrix, a: np.ndarray) -> np.ndarray:
    return np.clip(p @ np.asarray(a, dtype=float), 0.0, 1.0)


def almost_sure_globally_chain(p: sparse.csr_matrix, a: np.ndarray) -> np.ndarray:
    """States of a chain from which ``a`` holds forever with probability 1."""
    a = np.asarray(a, dtype=bool)
    return ~_backward_reach(p.T.tocsr(), ~a, a)


# --------------------------------------------------------------------------
# the oracle


def exact_check(chain: MarkovChain, f: Formula) -> CheckResult:
    """Bottom-up evaluation of every subformula on every state of ``chain``."""
    p = chain.matrix
    n = chain.n_states
    sat = np.zeros((n, f.sf), dtype=bool)
    probs = np.zeros((n, f.pf))
    for k, nid in enumerate(f.state_subs):
        node = f.nodes[nid]
        kind = node.kind
        if kind == "atom":
            sat[:, k] = [node.name in chain.labels[s] for s in range(n)]
        elif kind == "neg":
            sat[:, k] = [node.name not in chain.labels[s] for s in range(n)]
        elif kind == "true":
            sat[:, k] = True
        elif kind == "false":
            sat[:, k] = False
        elif kind in ("and", "or"):
            l, r = (sat[:, f.mu_index[c]] for c in node.children)
            sat[:, k] = (l & r) if kind == "and" else (l | r)
        elif kind == "prob":
            j = f.nu_index[nid]
            path = f.nodes[node.children[0]]
            ops = [sat[:, f.mu_index[c]] for c in path.children]
            if path.kind == "next":
                v = prob_next(p, ops[0])
            elif path.kind == "until":
                v = prob_until(p, ops[0], ops[1])
            elif path.kind == "wu":
                v = prob_weak_until(p, ops[0], ops[1])
            elif path.kind == "cwu":
                v = prob_weak_until(p, ops[0], ops[0] & ops[1])
            else:
                raise ValueError(f"unsupported path operator {path.kind!r}")
            probs[:, j] = v
            sat[:, k] = v >= node.p - TIE_TOLERANCE
        else:
            raise ValueError(f"unsupported state operator {kind!r}")
    return CheckResult(f, list(chain.state_names), sat, probs)


def compare_with_fd(chain: MarkovChain, f: Formula, tol: float = 1e-9) -> list[str]:
    """Disagreements between the oracle on ``f`` and on its finitely-decisive rewriting."""
    g = fd_transform(f)
    rf, rg = exact_check(chain, f), exact_check(chain, g)
    cmap = fd_counter_map(f, g)
    problems = []
    for s in range(chain.n_states):
        if rf.holds(s) != rg.holds(s):
            problems.append(f"satisfaction differs at {chain.state_names[s]}")
        for j, k in cmap.items():
            if abs(rf.probs[s, j] - rg.probs[s, k]) > tol:
                problems.append(f"counter {j} differs at {chain.state_names[s]}")
    return problems


def check_thm1_chain(alpha: float, eps: float) -> bool:
    f = parse_formula(THM1_FORMULA, fragment=SAFE_PCTL)
    m = thm1_chain(alpha, eps)
    return exact_check(chain_from_mdp(m), f).holds(m.initial)


# --------------------------------------------------------------------------
# scalar max-safety


def _stacked(mdp: Mdp):
    rows, cols, vals, owner = [], [], [], []
    r = 0
    for s in range(mdp.n_states):
        for dist in mdp.transitions[s]:
            rows.extend([r] * len(dist.targets))
            cols.extend(dist.targets.tolist())
            vals.extend(dist.probs.tolist())
            owner.append(s)
            r += 1
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(r, mdp.n_states))
    return mat, np.array(owner)


def _greedy(mdp: Mdp, values: np.ndarray, safe_set, inside: np.ndarray) -> dict[int, int]:
    choice = {}
    for s in range(mdp.n_states):
        if s in safe_set.safe_action:
            choice[s] = safe_set.safe_action[s]
            continue
        if not inside[s]:
            choice[s] = 0
            continue
        q = [float(d.probs @ values[d.targets]) for d in mdp.transitions[s]]
        best = max(q)
        choice[s] = next(k for k, v in enumerate(q) if v >= best - 1e-12)
    return choice


def max_safety_vi(mdp: Mdp, safe, tol: float = 1e-12, max_iters: int = 1_000_000) -> np.ndarray:
    """sup over policies of P(G safe) per state.

    Value iteration from below after fixing the almost-sure set to 1, then a
    policy-iteration polish that evaluates the greedy policy exactly until it
    is stable.
    """
    values, _ = _max_safety(mdp, safe, tol, max_iters)
    return values


def greedy_safety_policy(mdp: Mdp, safe) -> MemorylessPolicy:
    """The deterministic policy greedy for max-safety values (lowest action index on ties)."""
    _, choice = _max_safety(mdp, safe, 1e-12, 1_000_000)
    return MemorylessPolicy.dirac(mdp, choice)


def _max_safety(mdp: Mdp, safe, tol: float, max_iters: int):
    n = mdp.n_states
    inside = np.array([eval_boolean(safe, mdp.labels[s]) for s in range(n)], dtype=bool)
    safe_set = almost_sure_globally(mdp, safe)
    one = np.zeros(n, dtype=bool)
    one[list(safe_set.states)] = True
    mat, owner = _stacked(mdp)
    starts = np.searchsorted(owner, np.arange(n))
    v = one.astype(float)
    free = inside & ~one
    for _ in range(max_iters):
        q = mat @ v
        nv = np.where(free, np.maximum.reduceat(q, starts), v)
        done = np.max(np.abs(nv - v)) < tol if n else True
        v = nv
        if done:
            break
    choice = _greedy(mdp, v, safe_set, inside)
    for _ in range(100):
        chain = induce_chain(mdp, MemorylessPolicy.dirac(mdp, choice))
        exact = prob_weak_until(chain.matrix, inside, np.zeros(n, dtype=bool))
        new_choice = _greedy(mdp, exact, safe_set, inside)
        improved = any(
            float(mdp.transitions[s][new_choice[s]].probs @ exact[mdp.transitions[s][new_choice[s]].targets])
            > float(mdp.transitions[s][choice[s]].probs @ exact[mdp.transitions[s][choice[s]].targets]) + 1e-12
            for s in range(n)
            if free[s]
        )
        v = exact
        if not improved:
            break
        choice = new_choice
    return v, choice


# --------------------------------------------------------------------------
# product chains


@dataclass
class ProductChain:
    chain: MarkovChain
    pairs: list  # product index -> (state, memory)


def product_chain(mdp: Mdp, fm, cap: int = PRODUCT_TRANSITION_CAP) -> ProductChain:
    """The finite Markov chain over reachable (state, memory) pairs."""
    pairs = fm.reachable_pairs()
    index = {pm: i for i, pm in enumerate(pairs)}
    rows, cols, vals = [], [], []
    for i, (s, m) in enumerate(pairs):
        acc: dict[int, float] = {}
        for a, w in fm.act(s, m).items():
            if w <= 0:
                continue
            for t, p in mdp.transitions[s][a].items():
                k = index[(t, fm.next_memory(s, m, t))]
                acc[k] = acc.get(k, 0.0) + w * p
        for k, p in acc.items():
            rows.append(i)
            cols.append(k)
            vals.append(p)
        if len(vals) > cap:
            raise ValueError(f"product chain exceeds {cap} transitions")
    n = len(pairs)
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    names = [f"{mdp.state_names[s]}#{m}" for s, m in pairs]
    labels = [mdp.labels[s] for s, _ in pairs]
    return ProductChain(MarkovChain(names, mat, 0, labels), pairs)


def product_chain_check(mdp: Mdp, fm, f: Formula) -> CheckResult:
    """Oracle result on the product chain; row 0 is the initial (state, memory) pair."""
    return exact_check(product_chain(mdp, fm).chain, f)


def policy_chain_check(mdp: Mdp, policy: MemorylessPolicy, f: Formula) -> CheckResult:
    return exact_check(induce_chain(mdp, policy), f)


# --------------------------------------------------------------------------
# simulation


@dataclass
class Estimate:
    index: int
    lower: float  # settled-success fraction
    upper: float  # one minus settled-failure fraction
    ci_low: float
    ci_high: float
    samples: int

    def contains(self, value: float) -> bool:
        return self.ci_low - 1e-12 <= value <= self.ci_high + 1e-12

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "lower": self.lower,
            "upper": self.upper,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "samples": self.samples,
        }


def wilson(successes: int, n: int, z: float = WILSON_Z99) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    phat = successes / n
    denom = 1 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def _sampling_keys(mat: sparse.csr_matrix) -> np.ndarray:
    mat = sparse.csr_matrix(mat)
    mat.sort_indices()
    lengths = np.diff(mat.indptr)
    rows = np.repeat(np.arange(mat.shape[0]), lengths)
    cs = np.cumsum(mat.data)
    start = np.concatenate([[0.0], cs])[mat.indptr[:-1]]
    keys = rows + (cs - np.repeat(start, lengths))
    last = mat.indptr[1:] - 1
    keys[last[lengths > 0]] = np.arange(mat.shape[0])[lengths > 0] + 1.0
    return keys


def _settle_sets(chain: MarkovChain, f: Formula):
    res = exact_check(chain, f)
    mat = chain.matrix
    pf = f.pf
    success = np.zeros((pf, chain.n_states), dtype=bool)
    failure = np.zeros((pf, chain.n_states), dtype=bool)
    is_next = np.zeros(pf, dtype=bool)
    for j in range(pf):
        path = f.nodes[f.path_subs[j]]
        ops = [res.sat[:, f.mu_index[c]] for c in path.children]
        if path.kind == "next":
            is_next[j] = True
            success[j] = ops[0]
            failure[j] = ~ops[0]
            continue
        left = ops[0]
        goal = left & ops[1] if path.kind == "cwu" else ops[1]
        if path.kind == "until":
            forever = np.zeros_like(left)
        else:
            forever = almost_sure_globally_chain(mat, left)
        success[j] = goal | forever
        failure[j] = ~left & ~goal
    return success, failure, is_next


def _run_batch(chain, keys, sets, size: int, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Settle status per path formula and run: 0 open, 1 success, 2 failure."""
    success, failure, is_next = sets
    indptr, indices = chain.matrix.indptr, chain.matrix.indices
    pf = len(is_next)
    state = np.full(size, chain.initial, dtype=np.int64)
    status = np.zeros((pf, size), dtype=np.int8)
    for j in range(pf):
        if not is_next[j]:
            status[j][success[j][state]] = 1
            status[j][(status[j] == 0) & failure[j][state]] = 2
    active = np.nonzero(np.any(status == 0, axis=0))[0]
    for step in range(horizon):
        if len(active) == 0:
            break
        cur = state[active]
        pos = np.searchsorted(keys, cur + rng.random(len(active)), side="right")
        nxt = indices[np.minimum(pos, indptr[cur + 1] - 1)]
        state[active] = nxt
        for j in range(pf):
            st = status[j, active]
            if is_next[j]:
                if step == 0:
                    st = np.where(success[j][nxt], 1, 2).astype(np.int8)
            else:
                st = np.where((st == 0) & success[j][nxt], 1, st)
                st = np.where((st == 0) & failure[j][nxt], 2, st).astype(np.int8)
            status[j, active] = st
        active = active[np.any(status[:, active] == 0, axis=0)]
    return status


def simulate_chain(
    chain: MarkovChain,
    f: Formula,
    n: int,
    horizon: int,
    seed: int = 42,
    batch_size: int = SIM_BATCH,
    threads: int = 1,
) -> list[Estimate]:
    """Interval estimates of every path formula's probability from the chain's initial state.

    A run settles as a success on reaching a state where the path formula is
    already decided positively (its goal holds, or its left operand holds
    forever almost surely) and as a failure on reaching a state where the
    left operand fails first.  Unsettled runs count as failures for the lower
    bound and as successes for the upper bound.

    Runs are split into batches; batch ``i`` draws from the ``i``-th child of
    ``SeedSequence(seed)``, so results do not depend on ``threads``.
    """
    if n <= 0 or horizon <= 0:
        raise ValueError("sample count and horizon must be positive")
    sets = _settle_sets(chain, f)
    keys = _sampling_keys(chain.matrix)
    sizes = [min(batch_size, n - k) for k in range(0, n, batch_size)]
    streams = np.random.SeedSequence(seed).spawn(len(sizes))

    def job(i: int) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(streams[i]))
        return _run_batch(chain, keys, sets, sizes[i], horizon, rng)

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(i) for i in range(len(sizes))]
    status = np.concatenate(parts, axis=1)
    out = []
    for j in range(f.pf):
        succ = int(np.sum(status[j] == 1))
        fail = int(np.sum(status[j] == 2))
        lo, _ = wilson(succ, n)
        _, hi = wilson(n - fail, n)
        out.append(Estimate(j, succ / n, 1 - fail / n, lo, hi, n))
    return out


def simulate(
    mdp: Mdp, fm, f: Formula, n: int, horizon: int, seed: int = 42, threads: int = 1
) -> list[Estimate]:
    """Monte-Carlo interval estimates for a finite-memory policy, run on its product chain."""
    return simulate_chain(product_chain(mdp, fm).chain, f, n, horizon, seed, threads=threads)
