"""Safe-PCTL / CPCTL state formulas: AST, parser, indexing and syntactic transforms.

A formula is first parsed into a tree of frozen dataclasses (structural
equality, printing) and then flattened by :class:`Formula` into positional
tables.  Two structurally identical subtrees at different positions get
distinct ids, because the synthesis engine keeps one valuation bit per state
subformula position and one counter per path subformula position.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np

TIE_TOLERANCE = 1e-12

CPCTL = "CPCTL"
SAFE_PCTL = "SAFE_PCTL"


class FormulaSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class FragmentError(ValueError):
    """Raised when a formula uses an operator outside the requested fragment."""

    def __init__(self, operator: str, fragment: str):
        super().__init__(f"operator {operator!r} is not allowed in {fragment}")
        self.operator = operator


# --------------------------------------------------------------------------
# tree nodes


@dataclass(frozen=True)
class Atom:
    name: str


@dataclass(frozen=True)
class NegAtom:
    name: str


@dataclass(frozen=True)
class TrueConst:
    pass


@dataclass(frozen=True)
class FalseConst:
    pass


@dataclass(frozen=True)
class And:
    left: "StateNode"
    right: "StateNode"


@dataclass(frozen=True)
class Or:
    # only produced by fd_transform; never parsed
    left: "StateNode"
    right: "StateNode"


@dataclass(frozen=True)
class ProbGeq:
    p: float
    path: "PathNode"


@dataclass(frozen=True)
class Next:
    sub: "StateNode"


@dataclass(frozen=True)
class WeakUntil:
    left: "StateNode"
    right: "StateNode"


@dataclass(frozen=True)
class ContinuingWeakUntil:
    """``left W (left & goal)``; ``G left`` is ``ContinuingWeakUntil(left, FalseConst())``."""

    left: "StateNode"
    goal: "StateNode"


@dataclass(frozen=True)
class Until:
    # only produced by fd_transform; never parsed
    left: "StateNode"
    right: "StateNode"


StateNode = Union[Atom, NegAtom, TrueConst, FalseConst, And, Or, ProbGeq]
PathNode = Union[Next, WeakUntil, ContinuingWeakUntil, Until]

TRUE = TrueConst()
FALSE = FalseConst()

_STATE_TYPES = (Atom, NegAtom, TrueConst, FalseConst, And, Or, ProbGeq)
_LITERAL_TYPES = (Atom, NegAtom, TrueConst, FalseConst)


def children(node) -> tuple:
    if isinstance(node, (And, Or, WeakUntil, Until)):
        return (node.left, node.right)
    if isinstance(node, ContinuingWeakUntil):
        return (node.left, node.goal)
    if isinstance(node, ProbGeq):
        return (node.path,)
    if isinstance(node, Next):
        return (node.sub,)
    return ()


def is_state(node) -> bool:
    return isinstance(node, _STATE_TYPES)


def conjuncts(node) -> list:
    """Flatten nested conjunctions (through both operands)."""
    if isinstance(node, And):
        return conjuncts(node.left) + conjuncts(node.right)
    return [node]


def conjoin(parts: Sequence) -> StateNode:
    if not parts:
        return TRUE
    out = parts[0]
    for part in parts[1:]:
        out = And(out, part)
    return out


# --------------------------------------------------------------------------
# printing


def _fmt_prob(p: float) -> str:
    return repr(float(p))


def to_text(node) -> str:
    """Render a tree in the input grammar; ``parse(to_text(t))`` rebuilds ``t``."""
    if isinstance(node, Atom):
        return node.name
    if isinstance(node, NegAtom):
        return "!" + node.name
    if isinstance(node, TrueConst):
        return "true"
    if isinstance(node, FalseConst):
        return "false"
    if isinstance(node, And):
        right = to_text(node.right)
        if isinstance(node.right, And):
            right = f"({right})"
        return f"{to_text(node.left)} & {right}"
    if isinstance(node, Or):
        return f"({to_text(node.left)}) | ({to_text(node.right)})"
    if isinstance(node, ProbGeq):
        return f"P>={_fmt_prob(node.p)} [ {to_text(node.path)} ]"
    if isinstance(node, Next):
        return f"X ({to_text(node.sub)})"
    if isinstance(node, ContinuingWeakUntil):
        if isinstance(node.goal, FalseConst):
            return f"G ({to_text(node.left)})"
        left = to_text(node.left)
        return f"({left}) W (({left}) & ({to_text(node.goal)}))"
    if isinstance(node, WeakUntil):
        return f"({to_text(node.left)}) W ({to_text(node.right)})"
    if isinstance(node, Until):
        return f"({to_text(node.left)}) U ({to_text(node.right)})"
    raise TypeError(f"not a formula node: {node!r}")


# --------------------------------------------------------------------------
# parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<prob>P\s*>=)
  | (?P<num>\d+\.\d*|\.\d+|\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[!&()\[\]/])
    """,
    re.VERBOSE,
)

_KEYWORDS = {"true", "false"}


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FormulaSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, fragment: str, continuing_normalize: bool):
        self.toks = _tokenize(text)
        self.i = 0
        self.fragment = fragment
        self.normalize = continuing_normalize

    # token helpers
    def peek(self, k: int = 0) -> _Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.peek()
        if tok.text != text:
            found = tok.text or "end of input"
            raise FormulaSyntaxError(f"expected {text!r}, found {found!r}", tok.pos)
        return self.take()

    def starts_unit(self, tok: _Tok) -> bool:
        return tok.kind in ("ident", "prob") or tok.text in ("!", "(")

    # grammar
    def parse(self) -> StateNode:
        node = self.formula()
        tok = self.peek()
        if tok.kind != "eof":
            raise FormulaSyntaxError(f"unexpected {tok.text!r}", tok.pos)
        return node

    def formula(self) -> StateNode:
        return conjoin(self.unit_list())

    def unit_list(self) -> list:
        units = [self.unit()]
        while self.peek().text == "&":
            self.take()
            units.append(self.unit())
        return units

    def unit(self) -> StateNode:
        tok = self.peek()
        if tok.kind == "ident":
            self.take()
            if tok.text == "true":
                return TRUE
            if tok.text == "false":
                return FALSE
            return Atom(tok.text)
        if tok.text == "!":
            self.take()
            name = self.peek()
            if name.kind != "ident" or name.text in _KEYWORDS:
                raise FormulaSyntaxError("negation applies to atomic propositions only", name.pos)
            self.take()
            return NegAtom(name.text)
        if tok.kind == "prob":
            self.take()
            p = self.probability()
            self.expect("[")
            path = self.path()
            self.expect("]")
            return ProbGeq(p, path)
        if tok.text == "(":
            self.take()
            node = self.formula()
            self.expect(")")
            return node
        found = tok.text or "end of input"
        raise FormulaSyntaxError(f"expected a state formula, found {found!r}", tok.pos)

    def probability(self) -> float:
        tok = self.peek()
        if tok.kind != "num":
            raise FormulaSyntaxError("expected a probability", tok.pos)
        self.take()
        if self.peek().text == "/":
            self.take()
            den = self.peek()
            if den.kind != "num" or "." in den.text or "." in tok.text:
                raise FormulaSyntaxError("fractions need integer numerator and denominator", den.pos)
            self.take()
            if int(den.text) == 0:
                raise FormulaSyntaxError("zero denominator", den.pos)
            value = float(Fraction(int(tok.text), int(den.text)))
        else:
            value = float(tok.text)
        if not 0.0 <= value <= 1.0:
            raise FormulaSyntaxError(f"probability {value} outside [0, 1]", tok.pos)
        return value

    def path(self) -> PathNode:
        tok = self.peek()
        if tok.kind == "ident" and tok.text in ("G", "X") and self.starts_unit(self.peek(1)):
            self.take()
            sub = self.formula()
            if tok.text == "G":
                return ContinuingWeakUntil(sub, FALSE)
            if self.fragment == CPCTL:
                raise FragmentError("X", CPCTL)
            return Next(sub)
        left_units = self.unit_list()
        w = self.peek()
        if not (w.kind == "ident" and w.text == "W"):
            found = w.text or "end of input"
            raise FormulaSyntaxError(f"expected 'W', found {found!r}", w.pos)
        self.take()
        goal_units = self.unit_list()
        left = conjoin(left_units)
        whole = conjoin(goal_units)
        if isinstance(whole, And) and whole.left == left:
            return ContinuingWeakUntil(left, whole.right)
        rest = _strip_conjunct(left, left_units, goal_units)
        if rest is not None:
            return ContinuingWeakUntil(left, conjoin(rest))
        if self.fragment == CPCTL:
            if self.normalize:
                return ContinuingWeakUntil(left, whole)
            raise FragmentError("W (non-continuing)", CPCTL)
        return WeakUntil(left, whole)


def _strip_conjunct(left, left_units: list, goal_units: list):
    """Return the goal conjuncts without the left operand, or None if it is absent."""
    goal = [c for u in goal_units for c in conjuncts(u)]
    if left in goal:
        goal.remove(left)
        return goal
    for u in conjuncts(left):
        if u not in goal:
            return None
        goal.remove(u)
    return goal


def parse_tree(text: str, fragment: str = CPCTL, continuing_normalize: bool = False) -> StateNode:
    if fragment not in (CPCTL, SAFE_PCTL):
        raise ValueError(f"unknown fragment {fragment!r}")
    return _Parser(text, fragment, continuing_normalize).parse()


def parse_formula(text: str, fragment: str = CPCTL, continuing_normalize: bool = False) -> "Formula":
    """Parse and index a state formula.

    ``G f`` lowers to ``f W false``.  In CPCTL mode a ``W`` is accepted only in
    the continuing form ``f W (f & g)`` unless ``continuing_normalize`` is set,
    in which case ``f W g`` becomes ``f W (f & g)``.
    """
    return Formula(parse_tree(text, fragment, continuing_normalize), fragment)


# --------------------------------------------------------------------------
# indexed formula


@dataclass(frozen=True)
class FNode:
    kind: str  # atom neg true false and or prob next wu cwu until
    children: tuple = ()
    name: str | None = None
    p: float | None = None


_KIND = {
    Atom: "atom",
    NegAtom: "neg",
    TrueConst: "true",
    FalseConst: "false",
    And: "and",
    Or: "or",
    ProbGeq: "prob",
    Next: "next",
    WeakUntil: "wu",
    ContinuingWeakUntil: "cwu",
    Until: "until",
}


class Formula:
    """A state formula flattened into positional node tables.

    ``state_subs`` lists state-subformula node ids sorted by total depth
    (children always first); the valuation vector ``mu`` follows this order.
    ``path_subs`` lists path-subformula ids, one per ``P>=`` node, in the order
    of their owning ``P>=`` node in ``state_subs``; the counter vector ``nu``
    follows this order.
    """

    def __init__(self, tree: StateNode, fragment: str = CPCTL):
        if not is_state(tree):
            raise TypeError("the root of a formula must be a state formula")
        self.tree = tree
        self.fragment = fragment
        self.nodes: list[FNode] = []
        self.trees: list = []
        self.root = self._flatten(tree)
        self._validate()
        nesting, total = _compute_depths(self)
        self.nesting_depth = nesting
        self.total_depth = total
        state_ids = [i for i, n in enumerate(self.nodes) if n.kind in _STATE_KINDS]
        self.state_subs: list[int] = sorted(state_ids, key=lambda i: (total[i], i))
        self.prob_nodes: list[int] = [i for i in self.state_subs if self.nodes[i].kind == "prob"]
        self.path_subs: list[int] = [self.nodes[i].children[0] for i in self.prob_nodes]
        self.mu_index = {nid: k for k, nid in enumerate(self.state_subs)}
        self.nu_index = {nid: k for k, nid in enumerate(self.prob_nodes)}
        self.nu_index_of_path = {nid: k for k, nid in enumerate(self.path_subs)}
        self.thresholds = np.array([self.nodes[i].p for i in self.prob_nodes], dtype=float)

    def _flatten(self, node) -> int:
        kids = tuple(self._flatten(c) for c in children(node))
        kind = _KIND[type(node)]
        self.nodes.append(
            FNode(
                kind,
                kids,
                name=getattr(node, "name", None),
                p=getattr(node, "p", None),
            )
        )
        self.trees.append(node)
        return len(self.nodes) - 1

    def _validate(self) -> None:
        for n in self.nodes:
            if n.kind == "prob" and not 0.0 <= n.p <= 1.0:
                raise ValueError(f"threshold {n.p} outside [0, 1]")
            if self.fragment == CPCTL:
                if n.kind == "next":
                    raise FragmentError("X", CPCTL)
                if n.kind == "wu":
                    raise FragmentError("W (non-continuing)", CPCTL)
                if n.kind == "or":
                    raise FragmentError("|", CPCTL)
                if n.kind == "until":
                    raise FragmentError("U", CPCTL)

    # sizes
    @property
    def sf(self) -> int:
        return len(self.state_subs)

    @property
    def pf(self) -> int:
        return len(self.path_subs)

    def __eq__(self, other) -> bool:
        return isinstance(other, Formula) and self.tree == other.tree

    def __hash__(self) -> int:
        return hash(self.tree)

    def __repr__(self) -> str:
        return f"Formula({to_text(self.tree)!r})"

    def __str__(self) -> str:
        return to_text(self.tree)

    def subtree(self, node_id: int):
        return self.trees[node_id]

    def path_operands(self, j: int) -> tuple[int, int]:
        """Node ids of (left, goal-or-right) of path formula ``j``; X has (sub, sub)."""
        path = self.nodes[self.path_subs[j]]
        if path.kind == "next":
            return path.children[0], path.children[0]
        return path.children

    def top_level_thresholds(self) -> list[tuple[int, float]]:
        """Counter indices and thresholds of the ``P>=`` conjuncts of the root."""
        out = []
        stack = [self.root]
        while stack:
            nid = stack.pop()
            n = self.nodes[nid]
            if n.kind == "and":
                stack.extend(reversed(n.children))
            elif n.kind == "prob":
                out.append((self.nu_index[nid], n.p))
        return sorted(out)

    def canonical_valuation(self, labels: Iterable[str], nu) -> np.ndarray:
        return canonical_valuation(self, labels, nu)


_STATE_KINDS = {"atom", "neg", "true", "false", "and", "or", "prob"}


# --------------------------------------------------------------------------
# depths


def _compute_depths(f: Formula) -> tuple[list[int], list[int]]:
    nesting = [0] * len(f.nodes)
    total = [0] * len(f.nodes)
    for i, n in enumerate(f.nodes):  # post-order: children already done
        if n.kind in ("and", "or"):
            l, r = n.children
            nesting[i] = max(nesting[l], nesting[r])
            total[i] = 0 if total[l] == total[r] == 0 else 1 + max(total[l], total[r])
        elif n.kind == "prob":
            path = f.nodes[n.children[0]]
            subs = path.children
            nesting[i] = 1 + max(nesting[c] for c in subs)
            total[i] = 1 + max(total[c] for c in subs)
            nesting[n.children[0]] = nesting[i]
            total[n.children[0]] = total[i]
    return nesting, total


def depths(f: Formula) -> dict[int, tuple[int, int]]:
    """Map each state-subformula id to its (nesting depth, total depth)."""
    return {i: (f.nesting_depth[i], f.total_depth[i]) for i in f.state_subs}


# --------------------------------------------------------------------------
# valuations


def eval_boolean(node, labels) -> bool:
    """Evaluate a probability-free formula on a label set."""
    if isinstance(node, Atom):
        return node.name in labels
    if isinstance(node, NegAtom):
        return node.name not in labels
    if isinstance(node, TrueConst):
        return True
    if isinstance(node, FalseConst):
        return False
    if isinstance(node, And):
        return eval_boolean(node.left, labels) and eval_boolean(node.right, labels)
    if isinstance(node, Or):
        return eval_boolean(node.left, labels) or eval_boolean(node.right, labels)
    raise ValueError(f"{type(node).__name__} is not a boolean formula")


def canonical_valuation(f: Formula, labels: Iterable[str], nu) -> np.ndarray:
    """The valuation bits ``mu`` implied by counters ``nu`` at a state with ``labels``."""
    labels = frozenset(labels)
    nu = np.asarray(nu, dtype=float)
    mu = np.zeros(f.sf, dtype=np.int8)
    for k, nid in enumerate(f.state_subs):
        n = f.nodes[nid]
        if n.kind == "atom":
            v = n.name in labels
        elif n.kind == "neg":
            v = n.name not in labels
        elif n.kind == "true":
            v = True
        elif n.kind == "false":
            v = False
        elif n.kind == "and":
            v = mu[f.mu_index[n.children[0]]] and mu[f.mu_index[n.children[1]]]
        elif n.kind == "or":
            v = mu[f.mu_index[n.children[0]]] or mu[f.mu_index[n.children[1]]]
        else:
            v = nu[f.nu_index[nid]] >= n.p - TIE_TOLERANCE
        mu[k] = 1 if v else 0
    return mu


# --------------------------------------------------------------------------
# syntactic transforms


def literal_projection(node) -> StateNode:
    """The boolean formula every state satisfying ``node`` must satisfy."""
    if isinstance(node, _LITERAL_TYPES):
        return node
    if isinstance(node, And):
        return And(literal_projection(node.left), literal_projection(node.right))
    if isinstance(node, ProbGeq):
        if not isinstance(node.path, ContinuingWeakUntil):
            raise ValueError("literal projection is defined on CPCTL formulas only")
        if node.p == 0:
            return TRUE
        return literal_projection(node.path.left)
    raise ValueError(f"literal projection undefined for {type(node).__name__}")


def alit(f: Formula, node_id: int | None = None) -> StateNode:
    return literal_projection(f.subtree(f.root if node_id is None else node_id))


def slater_transform(f: Formula, d) -> Formula:
    """Replace the threshold of every ``P>=`` node by ``d`` (ordered like ``nu``)."""
    d = [float(x) for x in d]
    if len(d) != f.pf:
        raise ValueError(f"expected {f.pf} thresholds, got {len(d)}")
    for x in d:
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"threshold {x} outside [0, 1]")
    new_p = {nid: d[k] for k, nid in enumerate(f.prob_nodes)}
    counter = iter(range(len(f.nodes)))

    def rebuild(node):
        kids = [rebuild(c) for c in children(node)]
        nid = next(counter)
        if isinstance(node, ProbGeq):
            return ProbGeq(new_p[nid], kids[0])
        if not kids:
            return node
        return type(node)(*kids)

    return Formula(rebuild(f.tree), f.fragment)


def fd_tree(node):
    """Finitely-decisive rewriting of a CPCTL tree (U and | appear in the output)."""
    if isinstance(node, _LITERAL_TYPES):
        return node
    if isinstance(node, And):
        return And(fd_tree(node.left), fd_tree(node.right))
    if isinstance(node, ProbGeq):
        return ProbGeq(node.p, fd_tree(node.path))
    if isinstance(node, ContinuingWeakUntil):
        left = fd_tree(node.left)
        surely_forever = ProbGeq(1.0, ContinuingWeakUntil(node.left, FALSE))
        return Until(left, Or(surely_forever, And(left, fd_tree(node.goal))))
    raise ValueError(f"FD is defined on CPCTL formulas only, got {type(node).__name__}")


def fd_transform(f: Formula) -> Formula:
    return Formula(fd_tree(f.tree), SAFE_PCTL)


def fd_counter_map(f: Formula, g: Formula) -> dict[int, int]:
    """Map counter indices of ``f`` to the matching counters of ``g = fd_transform(f)``.

    Walks both trees in parallel; the ``P>=1 [G .]`` nodes inserted by FD have
    no counterpart and are skipped.
    """
    out: dict[int, int] = {}

    def walk(a: int, b: int) -> None:
        na, nb = f.nodes[a], g.nodes[b]
        if na.kind == "prob":
            out[f.nu_index[a]] = g.nu_index[b]
            walk(na.children[0], nb.children[0])
        elif na.kind == "cwu":
            until = nb
            walk(na.children[0], until.children[0])
            disj = g.nodes[until.children[1]]
            conj = g.nodes[disj.children[1]]
            walk(na.children[1], conj.children[1])
        elif na.kind == "and":
            walk(na.children[0], nb.children[0])
            walk(na.children[1], nb.children[1])

    walk(f.root, g.root)
    return out
