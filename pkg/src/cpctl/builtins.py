"""Built-in models: the two-branch MDP of the nested-objective example, the
expressivity witness chain, and the slippery gridworlds."""
from __future__ import annotations

from dataclasses import dataclass

from .model import Distribution, Mdp, ModelError, make_mdp

EXAMPLE1_STATES = [f"s{i}" for i in range(9)]


def example1(labeling: str = "figure") -> Mdp:
    """Nine-state MDP; ``a1``/``a4`` is the only choice (at ``s0``).

    ``labeling="figure"`` puts ``a`` on ``s4`` and ``s8``, the placement under
    which the per-state avoidance probabilities annotated on the figure
    (3/4, 2/3, 1, 1/2, 1, 0, 0, 1) hold.  ``labeling="text"`` uses ``{s5, s7}``
    instead, kept for comparison only.
    """
    if labeling == "figure":
        a_states = ("s4", "s8")
    elif labeling == "text":
        a_states = ("s5", "s7")
    else:
        raise ValueError(f"unknown labeling {labeling!r}")
    actions = {
        "s0": {"a1": {"s1": 1.0}, "a4": {"s6": 1.0}},
        "s1": {"a2": {"s2": 0.5, "s3": 0.5}},
        "s3": {"a3": {"s4": 0.5, "s5": 0.5}},
        "s6": {"a5": {"s7": 2.0 / 3.0, "s8": 1.0 / 3.0}},
    }
    labels = {s: ["a"] for s in a_states}
    return make_mdp(EXAMPLE1_STATES, "s0", ["a"], labels, actions)


def thm1_chain(alpha: float, eps: float) -> Mdp:
    """The five-state chain used to show nested formulas are not flat-expressible."""
    if not (0.0 <= alpha <= 1.0 and 0.0 <= eps <= 1.0):
        raise ValueError("alpha and eps must lie in [0, 1]")
    states = ["root", "left", "right", "leftleft", "leftright"]
    labels = {"root": ["c"], "left": ["c"], "right": [], "leftleft": ["c", "a"], "leftright": ["b"]}
    actions = {
        "root": {"go": {"left": 1.0 - eps, "right": eps}},
        "left": {"go": {"leftleft": alpha, "leftright": 1.0 - alpha}},
    }
    return make_mdp(states, "root", ["a", "b", "c"], labels, actions)


# --------------------------------------------------------------------------
# gridworlds


@dataclass(frozen=True)
class SlipLevels:
    high: float = 0.8
    medium: float = 0.3
    low: float = 0.1
    constant: float = 0.3  # same shade as the medium tier

    def __post_init__(self):
        for name in ("high", "medium", "low", "constant"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"slip level {name}={v} outside [0, 1]")


@dataclass(frozen=True)
class GridLayout:
    rows: int
    cols: int
    walls: frozenset
    goal: tuple
    start: tuple
    tiers: dict  # column -> tier name; border columns are unsafe


def grid_layout(variant: int) -> GridLayout:
    if variant == 1:
        walls = frozenset((r, 3) for r in range(1, 6))
        tiers = {1: "high", 2: "low", 3: "constant", 4: "constant", 5: "constant"}
        return GridLayout(7, 7, walls, (0, 3), (6, 3), tiers)
    if variant == 2:
        walls = frozenset((r, 4) for r in (1, 2, 3, 6, 7, 8))
        tiers = {1: "high", 2: "medium", 3: "low", 4: "constant", 5: "constant", 6: "constant", 7: "constant"}
        return GridLayout(10, 9, walls, (0, 4), (9, 4), tiers)
    raise ValueError(f"unknown gridworld variant {variant!r}; expected 1 or 2")


_MOVES = (("up", -1, 0), ("down", 1, 0), ("left", 0, -1), ("right", 0, 1))


def cell_name(r: int, c: int) -> str:
    return f"r{r}c{c}"


def gridworld(variant: int, slip: SlipLevels | None = None) -> Mdp:
    """Slippery gridworld with unsafe border columns (``d``) and an absorbing goal (``G``).

    Each move succeeds with probability ``1 - slip`` where ``slip`` depends on
    the column tier; the slip mass is spread uniformly over the other open
    directions.  Moves into walls or off the grid are not offered, and a cell
    with a single open direction moves there surely.  Unsafe cells and the
    goal are absorbing.
    """
    slip = slip or SlipLevels()
    lay = grid_layout(variant)
    cells = [(r, c) for r in range(lay.rows) for c in range(lay.cols) if (r, c) not in lay.walls]
    index = {cell: i for i, cell in enumerate(cells)}
    names = [cell_name(*cell) for cell in cells]
    unsafe = {cell for cell in cells if cell[1] in (0, lay.cols - 1)}
    actions, transitions, labels = [], [], []
    for cell in cells:
        r, c = cell
        if cell in unsafe:
            labels.append(frozenset({"d"}))
        elif cell == lay.goal:
            labels.append(frozenset({"G"}))
        else:
            labels.append(frozenset())
        if cell in unsafe or cell == lay.goal:
            actions.append(["stay"])
            transitions.append([Distribution.from_pairs([(index[cell], 1.0)])])
            continue
        open_moves = []
        for name, dr, dc in _MOVES:
            target = (r + dr, c + dc)
            if target in index:
                open_moves.append((name, index[target]))
        if not open_moves:
            raise ModelError(f"cell {cell} has no open direction")
        mass = getattr(slip, lay.tiers[c])
        acts, dists = [], []
        for name, target in open_moves:
            others = [t for n, t in open_moves if n != name]
            pairs = [(target, 1.0 - mass if others else 1.0)]
            pairs.extend((t, mass / len(others)) for t in others)
            acts.append(name)
            dists.append(Distribution.from_pairs(pairs))
        actions.append(acts)
        transitions.append(dists)
    return Mdp(names, actions, transitions, index[lay.start], ["d", "G"], labels)


GRIDWORLD_FORMULA = "P>={p1} [ G P>={p2} [ !d W (!d & G) ] ]"


def gridworld_formula(p1: float = 0.0, p2: float = 0.6) -> str:
    return GRIDWORLD_FORMULA.format(p1=p1, p2=p2)


def builtin_model(name: str, alpha: float = 0.5, eps: float = 0.0, slip: SlipLevels | None = None) -> Mdp:
    """Resolve a built-in model name: example1, thm1 / thm1chain, gridworld1, gridworld2."""
    if name == "example1":
        return example1()
    if name in ("thm1", "thm1chain"):
        return thm1_chain(alpha, eps)
    if name == "gridworld1":
        return gridworld(1, slip)
    if name == "gridworld2":
        return gridworld(2, slip)
    raise KeyError(f"unknown built-in model {name!r}")


BUILTIN_NAMES = ("example1", "thm1", "thm1chain", "gridworld1", "gridworld2")
