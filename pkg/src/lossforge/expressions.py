"""Expression trees for candidate loss functions and their genetic operators.

Trees are immutable; every operator returns a fresh tree. The text format is
prefix notation, e.g. ``(abs (log (* y f)))``, with the token set
``+ - * aq min max sign sq abs log sqrt tanh y f 1 -1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import NUMPY_IMPL, PRIMITIVE_ARITY
from .errors import ExprParseError, UsageError

BINARY_OPS = ("+", "-", "*", "aq", "min", "max")
UNARY_OPS = ("sign", "sq", "abs", "log", "sqrt", "tanh")
FUNCTIONS = BINARY_OPS + UNARY_OPS
TERMINALS = ("y", "f", "1", "-1")

PRED = "f"      # the model prediction terminal
TARGET = "y"    # the ground-truth terminal


@dataclass(frozen=True)
class ExprTree:
    """A node of a symbolic loss expression; the root node is the tree."""

    symbol: str
    children: tuple["ExprTree", ...] = field(default=())

    def __post_init__(self):
        if self.symbol in TERMINALS:
            if self.children:
                raise UsageError(f"terminal {self.symbol!r} cannot have children")
        elif self.symbol in FUNCTIONS:
            if len(self.children) != PRIMITIVE_ARITY[self.symbol]:
                raise UsageError(
                    f"{self.symbol!r} expects {PRIMITIVE_ARITY[self.symbol]} "
                    f"children, got {len(self.children)}")
        else:
            raise UsageError(f"unknown symbol: {self.symbol!r}")

    @property
    def is_terminal(self) -> bool:
        return not self.children

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def depth(self) -> int:
        if not self.children:
            return 1
        return 1 + max(c.depth() for c in self.children)

    def __str__(self):
        return to_prefix(self)


def walk(tree: ExprTree):
    """Yield (path, node) pairs in preorder; path is a tuple of child indices."""
    stack = [((), tree)]
    while stack:
        path, node = stack.pop()
        yield path, node
        for i in range(len(node.children) - 1, -1, -1):
            stack.append((path + (i,), node.children[i]))


def subtree_at(tree: ExprTree, path) -> ExprTree:
    node = tree
    for i in path:
        node = node.children[i]
    return node


def replace_at(tree: ExprTree, path, new: ExprTree) -> ExprTree:
    if not path:
        return new
    i = path[0]
    children = list(tree.children)
    children[i] = replace_at(children[i], path[1:], new)
    return ExprTree(tree.symbol, tuple(children))


def contains_terminal(tree: ExprTree, symbol: str) -> bool:
    return any(n.symbol == symbol for _, n in walk(tree))


def satisfies_argument_constraint(tree: ExprTree) -> bool:
    return contains_terminal(tree, PRED) and contains_terminal(tree, TARGET)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def to_prefix(tree: ExprTree) -> str:
    if tree.is_terminal:
        return tree.symbol
    return "(" + " ".join([tree.symbol] + [to_prefix(c) for c in tree.children]) + ")"


def canonical_key(tree: ExprTree) -> str:
    """Structural identity key: equal iff trees are node-for-node identical."""
    return to_prefix(tree)


def _tokenize(text: str):
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "()":
            tokens.append((ch, i))
            i += 1
            continue
        j = i
        while j < len(text) and not text[j].isspace() and text[j] not in "()":
            j += 1
        tokens.append((text[i:j], i))
        i = j
    return tokens


def parse(text: str) -> ExprTree:
    """Parse prefix notation back into a tree; errors carry a position."""
    tokens = _tokenize(text)
    if not tokens:
        raise ExprParseError("empty expression", position=0)
    pos = 0

    def parse_node():
        nonlocal pos
        if pos >= len(tokens):
            raise ExprParseError("unexpected end of expression",
                                 position=len(text))
        tok, off = tokens[pos]
        if tok == "(":
            pos += 1
            if pos >= len(tokens):
                raise ExprParseError("missing operator after '('", position=off)
            op, op_off = tokens[pos]
            if op not in FUNCTIONS:
                raise ExprParseError(f"unknown primitive token {op!r}",
                                     position=op_off)
            pos += 1
            children = []
            for _ in range(PRIMITIVE_ARITY[op]):
                children.append(parse_node())
            if pos >= len(tokens) or tokens[pos][0] != ")":
                raise ExprParseError(f"expected ')' closing {op!r}",
                                     position=tokens[pos][1] if pos < len(tokens) else len(text))
            pos += 1
            return ExprTree(op, tuple(children))
        if tok == ")":
            raise ExprParseError("unexpected ')'", position=off)
        if tok not in TERMINALS:
            raise ExprParseError(f"unknown terminal token {tok!r}", position=off)
        pos += 1
        return ExprTree(tok)

    tree = parse_node()
    if pos != len(tokens):
        raise ExprParseError("trailing tokens after expression",
                             position=tokens[pos][1])
    return tree


def to_infix(tree: ExprTree) -> str:
    """Human-readable rendering, e.g. ``(y - f)^2`` for ``(sq (- y f))``."""
    sym = tree.symbol
    if tree.is_terminal:
        return sym

    def arg(child):
        # Call-style parens already delimit the argument.
        s = to_infix(child)
        if child.symbol in ("+", "-", "*") and s.startswith("("):
            return s[1:-1]
        return s

    if sym in ("+", "-", "*"):
        return f"({to_infix(tree.children[0])} {sym} {to_infix(tree.children[1])})"
    if sym in ("aq", "min", "max"):
        return f"{sym}({arg(tree.children[0])}, {arg(tree.children[1])})"
    if sym == "sq":
        return f"{to_infix(tree.children[0])}^2"
    if sym == "abs":
        return f"|{arg(tree.children[0])}|"
    return f"{sym}({arg(tree.children[0])})"


# ---------------------------------------------------------------------------
# direct evaluation (shares numpy kernels with the graph engine)
# ---------------------------------------------------------------------------

def evaluate_tree(tree: ExprTree, y, f):
    """Evaluate a tree elementwise on raw arrays, without building a graph."""
    y = np.asarray(y, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)

    def ev(node):
        s = node.symbol
        if s == "y":
            return y
        if s == "f":
            return f
        if s == "1":
            return np.float64(1.0)
        if s == "-1":
            return np.float64(-1.0)
        args = [ev(c) for c in node.children]
        return NUMPY_IMPL[s](*args)

    return ev(tree)


# ---------------------------------------------------------------------------
# random generation
# ---------------------------------------------------------------------------

def _gen(depth_left: int, method: str, rng: np.random.Generator) -> ExprTree:
    if depth_left <= 1:
        return ExprTree(TERMINALS[int(rng.integers(0, len(TERMINALS)))])
    if method == "grow":
        k = int(rng.integers(0, len(FUNCTIONS) + len(TERMINALS)))
        if k >= len(FUNCTIONS):
            return ExprTree(TERMINALS[k - len(FUNCTIONS)])
        sym = FUNCTIONS[k]
    else:
        sym = FUNCTIONS[int(rng.integers(0, len(FUNCTIONS)))]
    arity = PRIMITIVE_ARITY[sym]
    return ExprTree(sym, tuple(_gen(depth_left - 1, method, rng)
                               for _ in range(arity)))


def random_tree(cfg, rng: np.random.Generator) -> ExprTree:
    """One ramped half-and-half sample within cfg.init_depth."""
    dmin, dmax = cfg.init_depth
    if not (1 <= dmin <= dmax <= cfg.max_depth):
        raise UsageError(
            f"init_depth {cfg.init_depth} outside [1, max_depth={cfg.max_depth}]")
    target = int(rng.integers(dmin, dmax + 1))
    method = "grow" if rng.random() < 0.5 else "full"
    return _gen(target, method, rng)


def ramped_population(cfg, rng: np.random.Generator) -> list[ExprTree]:
    """Initial population: depths cycle through the init range, methods alternate."""
    dmin, dmax = cfg.init_depth
    depths = list(range(dmin, dmax + 1))
    pop = []
    for i in range(cfg.population_size):
        target = depths[i % len(depths)]
        method = "grow" if i % 2 == 0 else "full"
        pop.append(correct_constraints(_gen(target, method, rng), rng))
    return pop


# ---------------------------------------------------------------------------
# constraint repair and variation operators
# ---------------------------------------------------------------------------

def correct_constraints(tree: ExprTree, rng: np.random.Generator) -> ExprTree:
    """Ensure the tree uses both arguments.

    A violating tree has one uniformly chosen terminal replaced by a random
    binary primitive over the prediction and target terminals, in no
    predetermined order. A satisfying tree is returned unchanged.
    """
    if satisfies_argument_constraint(tree):
        return tree
    terminal_paths = [p for p, n in walk(tree) if n.is_terminal]
    path = terminal_paths[int(rng.integers(0, len(terminal_paths)))]
    op = BINARY_OPS[int(rng.integers(0, len(BINARY_OPS)))]
    pair = (ExprTree(PRED), ExprTree(TARGET))
    if rng.random() < 0.5:
        pair = (pair[1], pair[0])
    return replace_at(tree, path, ExprTree(op, pair))


def crossover(a: ExprTree, b: ExprTree, cfg,
              rng: np.random.Generator) -> tuple[ExprTree, ExprTree]:
    """One-point subtree swap with constraint repair and a depth guard.

    The guard applies to the final offspring (repair can add one level), so
    offspring of bound-satisfying parents always satisfy the bound.
    """
    paths_a = [p for p, _ in walk(a)]
    paths_b = [p for p, _ in walk(b)]
    pa = paths_a[int(rng.integers(0, len(paths_a)))]
    pb = paths_b[int(rng.integers(0, len(paths_b)))]
    sub_a = subtree_at(a, pa)
    sub_b = subtree_at(b, pb)
    child_a = correct_constraints(replace_at(a, pa, sub_b), rng)
    child_b = correct_constraints(replace_at(b, pb, sub_a), rng)
    if child_a.depth() > cfg.max_depth:
        child_a = a
    if child_b.depth() > cfg.max_depth:
        child_b = b
    return child_a, child_b


MUTATION_SUBTREE_DEPTH = 3


def mutate(tree: ExprTree, cfg, rng: np.random.Generator) -> ExprTree:
    """Uniform mutation: replace one node's subtree with a fresh grown one."""
    paths = [p for p, _ in walk(tree)]
    path = paths[int(rng.integers(0, len(paths)))]
    fresh = _gen(MUTATION_SUBTREE_DEPTH, "grow", rng)
    child = correct_constraints(replace_at(tree, path, fresh), rng)
    if child.depth() > cfg.max_depth:
        child = tree
    return child


def select_tournament(pop, k: int, rng: np.random.Generator) -> ExprTree:
    """Best of k uniform draws with replacement over (tree, fitness) pairs.

    Ties break toward fewer nodes, then the earlier population index.
    """
    if not pop:
        raise UsageError("select_tournament: empty population")
    if k < 1:
        raise UsageError("select_tournament: k must be >= 1")
    draws = rng.integers(0, len(pop), size=k)
    best_idx = None
    best_rank = None
    for i in draws:
        tree, fitness = pop[int(i)]
        rank = (fitness, tree.size(), int(i))
        if best_rank is None or rank < best_rank:
            best_rank = rank
            best_idx = int(i)
    return pop[best_idx][0]
