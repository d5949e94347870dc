"""Trainable loss networks compiled from expression trees.

Compilation reverses the tree's edges into a feed-forward topology and puts
one multiplicative weight on every edge: each child's value is scaled by its
edge weight before entering the parent primitive. With all weights at 1 and an
identity output activation the network reproduces the source tree exactly.
"""

from __future__ import annotations

import json

import numpy as np

from . import engine
from .engine import GraphNode
from .errors import (DocumentError, UnsupportedVersionError, UsageError)
from .expressions import (ExprTree, canonical_key, parse,
                          satisfies_argument_constraint, to_prefix)

DOCUMENT_VERSION = 1
ACTIVATIONS = ("identity", "softplus")

WEIGHT_INIT_MEAN = 1.0
WEIGHT_INIT_VARIANCE = 1e-3


class MetaLossNetwork:
    """An edge-weighted, differentiable form of a symbolic loss.

    ``weights`` follow the preorder edge enumeration of the source tree
    (parent visited first, one weight per parent->child link).
    """

    def __init__(self, tree: ExprTree, weights, activation: str = "identity",
                 meta: dict | None = None):
        if activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {activation!r}")
        n_edges = tree.size() - 1
        weights = np.asarray(weights, dtype=np.float64).reshape(-1).copy()
        if weights.size != n_edges:
            raise UsageError(
                f"expected {n_edges} edge weights for tree {to_prefix(tree)}, "
                f"got {weights.size}")
        self.tree = tree
        self._weights = weights
        self.activation = activation
        self.meta = dict(meta or {})

    @property
    def n_weights(self) -> int:
        return self._weights.size

    @property
    def weights(self) -> np.ndarray:
        return self._weights.copy()

    def set_weights(self, values):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != self._weights.size:
            raise UsageError(
                f"expected {self._weights.size} weights, got {values.size}")
        self._weights = values.copy()

    def param_nodes(self) -> list[GraphNode]:
        """Fresh differentiable leaves holding the current weights."""
        return [engine.parameter(w) for w in self._weights]

    def loss_elements(self, y, f, params=None) -> GraphNode:
        """Elementwise loss over all (y_ij, f_ij) pairs, activation applied."""
        y = y if isinstance(y, GraphNode) else engine.constant(y)
        f = f if isinstance(f, GraphNode) else engine.constant(f)
        if y.value.shape != f.value.shape:
            raise UsageError(
                f"forward: y shape {y.value.shape} != f shape {f.value.shape}")
        if params is None:
            params = [engine.constant(w) for w in self._weights]
        elif len(params) != self._weights.size:
            raise UsageError(
                f"expected {self._weights.size} weight nodes, got {len(params)}")

        cursor = [0]

        def ev(node: ExprTree) -> GraphNode:
            s = node.symbol
            if s == "y":
                return y
            if s == "f":
                return f
            if s == "1":
                return engine.constant(1.0)
            if s == "-1":
                return engine.constant(-1.0)
            args = []
            for child in node.children:
                w = params[cursor[0]]
                cursor[0] += 1
                args.append(engine.mul(w, ev(child)))
            return engine.apply_primitive(s, args)

        out = ev(self.tree)
        if self.activation == "softplus":
            out = engine.softplus(out)
        return out

    def loss(self, y, f, params=None) -> GraphNode:
        """Scalar loss: arithmetic mean of the elementwise losses."""
        return engine.mean_all(self.loss_elements(y, f, params=params))

    @property
    def key(self) -> str:
        return canonical_key(self.tree)

    # -- document format ----------------------------------------------------

    def to_document(self) -> str:
        doc = {
            "version": DOCUMENT_VERSION,
            "expression": to_prefix(self.tree),
            "weights": [float(w) for w in self._weights],
            "activation": self.activation,
            "meta": self.meta,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_document(cls, text: str) -> "MetaLossNetwork":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DocumentError(f"invalid loss document: {exc.msg}",
                                position=exc.pos) from exc
        if not isinstance(doc, dict):
            raise DocumentError("loss document must be a JSON object")
        version = doc.get("version")
        if version != DOCUMENT_VERSION:
            raise UnsupportedVersionError(version)
        for field in ("expression", "weights", "activation"):
            if field not in doc:
                raise DocumentError(f"loss document missing field {field!r}")
        tree = parse(doc["expression"])
        weights = doc["weights"]
        if (not isinstance(weights, list)
                or not all(isinstance(w, (int, float)) for w in weights)):
            raise DocumentError("'weights' must be a list of numbers")
        activation = doc["activation"]
        if activation not in ACTIVATIONS:
            raise DocumentError(f"unknown activation {activation!r}")
        return cls(tree, weights, activation=activation,
                   meta=doc.get("meta") or {})

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_document())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetaLossNetwork":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_document(fh.read())

    def __repr__(self):
        return (f"MetaLossNetwork({to_prefix(self.tree)!r}, "
                f"n_weights={self.n_weights}, activation={self.activation!r})")


def compile_tree(tree: ExprTree, activation: str = "identity",
                 rng: np.random.Generator | None = None,
                 unit_weights: bool = False,
                 meta: dict | None = None) -> MetaLossNetwork:
    """Parameterize a tree's edges into a trainable loss network.

    Weights are drawn i.i.d. from N(1, 1e-3) so the network starts in its near
    original unit form; ``unit_weights`` pins them at exactly 1.
    """
    if not satisfies_argument_constraint(tree):
        raise UsageError(
            f"tree {to_prefix(tree)} violates the argument constraint "
            "(must contain both the prediction and the target)")
    n_edges = tree.size() - 1
    if unit_weights:
        weights = np.ones(n_edges)
    else:
        if rng is None:
            raise UsageError("compile_tree: rng required unless unit_weights")
        weights = rng.normal(WEIGHT_INIT_MEAN, np.sqrt(WEIGHT_INIT_VARIANCE),
                             size=n_edges)
    return MetaLossNetwork(tree, weights, activation=activation, meta=meta)
