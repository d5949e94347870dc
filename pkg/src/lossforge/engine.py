"""Dense-array reverse-mode automatic differentiation with higher-order support.

Values are float64 numpy arrays. Every operation returns a ``GraphNode`` whose
backward rule is itself expressed in terms of engine operations, so gradients
produced with ``record_graph=True`` are ordinary graph nodes and can be
differentiated again (gradients of gradients).

Broadcasting is restricted to scalar-with-array for the searchable primitives;
the linear ops (matmul / add_bias / softmax / log_softmax) carry their own
shape contracts. Non-finite values never abort: a per-graph flag propagates to
descendants and callers decide what to do with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

# Protection constant for log / sqrt (and downstream loss kernels).
EPS = 1e-7

# A Tensor in this package is just a float64 ndarray.
Tensor = np.ndarray


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class GraphNode:
    """One value in a computation graph.

    ``parents`` form a DAG; ``grad`` holds the most recent backward result for
    this node. ``nonfinite`` is set when this node's value (or any ancestor's)
    contains NaN/Inf and propagates to every descendant.
    """

    __slots__ = ("value", "op", "parents", "requires_grad", "grad",
                 "nonfinite", "_vjp")

    def __init__(self, value, op="leaf", parents=(), requires_grad=False):
        self.value = as_tensor(value)
        self.op = op
        self.parents = tuple(parents)
        rg = requires_grad
        if not rg:
            for p in self.parents:
                if p.requires_grad:
                    rg = True
                    break
        self.requires_grad = rg
        nf = False
        for p in self.parents:
            if p.nonfinite:
                nf = True
                break
        if not nf:
            nf = not bool(np.isfinite(self.value).all())
        self.nonfinite = nf
        self.grad = None
        self._vjp = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"GraphNode(op={self.op!r}, shape={self.value.shape})"

    # Arithmetic sugar; '/' is deliberately absent (use aq or multiply by a
    # reciprocal constant).
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def constant(x) -> GraphNode:
    return GraphNode(x, op="const")


def parameter(x) -> GraphNode:
    return GraphNode(x, op="param", requires_grad=True)


def _wrap(x) -> GraphNode:
    return x if isinstance(x, GraphNode) else constant(x)


def _check_elementwise(a: GraphNode, b: GraphNode, op: str):
    if a.value.shape == b.value.shape:
        return
    if a.value.size == 1 or b.value.size == 1:
        return
    raise UsageError(
        f"{op}: shapes {a.value.shape} and {b.value.shape} are not "
        "elementwise-compatible (only scalar-with-array broadcast is allowed)")


def _fit(g: GraphNode, shape) -> GraphNode:
    """Reduce a gradient to the shape of the operand it belongs to."""
    if g.value.shape == tuple(shape):
        return g
    # Under the scalar-with-array rule the only mismatch is array -> scalar.
    return reshape(sum_all(g), shape)


# ---------------------------------------------------------------------------
# plain numpy implementations, shared with direct expression-tree evaluation
# so that both paths are bitwise identical
# ---------------------------------------------------------------------------

def np_aq(x1, x2):
    # x2*x2 may overflow to inf; the quotient is then 0, still finite.
    with np.errstate(over="ignore"):
        return x1 / np.sqrt(1.0 + x2 * x2)


def np_log(x):
    return np.log(np.abs(x) + EPS)


def np_sqrt(x):
    return np.sqrt(np.abs(x) + EPS)


NUMPY_IMPL = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "aq": np_aq,
    "min": np.minimum,
    "max": np.maximum,
    "sign": np.sign,
    "sq": np.square,
    "abs": np.abs,
    "log": np_log,
    "sqrt": np_sqrt,
    "tanh": np.tanh,
}

PRIMITIVE_ARITY = {
    "+": 2, "-": 2, "*": 2, "aq": 2, "min": 2, "max": 2,
    "sign": 1, "sq": 1, "abs": 1, "log": 1, "sqrt": 1, "tanh": 1,
}


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> GraphNode:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "+")
    out = GraphNode(np.add(a.value, b.value), "+", (a, b))

    def vjp(g):
        ga = _fit(g, a.value.shape) if a.requires_grad else None
        gb = _fit(g, b.value.shape) if b.requires_grad else None
        return ga, gb

    out._vjp = vjp
    return out


def sub(a, b) -> GraphNode:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "-")
    out = GraphNode(np.subtract(a.value, b.value), "-", (a, b))

    def vjp(g):
        ga = _fit(g, a.value.shape) if a.requires_grad else None
        gb = _fit(neg(g), b.value.shape) if b.requires_grad else None
        return ga, gb

    out._vjp = vjp
    return out


def mul(a, b) -> GraphNode:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "*")
    out = GraphNode(np.multiply(a.value, b.value), "*", (a, b))

    def vjp(g):
        ga = _fit(mul(g, b), a.value.shape) if a.requires_grad else None
        gb = _fit(mul(g, a), b.value.shape) if b.requires_grad else None
        return ga, gb

    out._vjp = vjp
    return out


def neg(a) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.negative(a.value), "neg", (a,))
    out._vjp = lambda g: ((neg(g),) if a.requires_grad else (None,))
    return out


def aq(a, b) -> GraphNode:
    """Analytical quotient x1 / sqrt(1 + x2^2): smooth protected division."""
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "aq")
    out = GraphNode(np_aq(a.value, b.value), "aq", (a, b))

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _fit(aq(g, b), a.value.shape)
        if b.requires_grad:
            t = add(1.0, square(b))
            gb = _fit(mul(g, neg(mul(a, mul(b, pow_const(t, -1.5))))),
                      b.value.shape)
        return ga, gb

    out._vjp = vjp
    return out


def minimum(a, b) -> GraphNode:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "min")
    out = GraphNode(np.minimum(a.value, b.value), "min", (a, b))
    # Gradient routes to the selected argument; ties go to the first.
    take_a = (a.value <= b.value).astype(np.float64)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _fit(mul(g, constant(take_a)), a.value.shape)
        if b.requires_grad:
            gb = _fit(mul(g, constant(1.0 - take_a)), b.value.shape)
        return ga, gb

    out._vjp = vjp
    return out


def maximum(a, b) -> GraphNode:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "max")
    out = GraphNode(np.maximum(a.value, b.value), "max", (a, b))
    take_a = (a.value >= b.value).astype(np.float64)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _fit(mul(g, constant(take_a)), a.value.shape)
        if b.requires_grad:
            gb = _fit(mul(g, constant(1.0 - take_a)), b.value.shape)
        return ga, gb

    out._vjp = vjp
    return out


def sign(a) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.sign(a.value), "sign", (a,))
    # Subgradient choice: zero everywhere.
    out._vjp = lambda g: (None,)
    return out


def square(a) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.square(a.value), "sq", (a,))
    out._vjp = lambda g: ((mul(g, mul(2.0, a)),) if a.requires_grad else (None,))
    return out


def absolute(a) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.abs(a.value), "abs", (a,))
    s = np.sign(a.value)
    out._vjp = lambda g: ((mul(g, constant(s)),) if a.requires_grad else (None,))
    return out


def plog(a) -> GraphNode:
    """Protected logarithm log(|x| + eps)."""
    a = _wrap(a)
    out = GraphNode(np_log(a.value), "log", (a,))
    s = np.sign(a.value)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        d = add(absolute(a), EPS)
        return (mul(g, mul(constant(s), pow_const(d, -1.0))),)

    out._vjp = vjp
    return out


def psqrt(a) -> GraphNode:
    """Protected square root sqrt(|x| + eps)."""
    a = _wrap(a)
    out = GraphNode(np_sqrt(a.value), "sqrt", (a,))
    s = np.sign(a.value)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        d = add(absolute(a), EPS)
        return (mul(g, mul(constant(0.5 * s), pow_const(d, -0.5))),)

    out._vjp = vjp
    return out


def tanh(a) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.tanh(a.value), "tanh", (a,))
    out._vjp = lambda g: ((mul(g, sub(1.0, square(out))),)
                          if a.requires_grad else (None,))
    return out


def exp(a) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.exp(a.value), "exp", (a,))
    out._vjp = lambda g: ((mul(g, out),) if a.requires_grad else (None,))
    return out


def log_exact(a) -> GraphNode:
    """Unprotected natural log; caller guarantees a strictly positive domain."""
    a = _wrap(a)
    out = GraphNode(np.log(a.value), "ln", (a,))
    out._vjp = lambda g: ((mul(g, pow_const(a, -1.0)),)
                          if a.requires_grad else (None,))
    return out


def pow_const(a, p: float) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.power(a.value, p), f"pow[{p}]", (a,))
    out._vjp = lambda g: ((mul(g, mul(float(p), pow_const(a, p - 1.0))),)
                          if a.requires_grad else (None,))
    return out


def relu(a) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.maximum(a.value, 0.0), "relu", (a,))
    mask = (a.value > 0.0).astype(np.float64)
    out._vjp = lambda g: ((mul(g, constant(mask)),)
                          if a.requires_grad else (None,))
    return out


def softplus(a) -> GraphNode:
    """Overflow-safe ln(1 + e^x); derivative is sigmoid(x) = exp(x - softplus(x))."""
    a = _wrap(a)
    v = np.maximum(a.value, 0.0) + np.log1p(np.exp(-np.abs(a.value)))
    out = GraphNode(v, "softplus", (a,))
    out._vjp = lambda g: ((mul(g, exp(sub(a, out))),)
                          if a.requires_grad else (None,))
    return out


def identity(a) -> GraphNode:
    return _wrap(a)


# ---------------------------------------------------------------------------
# shape / reduction ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(a.value.reshape(shape), "reshape", (a,))
    out._vjp = lambda g: ((reshape(g, a.value.shape),)
                          if a.requires_grad else (None,))
    return out


def broadcast_to(a, shape) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.broadcast_to(a.value, shape).copy(), "broadcast", (a,))
    out._vjp = lambda g: ((_sum_to(g, a.value.shape),)
                          if a.requires_grad else (None,))
    return out


def _sum_to(g: GraphNode, shape) -> GraphNode:
    shape = tuple(shape)
    cur = g
    lead = cur.value.ndim - len(shape)
    for _ in range(lead):
        cur = sum_axis(cur, 0, keepdims=False)
    for i, s in enumerate(shape):
        if s == 1 and cur.value.shape[i] != 1:
            cur = sum_axis(cur, i, keepdims=True)
    if cur.value.shape != shape:
        cur = reshape(cur, shape)
    return cur


def sum_all(a) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.sum(a.value), "sum", (a,))
    out._vjp = lambda g: ((broadcast_to(g, a.value.shape),)
                          if a.requires_grad else (None,))
    return out


def sum_axis(a, axis: int, keepdims: bool = False) -> GraphNode:
    a = _wrap(a)
    ax = axis if axis >= 0 else a.value.ndim + axis
    out = GraphNode(np.sum(a.value, axis=ax, keepdims=keepdims),
                    "sum_axis", (a,))

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        gg = g
        if not keepdims:
            ks = list(a.value.shape)
            ks[ax] = 1
            gg = reshape(gg, ks)
        return (broadcast_to(gg, a.value.shape),)

    out._vjp = vjp
    return out


def mean_all(a) -> GraphNode:
    a = _wrap(a)
    out = GraphNode(np.mean(a.value), "mean", (a,))
    inv = 1.0 / a.value.size

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        return (broadcast_to(mul(g, inv), a.value.shape),)

    out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# linear algebra ops for base-learner forward passes
# ---------------------------------------------------------------------------

def matmul(a, b) -> GraphNode:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise UsageError(
            f"matmul: non-conforming shapes {a.value.shape} x {b.value.shape}")
    out = GraphNode(a.value @ b.value, "matmul", (a, b))

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    out._vjp = vjp
    return out


def transpose(a) -> GraphNode:
    a = _wrap(a)
    if a.value.ndim != 2:
        raise UsageError(f"transpose: expected 2-D, got {a.value.shape}")
    out = GraphNode(a.value.T.copy(), "transpose", (a,))
    out._vjp = lambda g: ((transpose(g),) if a.requires_grad else (None,))
    return out


def add_bias(x, b) -> GraphNode:
    x, b = _wrap(x), _wrap(b)
    if x.value.ndim != 2 or b.value.ndim != 1 or b.value.shape[0] != x.value.shape[1]:
        raise UsageError(
            f"add_bias: non-conforming shapes {x.value.shape} + {b.value.shape}")
    out = GraphNode(x.value + b.value, "add_bias", (x, b))

    def vjp(g):
        gx = g if x.requires_grad else None
        gb = sum_axis(g, 0) if b.requires_grad else None
        return gx, gb

    out._vjp = vjp
    return out


def softmax(z) -> GraphNode:
    """Softmax over the class (last) axis, max-subtracted for stability."""
    z = _wrap(z)
    if z.value.ndim < 1:
        raise UsageError("softmax: input must have at least one axis")
    m = np.max(z.value, axis=-1, keepdims=True)
    e = np.exp(z.value - m)
    out = GraphNode(e / np.sum(e, axis=-1, keepdims=True), "softmax", (z,))

    def vjp(g):
        if not z.requires_grad:
            return (None,)
        t = sum_axis(mul(g, out), -1, keepdims=True)
        return (mul(out, sub(g, broadcast_to(t, z.value.shape))),)

    out._vjp = vjp
    return out


def log_softmax(z) -> GraphNode:
    """Log-softmax via the subtract-max log-sum-exp form."""
    z = _wrap(z)
    if z.value.ndim < 1:
        raise UsageError("log_softmax: input must have at least one axis")
    m = np.max(z.value, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(z.value - m), axis=-1, keepdims=True))
    out = GraphNode(z.value - lse, "log_softmax", (z,))

    def vjp(g):
        if not z.requires_grad:
            return (None,)
        s = exp(out)
        t = sum_axis(g, -1, keepdims=True)
        return (sub(g, mul(s, broadcast_to(t, z.value.shape))),)

    out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# searchable-primitive dispatch
# ---------------------------------------------------------------------------

_PRIMITIVE_FN = {
    "+": add, "-": sub, "*": mul, "aq": aq, "min": minimum, "max": maximum,
    "sign": sign, "sq": square, "abs": absolute, "log": plog,
    "sqrt": psqrt, "tanh": tanh,
}


def apply_primitive(op_id: str, inputs) -> GraphNode:
    """Apply one searchable primitive to 1-2 graph nodes."""
    if op_id not in _PRIMITIVE_FN:
        raise UsageError(f"unknown primitive: {op_id!r}")
    inputs = [_wrap(x) for x in inputs]
    arity = PRIMITIVE_ARITY[op_id]
    if len(inputs) != arity:
        raise UsageError(
            f"{op_id}: expected {arity} input(s), got {len(inputs)}")
    return _PRIMITIVE_FN[op_id](*inputs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: GraphNode):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()  # root first
    return order


def backward(output: GraphNode, wrt, record_graph: bool = False, seed=None):
    """Return d(output)/d(node) for every node in ``wrt``.

    The output must be scalar unless a seed gradient is supplied. Nodes not
    reachable from the output get a zero gradient. With ``record_graph`` the
    returned gradients are graph nodes and can be differentiated again.
    Non-finite values do not raise; the graph flag is left for the caller.
    """
    wrt = list(wrt)
    if seed is None:
        if output.value.size != 1:
            raise UsageError(
                "backward: output must be scalar unless a seed gradient is given")
        seed_node = constant(np.ones_like(output.value))
    else:
        seed_node = seed if isinstance(seed, GraphNode) else constant(as_tensor(seed))

    grads: dict[GraphNode, GraphNode] = {output: seed_node}
    for node in _topo_order(output):
        g = grads.get(node)
        if g is None or node._vjp is None:
            continue
        needed = False
        for p in node.parents:
            if p.requires_grad:
                needed = True
                break
        if not needed:
            continue
        for p, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(p)
            grads[p] = pg if acc is None else add(acc, pg)

    result = {}
    for w in wrt:
        g = grads.get(w)
        if g is None:
            g = constant(np.zeros_like(w.value))
        if record_graph:
            result[w] = g
            w.grad = g.value
        else:
            result[w] = g.value.copy()
            w.grad = result[w]
    return result


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float


def check_gradients(fn, point, tol: float, h: float = 1e-5) -> GradCheckReport:
    """Compare backward() against central differences, per coordinate.

    ``fn`` must be scalar-valued and smooth at ``point`` (callers avoid the
    kinks of abs / sign / min / max). The relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    x0 = as_tensor(point)
    p = parameter(x0.copy())
    analytic = backward(fn(p), [p])[p].reshape(-1)

    flat = x0.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        f_plus = fn(constant((flat + step).reshape(x0.shape))).value
        f_minus = fn(constant((flat - step).reshape(x0.shape))).value
        numeric[i] = float(np.sum(f_plus) - np.sum(f_minus)) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(passed=bool(max_rel <= tol),
                           max_rel_error=max_rel,
                           rel_errors=rel,
                           analytic=analytic,
                           numeric=numeric,
                           tol=tol)


def onehot(indices, n_classes: int) -> np.ndarray:
    """Dense one-hot rows for integer class indices."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_classes):
        raise UsageError(
            f"target index out of range for {n_classes} classes")
    out = np.zeros((idx.size, n_classes), dtype=np.float64)
    out[np.arange(idx.size), idx] = 1.0
    return out
