"""Base learners (logistic / MLP), SGD with momentum, and the training loop
used both for fitness evaluation and at meta-test time."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .datasets import CLASSIFICATION, TaskDataset
from .errors import UsageError
from .expressions import parse
from .network import MetaLossNetwork, compile_tree

BUILTIN_EXPRESSIONS = {
    "squared_error": "(sq (- y f))",
    "cross_entropy": "(abs (log (* y f)))",
}


def builtin_loss(name: str) -> MetaLossNetwork:
    """A named handcrafted loss as a unit-weight loss network."""
    if name not in BUILTIN_EXPRESSIONS:
        raise UsageError(
            f"unknown builtin loss {name!r}; available: "
            f"{sorted(BUILTIN_EXPRESSIONS)}")
    net = compile_tree(parse(BUILTIN_EXPRESSIONS[name]), unit_weights=True)
    net.meta["builtin"] = name
    return net


@dataclass
class LearnerSpec:
    """Architecture of the base model f_theta."""

    input_dim: int
    output_dim: int
    hidden: tuple = ()
    activation: str = "relu"
    classification: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.activation not in ("relu", "tanh"):
            raise UsageError(f"unknown activation {self.activation!r}")

    @property
    def kind(self) -> str:
        if self.hidden:
            return "mlp"
        return "logistic" if self.classification else "linear"


class BaseLearner:
    """f_theta: a linear model or MLP whose forward pass runs on the engine."""

    def __init__(self, spec: LearnerSpec):
        self.spec = spec
        dims = [spec.input_dim, *spec.hidden, spec.output_dim]
        self.layer_dims = list(zip(dims[:-1], dims[1:]))

    def init_params(self, rng: np.random.Generator) -> list[np.ndarray]:
        params = []
        for fan_in, fan_out in self.layer_dims:
            params.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in),
                                     size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        return params

    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)

    def forward_logits(self, params, X) -> engine.GraphNode:
        """Pre-activation outputs; ``params`` alternate weight, bias nodes."""
        h = X if isinstance(X, engine.GraphNode) else engine.constant(X)
        n_layers = len(self.layer_dims)
        for layer in range(n_layers):
            W = params[2 * layer]
            b = params[2 * layer + 1]
            h = engine.add_bias(engine.matmul(h, W), b)
            if layer < n_layers - 1:
                h = engine.relu(h) if self.spec.activation == "relu" else engine.tanh(h)
        return h

    def forward(self, params, X) -> engine.GraphNode:
        """Predictions: softmax probabilities or raw regression outputs."""
        logits = self.forward_logits(params, X)
        if self.spec.classification:
            return engine.softmax(logits)
        return logits

    def predict_values(self, param_values, X) -> np.ndarray:
        nodes = [engine.constant(v) for v in param_values]
        return self.forward(nodes, X).value


def learner_for_task(task: TaskDataset, hidden=(), activation="relu") -> BaseLearner:
    spec = LearnerSpec(input_dim=task.n_features,
                       output_dim=task.output_dim,
                       hidden=tuple(hidden),
                       activation=activation,
                       classification=task.kind == CLASSIFICATION)
    return BaseLearner(spec)


class SgdMomentum:
    """Classic momentum: v <- mu*v + g; theta <- theta - lr*v."""

    def __init__(self, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise UsageError("lr must be positive")
        if not (0.0 <= momentum < 1.0):
            raise UsageError("momentum must be in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self._velocity = None

    def step(self, values: list[np.ndarray], grads: list[np.ndarray]):
        if self._velocity is None:
            self._velocity = [np.zeros_like(v) for v in values]
        out = []
        for v, val, g in zip(self._velocity, values, grads):
            v *= self.momentum
            v += g
            out.append(val - self.lr * v)
        return out


def targets_for(task: TaskDataset, y_batch: np.ndarray) -> np.ndarray:
    """Loss-network targets: one-hot rows or a (n, 1) real column."""
    if task.kind == CLASSIFICATION:
        return engine.onehot(y_batch, task.n_classes)
    return np.asarray(y_batch, dtype=np.float64).reshape(-1, 1)


def eval_metric(learner: BaseLearner, param_values, task: TaskDataset,
                split: str) -> float:
    """Error rate for classification, mean squared error for regression."""
    X, y = task.split_arrays(split)
    if X.shape[0] == 0:
        return float("nan")
    preds = learner.predict_values(param_values, X)
    if task.kind == CLASSIFICATION:
        return float(np.mean(np.argmax(preds, axis=1) != y))
    return float(np.mean((preds.reshape(-1) - y) ** 2))


@dataclass
class TrainResult:
    param_values: list
    train_losses: list
    val_metric: float
    test_metric: float
    diverged: bool
    steps_done: int
    learner: BaseLearner = field(repr=False, default=None)


def train_with_loss(loss_net: MetaLossNetwork, task: TaskDataset, steps: int,
                    lr: float, rng: np.random.Generator, momentum: float = 0.9,
                    batch_size: int = 64, hidden=(), activation="relu",
                    learner: BaseLearner | None = None) -> TrainResult:
    """Train a fresh base learner with the given loss for ``steps`` SGD steps.

    Divergence (non-finite loss or gradient) stops training early and flags
    the result; partial metrics are still reported.
    """
    learner = learner or learner_for_task(task, hidden=hidden,
                                          activation=activation)
    values = learner.init_params(rng)
    opt = SgdMomentum(lr, momentum)
    stream = task.batch_stream("train", batch_size, rng)
    losses = []
    diverged = False
    steps_done = 0
    for _ in range(steps):
        Xb, yb = next(stream)
        nodes = [engine.parameter(v) for v in values]
        f = learner.forward(nodes, Xb)
        loss = loss_net.loss(engine.constant(targets_for(task, yb)), f)
        if loss.nonfinite:
            diverged = True
            break
        grad_map = engine.backward(loss, nodes)
        grads = [grad_map[n] for n in nodes]
        if any(not np.isfinite(g).all() for g in grads):
            diverged = True
            break
        values = opt.step(values, grads)
        losses.append(float(loss.value))
        steps_done += 1
    return TrainResult(param_values=values,
                       train_losses=losses,
                       val_metric=eval_metric(learner, values, task, "val"),
                       test_metric=eval_metric(learner, values, task, "test"),
                       diverged=diverged,
                       steps_done=steps_done,
                       learner=learner)
