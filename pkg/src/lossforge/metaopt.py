"""Gradient-based local search of loss-network weights by unrolled
differentiation through base-learner updates.

One meta step: re-initialize the base learner, take ``s_base`` inner gradient
steps under the candidate loss with graph recording (so the new parameters are
a differentiable function of the loss weights), measure the task loss on the
resulting learner, and descend the loss weights along its gradient. The base
parameters are reset after every meta step.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .datasets import CLASSIFICATION, TaskDataset
from .errors import DivergenceError, UsageError
from .learners import BaseLearner, learner_for_task, targets_for
from .network import MetaLossNetwork

TASK_LOSSES = ("squared_error", "cross_entropy")


@dataclass
class MetaTrainConfig:
    s_meta: int = 250
    s_base: int = 1
    alpha: float = 0.05
    eta: float = 1e-3
    batch_size: int = 64
    task_loss: str = "cross_entropy"

    def validate(self):
        if self.s_meta < 1:
            raise UsageError("s_meta must be >= 1")
        if self.s_base < 1:
            raise UsageError("s_base must be >= 1")
        if self.alpha <= 0:
            raise UsageError("alpha must be > 0")
        if self.eta <= 0:
            raise UsageError("eta must be > 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.task_loss not in TASK_LOSSES:
            raise UsageError(f"task_loss must be one of {TASK_LOSSES}")
        return self


def task_loss_node(kind: str, targets, logits: engine.GraphNode,
                   classification: bool) -> engine.GraphNode:
    """The fixed outer objective: stable cross-entropy or mean squared error."""
    t = targets if isinstance(targets, engine.GraphNode) else engine.constant(targets)
    if kind == "cross_entropy":
        if not classification:
            raise UsageError("cross_entropy task loss needs a classification task")
        logp = engine.log_softmax(logits)
        per_sample = engine.neg(engine.sum_axis(engine.mul(t, logp), -1))
        return engine.mean_all(per_sample)
    preds = engine.softmax(logits) if classification else logits
    return engine.mean_all(engine.square(engine.sub(preds, t)))


def scale_loss(net: MetaLossNetwork, factor: float):
    """Wrap a loss so every value is multiplied by a fixed factor.

    Harness for the implicit learning-rate identity: one inner step under
    (alpha, factor * L) equals one under (alpha * factor, L).
    """

    class _Scaled:
        def loss(self, y, f, params=None):
            return engine.mul(factor, net.loss(y, f, params=params))

        def loss_elements(self, y, f, params=None):
            return engine.mul(factor, net.loss_elements(y, f, params=params))

    return _Scaled()


def inner_step(learner: BaseLearner, theta: list, loss_net, batch,
               alpha: float, phi_params=None, classification: bool = True):
    """theta_new = theta - alpha * grad_theta(loss), graph-recorded.

    The returned parameters are graph nodes connected to ``phi_params``, so a
    later task-loss gradient reaches the loss-network weights. Non-finite loss
    or gradients signal divergence.
    """
    X, targets = batch
    logits = learner.forward_logits(theta, X)
    f = engine.softmax(logits) if classification else logits
    loss = loss_net.loss(engine.constant(targets), f, params=phi_params)
    if loss.nonfinite:
        raise DivergenceError("non-finite loss in inner step")
    grad_map = engine.backward(loss, theta, record_graph=True)
    new_theta = []
    for t in theta:
        g = grad_map[t]
        if g.nonfinite:
            raise DivergenceError("non-finite gradient in inner step")
        new_theta.append(engine.sub(t, engine.mul(alpha, g)))
    return new_theta, loss


@dataclass
class MetaStepRecord:
    task_losses: list
    diverged_tasks: list
    theta_init_digest: str


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def meta_step(net: MetaLossNetwork, tasks: list[TaskDataset],
              cfg: MetaTrainConfig, rng: np.random.Generator,
              learners: list[BaseLearner] | None = None,
              streams: list | None = None,
              init_fn=None) -> MetaStepRecord:
    """One update of the loss-network weights over all tasks.

    Each task re-initializes its base learner (independent draws by default;
    pass ``init_fn(task_index, rng)`` to control sharing), unrolls ``s_base``
    inner steps on fresh batches, and contributes its task loss. Divergent
    tasks are skipped and flagged; if every task diverges the step errors.
    """
    if not tasks:
        raise UsageError("meta_step: tasks must be non-empty")
    learners = learners or [learner_for_task(t) for t in tasks]
    if streams is None:
        streams = [t.batch_stream("train", cfg.batch_size, rng) for t in tasks]

    phi = net.param_nodes()
    total = None
    task_losses = []
    diverged = []
    inits = []
    for j, task in enumerate(tasks):
        learner = learners[j]
        if init_fn is not None:
            values = init_fn(j, rng)
        else:
            values = learner.init_params(rng)
        inits.extend(values)
        theta = [engine.parameter(v) for v in values]
        classification = task.kind == CLASSIFICATION
        try:
            batch = None
            for _ in range(cfg.s_base):
                Xb, yb = next(streams[j])
                batch = (Xb, targets_for(task, yb))
                theta, _ = inner_step(learner, theta, net, batch, cfg.alpha,
                                      phi_params=phi,
                                      classification=classification)
            logits_new = learner.forward_logits(theta, batch[0])
            kind = cfg.task_loss if classification else "squared_error"
            l_task = task_loss_node(kind, batch[1], logits_new, classification)
            if l_task.nonfinite:
                raise DivergenceError("non-finite task loss")
        except DivergenceError:
            diverged.append(j)
            continue
        task_losses.append(float(l_task.value))
        total = l_task if total is None else engine.add(total, l_task)

    if total is None:
        raise DivergenceError("meta step: all tasks diverged")
    grad_map = engine.backward(total, phi)
    grads = np.array([float(grad_map[p]) for p in phi])
    if not np.isfinite(grads).all():
        raise DivergenceError("meta step: non-finite meta-gradient")
    net.set_weights(net.weights - cfg.eta * grads)
    return MetaStepRecord(task_losses=task_losses, diverged_tasks=diverged,
                          theta_init_digest=_digest(inits))


@dataclass
class OptimizeResult:
    net: MetaLossNetwork
    trajectory: list = field(default_factory=list)  # (step, task_idx, task_loss)
    diverged_at: int | None = None
    theta_digests: list = field(default_factory=list)

    def trajectory_csv(self) -> str:
        lines = ["step,task,task_loss"]
        for step, task_idx, loss in self.trajectory:
            lines.append(f"{step},{task_idx},{loss!r}")
        return "\n".join(lines) + "\n"


def optimize_loss(net: MetaLossNetwork, tasks: list[TaskDataset],
                  cfg: MetaTrainConfig, rng: np.random.Generator,
                  init_fn=None) -> OptimizeResult:
    """Run ``s_meta`` meta steps; returns the tuned network plus the per-step
    task-loss trajectory. A divergent step stops early and records its index."""
    cfg.validate()
    learners = [learner_for_task(t) for t in tasks]
    streams = [t.batch_stream("train", cfg.batch_size, rng) for t in tasks]
    result = OptimizeResult(net=net)
    for step in range(cfg.s_meta):
        try:
            rec = meta_step(net, tasks, cfg, rng, learners=learners,
                            streams=streams, init_fn=init_fn)
        except DivergenceError:
            result.diverged_at = step
            break
        for j, loss in enumerate(rec.task_losses):
            result.trajectory.append((step, j, loss))
        result.theta_digests.append(rec.theta_init_digest)
    return result
