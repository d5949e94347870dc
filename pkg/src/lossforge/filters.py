"""Fitness evaluation with partial training, plus the time-saving filters:
symbolic-equivalence caching, the loss rejection protocol, and
gradient-equivalence caching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .datasets import CLASSIFICATION, TaskDataset
from .errors import UsageError
from .expressions import ExprTree, canonical_key
from .learners import learner_for_task, train_with_loss
from .network import MetaLossNetwork

WORST_FITNESS = float("inf")

DISPOSITIONS = ("pending", "evaluated", "cached-symbolic", "cached-gradient",
                "rejected", "diverged")


@dataclass
class Candidate:
    """One loss function moving through the evaluation pipeline."""

    tree: ExprTree
    key: str = ""
    net: MetaLossNetwork | None = None
    fitness: float = WORST_FITNESS
    disposition: str = "pending"
    gradient_key: str | None = None
    rejection_score: float | None = None
    optimize_result: object = field(default=None, repr=False)

    def __post_init__(self):
        if not self.key:
            self.key = canonical_key(self.tree)


@dataclass
class FilterConfig:
    probe_size: int = 256          # B
    probe_steps: int = 50
    probe_lr: float = 0.05
    sig_digits: int = 2
    s_testing: int = 500
    symbolic: bool = True
    rejection: bool = True
    gradient: bool = True
    rejection_metric: str = "error_rate"   # or "cross_entropy" (classification)

    def validate(self):
        if self.probe_size < 1:
            raise UsageError("probe_size must be >= 1")
        if self.s_testing < 1:
            raise UsageError("s_testing must be >= 1")
        if self.sig_digits != 2:
            raise UsageError("sig_digits is fixed at 2")
        if self.rejection_metric not in ("error_rate", "cross_entropy"):
            raise UsageError("rejection_metric must be error_rate or cross_entropy")
        return self


class FitnessArchive:
    """Key-value store of already-known fitnesses (Theta(1) lookup)."""

    def __init__(self):
        self._store: dict[str, float] = {}

    def lookup(self, tree_or_key) -> float | None:
        key = tree_or_key if isinstance(tree_or_key, str) else canonical_key(tree_or_key)
        return self._store.get(key)

    def insert(self, tree_or_key, fitness: float):
        key = tree_or_key if isinstance(tree_or_key, str) else canonical_key(tree_or_key)
        self._store[key] = fitness

    def __len__(self):
        return len(self._store)

    def __contains__(self, tree_or_key):
        return self.lookup(tree_or_key) is not None


def symbolic_cache_lookup(archive: FitnessArchive, tree: ExprTree):
    """Cached fitness for a structurally identical tree, or None on miss."""
    return archive.lookup(tree)


# ---------------------------------------------------------------------------
# probe construction (frozen once per evolutionary run)
# ---------------------------------------------------------------------------

@dataclass
class Probe:
    classification: bool
    n_classes: int
    y_index: np.ndarray          # (B,) class indices; unused for regression
    targets: np.ndarray          # (B, C) one-hot, or (B, 1) reals
    init_logits: np.ndarray      # (B, C) untrained logits / (B, 1) predictions
    init_probs: np.ndarray       # softmax of init_logits (== init_logits for regression)

    @property
    def size(self) -> int:
        return self.targets.shape[0]


def build_probe(task: TaskDataset, cfg: FilterConfig, rng: np.random.Generator,
                hidden=(), activation="relu") -> Probe:
    """Predictions of an untrained base learner on B random training samples."""
    X, y = task.split_arrays("train")
    b = min(cfg.probe_size, X.shape[0])
    take = rng.choice(X.shape[0], size=b, replace=False)
    Xb, yb = X[take], y[take]
    learner = learner_for_task(task, hidden=hidden, activation=activation)
    values = learner.init_params(rng)
    nodes = [engine.constant(v) for v in values]
    logits = learner.forward_logits(nodes, Xb).value
    if task.kind == CLASSIFICATION:
        probs = engine.softmax(engine.constant(logits)).value
        return Probe(classification=True, n_classes=task.n_classes,
                     y_index=yb.astype(np.int64),
                     targets=engine.onehot(yb, task.n_classes),
                     init_logits=logits, init_probs=probs)
    t = yb.reshape(-1, 1).astype(np.float64)
    return Probe(classification=False, n_classes=0,
                 y_index=np.zeros(b, dtype=np.int64), targets=t,
                 init_logits=logits, init_probs=logits.copy())


def _per_sample_loss_sum(net, targets: np.ndarray,
                         f: engine.GraphNode) -> engine.GraphNode:
    """Sum over samples of the per-sample (class-mean) candidate loss."""
    elems = net.loss_elements(engine.constant(targets), f)
    per_sample = engine.mul(engine.sum_axis(elems, -1),
                            1.0 / targets.shape[1])
    return engine.sum_all(per_sample)


def _probe_metric(probe: Probe, preds: np.ndarray, metric: str) -> np.ndarray:
    """Per-sample performance metric L_P (lower is better)."""
    if probe.classification:
        if metric == "cross_entropy":
            p = preds[np.arange(probe.size), probe.y_index]
            return -np.log(np.maximum(p, 1e-15))
        return (np.argmax(preds, axis=1) != probe.y_index).astype(np.float64)
    return ((preds - probe.targets) ** 2).sum(axis=1)


def rejection_protocol(net, probe: Probe, cfg: FilterConfig):
    """Optimize the probe predictions directly under the candidate loss and
    measure whether the performance metric improved.

    Classification optimizes logits (softmax re-applied each step) so the
    predictions stay on the simplex; regression optimizes raw predictions.
    Returns (accepted, g); g <= 0 or a non-finite probe run rejects.
    """
    z = probe.init_logits.copy()
    before = _probe_metric(probe,
                           probe.init_probs if probe.classification else z,
                           cfg.rejection_metric)
    for _ in range(cfg.probe_steps):
        z_node = engine.parameter(z)
        preds = engine.softmax(z_node) if probe.classification else z_node
        total = _per_sample_loss_sum(net, probe.targets, preds)
        if total.nonfinite:
            return False, float("-inf")
        grad = engine.backward(total, [z_node])[z_node]
        if not np.isfinite(grad).all():
            return False, float("-inf")
        z = z - cfg.probe_lr * grad
    if probe.classification:
        final = engine.softmax(engine.constant(z)).value
    else:
        final = z
    after = _probe_metric(probe, final, cfg.rejection_metric)
    g = float(np.sum(before - after))
    return g > 0.0, g


def gradient_equivalence_key(net, probe: Probe,
                             sig_digits: int = 2) -> str | None:
    """Per-sample gradient norms of the loss wrt the probe predictions,
    rounded to ``sig_digits`` significant digits. None flags divergence."""
    f0 = engine.parameter(probe.init_probs.copy())
    total = _per_sample_loss_sum(net, probe.targets, f0)
    grad = engine.backward(total, [f0])[f0]
    if not np.isfinite(grad).all():
        return None
    norms = np.linalg.norm(grad, axis=1)
    return "|".join(f"{v:.{sig_digits - 1}e}" for v in norms)


# ---------------------------------------------------------------------------
# full fitness evaluation (partial training session)
# ---------------------------------------------------------------------------

def evaluate_fitness(net, task: TaskDataset, cfg: FilterConfig,
                     rng: np.random.Generator, lr: float = 0.05,
                     momentum: float = 0.9, batch_size: int = 64,
                     hidden=(), activation="relu"):
    """Train a fresh base learner for s_testing steps under the candidate
    loss; fitness is the validation metric (lower is better). Divergence maps
    to the worst-case sentinel."""
    result = train_with_loss(net, task, steps=cfg.s_testing, lr=lr, rng=rng,
                             momentum=momentum, batch_size=batch_size,
                             hidden=hidden, activation=activation)
    if result.diverged or not np.isfinite(result.val_metric):
        return WORST_FITNESS, True
    return float(result.val_metric), False
