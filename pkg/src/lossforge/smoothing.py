"""Label-smoothing loss family: cross-entropy, label smoothing (non-sparse),
absolute cross-entropy, sparse label smoothing, focal, and focal combined with
sparse label smoothing.

The sparse variants read exactly one class slot per instance (constant time
and space in the class count): the expected non-target smoothing loss is
folded into the target term, with numerical stability coming from the
log-sum-exp form of the target log-probability and a small epsilon guarding
log(0). Also provided: the loss-behavior analysis delta = -dL/df at the two
regimes of interest (uniform predictions at initialization; predictions
epsilon-close to the labels) and a wall-time benchmark of the kernels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import engine
from .errors import UsageError

LOSS_IDS = ("ce", "lsr", "ace", "sparse_lsr", "focal", "focal_sparse_lsr")


@dataclass
class SmoothingParams:
    xi: float = 0.0        # smoothing coefficient, [0, 1)
    n_classes: int = 2     # C
    gamma: float = 0.0     # focusing exponent, >= 0
    phi0: float = 1.0      # absolute cross-entropy scale
    phi1: float = 1.0      # absolute cross-entropy shift
    eps: float = 1e-7

    def validate(self):
        if not (0.0 <= self.xi < 1.0):
            raise UsageError("xi must be in [0, 1)")
        if self.n_classes < 2:
            raise UsageError("n_classes must be >= 2")
        if self.gamma < 0.0:
            raise UsageError("gamma must be >= 0")
        return self


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    """Stable log-probabilities via the subtract-max log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float64)
    m = np.max(z, axis=-1, keepdims=True)
    return z - (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))


def _target_index(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        idx = np.argmax(y, axis=1).astype(np.int64)
    else:
        idx = y.astype(np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_classes):
        raise UsageError(f"target index out of range for {n_classes} classes")
    return idx


def _target_logp(y, logp: np.ndarray, n_classes: int) -> np.ndarray:
    idx = _target_index(y, n_classes)
    return logp[np.arange(idx.size), idx]


# ---------------------------------------------------------------------------
# kernels (batch in, scalar mean out)
# ---------------------------------------------------------------------------

def loss_ce(y, logp, p: SmoothingParams) -> float:
    """Cross-entropy from log-probabilities; reads one slot per instance."""
    return float(np.mean(-_target_logp(y, np.asarray(logp), p.n_classes)))


def loss_lsr(y, logp, p: SmoothingParams) -> float:
    """Non-sparse label smoothing: soft targets y(1-xi) + xi/C over all C slots."""
    logp = np.asarray(logp, dtype=np.float64)
    idx = _target_index(y, p.n_classes)
    onehot = np.zeros_like(logp)
    onehot[np.arange(idx.size), idx] = 1.0
    smooth = onehot * (1.0 - p.xi) + p.xi / p.n_classes
    return float(np.mean(-np.sum(smooth * logp, axis=-1)))


def loss_ace(y, f, p: SmoothingParams) -> float:
    """Absolute cross-entropy phi0 * |log(phi1 * f_target)|, zero off-target.

    Takes raw probabilities; an internal epsilon floor guards log(0) without
    perturbing values away from the degenerate corner.
    """
    f = np.asarray(f, dtype=np.float64)
    idx = _target_index(y, p.n_classes)
    ft = f[np.arange(idx.size), idx]
    return float(np.mean(p.phi0 * np.abs(np.log(np.maximum(p.phi1 * ft, p.eps)))))


def loss_sparse_lsr(y, logp, p: SmoothingParams, relaxed: bool = False) -> float:
    """Sparse label smoothing: the expected non-target loss folded into the
    target slot.

    With ``relaxed`` the class-count constants are dropped:
    -(log f_t + xi * log(1 - f_t)).
    """
    logp = np.asarray(logp, dtype=np.float64)
    ft_log = _target_logp(y, logp, p.n_classes)
    spread = np.maximum(1.0 - np.exp(ft_log), p.eps)  # log(0) guard
    if relaxed:
        return float(np.mean(-(ft_log + p.xi * np.log(spread))))
    c = p.n_classes
    target_w = 1.0 - p.xi + p.xi / c
    redist_w = p.xi * (c - 1.0) / c
    per = -(target_w * ft_log + redist_w * np.log(spread / (c - 1.0)))
    return float(np.mean(per))


def loss_focal(y, logp, p: SmoothingParams) -> float:
    """Focal loss -(1 - f_t)^gamma * log(f_t), from log-probabilities."""
    ft_log = _target_logp(y, np.asarray(logp), p.n_classes)
    return float(np.mean(-np.power(1.0 - np.exp(ft_log), p.gamma) * ft_log))


def loss_focal_sparse_lsr(y, logp, p: SmoothingParams) -> float:
    """Focal weighting applied to sparse label smoothing: the target term is
    scaled by (1 - f_t)^gamma and the redistributed term by (f_t)^gamma."""
    logp = np.asarray(logp, dtype=np.float64)
    ft_log = _target_logp(y, logp, p.n_classes)
    ft = np.exp(ft_log)
    spread = np.maximum(1.0 - ft, p.eps)
    c = p.n_classes
    target_w = 1.0 - p.xi + p.xi / c
    redist_w = p.xi * (c - 1.0) / c
    per = -(np.power(1.0 - ft, p.gamma) * target_w * ft_log
            + np.power(ft, p.gamma) * redist_w * np.log(spread / (c - 1.0)))
    return float(np.mean(per))


LOSS_FROM_LOGP = {
    "ce": loss_ce,
    "lsr": loss_lsr,
    "sparse_lsr": loss_sparse_lsr,
    "focal": loss_focal,
    "focal_sparse_lsr": loss_focal_sparse_lsr,
}


def _ace_from_logp(y, logp, p: SmoothingParams) -> float:
    ft = np.exp(_target_logp(y, np.asarray(logp), p.n_classes))
    return float(np.mean(p.phi0 * np.abs(np.log(p.phi1 * ft + p.eps))))


def loss_value(loss_id: str, y, logits, p: SmoothingParams,
               from_logits: bool = True) -> float:
    """Uniform entry point over the family, fed logits or log-probabilities."""
    if loss_id not in LOSS_IDS:
        raise UsageError(f"unknown loss id {loss_id!r}")
    logp = log_softmax_np(logits) if from_logits else np.asarray(logits)
    if loss_id == "ace":
        return _ace_from_logp(y, logp, p)
    return LOSS_FROM_LOGP[loss_id](y, logp, p)


# ---------------------------------------------------------------------------
# behavior analysis: delta = -dL/df at the regimes of interest
# ---------------------------------------------------------------------------

def _loss_graph(loss_id: str, f: engine.GraphNode, target_mask: np.ndarray,
                p: SmoothingParams) -> engine.GraphNode:
    """Per-instance loss as a graph function of the prediction vector f."""
    c = p.n_classes
    mask = engine.constant(target_mask)
    ft = engine.sum_all(engine.mul(mask, f))
    if loss_id == "ce":
        return engine.neg(engine.sum_all(
            engine.mul(mask, engine.log_exact(f))))
    if loss_id == "lsr":
        smooth = engine.constant(target_mask * (1.0 - p.xi) + p.xi / c)
        return engine.neg(engine.sum_all(
            engine.mul(smooth, engine.log_exact(f))))
    if loss_id == "ace":
        return engine.mul(p.phi0, engine.sum_all(engine.mul(
            mask, engine.absolute(engine.log_exact(engine.mul(p.phi1, f))))))
    if loss_id == "sparse_lsr":
        target_w = 1.0 - p.xi + p.xi / c
        redist_w = p.xi * (c - 1.0) / c
        spread = engine.log_exact(
            engine.mul(engine.sub(1.0, ft), 1.0 / (c - 1.0)))
        return engine.neg(engine.add(
            engine.mul(target_w, engine.log_exact(ft)),
            engine.mul(redist_w, spread)))
    if loss_id == "focal":
        w = engine.pow_const(engine.sub(1.0, ft), p.gamma)
        return engine.neg(engine.mul(w, engine.log_exact(ft)))
    if loss_id == "focal_sparse_lsr":
        target_w = 1.0 - p.xi + p.xi / c
        redist_w = p.xi * (c - 1.0) / c
        spread = engine.log_exact(
            engine.mul(engine.sub(1.0, ft), 1.0 / (c - 1.0)))
        return engine.neg(engine.add(
            engine.mul(engine.pow_const(engine.sub(1.0, ft), p.gamma),
                       engine.mul(target_w, engine.log_exact(ft))),
            engine.mul(engine.pow_const(ft, p.gamma),
                       engine.mul(redist_w, spread))))
    raise UsageError(f"unknown loss id {loss_id!r}")


def behavior_delta(loss_id: str, regime: str, p: SmoothingParams,
                   epsilon: float | None = None):
    """delta = -dL/df for the target and a non-target slot, by autodiff.

    ``regime`` is 'null' (uniform predictions 1/C) or 'zero' (predictions
    epsilon-close to the one-hot label, epsilon in (0, 1/C)).
    """
    p.validate()
    c = p.n_classes
    if regime == "null":
        f_vec = np.full(c, 1.0 / c)
    elif regime == "zero":
        if epsilon is None:
            raise UsageError("zero-error regime requires epsilon")
        if not (0.0 < epsilon < 1.0 / c):
            raise UsageError("epsilon must be in (0, 1/C)")
        f_vec = np.full(c, epsilon)
        f_vec[0] = 1.0 - epsilon * (c - 1)
    else:
        raise UsageError("regime must be 'null' or 'zero'")
    target_mask = np.zeros(c)
    target_mask[0] = 1.0

    f = engine.parameter(f_vec)
    loss = _loss_graph(loss_id, f, target_mask, p)
    grad = engine.backward(loss, [f])[f]
    delta = -grad
    return float(delta[0]), float(delta[1])


# ---------------------------------------------------------------------------
# kernel wall-time benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    loss_id: str
    n_classes: int
    batch: int
    with_logsoftmax: bool
    median_ns: float


def bench_complexity(loss_ids, class_counts, batch: int = 100, reps: int = 7,
                     seed: int = 0, xi: float = 0.1, gamma: float = 2.0,
                     min_rep_ns: float = 2e5) -> list[BenchRow]:
    """Median per-call wall time of each loss kernel across class counts.

    Each rep times an inner loop sized so one rep costs at least
    ``min_rep_ns``; a warm-up rep is always excluded. Timed both from raw
    logits (including the log-softmax) and from precomputed log-probabilities
    (the bare kernel).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for c in class_counts:
        if c < 2:
            raise UsageError("class counts must be >= 2")
        p = SmoothingParams(xi=xi, gamma=gamma, n_classes=c)
        logits = rng.normal(size=(batch, c))
        y = rng.integers(0, c, size=batch)
        logp = log_softmax_np(logits)
        for loss_id in loss_ids:
            for with_ls in (True, False):
                def call():
                    if with_ls:
                        return loss_value(loss_id, y, logits, p,
                                          from_logits=True)
                    return loss_value(loss_id, y, logp, p, from_logits=False)

                call()  # warm-up
                t0 = time.perf_counter_ns()
                call()
                once = max(time.perf_counter_ns() - t0, 1)
                inner = max(1, int(min_rep_ns / once))
                samples = []
                for _ in range(reps + 1):
                    start = time.perf_counter_ns()
                    for _ in range(inner):
                        call()
                    samples.append((time.perf_counter_ns() - start) / inner)
                samples = samples[1:]  # drop warm-up rep
                rows.append(BenchRow(loss_id=loss_id, n_classes=c,
                                     batch=batch, with_logsoftmax=with_ls,
                                     median_ns=float(np.median(samples))))
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    lines = ["loss_id,n_classes,batch,with_logsoftmax,median_ns"]
    for r in rows:
        lines.append(f"{r.loss_id},{r.n_classes},{r.batch},"
                     f"{int(r.with_logsoftmax)},{r.median_ns:.1f}")
    return "\n".join(lines) + "\n"
