"""Scikit-learn style estimators wrapping the search engine and trainers.

``LossFunctionSearch`` is fit-shaped meta-learning: fit(X, y) evolves a loss
function for the task and exposes it as ``best_network_``.
``MetaLossClassifier`` / ``MetaLossRegressor`` train a base model under any
loss (builtin name, loss document path, or a MetaLossNetwork) and predict.
"""

from __future__ import annotations

import numbers
import os

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import (EvolutionConfig, FilterConfig, GpConfig, MetaTrainConfig,
                     TrainConfig)
from .datasets import CLASSIFICATION, REGRESSION, build_task
from .errors import UsageError
from .evolution import run_evolution
from .expressions import to_infix
from .learners import builtin_loss, learner_for_task, train_with_loss
from .network import MetaLossNetwork


def resolve_loss(loss) -> MetaLossNetwork:
    """Accepts a MetaLossNetwork, a builtin loss name, or a document path."""
    if isinstance(loss, MetaLossNetwork):
        return loss
    if isinstance(loss, str):
        if os.path.exists(loss):
            return MetaLossNetwork.load(loss)
        return builtin_loss(loss)
    raise UsageError(f"cannot interpret loss specification {loss!r}")


def _as_seed(random_state) -> int:
    if random_state is None:
        return 0
    if isinstance(random_state, numbers.Integral):
        return int(random_state)
    raise UsageError("random_state must be an integer or None")


class LossFunctionSearch(BaseEstimator):
    """Evolve a symbolic loss function for the task defined by (X, y).

    Parameters mirror the search configuration: a population of expression
    trees is evolved with tournament selection, one-point crossover, uniform
    mutation and elitism; unless ``local_search`` is off, each candidate's
    edge weights are tuned by unrolled differentiation before fitness is
    measured via a partial training session.

    Attributes after fit: ``best_expression_``, ``best_network_``,
    ``best_fitness_``, ``history_``, ``run_``.
    """

    def __init__(self, task="auto", population_size=25, generations=50,
                 crossover_rate=0.7, mutation_rate=0.25, elitism_rate=0.05,
                 tournament_size=3, max_depth=10, local_search=True,
                 s_meta=250, s_base=1, s_testing=500, alpha=0.05, eta=1e-3,
                 batch_size=64, hidden=(32,), learner="mlp",
                 activation="identity", filters=True, workers=1,
                 random_state=0):
        self.task = task
        self.population_size = population_size
        self.generations = generations
        self.crossover_rate = crossover_rate
        self.mutation_rate = mutation_rate
        self.elitism_rate = elitism_rate
        self.tournament_size = tournament_size
        self.max_depth = max_depth
        self.local_search = local_search
        self.s_meta = s_meta
        self.s_base = s_base
        self.s_testing = s_testing
        self.alpha = alpha
        self.eta = eta
        self.batch_size = batch_size
        self.hidden = hidden
        self.learner = learner
        self.activation = activation
        self.filters = filters
        self.workers = workers
        self.random_state = random_state

    def _task_kind(self, y) -> str:
        if self.task in (CLASSIFICATION, REGRESSION):
            return self.task
        if self.task != "auto":
            raise UsageError("task must be 'auto', 'classification' or "
                             "'regression'")
        y = np.asarray(y)
        if y.dtype.kind in "iub" or np.all(np.equal(np.mod(y, 1), 0)):
            return CLASSIFICATION
        return REGRESSION

    def _config(self, kind: str) -> EvolutionConfig:
        seed = _as_seed(self.random_state)
        gp = GpConfig(population_size=self.population_size,
                      generations=self.generations,
                      crossover_rate=self.crossover_rate,
                      mutation_rate=self.mutation_rate,
                      elitism_rate=self.elitism_rate,
                      tournament_size=self.tournament_size,
                      max_depth=self.max_depth,
                      rng_seed=seed)
        meta = MetaTrainConfig(s_meta=self.s_meta, s_base=self.s_base,
                               alpha=self.alpha, eta=self.eta,
                               batch_size=self.batch_size,
                               task_loss=("cross_entropy"
                                          if kind == CLASSIFICATION
                                          else "squared_error"))
        filters = FilterConfig(s_testing=self.s_testing,
                               symbolic=bool(self.filters),
                               rejection=bool(self.filters),
                               gradient=bool(self.filters))
        train = TrainConfig(learner=self.learner, hidden=tuple(self.hidden),
                            lr=self.alpha, batch_size=self.batch_size)
        return EvolutionConfig(gp=gp, meta=meta, filters=filters, train=train,
                               local_search=self.local_search,
                               activation=self.activation,
                               workers=self.workers).validate()

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=False)
        kind = self._task_kind(y)
        seed = _as_seed(self.random_state)
        task = build_task(X, y, kind, seed=seed)
        run = run_evolution(task, self._config(kind), seed=seed)
        self.task_kind_ = kind
        self.run_ = run
        self.best_network_ = run.best.net
        self.best_expression_ = to_infix(run.best.tree)
        self.best_fitness_ = run.best.fitness
        self.history_ = run.history
        self.n_features_in_ = X.shape[1]
        return self

    def export_best(self, path):
        check_is_fitted(self, "best_network_")
        self.best_network_.save(path)
        return path


class _MetaLossModel(BaseEstimator):
    """Shared fit/predict plumbing for loss-driven base models."""

    _classification = True

    def __init__(self, loss, hidden=(32,), steps=500, lr=0.05, momentum=0.9,
                 batch_size=64, activation="relu", random_state=0):
        self.loss = loss
        self.hidden = hidden
        self.steps = steps
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.activation = activation
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64,
                         y_numeric=not self._classification)
        seed = _as_seed(self.random_state)
        kind = CLASSIFICATION if self._classification else REGRESSION
        # All provided rows train the model; standardization statistics are
        # stored for predict-time reuse.
        task = build_task(X, y, kind, seed=seed, fractions=(1.0, 0.0, 0.0))
        if self._classification:
            self.classes_ = np.array(sorted(task.meta["label_mapping"],
                                            key=task.meta["label_mapping"].get))
        net = resolve_loss(self.loss)
        rng = np.random.default_rng(seed)
        result = train_with_loss(net, task, steps=self.steps, lr=self.lr,
                                 rng=rng, momentum=self.momentum,
                                 batch_size=self.batch_size,
                                 hidden=tuple(self.hidden),
                                 activation=self.activation)
        self.task_ = task
        self.learner_ = result.learner
        self.param_values_ = result.param_values
        self.diverged_ = result.diverged
        self.train_losses_ = result.train_losses
        self.n_features_in_ = X.shape[1]
        return self

    def _raw_predict(self, X) -> np.ndarray:
        check_is_fitted(self, "param_values_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise UsageError(f"expected {self.n_features_in_} features, "
                             f"got {X.shape[1]}")
        mean, sd = self.task_.feature_stats
        return self.learner_.predict_values(self.param_values_,
                                            (X - mean) / sd)


class MetaLossClassifier(ClassifierMixin, _MetaLossModel):
    """Classifier trained under an arbitrary (possibly meta-learned) loss."""

    _classification = True

    def __init__(self, loss="cross_entropy", hidden=(32,), steps=500, lr=0.05,
                 momentum=0.9, batch_size=64, activation="relu",
                 random_state=0):
        super().__init__(loss=loss, hidden=hidden, steps=steps, lr=lr,
                         momentum=momentum, batch_size=batch_size,
                         activation=activation, random_state=random_state)

    def predict_proba(self, X) -> np.ndarray:
        return self._raw_predict(X)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class MetaLossRegressor(RegressorMixin, _MetaLossModel):
    """Regressor trained under an arbitrary (possibly meta-learned) loss.

    Targets are standardized with training statistics; predictions are
    reported back in the original units.
    """

    _classification = False

    def __init__(self, loss="squared_error", hidden=(32,), steps=500, lr=0.05,
                 momentum=0.9, batch_size=64, activation="relu",
                 random_state=0):
        super().__init__(loss=loss, hidden=hidden, steps=steps, lr=lr,
                         momentum=momentum, batch_size=batch_size,
                         activation=activation, random_state=random_state)

    def predict(self, X) -> np.ndarray:
        raw = self._raw_predict(X).reshape(-1)
        mean, sd = self.task_.label_stats
        return raw * sd + mean
