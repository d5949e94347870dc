"""lossforge: evolving symbolic loss functions with gradient-based local
search, plus sparse label-smoothing loss kernels."""

from . import engine
from .config import (EvolutionConfig, FilterConfig, GpConfig, MetaTrainConfig,
                     TrainConfig, load_config)
from .datasets import TaskDataset, build_task, load_csv, synth_task
from .errors import (ConfigError, DivergenceError, DocumentError,
                     ExprParseError, UnsupportedVersionError, UsageError)
from .estimators import (LossFunctionSearch, MetaLossClassifier,
                         MetaLossRegressor, resolve_loss)
from .evolution import EvolutionRun, breed, run_evolution
from .expressions import (ExprTree, canonical_key, correct_constraints,
                          crossover, evaluate_tree, mutate, parse,
                          random_tree, select_tournament, to_infix, to_prefix)
from .filters import (Candidate, FitnessArchive, build_probe,
                      evaluate_fitness, gradient_equivalence_key,
                      rejection_protocol, symbolic_cache_lookup,
                      WORST_FITNESS)
from .learners import (BaseLearner, LearnerSpec, SgdMomentum, builtin_loss,
                       train_with_loss)
from .metaopt import (OptimizeResult, inner_step, meta_step, optimize_loss,
                      scale_loss)
from .network import MetaLossNetwork, compile_tree
from .smoothing import (SmoothingParams, behavior_delta, bench_complexity,
                        loss_ace, loss_ce, loss_focal, loss_focal_sparse_lsr,
                        loss_lsr, loss_sparse_lsr)

__version__ = "0.1.0"

__all__ = [
    "engine",
    "EvolutionConfig", "FilterConfig", "GpConfig", "MetaTrainConfig",
    "TrainConfig", "load_config",
    "TaskDataset", "build_task", "load_csv", "synth_task",
    "ConfigError", "DivergenceError", "DocumentError", "ExprParseError",
    "UnsupportedVersionError", "UsageError",
    "LossFunctionSearch", "MetaLossClassifier", "MetaLossRegressor",
    "resolve_loss",
    "EvolutionRun", "breed", "run_evolution",
    "ExprTree", "canonical_key", "correct_constraints", "crossover",
    "evaluate_tree", "mutate", "parse", "random_tree", "select_tournament",
    "to_infix", "to_prefix",
    "Candidate", "FitnessArchive", "build_probe", "evaluate_fitness",
    "gradient_equivalence_key", "rejection_protocol", "symbolic_cache_lookup",
    "WORST_FITNESS",
    "BaseLearner", "LearnerSpec", "SgdMomentum", "builtin_loss",
    "train_with_loss",
    "OptimizeResult", "inner_step", "meta_step", "optimize_loss", "scale_loss",
    "MetaLossNetwork", "compile_tree",
    "SmoothingParams", "behavior_delta", "bench_complexity",
    "loss_ace", "loss_ce", "loss_focal", "loss_focal_sparse_lsr", "loss_lsr",
    "loss_sparse_lsr",
]
