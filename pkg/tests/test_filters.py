import numpy as np
import pytest

from lossforge.datasets import synth_task
from lossforge.expressions import parse
from lossforge.filters import (WORST_FITNESS, FilterConfig, FitnessArchive,
                               build_probe, evaluate_fitness,
                               gradient_equivalence_key, rejection_protocol,
                               symbolic_cache_lookup)
from lossforge.learners import builtin_loss, eval_metric, learner_for_task
from lossforge.network import compile_tree

CE_TREE = "(abs (log (* y f)))"
SQ_TREE = "(sq (- y f))"
NEG_CE = "(* -1 (abs (log (* y f))))"
NEG_SQ = "(* -1 (sq (- y f)))"
CONST_TREE = "(* (+ 1 -1) (* y f))"
ZERO_GRAD_TREE = "(sign (+ (sq f) (sq y)))"


def unit_net(expr):
    return compile_tree(parse(expr), unit_weights=True)


class TestSymbolicCache:
    def test_hit_for_identical_tree(self):
        archive = FitnessArchive()
        archive.insert(parse(SQ_TREE), 0.125)
        assert symbolic_cache_lookup(archive, parse(SQ_TREE)) == 0.125

    def test_miss_for_operand_swap(self):
        archive = FitnessArchive()
        archive.insert(parse(SQ_TREE), 0.125)
        assert symbolic_cache_lookup(archive, parse("(sq (- f y))")) is None

    def test_empty_archive_misses(self):
        assert symbolic_cache_lookup(FitnessArchive(), parse(SQ_TREE)) is None


class TestRejectionProtocol:
    CFG = FilterConfig(probe_size=256, probe_steps=50, probe_lr=0.05,
                       s_testing=100)

    def test_aligned_losses_always_accepted(self, blobs_task):
        for seed in range(20):
            probe = build_probe(blobs_task, self.CFG, np.random.default_rng(seed))
            for expr in (CE_TREE, SQ_TREE):
                accepted, g = rejection_protocol(unit_net(expr), probe, self.CFG)
                assert accepted and g > 0, (seed, expr, g)

    def test_negated_losses_always_rejected(self, blobs_task):
        for seed in range(20):
            probe = build_probe(blobs_task, self.CFG, np.random.default_rng(seed))
            for expr in (NEG_CE, NEG_SQ):
                accepted, g = rejection_protocol(unit_net(expr), probe, self.CFG)
                assert not accepted and g <= 0, (seed, expr, g)

    def test_constant_tree_rejected_with_zero_score(self, blobs_task):
        probe = build_probe(blobs_task, self.CFG, np.random.default_rng(0))
        accepted, g = rejection_protocol(unit_net(CONST_TREE), probe, self.CFG)
        assert not accepted and g == 0.0

    def test_regression_probe(self, regression_task):
        probe = build_probe(regression_task, self.CFG, np.random.default_rng(1))
        accepted, g = rejection_protocol(unit_net(SQ_TREE), probe, self.CFG)
        assert accepted and g > 0
        accepted, _ = rejection_protocol(unit_net(NEG_SQ), probe, self.CFG)
        assert not accepted

    def test_cross_entropy_metric_option(self, blobs_task):
        cfg = FilterConfig(probe_size=128, rejection_metric="cross_entropy",
                           s_testing=100)
        probe = build_probe(blobs_task, cfg, np.random.default_rng(0))
        accepted, _ = rejection_protocol(unit_net(CE_TREE), probe, cfg)
        assert accepted
        accepted, _ = rejection_protocol(unit_net(NEG_CE), probe, cfg)
        assert not accepted


class TestGradientEquivalence:
    CFG = FilterConfig(probe_size=64, s_testing=100)

    def _probe(self, task, seed=0):
        return build_probe(task, self.CFG, np.random.default_rng(seed))

    def test_self_equal(self, blobs_task):
        probe = self._probe(blobs_task)
        net = unit_net(SQ_TREE)
        assert (gradient_equivalence_key(net, probe)
                == gradient_equivalence_key(net, probe))

    def test_operand_swap_equal_keys(self, blobs_task):
        probe = self._probe(blobs_task)
        k1 = gradient_equivalence_key(unit_net("(sq (- y f))"), probe)
        k2 = gradient_equivalence_key(unit_net("(sq (- f y))"), probe)
        assert k1 == k2

    def test_ten_fold_scaling_differs(self, blobs_task):
        probe = self._probe(blobs_task)
        net = unit_net(SQ_TREE)
        k1 = gradient_equivalence_key(net, probe)
        w = net.weights
        w[0] = 10.0
        net.set_weights(w)
        assert gradient_equivalence_key(net, probe) != k1

    def test_two_significant_digits(self, blobs_task):
        probe = self._probe(blobs_task)
        key = gradient_equivalence_key(unit_net(SQ_TREE), probe)
        parts = key.split("|")
        assert len(parts) == probe.size
        for part in parts:
            mantissa = part.split("e")[0]
            assert len(mantissa.replace("-", "").replace(".", "")) == 2


class TestEvaluateFitness:
    CFG = FilterConfig(s_testing=400, probe_size=64)

    def test_separable_task_reaches_zero_error(self, separable_task):
        fitness, diverged = evaluate_fitness(
            unit_net(SQ_TREE), separable_task, self.CFG,
            np.random.default_rng(0), lr=0.1)
        assert not diverged
        assert fitness == 0.0

    def test_zero_gradient_loss_equals_untrained_error(self, blobs_task):
        cfg = FilterConfig(s_testing=50, probe_size=64)
        rng = np.random.default_rng(5)
        fitness, diverged = evaluate_fitness(unit_net(ZERO_GRAD_TREE),
                                             blobs_task, cfg,
                                             np.random.default_rng(5))
        learner = learner_for_task(blobs_task)
        untrained = eval_metric(learner, learner.init_params(rng),
                                blobs_task, "val")
        assert not diverged
        assert fitness == untrained

    def test_tree_equals_builtin_same_seed(self, regression_task):
        cfg = FilterConfig(s_testing=120, probe_size=64)
        f_tree, _ = evaluate_fitness(unit_net(SQ_TREE), regression_task, cfg,
                                     np.random.default_rng(9))
        f_builtin, _ = evaluate_fitness(builtin_loss("squared_error"),
                                        regression_task, cfg,
                                        np.random.default_rng(9))
        assert abs(f_tree - f_builtin) <= 1e-10

    def test_reproducible_bit_for_bit(self, blobs_task):
        cfg = FilterConfig(s_testing=80, probe_size=64)
        a, _ = evaluate_fitness(unit_net(CE_TREE), blobs_task, cfg,
                                np.random.default_rng(33))
        b, _ = evaluate_fitness(unit_net(CE_TREE), blobs_task, cfg,
                                np.random.default_rng(33))
        assert a == b

    def test_worst_sentinel_orders_after_any_finite(self):
        assert WORST_FITNESS > 1e300
        assert sorted([WORST_FITNESS, 0.99, 1e12])[-1] == WORST_FITNESS
