import numpy as np
import pytest

from lossforge import engine as E
from lossforge.datasets import build_task
from lossforge.errors import DivergenceError, UsageError
from lossforge.expressions import parse
from lossforge.learners import learner_for_task, targets_for
from lossforge.metaopt import (MetaTrainConfig, inner_step, meta_step,
                               optimize_loss, scale_loss, task_loss_node)
from lossforge.network import compile_tree


class ScaledSquare:
    """The scalar toy loss M = phi * mean((f - y)^2) with one weight."""

    def __init__(self, phi=1.0):
        self._w = np.array([float(phi)])

    @property
    def weights(self):
        return self._w.copy()

    def set_weights(self, values):
        self._w = np.asarray(values, dtype=np.float64).reshape(-1).copy()

    def param_nodes(self):
        return [E.parameter(w) for w in self._w]

    def loss_elements(self, y, f, params=None):
        p = params[0] if params else E.constant(self._w[0])
        return E.mul(p, E.square(E.sub(f, y)))

    def loss(self, y, f, params=None):
        return E.mean_all(self.loss_elements(y, f, params=params))


def toy_task(n=4):
    # f_theta(x) = bias when X = 0, so the single bias acts as theta
    X = np.zeros((n, 1))
    y = np.zeros(n)
    return build_task(X, y, "regression", fractions=(1.0, 0.0, 0.0))


def toy_init(_j, _rng):
    return [np.zeros((1, 1)), np.ones(1)]


def toy_batch(task):
    Xb, yb = task.split_arrays("train")
    return Xb, targets_for(task, yb)


class TestInnerStep:
    def test_scalar_toy(self):
        task = toy_task()
        learner = learner_for_task(task)
        theta = [E.parameter(v) for v in toy_init(0, None)]
        new_theta, _ = inner_step(learner, theta, ScaledSquare(), toy_batch(task),
                                  alpha=0.1, classification=False)
        assert float(new_theta[1].value[0]) == 0.8

    def test_alpha_zero_identity(self):
        task = toy_task()
        learner = learner_for_task(task)
        theta = [E.parameter(v) for v in toy_init(0, None)]
        new_theta, _ = inner_step(learner, theta, ScaledSquare(), toy_batch(task),
                                  alpha=0.0, classification=False)
        for old, new in zip(theta, new_theta):
            assert np.array_equal(old.value, new.value)

    def test_zero_gradient_loss_keeps_theta(self):
        # sign(...) has zero gradient everywhere, so theta never moves
        net = compile_tree(parse("(sign (+ (sq f) (sq y)))"), unit_weights=True)
        task = toy_task()
        learner = learner_for_task(task)
        theta = [E.parameter(v) for v in toy_init(0, None)]
        new_theta, _ = inner_step(learner, theta, net, toy_batch(task),
                                  alpha=0.5, classification=False)
        for old, new in zip(theta, new_theta):
            assert np.array_equal(old.value, new.value)

    def test_nonfinite_loss_signals_divergence(self):
        net = compile_tree(parse("(sq (sq (sq (sq (sq (* y f))))))"),
                           unit_weights=True)
        X = np.zeros((4, 1))
        y = np.zeros(4)
        task = build_task(X, y, "regression", fractions=(1.0, 0.0, 0.0))
        learner = learner_for_task(task)
        # f = 1e60, y*f = 1e60, fifth squaring overflows to inf
        theta = [E.parameter(np.full((1, 1), 1e30)), E.parameter(np.zeros(1))]
        with np.errstate(over="ignore"), pytest.raises(DivergenceError):
            inner_step(learner, theta, net,
                       (np.full((4, 1), 1e30), np.full((4, 1), 1.0)),
                       alpha=0.1, classification=False)


class TestMetaStep:
    CFG = MetaTrainConfig(s_meta=1, s_base=1, alpha=0.1, eta=0.01,
                          batch_size=8, task_loss="squared_error")

    def test_toy_meta_gradient(self):
        toy = ScaledSquare()
        rec = meta_step(toy, [toy_task()], self.CFG, np.random.default_rng(0),
                        init_fn=toy_init)
        # dL_task/dphi = -4*alpha*theta^2*(1 - 2*alpha*phi) = -0.32
        assert rec.task_losses[0] == pytest.approx(0.64, abs=1e-12)
        assert toy.weights[0] == pytest.approx(1.0 + 0.32 * self.CFG.eta,
                                               abs=1e-10)

    def test_toy_meta_gradient_matches_finite_difference(self):
        task = toy_task()

        def l_task_of_phi(phi):
            toy = ScaledSquare(phi)
            learner = learner_for_task(task)
            theta = [E.parameter(v) for v in toy_init(0, None)]
            new_theta, _ = inner_step(learner, theta, toy, toy_batch(task),
                                      alpha=0.1, classification=False)
            Xb, targets = toy_batch(task)
            logits = learner.forward_logits(new_theta, Xb)
            return float(task_loss_node("squared_error", targets, logits,
                                        classification=False).value)

        h = 1e-6
        numeric = (l_task_of_phi(1 + h) - l_task_of_phi(1 - h)) / (2 * h)
        assert numeric == pytest.approx(-0.32, abs=1e-6)

    def test_eta_zero_keeps_weights(self):
        toy = ScaledSquare()
        cfg = MetaTrainConfig(s_meta=1, s_base=1, alpha=0.1, eta=0.0,
                              batch_size=8, task_loss="squared_error")
        meta_step(toy, [toy_task()], cfg, np.random.default_rng(0),
                  init_fn=toy_init)
        assert toy.weights[0] == 1.0

    def test_two_identical_tasks_double_the_gradient(self):
        eta = 0.01
        cfg = MetaTrainConfig(s_meta=1, s_base=1, alpha=0.1, eta=eta,
                              batch_size=8, task_loss="squared_error")
        one = ScaledSquare()
        meta_step(one, [toy_task()], cfg, np.random.default_rng(0),
                  init_fn=toy_init)
        two = ScaledSquare()
        meta_step(two, [toy_task(), toy_task()], cfg, np.random.default_rng(0),
                  init_fn=toy_init)
        step_one = one.weights[0] - 1.0
        step_two = two.weights[0] - 1.0
        assert step_two == pytest.approx(2.0 * step_one, rel=1e-12)

    def test_empty_tasks_rejected(self):
        with pytest.raises(UsageError):
            meta_step(ScaledSquare(), [], self.CFG, np.random.default_rng(0))


class TestOptimizeLoss:
    def test_single_meta_step(self):
        toy = ScaledSquare()
        cfg = MetaTrainConfig(s_meta=1, s_base=1, alpha=0.1, eta=0.01,
                              batch_size=8, task_loss="squared_error")
        result = optimize_loss(toy, [toy_task()], cfg,
                               np.random.default_rng(0), init_fn=toy_init)
        assert len(result.trajectory) == 1
        assert toy.weights[0] != 1.0

    def test_invalid_config_rejected(self):
        cfg = MetaTrainConfig(s_meta=0)
        with pytest.raises(UsageError):
            optimize_loss(ScaledSquare(), [toy_task()], cfg,
                          np.random.default_rng(0), init_fn=toy_init)

    def test_toy_quadratic_task_loss_strictly_decreases(self):
        # analytic recurrence: phi_{i+1} = phi_i + eta*0.4*(1 - 0.2*phi_i),
        # L_i = (1 - 0.2*phi_i)^2, strictly decreasing toward phi* = 5
        toy = ScaledSquare()
        cfg = MetaTrainConfig(s_meta=10, s_base=1, alpha=0.1, eta=0.1,
                              batch_size=8, task_loss="squared_error")
        result = optimize_loss(toy, [toy_task()], cfg,
                               np.random.default_rng(0), init_fn=toy_init)
        losses = [loss for _, _, loss in result.trajectory]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        phi = 1.0
        expected = []
        for _ in range(10):
            expected.append((1 - 0.2 * phi) ** 2)
            phi = phi + 0.1 * 0.4 * (1 - 0.2 * phi)
        assert np.allclose(losses, expected, atol=1e-12)

    def test_zero_gradient_tree_constant_trajectory(self):
        net = compile_tree(parse("(sign (+ (sq f) (sq y)))"), unit_weights=True)
        w0 = net.weights
        cfg = MetaTrainConfig(s_meta=5, s_base=1, alpha=0.1, eta=0.5,
                              batch_size=8, task_loss="squared_error")
        optimize_loss(net, [toy_task()], cfg, np.random.default_rng(0),
                      init_fn=toy_init)
        assert np.array_equal(net.weights, w0)

    def test_trajectory_csv_format(self):
        toy = ScaledSquare()
        cfg = MetaTrainConfig(s_meta=3, s_base=1, alpha=0.1, eta=0.01,
                              batch_size=8, task_loss="squared_error")
        result = optimize_loss(toy, [toy_task()], cfg,
                               np.random.default_rng(0), init_fn=toy_init)
        lines = result.trajectory_csv().strip().splitlines()
        assert lines[0] == "step,task,task_loss"
        assert len(lines) == 4
        step, task_idx, loss = lines[1].split(",")
        assert (int(step), int(task_idx)) == (0, 0)
        assert float(loss) == pytest.approx(0.64, abs=1e-12)

    def test_theta_reset_independent_of_phi_trajectory(self, regression_task):
        # different meta learning rates produce different phi paths but must
        # draw identical base initializations at every meta step
        digests = []
        for eta in (1e-3, 0.05):
            net = compile_tree(parse("(sq (- y f))"), unit_weights=True)
            cfg = MetaTrainConfig(s_meta=6, s_base=1, alpha=0.05, eta=eta,
                                  batch_size=32, task_loss="squared_error")
            result = optimize_loss(net, [regression_task], cfg,
                                   np.random.default_rng(11))
            digests.append(result.theta_digests)
        assert digests[0] == digests[1]


class TestMetaGradientOracle:
    """Unrolled meta-gradients vs central differences on small MLPs."""

    SMOOTH = ["(sq (- y f))", "(tanh (* y f))", "(aq (- y f) f)",
              "(* (sq (- y f)) (+ 1 (tanh f)))"]

    def _unrolled(self, net, weights, task, learner, theta0, batches,
                  alpha, s_base):
        net.set_weights(weights)
        phi = net.param_nodes()
        theta = [E.parameter(v) for v in theta0]
        classification = task.kind == "classification"
        for t in range(s_base):
            theta, _ = inner_step(learner, theta, net, batches[t], alpha,
                                  phi_params=phi,
                                  classification=classification)
        Xb, targets = batches[s_base - 1]
        logits = learner.forward_logits(theta, Xb)
        kind = "cross_entropy" if classification else "squared_error"
        return task_loss_node(kind, targets, logits, classification), phi

    @pytest.mark.parametrize("s_base", [1, 2])
    def test_matches_finite_differences(self, s_base):
        rng = np.random.default_rng(42)
        X = rng.normal(size=(32, 3))
        y = rng.integers(0, 2, size=32)
        task = build_task(X, y, "classification", fractions=(1.0, 0.0, 0.0))
        learner = learner_for_task(task, hidden=(4,))
        assert learner.n_params() <= 64
        batches = []
        Xt, yt = task.split_arrays("train")
        for t in range(s_base):
            sl = slice(t * 16, t * 16 + 16)
            batches.append((Xt[sl], targets_for(task, yt[sl])))
        for expr in self.SMOOTH:
            theta0 = learner.init_params(rng)
            net = compile_tree(parse(expr), rng=rng)
            w0 = net.weights
            loss_node, phi = self._unrolled(net, w0, task, learner, theta0,
                                            batches, 0.1, s_base)
            analytic = np.array([float(E.backward(loss_node, phi)[p])
                                 for p in phi])
            h = 1e-5
            numeric = np.zeros_like(w0)
            for i in range(w0.size):
                wp, wm = w0.copy(), w0.copy()
                wp[i] += h
                wm[i] -= h
                lp, _ = self._unrolled(net, wp, task, learner, theta0,
                                       batches, 0.1, s_base)
                lm, _ = self._unrolled(net, wm, task, learner, theta0,
                                       batches, 0.1, s_base)
                numeric[i] = (float(lp.value) - float(lm.value)) / (2 * h)
            rel = np.abs(analytic - numeric) / np.maximum(
                1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
            assert rel.max() <= 1e-4, (expr, s_base, rel.max())


class TestImplicitLearningRateIdentity:
    def test_scaled_loss_equals_scaled_alpha_bitwise(self):
        # one inner step under (alpha, phi0 * L) == one under (alpha*phi0, L)
        task = toy_task(n=8)
        learner = learner_for_task(task)
        base = ScaledSquare()
        rng = np.random.default_rng(71)
        for _ in range(50):
            phi0 = float(rng.uniform(0.0, 2.0)) or 1.0
            alpha = float(rng.uniform(0.01, 0.5))
            theta_a = [E.parameter(v) for v in toy_init(0, None)]
            scaled, _ = inner_step(learner, theta_a, scale_loss(base, phi0),
                                   toy_batch(task), alpha,
                                   classification=False)
            theta_b = [E.parameter(v) for v in toy_init(0, None)]
            plain, _ = inner_step(learner, theta_b, base, toy_batch(task),
                                  alpha * phi0, classification=False)
            for sa, pb in zip(scaled, plain):
                assert np.array_equal(sa.value, pb.value)
