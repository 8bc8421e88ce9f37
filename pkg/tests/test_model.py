import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relex.dataset import BlobConfig, Dataset, Instance, generate_blobs
from relex.metrics import parse_metric, precompute, top_k_indices
from relex.model import (
    FeatureMap,
    Model,
    ModelSpec,
    NumericalError,
    TrainConfig,
    accuracy,
    features,
    flatten_layers,
    init_random,
    load_model,
    log_softmax,
    loss,
    loss_gradient,
    losses,
    objective,
    objective_gradient,
    per_example_gradients,
    predict,
    predict_proba,
    residual,
    residuals,
    save_model,
    train,
)


def fd_gradient(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def max_rel_err(g, ref, floor=1e-6):
    mask = np.abs(ref) > floor
    return float(np.max(np.abs(g[mask] - ref[mask]) / np.abs(ref[mask])))


def zero_model(d, C, **kw):
    spec = ModelSpec(d, C, **kw)
    return Model(spec, np.zeros(spec.param_count))


class TestSpec:
    def test_logreg_param_count(self):
        assert ModelSpec(4, 3).param_count == 15
        assert ModelSpec(19, 7).param_count == 140
        assert ModelSpec(18, 4).param_count == 76

    def test_mlp_param_count(self):
        assert ModelSpec(4, 3, (8, 4)).param_count == (4 * 8 + 8) + (8 * 4 + 4) + (4 * 3 + 3)

    @pytest.mark.parametrize("kw", [dict(class_count=1), dict(hidden_layers=(0,)),
                                    dict(activation="gelu"), dict(l2_penalty=-1.0)])
    def test_invalid(self, kw):
        args = dict(input_dim=3, class_count=2) | kw
        with pytest.raises(ValueError):
            ModelSpec(**args)

    def test_theta_shape_checked(self):
        with pytest.raises(ValueError):
            Model(ModelSpec(2, 2), np.zeros(5))
        with pytest.raises(NumericalError):
            Model(ModelSpec(2, 2), np.full(6, np.nan))


class TestInit:
    def test_deterministic(self):
        spec = ModelSpec(5, 3, (6,))
        np.testing.assert_array_equal(init_random(spec, 4).theta, init_random(spec, 4).theta)

    def test_bounds_and_zero_bias(self):
        spec = ModelSpec(16, 3)
        m = init_random(spec, 0)
        W, b = m.layers()[0]
        assert np.all(np.abs(W) <= 0.25)
        np.testing.assert_array_equal(b, 0.0)

    def test_flatten_round_trip(self):
        m = init_random(ModelSpec(3, 4, (5, 2)), 1)
        np.testing.assert_array_equal(flatten_layers(m.layers()), m.theta)

    def test_different_seeds_change_some_ranking(self, blobs3):
        tr, te = blobs3
        spec = ModelSpec(tr.dim, tr.class_count)
        a, b = init_random(spec, 1), init_random(spec, 2)
        tops = []
        for m in (a, b):
            cache = precompute(parse_metric("gd"), m, tr)
            S, _ = cache.scores(te.X, predict(m, te.X))
            tops.append(top_k_indices(S, 1)[:, 0])
        assert np.any(tops[0] != tops[1])


class TestProbabilities:
    def test_zero_theta_uniform(self):
        np.testing.assert_allclose(predict_proba(zero_model(3, 4), np.ones(3)), 0.25)

    def test_sums_to_one(self, rng):
        m = init_random(ModelSpec(6, 5, (7,)), 0)
        P = predict_proba(m, rng.normal(scale=20, size=(200, 6)))
        np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-12)
        assert np.all((P >= 0) & (P <= 1))

    def test_large_logits_do_not_overflow(self):
        spec = ModelSpec(1, 2)
        m = Model(spec, np.array([1000.0, 0.0, 0.0, 0.0]))
        p = predict_proba(m, np.array([1.0]))
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)

    def test_log_softmax_matches_logsumexp(self, rng):
        Z = rng.normal(scale=30, size=(100, 6))
        ref = Z - np.array([math.log(math.fsum(math.exp(v - r.max()) for v in r)) + r.max() for r in Z])[:, None]
        np.testing.assert_allclose(log_softmax(Z), ref, atol=1e-12)


class TestPredict:
    def _fixed(self, probs):
        # logreg with d=1 whose bias carries log-probabilities
        C = len(probs)
        theta = np.concatenate([np.zeros(C), np.log(probs)])
        return Model(ModelSpec(1, C), theta)

    def test_argmax(self):
        assert predict(self._fixed([0.2, 0.5, 0.3]), np.zeros(1)) == 1

    def test_tie_goes_to_lowest(self):
        assert predict(self._fixed([0.5, 0.5]), np.zeros(1)) == 0

    def test_matches_brute_force(self, rng):
        m = init_random(ModelSpec(4, 5, (6,)), 3)
        X = rng.normal(size=(1000, 4))
        P = predict_proba(m, X)
        brute = [max(range(5), key=lambda c: (P[i, c], -c)) for i in range(1000)]
        np.testing.assert_array_equal(predict(m, X), brute)

    def test_uniform_bias_shift_invariance(self, rng):
        m = init_random(ModelSpec(4, 3), 0)
        theta = m.theta.copy()
        theta[-3:] += 17.5
        X = rng.normal(size=(100, 4))
        np.testing.assert_array_equal(predict(m, X), predict(m.with_theta(theta), X))


class TestLoss:
    def test_uniform_loss(self):
        assert loss(zero_model(3, 4), Instance(np.ones(3), 2)) == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_limit(self):
        m = Model(ModelSpec(1, 2), np.array([50.0, -50.0, 0.0, 0.0]))
        assert loss(m, Instance(np.array([1.0]), 0)) < 1e-40

    def test_penalty_excluded(self, rng):
        spec = ModelSpec(3, 2, l2_penalty=0.5)
        m = init_random(spec, 0)
        X, y = rng.normal(size=(10, 3)), rng.integers(0, 2, 10)
        assert objective(m, X, y) == pytest.approx(losses(m, X, y).mean() + 0.25 * m.theta @ m.theta)


class TestGradients:
    def test_logreg_zero_theta_example(self):
        m = zero_model(2, 2)
        g = loss_gradient(m, Instance(np.array([1.0, 0.0]), 0))
        # rows of W: r_c * x with r = (-0.5, 0.5); then bias = r
        np.testing.assert_allclose(g, [-0.5, 0.0, 0.5, 0.0, -0.5, 0.5])

    @pytest.mark.parametrize("hidden,act", [((), "relu"), ((8, 4), "tanh"), ((8, 4), "relu")])
    def test_against_finite_differences(self, hidden, act, rng):
        m = init_random(ModelSpec(5, 3, hidden, act), 7)
        X = rng.normal(size=(6, 5))
        y = rng.integers(0, 3, 6)
        for i in range(len(X)):
            g = loss_gradient(m, Instance(X[i], int(y[i])))
            ref = fd_gradient(lambda t: losses(m.with_theta(t), X[i], [y[i]])[0], m.theta)
            assert max_rel_err(g, ref) < 1e-4

    def test_objective_gradient_matches_mean(self, rng):
        m = init_random(ModelSpec(4, 3, (5,), "tanh", l2_penalty=0.3), 2)
        X, y = rng.normal(size=(9, 4)), rng.integers(0, 3, 9)
        G = per_example_gradients(m, X, y)
        np.testing.assert_allclose(objective_gradient(m, X, y), G.mean(0) + 0.3 * m.theta, atol=1e-12)

    def test_closed_form_logreg(self, rng):
        m = init_random(ModelSpec(4, 3), 5)
        X, y = rng.normal(size=(20, 4)), rng.integers(0, 3, 20)
        R = residuals(m, X, y)
        closed = np.concatenate([(R[:, :, None] * X[:, None, :]).reshape(20, -1), R], axis=1)
        np.testing.assert_allclose(per_example_gradients(m, X, y), closed, atol=1e-10)

    def test_confident_gradient_vanishes(self):
        norms = []
        for scale in (1.0, 5.0, 20.0):
            m = Model(ModelSpec(1, 2), np.array([scale, -scale, 0.0, 0.0]))
            norms.append(np.linalg.norm(loss_gradient(m, Instance(np.array([1.0]), 0))))
        assert norms[0] > norms[1] > norms[2] and norms[2] < 1e-15


class TestFeatures:
    def test_input_identity(self, rng):
        x = rng.normal(size=4)
        m = init_random(ModelSpec(4, 2, (3,)), 0)
        np.testing.assert_array_equal(features(m, x, FeatureMap.INPUT), x)

    def test_hidden_shapes_and_prefix(self, rng):
        m = init_random(ModelSpec(5, 3, (8, 4), "tanh"), 0)
        x = rng.normal(size=5)
        assert features(m, x, "all").shape == (12,)
        assert features(m, x, "last").shape == (4,)
        W1, b1 = m.layers()[0]
        np.testing.assert_allclose(features(m, x, "all")[:8], np.tanh(W1 @ x + b1), atol=1e-15)
        np.testing.assert_array_equal(features(m, x, "all")[8:], features(m, x, "last"))

    def test_hidden_on_logreg_errors(self):
        with pytest.raises(ValueError):
            features(zero_model(2, 2), np.zeros(2), "last")


class TestResidual:
    def test_zero_theta(self):
        np.testing.assert_allclose(residual(zero_model(2, 2), Instance(np.ones(2), 0)), [-0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 6))
    def test_sum_and_sign(self, seed, C):
        rng = np.random.default_rng(seed)
        m = Model(ModelSpec(3, C), rng.normal(scale=3, size=ModelSpec(3, C).param_count))
        X, y = rng.normal(size=(20, 3)), rng.integers(0, C, 20)
        R = residuals(m, X, y)
        np.testing.assert_allclose(R.sum(1), 0.0, atol=1e-12)
        own = R[np.arange(20), y]
        assert np.all(own <= 0)
        mask = np.ones_like(R, bool)
        mask[np.arange(20), y] = False
        assert np.all(R[mask] >= 0)


class TestTraining:
    def test_separable_blobs_fit(self):
        ds = generate_blobs(BlobConfig(3, 1, 4, 50, 20.0, 1.0), seed=2)
        m = train(init_random(ModelSpec(4, 3), 0), ds, TrainConfig(learning_rate=0.01, epochs=200))
        assert accuracy(m.model, ds) >= 0.99
        assert m.final_loss < m.initial_loss

    def test_zero_learning_rate(self, blobs3):
        tr, _ = blobs3
        m0 = init_random(ModelSpec(tr.dim, tr.class_count), 0)
        res = train(m0, tr, TrainConfig(learning_rate=0.0, epochs=3))
        np.testing.assert_array_equal(res.model.theta, m0.theta)

    def test_deterministic(self, blobs3):
        tr, _ = blobs3
        m0 = init_random(ModelSpec(tr.dim, tr.class_count, (4,)), 0)
        cfg = TrainConfig(learning_rate=0.01, epochs=5, seed=3)
        np.testing.assert_array_equal(train(m0, tr, cfg).model.theta, train(m0, tr, cfg).model.theta)

    def test_divergence_names_epoch(self):
        ds = Dataset(np.array([[1.0, 1.0], [-1.0, -1.0]]), [0, 1], 2)
        with np.errstate(all="ignore"), pytest.raises(NumericalError, match="epoch 1"):
            train(init_random(ModelSpec(2, 2), 0), ds, TrainConfig(learning_rate=1e308, epochs=2))

    @pytest.mark.parametrize("kw", [dict(learning_rate=-1.0), dict(epochs=0), dict(batch_size=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSerialization:
    def test_round_trip(self, tmp_path, mlp3, blobs3):
        _, te = blobs3
        save_model(mlp3, tmp_path / "m.json", {"note": 1})
        back, meta = load_model(tmp_path / "m.json")
        assert back.spec == mlp3.spec and meta == {"note": 1}
        np.testing.assert_array_equal(back.theta, mlp3.theta)
        np.testing.assert_array_equal(predict(back, te.X), predict(mlp3, te.X))

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_model(tmp_path / "x.json")
