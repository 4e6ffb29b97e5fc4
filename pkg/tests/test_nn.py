import numpy as np
import pytest

from musicrep import nn
from gradcheck import check_chain

TOL = 1e-4


def single_layer_cases():
    return {
        "conv2d_3x3": ([nn.conv2d(4, (3, 3))], (3, 7, 6)),
        "conv2d_5x5_stride21": ([nn.conv2d(3, (5, 5), (2, 1))], (2, 9, 8)),
        "conv2d_1x1": ([nn.conv2d(5, (1, 1))], (4, 4, 4)),
        "maxpool_even": ([nn.maxpool2d((2, 2))], (3, 6, 4)),
        "maxpool_odd_crop": ([nn.maxpool2d((2, 2))], (2, 7, 5)),
        "batchnorm_4d": ([nn.batchnorm()], (4, 5, 3)),
        "relu": ([nn.relu()], (3, 4, 4)),
        "gap": ([nn.gap()], (5, 3, 4)),
        "fc": ([nn.gap(), nn.fullyconnected(7)], (4, 3, 3)),
        "fc_bn_2d": ([nn.gap(), nn.fullyconnected(6), nn.batchnorm()], (4, 3, 3)),
        "dropout": ([nn.gap(), nn.fullyconnected(8), nn.dropout(0.5)], (4, 3, 3)),
        "softmax": ([nn.gap(), nn.fullyconnected(5), nn.softmax()], (4, 3, 3)),
    }


class TestGradients:
    @pytest.mark.parametrize("name", sorted(single_layer_cases()))
    def test_each_layer_kind(self, name):
        layers, shape = single_layer_cases()[name]
        for seed in range(3):
            assert check_chain(layers, shape, seed=seed) < TOL

    def test_batchnorm_eval_mode(self):
        assert check_chain([nn.batchnorm()], (4, 5, 3), seed=0, mode="eval") < TOL

    def test_kl_head_from_logits(self):
        layers = [nn.gap(), nn.fullyconnected(6), nn.softmax()]
        for seed in range(3):
            assert check_chain(layers, (3, 4, 4), seed=seed, loss="kl") < TOL

    def test_zero_upstream_gives_zero_param_grads(self):
        layers = [nn.conv2d(3, (3, 3)), nn.batchnorm(), nn.relu(), nn.gap(), nn.fullyconnected(4)]
        rng = np.random.default_rng(0)
        params = nn.init_params(layers, (2, 6, 6), rng, dtype=np.float64)
        y, cache = nn.forward(layers, params, rng.normal(size=(2, 2, 6, 6)), mode="train")
        grads, grad_in = nn.backward(cache, np.zeros_like(y))
        assert np.all(grad_in == 0)
        for idx, key, _ in params.trainable():
            assert np.all(grads[idx][key] == 0)

    def test_identity_fc_passes_gradient_through(self):
        layers = [nn.fullyconnected(1)]
        params = nn.ParamSet([{"w": np.ones((1, 1)), "b": np.zeros(1)}])
        x = np.array([[2.0], [3.0]])
        y, cache = nn.forward(layers, params, x, mode="train")
        grad_out = np.array([[0.5], [-1.5]])
        _, grad_in = nn.backward(cache, grad_out)
        np.testing.assert_array_equal(grad_in, grad_out)

    def test_stale_cache_rejected_after_adam(self):
        layers = [nn.fullyconnected(2)]
        rng = np.random.default_rng(1)
        params = nn.init_params(layers, (3,), rng)
        y, cache = nn.forward(layers, params, rng.normal(size=(2, 3)).astype(np.float32), mode="train")
        grads, _ = nn.backward(cache, np.ones_like(y))
        nn.adam_step(params, grads, nn.AdamState(params))
        with pytest.raises(nn.NnError, match="stale cache"):
            nn.backward(cache, np.ones_like(y))


class TestForwardBehavior:
    def test_relu_all_negative(self):
        layers = [nn.relu()]
        params = nn.ParamSet([{}])
        y, _ = nn.forward(layers, params, -np.ones((2, 3, 4, 4)))
        assert np.all(y == 0)

    def test_gap_constant_per_channel(self):
        layers = [nn.gap()]
        params = nn.ParamSet([{}])
        x = np.stack([np.full((3, 4, 5), v) for v in (1.0, -2.0)])
        y, _ = nn.forward(layers, params, x)
        np.testing.assert_allclose(y, [[1.0, 1.0, 1.0], [-2.0, -2.0, -2.0]])

    def test_softmax_rows_sum_to_one(self):
        layers = [nn.softmax()]
        params = nn.ParamSet([{}])
        y, _ = nn.forward(layers, params, np.random.default_rng(0).normal(size=(6, 11)) * 10)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(y > 0)

    def test_batchnorm_train_normalizes_batch(self):
        layers = [nn.batchnorm()]
        rng = np.random.default_rng(3)
        params = nn.init_params(layers, (5, 6, 7), rng, dtype=np.float64)
        x = rng.normal(3.0, 2.5, size=(8, 5, 6, 7))
        y, _ = nn.forward(layers, params, x, mode="train")
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.std(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_eval_deterministic_train_seeded(self):
        layers = [nn.fullyconnected(4), nn.dropout(0.5)]
        rng = np.random.default_rng(4)
        params = nn.init_params(layers, (3,), rng)
        x = rng.normal(size=(5, 3)).astype(np.float32)
        a, _ = nn.forward(layers, params, x, mode="eval")
        b, _ = nn.forward(layers, params, x, mode="eval")
        np.testing.assert_array_equal(a, b)
        t1, _ = nn.forward(layers, params, x, mode="train", rng=np.random.default_rng(9))
        t2, _ = nn.forward(layers, params, x, mode="train", rng=np.random.default_rng(9))
        np.testing.assert_array_equal(t1, t2)

    def test_shape_mismatch_names_layer(self):
        layers = [nn.gap(), nn.fullyconnected(4)]
        rng = np.random.default_rng(5)
        params = nn.init_params(layers, (3, 4, 4), rng)
        with pytest.raises(nn.NnError, match="layer 0"):
            nn.forward(layers, params, np.zeros((2, 7)))

    def test_dropout_train_needs_rng(self):
        layers = [nn.dropout(0.5)]
        params = nn.ParamSet([{}])
        with pytest.raises(nn.NnError, match="rng"):
            nn.forward(layers, params, np.ones((2, 3)), mode="train")


class TestKlLoss:
    def test_equal_distributions(self):
        z = np.array([0.3, 0.7])
        loss, grad = nn.kl_loss(z, z)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_hand_computed_case(self):
        loss, grad = nn.kl_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        assert loss == pytest.approx(np.log(2.0))
        np.testing.assert_allclose(grad, [-0.5, 0.5])

    def test_matches_finite_differences_k50(self):
        rng = np.random.default_rng(6)
        z = rng.uniform(0.01, 1.0, size=50)
        z /= z.sum()
        logits = rng.normal(size=50)

        def loss_at(lg):
            e = np.exp(lg - lg.max())
            q = e / e.sum()
            return nn.kl_loss(z, q)[0]

        e = np.exp(logits - logits.max())
        q = e / e.sum()
        _, grad = nn.kl_loss(z, q)
        h = 1e-6
        for i in range(0, 50, 7):
            bumped = logits.copy()
            bumped[i] += h
            dipped = logits.copy()
            dipped[i] -= h
            fd = (loss_at(bumped) - loss_at(dipped)) / (2 * h)
            assert abs(fd - grad[i]) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(nn.NnError, match="mismatch"):
            nn.kl_loss(np.ones(3) / 3, np.ones(4) / 4)


class TestAdam:
    def test_zero_gradient_zero_l2_is_noop(self):
        layers = [nn.fullyconnected(3)]
        rng = np.random.default_rng(7)
        params = nn.init_params(layers, (2,), rng, dtype=np.float64)
        before = params.copy()
        grads = [{"w": np.zeros((3, 2)), "b": np.zeros(3)}]
        nn.adam_step(params, grads, nn.AdamState(params), l2=0.0)
        np.testing.assert_array_equal(params.layers[0]["w"], before.layers[0]["w"])
        np.testing.assert_array_equal(params.layers[0]["b"], before.layers[0]["b"])

    def test_single_scalar_matches_hand_computation(self):
        theta = 1.5
        grad_value = 0.25
        lr = 0.00025
        params = nn.ParamSet([{"w": np.array([[theta]])}])
        state = nn.AdamState(params, learning_rate=lr)
        nn.adam_step(params, [{"w": np.array([[grad_value]])}], state, l2=0.0)
        m = 0.1 * grad_value
        v = 0.001 * grad_value**2
        m_hat = m / (1 - 0.9)
        v_hat = v / (1 - 0.999)
        expected = theta - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert params.layers[0]["w"][0, 0] == pytest.approx(expected, rel=1e-12)
        assert state.step == 1

    def test_l2_added_before_moments(self):
        params = nn.ParamSet([{"w": np.array([[2.0]])}])
        state = nn.AdamState(params, learning_rate=0.1)
        nn.adam_step(params, [{"w": np.array([[0.0]])}], state, l2=0.5)
        g = 0.5 * 2.0
        expected = 2.0 - 0.1 * (0.1 * g / (1 - 0.9)) / (np.sqrt(0.001 * g * g / (1 - 0.999)) + 1e-8)
        assert params.layers[0]["w"][0, 0] == pytest.approx(expected, rel=1e-12)

    def test_rejects_non_finite_gradient(self):
        params = nn.ParamSet([{"w": np.ones((1, 1))}])
        with pytest.raises(nn.NnError, match="non-finite"):
            nn.adam_step(params, [{"w": np.array([[np.nan]])}], nn.AdamState(params))

    def test_default_hyperparameters(self):
        assert nn.DEFAULT_LEARNING_RATE == 0.00025
        assert nn.DEFAULT_L2 == 1e-6


class TestTrainingStepProperty:
    def test_one_step_decreases_loss_50_seeds(self):
        layers = [
            nn.conv2d(4, (3, 3)),
            nn.batchnorm(),
            nn.relu(),
            nn.gap(),
            nn.fullyconnected(5),
            nn.softmax(),
        ]
        for seed in range(50):
            rng = np.random.default_rng(seed)
            params = nn.init_params(layers, (2, 6, 6), rng, dtype=np.float64)
            x = rng.normal(size=(8, 2, 6, 6))
            raw = rng.uniform(0.05, 1.0, size=(8, 5))
            z = raw / raw.sum(axis=1, keepdims=True)
            y, cache = nn.forward(layers, params, x, mode="train")
            loss_before, grad_logits = nn.kl_loss(z, y)
            grads, _ = nn.backward(cache, grad_logits, from_logits=True)
            state = nn.AdamState(params, learning_rate=1e-4)
            nn.adam_step(params, grads, state, l2=0.0)
            y2, _ = nn.forward(layers, params, x, mode="train")
            loss_after, _ = nn.kl_loss(z, y2)
            assert loss_after < loss_before


class TestInferShapes:
    def test_basic_chain(self):
        layers = [nn.conv2d(4, (3, 3), (2, 1)), nn.maxpool2d((2, 2)), nn.gap(), nn.fullyconnected(9)]
        shapes = nn.infer_shapes(layers, (2, 12, 8))
        assert shapes == [(4, 6, 8), (4, 3, 4), (4,), (9,)]

    def test_invalid_spec_rejected(self):
        with pytest.raises(nn.NnError):
            nn.LayerSpec(kind="warp")
        with pytest.raises(nn.NnError):
            nn.LayerSpec(kind="dropout", rate=1.0)
        with pytest.raises(nn.NnError):
            nn.LayerSpec(kind="maxpool2d", kernel=(2, 2), stride=(1, 1))
