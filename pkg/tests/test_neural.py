import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushprop import (
    AdamState,
    adam_step,
    cross_entropy,
    init_model,
    kl_divergence,
    l2_distance,
    load_model,
    mlp_backward,
    mlp_forward,
    save_model,
    sharpen,
    softmax,
)
from pushprop.errors import InputError, TrainingError
from pushprop.neural import (
    BatchNormState,
    MlpModel,
    PropagationSettings,
    batch_normalize,
    batch_normalize_backward,
)

probs_strategy = st.lists(
    st.floats(1e-3, 1.0, allow_nan=False), min_size=2, max_size=8
).map(lambda xs: np.array(xs) / np.sum(xs))


class TestForward:
    def test_zero_weights_uniform(self):
        model = MlpModel(embed=None, layers=[(np.zeros((4, 3)), np.zeros(3))])
        probs, _ = mlp_forward(model, np.random.default_rng(0).random((5, 4)))
        assert np.allclose(probs, 1 / 3, atol=1e-12)

    def test_single_layer_logits(self):
        model = MlpModel(embed=None, layers=[(np.array([[1.0, -1.0]]), np.zeros(2))])
        probs, _ = mlp_forward(model, np.array([[1.0]]))
        expected = np.exp([1.0, -1.0]) / np.exp([1.0, -1.0]).sum()
        assert probs[0] == pytest.approx(expected, abs=1e-4)
        assert probs[0, 0] == pytest.approx(0.8808, abs=1e-4)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        model = init_model(rng, 6, 8, 4, 2)
        probs, _ = mlp_forward(model, rng.normal(size=(10, 6)))
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_extreme_logits_stay_finite(self):
        model = MlpModel(embed=None, layers=[(np.array([[50.0, -50.0]]), np.zeros(2))])
        probs, _ = mlp_forward(model, np.array([[1.0], [-1.0]]))
        assert np.isfinite(probs).all()

    def test_dimension_mismatch(self):
        model = init_model(np.random.default_rng(0), 4, 5, 3, 2)
        with pytest.raises(InputError):
            mlp_forward(model, np.zeros((2, 7)))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(1)
        model = init_model(rng, 4, 5, 3, 2)
        _, cache = mlp_forward(model, rng.normal(size=(6, 4)), training=True)
        grads, grad_in = mlp_backward(model, cache, np.zeros((6, 3)))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(grad_in == 0)

    def test_softmax_cross_entropy_gradient_identity(self):
        # d(-log softmax(z)[y]) / dz = p - onehot(y)
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(1, 4))
        label = 2
        p = softmax(logits)
        eps = 1e-6
        for j in range(4):
            up, down = logits.copy(), logits.copy()
            up[0, j] += eps
            down[0, j] -= eps
            fd = (-np.log(softmax(up)[0, label]) + np.log(softmax(down)[0, label])) / (2 * eps)
            expected = p[0, j] - (1.0 if j == label else 0.0)
            assert fd == pytest.approx(expected, abs=1e-6)

    @pytest.mark.parametrize("num_layers", [1, 2])
    def test_matches_finite_differences(self, num_layers):
        rng = np.random.default_rng(3)
        for trial in range(10):
            model = init_model(np.random.default_rng(trial), 3, 4, 3, num_layers)
            x = rng.normal(size=(5, 3))
            target = rng.integers(0, 3, size=5)

            def loss_of(m):
                probs, _ = mlp_forward(m, x, training=True)
                return -np.log(probs[np.arange(5), target]).sum()

            probs, cache = mlp_forward(model, x, training=True)
            onehot = np.zeros((5, 3))
            onehot[np.arange(5), target] = 1.0
            grads, _ = mlp_backward(model, cache, probs - onehot)
            h = 1e-5
            for pi, p in enumerate(model.parameters()):
                flat = p.reshape(-1)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + h
                    up = loss_of(model)
                    flat[j] = orig - h
                    down = loss_of(model)
                    flat[j] = orig
                    fd = (up - down) / (2 * h)
                    an = grads[pi].reshape(-1)[j]
                    assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd), abs(an))


class TestSharpen:
    def test_tau_one_is_identity(self):
        p = np.array([0.2, 0.5, 0.3])
        assert np.allclose(sharpen(p, 1.0), p, atol=1e-12)

    def test_uniform_stays_uniform(self):
        p = np.full(4, 0.25)
        assert np.allclose(sharpen(p, 0.3), p, atol=1e-12)

    def test_hand_example(self):
        out = sharpen(np.array([0.6, 0.4]), 0.5)
        assert out == pytest.approx([0.36 / 0.52, 0.16 / 0.52])
        assert out == pytest.approx([0.69231, 0.30769], abs=1e-5)

    def test_tau_out_of_range(self):
        with pytest.raises(InputError):
            sharpen(np.array([1.0]), 0.0)
        with pytest.raises(InputError):
            sharpen(np.array([1.0]), 1.5)

    @settings(max_examples=80, deadline=None)
    @given(probs_strategy, st.floats(0.05, 1.0))
    def test_argmax_preserved(self, p, tau):
        assert np.argmax(sharpen(p, tau)) == np.argmax(p)

    def test_entropy_monotone_in_inverse_tau(self):
        p = np.array([0.5, 0.3, 0.2])
        entropies = []
        for tau in (1.0, 0.8, 0.5, 0.3, 0.1):
            q = sharpen(p, tau)
            entropies.append(float(-(q * np.log(np.maximum(q, 1e-300))).sum()))
        assert all(a >= b - 1e-12 for a, b in zip(entropies, entropies[1:]))


class TestDistances:
    def test_zero_at_equal(self):
        p = np.array([0.4, 0.6])
        assert l2_distance(p, p) == 0.0
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_hand_values(self):
        p, q = np.array([1.0, 0.0]), np.array([0.5, 0.5])
        assert l2_distance(p, q) == pytest.approx(0.5)
        assert kl_divergence(p, q) == pytest.approx(np.log(2.0))

    def test_kl_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            p = rng.random(5)
            p /= p.sum()
            q = rng.random(5)
            q /= q.sum()
            assert kl_divergence(p, q) >= -1e-12


class TestCrossEntropy:
    def test_one_hot_is_zero(self):
        assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == pytest.approx(0.0, abs=1e-9)

    def test_half_is_log_two(self):
        assert cross_entropy(np.array([0.5, 0.5]), 0) == pytest.approx(np.log(2.0))

    def test_decreasing_in_true_prob(self):
        values = [cross_entropy(np.array([p, 1 - p]), 0) for p in (0.2, 0.4, 0.6, 0.9)]
        assert values == sorted(values, reverse=True)

    def test_label_validation(self):
        with pytest.raises(InputError):
            cross_entropy(np.array([1.0, 0.0]), 5)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        params = [np.array([1.0, -2.0])]
        state = AdamState(lr=0.1, weight_decay=0.0)
        for _ in range(5):
            adam_step(state, params, [np.zeros(2)])
        assert params[0].tolist() == [1.0, -2.0]

    def test_first_step_magnitude(self):
        params = [np.array([0.0])]
        state = AdamState(lr=0.1)
        adam_step(state, params, [np.array([1.0])])
        assert params[0][0] == pytest.approx(-0.1, rel=1e-6)

    def test_global_norm_clip(self):
        params = [np.array([0.0]), np.array([0.0])]
        grads = [np.array([6.0]), np.array([8.0])]  # global norm 10
        state = AdamState(lr=1.0, clip_norm=5.0)
        adam_step(state, params, grads)
        assert state.m[0][0] == pytest.approx(0.1 * 3.0)  # grads halved
        assert state.m[1][0] == pytest.approx(0.1 * 4.0)

    def test_decoupled_weight_decay_applied_before_delta(self):
        params = [np.array([10.0])]
        state = AdamState(lr=0.1, weight_decay=0.5)
        adam_step(state, params, [np.array([0.0])])
        assert params[0][0] == pytest.approx(10.0 * (1 - 0.1 * 0.5))

    def test_nonfinite_gradient_raises(self):
        state = AdamState(lr=0.1)
        with pytest.raises(TrainingError):
            adam_step(state, [np.array([0.0])], [np.array([np.nan])])


class TestBatchNorm:
    def test_constant_column_maps_to_shift(self):
        state = BatchNormState.init(2)
        state.shift[:] = [3.0, -1.0]
        x = np.ones((4, 2)) * 7.0
        out, _ = batch_normalize(x, state, training=True)
        assert np.allclose(out, [3.0, -1.0], atol=1e-3)

    def test_training_normalizes_columns(self):
        state = BatchNormState.init(3)
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(64, 3))
        out, _ = batch_normalize(x, state, training=True)
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(out.var(axis=0), 1.0, atol=1e-3)

    def test_inference_uses_frozen_stats(self):
        state = BatchNormState.init(1)
        x = np.random.default_rng(1).normal(size=(8, 1))
        batch_normalize(x, state, training=True)
        frozen_mean = state.running_mean.copy()
        a, _ = batch_normalize(x, state, training=False)
        b, _ = batch_normalize(x, state, training=False)
        assert np.array_equal(a, b)
        assert np.array_equal(state.running_mean, frozen_mean)

    def test_batch_of_one_rejected(self):
        with pytest.raises(InputError):
            batch_normalize(np.ones((1, 2)), BatchNormState.init(2), training=True)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(2)
        state = BatchNormState.init(3)
        state.scale[:] = rng.random(3) + 0.5
        state.shift[:] = rng.normal(size=3)
        x = rng.normal(size=(6, 3))
        g_out = rng.normal(size=(6, 3))
        base = state.copy()
        out, cache = batch_normalize(x, state, training=True)
        gx, gscale, gshift = batch_normalize_backward(g_out, state, cache)
        h = 1e-6

        def f(xv):
            st = base.copy()
            o, _ = batch_normalize(xv, st, training=True)
            return (o * g_out).sum()

        for i in range(6):
            for j in range(3):
                up, down = x.copy(), x.copy()
                up[i, j] += h
                down[i, j] -= h
                fd = (f(up) - f(down)) / (2 * h)
                assert fd == pytest.approx(gx[i, j], abs=1e-5)


class TestModelFile:
    @pytest.mark.parametrize("embed,batchnorm,layers", [
        (False, False, 2), (True, False, 2), (False, True, 2), (False, False, 1),
    ])
    def test_round_trip(self, tmp_path, embed, batchnorm, layers):
        rng = np.random.default_rng(9)
        model = init_model(rng, 6, 4, 3, layers, embed=embed, batchnorm=batchnorm)
        settings_in = PropagationSettings(delta=0.5, scheme="ppr", alpha=0.2, order=10)
        p1, p2 = tmp_path / "m1.gpmd", tmp_path / "m2.gpmd"
        save_model(p1, model, settings_in)
        loaded, settings_out = load_model(p1)
        assert settings_out == settings_in
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert np.array_equal(a, b)
        save_model(p2, loaded, settings_out)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.gpmd"
        p.write_bytes(b"WHAT" + b"\x00" * 64)
        with pytest.raises(InputError):
            load_model(p)

    def test_non_ppr_scheme_round_trips_none_alpha(self, tmp_path):
        model = init_model(np.random.default_rng(0), 3, 4, 2, 1)
        p = tmp_path / "m.gpmd"
        save_model(p, model, PropagationSettings(delta=0.0, scheme="avg",
                                                 alpha=None, order=4))
        _, settings = load_model(p)
        assert settings.alpha is None and settings.scheme == "avg"
