import numpy as np
import pytest

from ohlc_cnn.nn_core import (
    IDENTITY, LEAKY_RELU, RELU, SIGMOID,
    ConvLayer, DenseLayer, ModelConfig,
    activation_forward, activation_grad, conv1d_forward, dense_forward,
    dropout_forward, init_model, load_checkpoint, maxpool1d_forward,
    model_backward, model_backward_from_delta, model_forward,
    model_forward_batch, save_checkpoint,
)

TINY = ModelConfig(in_channels=2, window_len=8, conv_filters=(2, 2, 2),
                   dense_units=(4, 4), dropout_rate=0.0)


def naive_conv1d(x, weights, bias):
    """Triple-loop "same" convolution oracle (pre-activation)."""
    out_ch, in_ch, k = weights.shape
    pad = k // 2
    length = x.shape[1]
    out = np.zeros((out_ch, length))
    for f in range(out_ch):
        for pos in range(length):
            acc = bias[f]
            for c in range(in_ch):
                for j in range(k):
                    src = pos - pad + j
                    if 0 <= src < length:
                        acc += weights[f, c, j] * x[c, src]
            out[f, pos] = acc
    return out


class TestConv1d:
    def test_identity_kernel(self):
        layer = ConvLayer(np.array([[[0.0, 1.0, 0.0]]]), np.zeros(1), IDENTITY)
        out = conv1d_forward(np.array([[1.0, 2.0, 3.0, 4.0]]), layer)
        assert np.array_equal(out, [[1.0, 2.0, 3.0, 4.0]])

    def test_box_kernel_zero_padding(self):
        layer = ConvLayer(np.array([[[1.0, 1.0, 1.0]]]), np.zeros(1), IDENTITY)
        out = conv1d_forward(np.array([[1.0, 1.0, 1.0]]), layer)
        assert np.allclose(out, [[2.0, 3.0, 2.0]])

    def test_relu_clamps_negatives(self):
        layer = ConvLayer(np.array([[[0.0, 1.0, 0.0]]]), np.zeros(1), RELU)
        out = conv1d_forward(np.array([[-1.0, -2.0]]), layer)
        assert np.array_equal(out, [[0.0, 0.0]])

    def test_channel_mismatch(self):
        layer = ConvLayer(np.zeros((1, 2, 3)), np.zeros(1), IDENTITY)
        with pytest.raises(ValueError):
            conv1d_forward(np.ones((3, 5)), layer)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ConvLayer(np.zeros((1, 1, 4)), np.zeros(1), IDENTITY)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            in_ch = int(rng.integers(1, 5))
            out_ch = int(rng.integers(1, 5))
            length = int(rng.integers(1, 20))
            k = int(rng.choice([1, 3, 5, 7]))
            x = rng.standard_normal((in_ch, length))
            w = rng.standard_normal((out_ch, in_ch, k))
            b = rng.standard_normal(out_ch)
            layer = ConvLayer(w, b, IDENTITY)
            assert np.allclose(conv1d_forward(x, layer), naive_conv1d(x, w, b),
                               rtol=0, atol=1e-12)


class TestMaxPool:
    def test_direct_maxima(self):
        out, idx = maxpool1d_forward(np.array([[1.0, 3.0, 2.0, 2.0]]))
        assert np.array_equal(out, [[3.0, 2.0]])
        assert idx[0, 0] == 1 and idx[0, 1] in (2, 3)

    def test_odd_tail_dropped(self):
        out, _ = maxpool1d_forward(np.array([[5.0, 1.0, 4.0]]))
        assert np.array_equal(out, [[5.0]])

    def test_constant_map(self):
        out, _ = maxpool1d_forward(np.full((3, 6), 2.5))
        assert out.shape == (3, 3) and (out == 2.5).all()

    def test_too_short(self):
        with pytest.raises(ValueError):
            maxpool1d_forward(np.ones((1, 1)), pool_size=2)

    def test_matches_window_enumeration(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            ch = int(rng.integers(1, 4))
            length = int(rng.integers(2, 25))
            x = rng.standard_normal((ch, length))
            out, idx = maxpool1d_forward(x)
            for c in range(ch):
                for p in range(length // 2):
                    window = x[c, 2 * p:2 * p + 2]
                    assert out[c, p] == max(window)          # exact, same floats
                    assert x[c, idx[c, p]] == out[c, p]


class TestDense:
    def test_identity(self):
        layer = DenseLayer(np.eye(3), np.zeros(3), IDENTITY)
        x = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(dense_forward(x, layer), x)

    def test_hand_sum(self):
        layer = DenseLayer(np.array([[1.0, 1.0]]), np.array([1.0]), IDENTITY)
        assert np.allclose(dense_forward(np.array([2.0, 3.0]), layer), [6.0])

    def test_sigmoid_at_zero(self):
        layer = DenseLayer(np.zeros((1, 4)), np.zeros(1), SIGMOID)
        assert dense_forward(np.zeros(4), layer)[0] == 0.5

    def test_shape_mismatch(self):
        layer = DenseLayer(np.zeros((2, 3)), np.zeros(2), IDENTITY)
        with pytest.raises(ValueError):
            dense_forward(np.zeros(4), layer)


class TestActivations:
    def test_sigmoid_center(self):
        assert activation_forward(0.0, SIGMOID) == 0.5

    def test_leaky_relu_slope(self):
        assert activation_forward(-10.0, LEAKY_RELU, slope=0.001) == pytest.approx(-0.01)
        assert activation_forward(7.0, LEAKY_RELU) == 7.0

    def test_relu_subgradient_at_zero(self):
        assert activation_grad(0.0, RELU) == 0.0
        assert activation_grad(0.0, LEAKY_RELU, slope=0.001) == 0.001

    def test_sigmoid_grad_matches_finite_difference(self):
        eps = 1e-6
        for x in (-2.0, 0.0, 1.5):
            numeric = (activation_forward(x + eps, SIGMOID)
                       - activation_forward(x - eps, SIGMOID)) / (2 * eps)
            assert activation_grad(x, SIGMOID) == pytest.approx(float(numeric), abs=1e-9)

    def test_relu_nonnegative_leaky_identity_positive(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal(1000)
        assert (activation_forward(x, RELU) >= 0).all()
        pos = x[x > 0]
        assert np.array_equal(activation_forward(pos, LEAKY_RELU), pos)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation_forward(1.0, "softplus")


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.arange(5.0)
        out, mask = dropout_forward(x, 0.0, "train", np.random.default_rng(0))
        assert np.array_equal(out, x) and mask.all()

    def test_infer_identity(self):
        x = np.arange(5.0)
        out, mask = dropout_forward(x, 0.9, "infer")
        assert np.array_equal(out, x) and mask.all()

    def test_zero_fraction_near_rate(self):
        rng = np.random.default_rng(42)
        out, mask = dropout_forward(np.ones(10_000), 0.5, "train", rng)
        dropped = 1.0 - mask.mean()
        assert abs(dropped - 0.5) < 0.05

    def test_inverted_scaling(self):
        rng = np.random.default_rng(7)
        out, mask = dropout_forward(np.ones(1000), 0.25, "train", rng)
        assert np.allclose(out[mask], 1.0 / 0.75)
        assert (out[~mask] == 0).all()

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            dropout_forward(np.ones(3), 1.0, "train", np.random.default_rng(0))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            dropout_forward(np.ones(3), 0.5, "test", np.random.default_rng(0))


class TestDefaultArchitecture:
    def test_default_stack(self):
        cfg = ModelConfig()
        assert cfg.conv_filters == (32, 64, 128)
        assert cfg.dense_units == (128, 256)
        assert cfg.kernel_size == 3
        assert cfg.pool_size == 2
        assert cfg.conv_activations == (RELU, LEAKY_RELU, LEAKY_RELU)
        assert cfg.dense_activations == (LEAKY_RELU, LEAKY_RELU)
        assert cfg.output_activation == SIGMOID
        assert cfg.dropout_rate == 0.5
        assert cfg.leaky_slope == 0.001
        assert cfg.in_channels == 4 and cfg.window_len == 32
        assert cfg.flat_len() == 1024

    def test_layer_shapes(self):
        model = init_model(ModelConfig(), seed=0)
        assert model.conv1.weights.shape == (32, 4, 3)
        assert model.conv2.weights.shape == (64, 32, 3)
        assert model.conv3.weights.shape == (128, 64, 3)
        assert model.dense1.weights.shape == (128, 1024)
        assert model.dense2.weights.shape == (256, 128)
        assert model.output.weights.shape == (1, 256)
        assert model.output.activation == SIGMOID


class TestInitModel:
    def test_deterministic_given_seed(self):
        a = init_model(TINY, seed=5)
        b = init_model(TINY, seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa, pb)

    def test_weights_within_fan_in_bound(self):
        model = init_model(ModelConfig(), seed=9)
        k = model.config.kernel_size
        fan_ins = {
            "conv1": model.config.in_channels * k,
            "conv2": model.config.conv_filters[0] * k,
            "conv3": model.config.conv_filters[1] * k,
            "dense1": model.config.flat_len(),
            "dense2": model.config.dense_units[0],
            "output": model.config.dense_units[1],
        }
        for name, fan_in in fan_ins.items():
            layer = getattr(model, name)
            bound = np.sqrt(6.0 / fan_in)
            assert np.abs(layer.weights).max() <= bound
            assert (layer.bias == 0).all()

    def test_different_seeds_differ(self):
        a = init_model(TINY, seed=1)
        b = init_model(TINY, seed=2)
        assert any(not np.array_equal(pa, pb)
                   for pa, pb in zip(a.parameters(), b.parameters()))

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            init_model(ModelConfig(window_len=3), seed=0)   # collapses under two poolings
        with pytest.raises(ValueError):
            init_model(ModelConfig(kernel_size=2), seed=0)
        with pytest.raises(ValueError):
            init_model(ModelConfig(dropout_rate=1.0), seed=0)


class TestModelForward:
    def test_zero_weights_give_half(self):
        model = init_model(TINY, seed=0)
        for p in model.parameters():
            p[...] = 0.0
        prob, _ = model_forward(np.random.default_rng(0).standard_normal((2, 8)), model)
        assert prob == 0.5

    def test_output_in_open_interval(self):
        model = init_model(TINY, seed=3)
        rng = np.random.default_rng(3)
        for _ in range(20):
            prob, _ = model_forward(rng.standard_normal((2, 8)), model)
            assert 0.0 < prob < 1.0

    def test_default_stack_flatten_length(self):
        # 32 -> 32 -> 16 -> 16 -> 8 under two size-2 poolings; 128 * 8 = 1024
        model = init_model(ModelConfig(), seed=1)
        rng = np.random.default_rng(1)
        _, cache = model_forward(rng.random((4, 32)), model, mode="train", rng=rng)
        assert cache["flat"].shape == (1, 1024)

    def test_shape_mismatch_names_layer(self):
        model = init_model(TINY, seed=0)
        with pytest.raises(ValueError, match="conv1"):
            model_forward(np.ones((3, 8)), model)
        with pytest.raises(ValueError, match="conv1"):
            model_forward(np.ones((2, 9)), model)

    def test_deterministic_forward(self):
        model = init_model(TINY, seed=4)
        x = np.random.default_rng(4).standard_normal((2, 8))
        assert model_forward(x, model)[0] == model_forward(x, model)[0]

    def test_batch_matches_single(self):
        model = init_model(TINY, seed=6)
        rng = np.random.default_rng(6)
        xs = rng.standard_normal((7, 2, 8))
        probs, _ = model_forward_batch(xs, model)
        for i in range(7):
            assert probs[i] == pytest.approx(model_forward(xs[i], model)[0], abs=1e-12)

    def test_train_mode_dropout_needs_rng(self):
        model = init_model(ModelConfig(in_channels=2, window_len=8,
                                       conv_filters=(2, 2, 2), dense_units=(4, 4),
                                       dropout_rate=0.5), seed=0)
        with pytest.raises(ValueError):
            model_forward(np.ones((2, 8)), model, mode="train")


class TestModelBackward:
    def test_zero_delta_gives_zero_gradients(self):
        model = init_model(TINY, seed=8)
        rng = np.random.default_rng(8)
        _, cache = model_forward(rng.standard_normal((2, 8)), model, mode="train")
        grads = model_backward_from_delta(cache, [0.0], model)
        for g in grads:
            assert (g == 0).all()

    def test_gradient_shapes_mirror_parameters(self):
        model = init_model(TINY, seed=8)
        rng = np.random.default_rng(8)
        _, cache = model_forward(rng.standard_normal((2, 8)), model, mode="train")
        grads = model_backward(cache, 1, model)
        params = model.parameters()
        assert len(grads) == len(params)
        for g, p in zip(grads, params):
            assert g.shape == p.shape and np.isfinite(g).all()

    def test_conv_bias_gradient_sums_output_deltas(self):
        # single conv layer followed by linear readout of sum: with an
        # all-ones delta, d(loss)/d(bias_f) must equal the output length
        layer = ConvLayer(np.array([[[0.2, -0.5, 0.3]]]), np.array([0.1]), IDENTITY)
        from ohlc_cnn.nn_core import _conv_batch, _conv_batch_backward
        x = np.random.default_rng(9).standard_normal((1, 1, 6))
        _, cols, z = _conv_batch(x, layer)
        _, dw, db = _conv_batch_backward(np.ones((1, 1, 6)), cols, z, layer)
        assert db[0] == pytest.approx(6.0, abs=1e-12)

    def test_backward_requires_train_cache(self):
        model = init_model(TINY, seed=8)
        _, cache = model_forward(np.ones((2, 8)), model, mode="infer")
        with pytest.raises(ValueError):
            model_backward(cache, 1, model)

    def test_finite_difference_agreement(self):
        # every parameter of the tiny model against central differences
        from ohlc_cnn.trainer import grad_check
        rng = np.random.default_rng(10)
        model = init_model(TINY, seed=10)
        result = grad_check(model, rng.standard_normal((2, 8)), 1, epsilon=1e-5)
        assert result.max_rel_error <= 1e-4, result.worst_param

    def test_mean_gradient_over_batch(self):
        model = init_model(TINY, seed=12)
        rng = np.random.default_rng(12)
        xs = rng.standard_normal((4, 2, 8))
        ys = np.array([0, 1, 1, 0])
        from ohlc_cnn.nn_core import model_backward_batch
        _, cache = model_forward_batch(xs, model, mode="train")
        batch_grads = model_backward_batch(cache, ys, model)
        sums = None
        for i in range(4):
            _, c = model_forward(xs[i], model, mode="train")
            g = model_backward(c, ys[i], model)
            sums = g if sums is None else [a + b for a, b in zip(sums, g)]
        for bg, s in zip(batch_grads, sums):
            assert np.allclose(bg, s / 4.0, rtol=0, atol=1e-12)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = init_model(TINY, seed=21)
        path = tmp_path / "model.npz"
        save_checkpoint(path, model, extras={"adam.t": np.int64(3)},
                        meta={"best_epoch": 2})
        loaded, meta, extras = load_checkpoint(path)
        assert meta == {"best_epoch": 2}
        assert int(extras["adam.t"]) == 3
        assert loaded.config == model.config
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert np.array_equal(a, b)

    def test_repeat_saves_byte_identical(self, tmp_path):
        model = init_model(TINY, seed=22)
        p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
        save_checkpoint(p1, model)
        save_checkpoint(p2, model)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, whatever=np.ones(3))
        with pytest.raises(ValueError):
            load_checkpoint(path)
