import numpy as np
import pytest

from nik.model import (
    FULL_SCALE,
    FourierFeatureEncoder,
    ModelConfig,
    NikModel,
    encode,
    forward,
    forward_batch,
    init_model,
    weight_bounds,
)

SMALL = ModelConfig(depth=3, width=16, n_features=8)


def test_encode_origin():
    enc = FourierFeatureEncoder.create(5, seed=0)
    g = encode(enc, np.zeros(4))
    np.testing.assert_array_equal(g[:5], 1.0)
    np.testing.assert_array_equal(g[5:], 0.0)


def test_encode_hand_example():
    enc = FourierFeatureEncoder(B=np.array([[0.5, 0.0, 0.0, 0.0]]), scale=np.ones(4))
    g = encode(enc, [1.0, 0.0, 0.0, 0.0])
    assert g[0] == pytest.approx(-1.0, abs=1e-15)
    assert g[1] == pytest.approx(0.0, abs=1e-15)


def test_encode_pure_and_bounded():
    enc = FourierFeatureEncoder.create(64, seed=3, scale=(0.3, 5.0, 5.0, 1.0))
    v = np.random.default_rng(0).uniform(-1, 1, (500, 4))
    a, b = encode(enc, v), encode(enc, v.copy())
    assert a.tobytes() == b.tobytes()
    assert a.shape == (500, 128)
    assert np.abs(a).max() <= 1.0


def test_per_axis_scale_multiplies_columns():
    enc1 = FourierFeatureEncoder.create(4, seed=1, scale=1.0)
    enc2 = FourierFeatureEncoder.create(4, seed=1, scale=(2.0, 1.0, 1.0, 1.0))
    v = np.array([0.1, 0.2, -0.3, 0.4])
    np.testing.assert_allclose(encode(enc2, v), encode(enc1, v * [2, 1, 1, 1]), atol=1e-15)


def test_init_deterministic_and_seeded():
    a, b, c = init_model(4, SMALL), init_model(4, SMALL), init_model(5, SMALL)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()
    assert any(p.tobytes() != q.tobytes() for p, q in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("cfg", [SMALL, ModelConfig(depth=5, width=32, n_features=16, omega_hidden=30.0)])
def test_init_within_bounds(cfg):
    m = init_model(0, cfg)
    for W, b, bound in zip(m.weights, m.biases, weight_bounds(cfg)):
        assert np.abs(W).max() <= bound
        np.testing.assert_array_equal(b, 0.0)
    assert weight_bounds(cfg)[0] == 1.0 / (2 * cfg.n_features)


def test_layer_shapes():
    m = init_model(0, SMALL)
    assert [W.shape for W in m.weights] == [(16, 16), (16, 16), (2, 16)]
    assert m.n_parameters() == 16 * 16 + 16 + 16 * 16 + 16 + 2 * 16 + 2


def test_full_scale_depth_counts_weight_layers():
    assert FULL_SCALE.depth == 8 and FULL_SCALE.width == 512
    assert len(init_model(0, ModelConfig(depth=8, width=8, n_features=4)).weights) == 8


def test_zero_network_outputs_zero():
    m = init_model(0, SMALL)
    zero = m.with_parameters([np.zeros_like(p) for p in m.parameters()])
    v = np.random.default_rng(1).uniform(-1, 1, (50, 4))
    np.testing.assert_array_equal(forward_batch(zero, v), 0.0)


def test_depth_one_selects_features():
    cfg = ModelConfig(depth=1, n_features=3)
    m = init_model(0, cfg)
    W = np.zeros((2, 6))
    W[0, 1] = 1.0  # cos of feature 1
    W[1, 4] = 1.0  # sin of feature 1
    m = m.with_parameters([W, np.zeros(2)])
    v = np.array([0.2, -0.4, 0.1, 0.0])
    g = encode(m.encoder, v)
    assert forward(m, v) == pytest.approx(g[1] + 1j * g[4], abs=1e-15)


def test_forward_pure():
    m = init_model(2, SMALL)
    v = np.array([0.1, 0.5, -0.5, 1.0])
    assert forward(m, v) == forward(m, v)


def test_batched_forward_matches_pointwise_bitwise():
    m = init_model(2, ModelConfig(depth=4, width=32, n_features=16))
    v = np.random.default_rng(3).uniform(-1, 1, (64, 4))
    batch = forward_batch(m, v)
    single = np.array([forward(m, row) for row in v])
    assert batch.tobytes() == single.tobytes()


def test_no_non_finite_outputs_over_sweep():
    m = init_model(7, ModelConfig(depth=5, width=64, n_features=32, feature_scale=(1.0, 6.0, 6.0, 1.0)))
    v = np.random.default_rng(4).uniform(-1, 1, (10_000, 4))
    assert np.isfinite(forward_batch(m, v)).all()


def test_output_scale_multiplies_prediction():
    base = init_model(1, SMALL)
    scaled = NikModel(ModelConfig(depth=3, width=16, n_features=8, output_scale=50.0), base.encoder, base.weights, base.biases)
    v = np.random.default_rng(5).uniform(-1, 1, (10, 4))
    np.testing.assert_allclose(forward_batch(scaled, v), 50.0 * forward_batch(base, v), rtol=1e-13)


def test_float32_precision():
    m = init_model(0, ModelConfig(depth=3, width=16, n_features=8, precision="float32"))
    assert all(p.dtype == np.float32 for p in m.parameters())
    assert forward_batch(m, np.zeros((3, 4))).dtype == np.complex64


@pytest.mark.parametrize(
    "kwargs",
    [dict(depth=0), dict(width=0), dict(n_features=0), dict(feature_scale=(1.0, -1.0, 1.0, 1.0)), dict(precision="float16"), dict(output_scale=0.0)],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


@pytest.mark.parametrize("n", [1, 2, 63, 64, 65, 300])
def test_rows_independent_of_batch_size(n):
    m = init_model(6, ModelConfig(depth=4, width=32, n_features=16))
    v = np.random.default_rng(n).uniform(-1, 1, (n, 4))
    full = forward_batch(m, v)
    parts = np.concatenate([forward_batch(m, v[i : i + 5]) for i in range(0, n, 5)])
    assert full.tobytes() == parts.tobytes()
