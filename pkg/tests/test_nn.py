import copy

import numpy as np
import pytest

from crossbar_sim.config import MappingParams, TileConfig
from crossbar_sim.data import batches, synthetic_blobs
from crossbar_sim.hwa import ClipRemapParams, InputRangeParams, ModifierParams
from crossbar_sim.inference import NoiseModelParams
from crossbar_sim.mvm import IOParams
from crossbar_sim.nn import AnalogLinear, AnalogMLP, activation, activation_grad, analog_sgd_step, cross_entropy
from crossbar_sim.numerics import RandomStream


def perfect_cfg(mode="inference", **kw):
    cfg = TileConfig(mode=mode, forward=IOParams.perfect(), backward=IOParams.perfect(), **kw)
    return cfg


def layer(i, o, cfg=None, dtype=np.float64):
    return AnalogLinear(i, o, cfg or perfect_cfg(), RandomStream(0), dtype)


def fp_forward(weights, biases, acts, x):
    a = x.astype(np.float64)
    for w, b, act in zip(weights, biases, acts):
        z = a @ w.T + b
        a = z if act in ("softmax", "identity") else activation(act, z)
    return a


# ------------------------------------------------------------------ mapping

def test_omega_mapping():
    lay = layer(3, 2)
    w = np.array([[0.5, -0.25, 0.1], [0.2, 0.0, -0.4]])
    lay.set_weights(w, omega=1.0)
    assert np.abs(lay.analog_weights).max() == pytest.approx(1.0)
    np.testing.assert_allclose(lay.out_scales, 0.5)


def test_omega_zero_identity_mapping():
    lay = layer(3, 2)
    w = np.array([[0.5, -0.25, 0.1], [0.2, 0.0, -0.4]])
    lay.set_weights(w, omega=0.0)
    np.testing.assert_allclose(lay.analog_weights, w)
    np.testing.assert_allclose(lay.out_scales, 1.0)


def test_omega_zero_out_of_range():
    with pytest.raises(ValueError):
        layer(2, 2).set_weights(np.array([[2.0, 0], [0, 0]]), omega=0.0)


def test_columnwise_mapping():
    cfg = perfect_cfg(mapping=MappingParams(weight_scaling_columnwise=True))
    lay = layer(2, 2, cfg)
    lay.set_weights(np.array([[0.5, 0.1], [0.2, -0.05]]), omega=1.0)
    np.testing.assert_allclose(np.abs(lay.analog_weights).max(axis=1), 1.0)
    np.testing.assert_allclose(lay.out_scales, [0.5, 0.2])


@pytest.mark.parametrize("omega", [0.3, 1.0])
def test_weights_round_trip(omega):
    lay = layer(7, 5)
    w = np.random.default_rng(0).normal(size=(5, 7))
    b = np.arange(5.0)
    lay.set_weights(w, b, omega=omega)
    w2, b2 = lay.get_weights()
    np.testing.assert_allclose(w2, w, atol=1e-6)
    np.testing.assert_array_equal(b2, b)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        layer(3, 2).set_weights(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        layer(3, 2).forward(np.zeros((1, 4)))


# --------------------------------------------------------------- splitting

def test_split_widths_and_equivalence():
    cfg = perfect_cfg(mapping=MappingParams(max_in_size=512))
    lay = layer(1000, 4, cfg)
    assert [t.shape[1] for t in lay.tiles] == [512, 488]
    rng = np.random.default_rng(0)
    w, b = rng.uniform(-1, 1, (4, 1000)) * 0.05, rng.normal(size=4)
    lay.set_weights(w, b)
    x = rng.uniform(-1, 1, (3, 1000))
    np.testing.assert_allclose(lay.forward(x), x @ w.T + b, atol=1e-6)


@pytest.mark.parametrize("max_in,max_out", [(1, 0), (3, 2), (5, 1), (100, 100)])
def test_split_semantics_preserving(max_in, max_out):
    cfg = perfect_cfg(mapping=MappingParams(max_in_size=max_in, max_out_size=max_out))
    rng = np.random.default_rng(1)
    w, b = rng.normal(size=(4, 7)), rng.normal(size=4)
    lay = layer(7, 4, cfg)
    lay.set_weights(w, b)
    x = rng.normal(size=(6, 7))
    np.testing.assert_allclose(lay.forward(x), x @ w.T + b, atol=1e-6)
    g = rng.normal(size=(6, 4))
    np.testing.assert_allclose(lay.backward(g), g @ w, atol=1e-6)


# ----------------------------------------------------------- forward/backward

def mlp(widths=(6, 4, 3), acts=("sigmoid", "softmax"), cfg=None, seed=0):
    return AnalogMLP(list(widths), list(acts), cfg or perfect_cfg(), RandomStream(seed), np.float64)


def test_perfect_mlp_matches_fp_reference():
    m = mlp((12, 8, 6, 3), ("relu", "tanh", "softmax"))
    ws, bs = zip(*(lay.get_weights() for lay in m.layers))
    x = np.random.default_rng(0).normal(size=(20, 12))
    np.testing.assert_allclose(m.forward(x), fp_forward(ws, bs, m.activations, x), atol=1e-5)


def test_training_mode_perfect_backward_is_transpose():
    cfg = perfect_cfg("training")
    lay = layer(5, 3, cfg)
    w = np.random.default_rng(0).uniform(-0.3, 0.3, (3, 5))
    lay.set_weights(w, omega=0.0)
    lay.forward(np.ones((2, 5)))
    g = np.random.default_rng(1).normal(size=(2, 3))
    np.testing.assert_allclose(lay.backward(g), g @ lay.get_weights()[0], atol=1e-6)


def test_inference_mode_backward_is_exact():
    cfg = perfect_cfg()
    cfg.backward = IOParams(out_noise=5.0, out_bound=0.01)
    lay = layer(5, 3, cfg)
    w = np.random.default_rng(0).uniform(-1, 1, (3, 5))
    lay.set_weights(w)
    lay.forward(np.ones((2, 5)))
    g = np.random.default_rng(1).normal(size=(2, 3))
    np.testing.assert_allclose(lay.backward(g), g @ w, atol=1e-9)


def test_backward_needs_forward():
    with pytest.raises(RuntimeError):
        layer(2, 2).backward(np.zeros((1, 2)))


def test_finite_difference_gradients():
    cfg = perfect_cfg("digital")
    m = mlp((6, 4, 3), ("sigmoid", "softmax"), cfg)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(5, 6)), rng.integers(0, 3, 5)

    def loss():
        return cross_entropy(m.forward(x), y)[0]

    _, g = cross_entropy(m.forward(x), y)
    m.backward(g)
    for lay in m.layers:
        tile = lay.tiles[0]
        analytic = tile._d.T @ tile._x_in
        w0 = tile.weights.copy()
        num = np.zeros_like(w0)
        for idx in np.ndindex(w0.shape):
            for sgn in (1, -1):
                w = w0.copy()
                w[idx] += sgn * 1e-5
                tile.set_weights(w)
                num[idx] += sgn * loss() / 2e-5
        tile.set_weights(w0)
        assert np.linalg.norm(analytic - num) / np.linalg.norm(num) <= 1e-3
    # input gradient too
    num_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-5
        xm[idx] -= 1e-5
        num_x[idx] = (cross_entropy(m.forward(xp), y)[0] - cross_entropy(m.forward(xm), y)[0]) / 2e-5
    m.forward(x)
    m.backward(g)
    assert np.linalg.norm(m._grad_input - num_x) / np.linalg.norm(num_x) <= 1e-3


@pytest.mark.parametrize("name", ["relu", "sigmoid", "tanh", "identity"])
def test_activation_derivatives(name):
    z = np.linspace(-3, 3, 61) + 0.013
    a = activation(name, z)
    num = (activation(name, z + 1e-4) - activation(name, z - 1e-4)) / 2e-4
    np.testing.assert_allclose(activation_grad(name, z, a), num, atol=1e-6)


def test_activations_match_reference():
    z = np.linspace(-5, 5, 41)
    np.testing.assert_allclose(activation("sigmoid", z), 1 / (1 + np.exp(-z)), atol=1e-6)
    np.testing.assert_allclose(activation("tanh", z), np.tanh(z), atol=1e-6)
    s = activation("softmax", np.stack([z, -z]))
    np.testing.assert_allclose(s.sum(axis=1), 1.0)
    np.testing.assert_allclose(s[0], np.exp(z) / np.exp(z).sum(), atol=1e-6)


def test_cross_entropy_reference():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    y = np.array([1, 2])
    loss, grad = cross_entropy(logits, y)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert loss == pytest.approx(-np.mean(np.log(p[[0, 1], y])), abs=1e-9)
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += 1e-5
        lm[idx] -= 1e-5
        num[idx] = (cross_entropy(lp, y)[0] - cross_entropy(lm, y)[0]) / 2e-5
    np.testing.assert_allclose(grad, num, atol=1e-6)


def test_bad_activations():
    with pytest.raises(ValueError):
        mlp((3, 2), ("bogus",))
    with pytest.raises(ValueError):
        mlp((3, 2, 2), ("relu",))


# ------------------------------------------------------------------ updates

@pytest.mark.parametrize("mode", ["inference", "training", "digital"])
def test_zero_gradient_no_change(mode):
    m = mlp((4, 3, 2), ("relu", "softmax"), perfect_cfg(mode))
    before = [lay.get_weights()[0].copy() for lay in m.layers]
    m.forward(np.ones((2, 4)))
    m.backward(np.zeros((2, 2)))
    analog_sgd_step(m, 0.1)
    for lay, w in zip(m.layers, before):
        np.testing.assert_allclose(lay.get_weights()[0], w, atol=1e-12)


def test_hwa_clip_after_step():
    cfg = perfect_cfg(clip=ClipRemapParams(clip_type="FIXED_VALUE", fixed_value=1.0))
    m = mlp((4, 3, 2), ("relu", "softmax"), cfg)
    rng = np.random.default_rng(0)
    for _ in range(5):
        m.train_step(rng.normal(size=(8, 4)) * 10, rng.integers(0, 2, 8), 5.0)
        for lay in m.layers:
            assert np.abs(lay.analog_weights).max() <= 1.0


def test_modifier_only_while_training():
    cfg = perfect_cfg(modifier=ModifierParams(type="ADD_NORMAL", std_dev=0.5))
    m = mlp((4, 3, 2), ("relu", "softmax"), cfg)
    x = np.ones((2, 4))
    m.eval()
    np.testing.assert_array_equal(m.forward(x), m.forward(x))
    m.train()
    assert not np.array_equal(m.forward(x), m.forward(x))
    cfg2 = copy.deepcopy(cfg)
    cfg2.modifier.enable_during_test = True
    m2 = mlp((4, 3, 2), ("relu", "softmax"), cfg2).eval()
    assert not np.array_equal(m2.forward(x), m2.forward(x))


def blob_data(seed=0):
    return synthetic_blobs(400, 8, 2, 0.3, RandomStream(seed, "blobs"))


def train_blobs(cfg, epochs=50, lr=0.1):
    data = blob_data()
    m = mlp((8, 8, 4, 2), ("sigmoid", "sigmoid", "softmax"), cfg)
    stream = RandomStream(0, "shuffle")
    for _ in range(epochs):
        for idx in batches(len(data.x_train), 10, stream):
            m.train_step(data.x_train[idx], data.y_train[idx], lr)
    return m, data


def test_fp_blobs_converge():
    m, data = train_blobs(perfect_cfg("digital"))
    assert m.accuracy(data.x_train, data.y_train) >= 0.99


def test_input_range_learning_limits_clipping(mnist_dir):
    from crossbar_sim.data import load_idx_dataset

    d = load_idx_dataset(mnist_dir)
    cfg = TileConfig(mode="inference", input_range=InputRangeParams(
        enabled=True, init_from_data=10, decay=0.001, input_min_percentage=0.95))
    m = AnalogMLP([784, 128, 64, 10], ["relu", "relu", "softmax"], cfg, RandomStream(1))
    stream = RandomStream(1, "shuffle")
    for _ in range(3):
        for idx in batches(len(d.x_train), 10, stream):
            m.train_step(d.x_train[idx], d.y_train[idx], 0.1)
    m.eval()
    fractions = [float(np.mean(np.abs(a) >= r)) for a, r in zip(m.tile_inputs(d.x_test), m.input_ranges())]
    assert max(fractions) <= 0.05
    assert m.accuracy(d.x_test, d.y_test) > 0.9


def test_common_drift_compensation_keeps_predictions():
    nm = NoiseModelParams(kind="Custom", prog_coeffs=[0.0], nu_mean=0.05, nu_std=0.0, read_noise_scale=0.0)
    cfg = TileConfig(mode="inference", forward=IOParams.perfect(), noise_model=nm, drift_compensation=True)
    m = AnalogMLP([784, 128, 64, 10], ["relu", "relu", "softmax"], cfg, RandomStream(0), np.float32).eval()
    x = RandomStream(1).uniform((500, 784), 0, 1).astype(np.float32)
    ref = np.argmax(m.forward(x), axis=1)
    m.program_analog_weights(RandomStream(2))
    m.drift_analog_weights(3.15e7, RandomStream(3))
    same = np.mean(np.argmax(m.forward(x), axis=1) == ref)
    assert same >= 0.99


def test_state_dict_round_trip():
    m = mlp((5, 4, 3), ("relu", "softmax"))
    m2 = mlp((5, 4, 3), ("relu", "softmax"), seed=9)
    m2.load_state_dict(m.state_dict())
    x = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_allclose(m2.forward(x), m.forward(x), atol=1e-12)
    with pytest.raises(ValueError):
        mlp((5, 2, 3), ("relu", "softmax")).load_state_dict(m.state_dict())
