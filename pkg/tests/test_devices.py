import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossbar_sim.devices import (
    DeviceArray, DeviceKind, DeviceParams, pulse_update, simulate_response, standard_protocol, step_shape,
)
from crossbar_sim.numerics import RandomStream

ALL_KINDS = [k for k in DeviceKind]


def noiseless(kind=DeviceKind.SoftBounds, **kw):
    base = dict(kind=kind, dw_min=0.1, dw_min_std=0.0, dw_min_dtod=0.0)
    base.update(kw)
    return DeviceParams(**base)


def single(params, w=0.0, seed=0):
    arr = DeviceArray(params, 1, 1, RandomStream(seed))
    arr.set_weights(np.array([[w]]))
    return arr


def test_softbounds_step_at_zero():
    assert pulse_update(single(noiseless()), 0, 0, 1, RandomStream(0)) == pytest.approx(0.1)


def test_softbounds_fixed_point_at_bound():
    arr = single(noiseless(), w=1.0)
    assert pulse_update(arr, 0, 0, 1, RandomStream(0)) == pytest.approx(1.0)


def test_softbounds_geometric_recursion():
    arr = single(noiseless())
    s = RandomStream(0)
    for _ in range(50):
        w = pulse_update(arr, 0, 0, 1, s)
    assert w == pytest.approx(1 - 0.9**50, abs=1e-6)
    assert 1 - 0.9**50 == pytest.approx(0.99485, abs=1e-5)


def test_constant_step_saturates():
    p = noiseless(DeviceKind.ConstantStep, dw_min=0.01)
    trace = simulate_response(p, np.ones(210, int), RandomStream(0), w0=-1.0)[:, 0]
    assert trace[198] < 1.0
    assert trace[199] == pytest.approx(1.0, abs=1e-5)
    assert np.all(trace[200:] == 1.0)


def test_linear_step_law():
    p = noiseless(DeviceKind.LinearStep, gamma=0.5)
    arr = single(p, w=0.4)
    assert pulse_update(arr, 0, 0, 1, RandomStream(0)) == pytest.approx(0.4 + 0.1 * (1 - 0.5 * 0.4), abs=1e-6)
    arr = single(p, w=0.4)
    assert pulse_update(arr, 0, 0, -1, RandomStream(0)) == pytest.approx(0.4 - 0.1 * (1 + 0.5 * 0.4), abs=1e-6)


def test_pow_step_law():
    p = noiseless(DeviceKind.PowStep, gamma=2.0)
    arr = single(p, w=0.5)
    assert pulse_update(arr, 0, 0, 1, RandomStream(0)) == pytest.approx(0.5 + 0.1 * 0.25, abs=1e-6)


def test_exp_step_law():
    p = noiseless(DeviceKind.ExpStep, c0=0.2, c1=2.0)
    arr = single(p, w=0.3)
    f = (1 - 0.2 * np.exp(2.0 * 0.3)) / 0.8
    assert pulse_update(arr, 0, 0, 1, RandomStream(0)) == pytest.approx(0.3 + 0.1 * f, abs=1e-6)


def test_piecewise_interpolates_nodes():
    p = noiseless(DeviceKind.PiecewiseStep, nodes=[2.0, 1.0, 0.0])
    # nodes at w=-1, 0, 1: shape 1 at zero, 0.5 at w=0.5
    assert float(step_shape(p, 0.5, True, 1.0, -1.0)) == pytest.approx(0.5)
    assert float(step_shape(p, -0.5, True, 1.0, -1.0)) == pytest.approx(1.5)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_expected_step_at_zero_is_dw_min(kind):
    p = noiseless(kind, dw_min=0.01, nodes=[0.5, 1.0, 0.5])
    arr = single(p)
    assert float(arr.expected_step(np.zeros(1), True)[0]) == pytest.approx(0.01, abs=1e-6)


@pytest.mark.parametrize("kind", ALL_KINDS)
@settings(max_examples=20)
@given(seed=st.integers(0, 10_000))
def test_weights_stay_in_realized_bounds(kind, seed):
    p = DeviceParams(kind=kind, dw_min=0.2, dw_min_std=1.0, dw_min_dtod=0.3, w_max_std=0.2, w_min_std=0.2,
                     up_down=0.1, nodes=[0.5, 1.0, 0.5])
    s = RandomStream(seed)
    arr = DeviceArray(p, 3, 4, s)
    dirs = s.uniform((60, 12)) < 0.5
    for d in dirs:
        arr.apply_pulses(np.arange(12), d, s)
        assert np.all(arr.w <= arr.b_max) and np.all(arr.w >= arr.b_min)


def test_number_of_states():
    assert DeviceParams(dw_min=0.001).n_states == pytest.approx(2000)


def test_no_dtod_identical_devices():
    arr = DeviceArray(DeviceParams(dw_min_dtod=0.0), 10, 10, RandomStream(0))
    assert np.all(arr.dw_up == arr.dw_up[0, 0])
    assert np.all(arr.b_max == 1.0)


def test_dtod_spread():
    arr = DeviceArray(DeviceParams(dw_min=0.01, dw_min_dtod=0.1), 100, 100, RandomStream(3))
    rel = arr.dw_up / 0.01
    assert rel.std() == pytest.approx(0.1, rel=0.05)
    assert rel.mean() == pytest.approx(1.0, abs=0.005)


def test_negative_draws_floored():
    arr = DeviceArray(DeviceParams(dw_min=0.01, dw_min_dtod=2.0), 50, 50, RandomStream(1))
    assert arr.dw_up.min() >= 0.01 * 0.01 * (1 - 1e-6)


def test_cycle_to_cycle_spread():
    p = DeviceParams(kind=DeviceKind.ConstantStep, dw_min=0.001, dw_min_std=0.3, dw_min_dtod=0.0)
    arr = DeviceArray(p, 1, 20_000, RandomStream(2))
    arr.apply_pulses(np.arange(20_000), np.ones(20_000, bool), RandomStream(5))
    steps = arr.weights[0] / 0.001
    assert steps.std() == pytest.approx(0.3, rel=0.03)


def test_up_down_asymmetry():
    arr = single(noiseless(DeviceKind.ConstantStep, up_down=0.2))
    s = RandomStream(0)
    assert pulse_update(arr, 0, 0, 1, s) == pytest.approx(0.12)
    assert pulse_update(arr, 0, 0, -1, s) == pytest.approx(0.04)


def test_invalid_params():
    with pytest.raises(ValueError):
        DeviceParams(w_min=0.1)
    with pytest.raises(ValueError):
        DeviceParams(dw_min=0)
    with pytest.raises(ValueError):
        DeviceParams(up_down=1.0)
    with pytest.raises(ValueError):
        DeviceParams(kind=DeviceKind.ExpStep, c0=1.0)
    with pytest.raises(ValueError):
        DeviceParams(dw_min_std=-0.1)
    with pytest.raises(ValueError):
        pulse_update(single(noiseless()), 0, 0, 0, RandomStream(0))


def test_protocol_shape():
    p = standard_protocol()
    assert len(p) == 600
    assert np.all(p[:200] == 1) and np.all(p[200:400] == -1)
    np.testing.assert_array_equal(p[400:404], [1, -1, 1, -1])


def test_noiseless_up_phase_monotone():
    trace = simulate_response(noiseless(dw_min=0.01), standard_protocol(), RandomStream(0), w0=-0.5)[:, 0]
    assert np.all(np.diff(trace[:200]) > 0)
    assert np.all(np.diff(trace[200:400]) < 0)


def paired_fixed_point(up_step, down_step, b_max, b_min, w=0.0):
    """Iterate the noiseless up-then-down map until it stops moving."""
    for _ in range(100_000):
        w_up = min(w + up_step * (1 - w / b_max), b_max)
        w_new = max(w_up - down_step * (1 - w_up / b_min), b_min)
        if abs(w_new - w) < 1e-13:
            break
        w = w_new
    return w


def test_reference_tail_converges_to_symmetry_point():
    p = noiseless(DeviceKind.SoftBoundsReference, dw_min=0.02, up_down=0.3, reference=0.1)
    trace = simulate_response(p, standard_protocol(200, 200, 300), RandomStream(0))[:, 0]
    fp = paired_fixed_point(0.02 * 1.3, 0.02 * 0.7, 1.0, -1.0)
    # even-index tail entries are after the down pulse; read weight is state minus reference
    assert trace[-1] == pytest.approx(fp - 0.1, abs=1e-4)
    dist = np.abs(trace[401::2] - (fp - 0.1))
    assert dist[-1] < dist[0]


def test_symmetry_point_bisection():
    p = noiseless(dw_min=0.01, up_down=0.3)
    arr = DeviceArray(p, 2, 2, RandomStream(0))
    # (1+u)(1-w) = (1-u)(1+w)  ->  w = u
    np.testing.assert_allclose(arr.symmetry_point(), 0.3, atol=1e-6)


def test_zero_shift_reads_zero_at_symmetry_point():
    p = DeviceParams(kind=DeviceKind.SoftBoundsReference, dw_min=0.01, dw_min_std=0.0, dw_min_dtod=0.2,
                     up_down=0.2, up_down_dtod=0.1)
    arr = DeviceArray(p, 4, 4, RandomStream(1))
    arr.set_reference_to_symmetry_point()
    arr.w = arr.symmetry_point().astype(arr.w.dtype)
    np.testing.assert_allclose(arr.weights, 0.0, atol=1e-6)
