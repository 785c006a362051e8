import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from crossbar_sim.devices import DeviceArray, DeviceKind, DeviceParams
from crossbar_sim.numerics import RandomStream
from crossbar_sim.update import (
    PulseType, UpdateParams, coincidence_counts, pulse_probabilities, pulsed_outer_update,
)

DW = 0.001


def const_array(rows, cols, dw_min=DW, seed=0):
    p = DeviceParams(kind=DeviceKind.ConstantStep, dw_min=dw_min, dw_min_std=0.0, dw_min_dtod=0.0, w_max=10, w_min=-10)
    return DeviceArray(p, rows, cols, RandomStream(seed))


def test_zero_inputs_no_pulses():
    arr = const_array(3, 4)
    for x, d in ((np.zeros(4), np.ones(3)), (np.ones(4), np.zeros(3))):
        counts = pulsed_outer_update(arr, x, d, 0.1, UpdateParams(), RandomStream(0))
        assert not counts.any()
    assert not arr.weights.any()


def test_single_crosspoint_half_step():
    # lr * |x d| = 0.5 dw_min: half a pulse on average
    arr = const_array(1, 1)
    s = RandomStream(1)
    dw = np.empty(10_000)
    for t in range(dw.size):
        arr.set_weights(np.zeros((1, 1)))
        pulsed_outer_update(arr, np.array([1.0]), np.array([-1.0]), 0.5 * DW, UpdateParams(desired_bl=10), s)
        dw[t] = arr.weights[0, 0]
    assert dw.mean() == pytest.approx(0.5 * DW, rel=0.05)


def test_unbiased_8x8():
    rng = np.random.default_rng(0)
    x, d = rng.uniform(-1, 1, 8), rng.uniform(-1, 1, 8)
    lr = 2 * DW
    target = -lr * np.outer(d, x)
    trials = 10_000
    s = RandomStream(2)
    draws = np.empty((trials, 8, 8))
    sign = np.sign(-np.outer(d, x))
    for t in range(trials):
        draws[t] = coincidence_counts(x, d, lr, DW, UpdateParams(), s) * sign * DW
    mean, se = draws.mean(axis=0), draws.std(axis=0) / np.sqrt(trials)
    # 5% relative where the entry needs at least one pulse on average; below
    # that 10^4 trials cannot resolve 5%, so use a 4 sigma bound instead
    big = np.abs(target) >= DW
    small = (np.abs(target) > 0.1 * DW) & ~big
    np.testing.assert_allclose(mean[big], target[big], rtol=0.05)
    assert np.all(np.abs(mean[small] - target[small]) < 4 * se[small])
    # the array applies the same counts
    arr = const_array(8, 8)
    counts = pulsed_outer_update(arr, x, d, lr, UpdateParams(), RandomStream(3))
    np.testing.assert_allclose(arr.weights, counts * sign * DW, atol=1e-9)


def test_unbiased_clt_bound():
    x, d = np.array([0.3, -0.8]), np.array([0.6])
    lr = 3 * DW
    s = RandomStream(4)
    draws = np.array([coincidence_counts(x, d, lr, DW, UpdateParams(), s)[0] for _ in range(5000)], float)
    expect = lr * np.abs(np.outer(d, x))[0] / DW
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - expect) < 3 * se + 1e-12)


def test_saturation_probabilities_one():
    up = UpdateParams(desired_bl=5, update_bl_management=False)
    px, pd, bl = pulse_probabilities(np.array([1.0]), np.array([1.0]), 5 * DW, DW, up)
    assert bl == 5 and px[0] == pytest.approx(1.0) and pd[0] == pytest.approx(1.0)


@given(hnp.arrays(np.float64, 5, elements=st.floats(-3, 3)), hnp.arrays(np.float64, 4, elements=st.floats(-3, 3)),
       st.floats(1e-4, 1.0))
def test_update_saturates_at_bl(x, d, lr):
    up = UpdateParams(desired_bl=7)
    counts = coincidence_counts(x, d, lr, DW, up, RandomStream(0))
    assert counts.max(initial=0) <= 7


def test_update_management_preserves_product():
    rng = np.random.default_rng(1)
    x, d = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 5)
    px, pd, _ = pulse_probabilities(x, d, 0.01, DW, UpdateParams(update_bl_management=False))
    px2, pd2, _ = pulse_probabilities(10 * x, 0.1 * d, 0.01, DW, UpdateParams(update_bl_management=False))
    np.testing.assert_allclose(np.outer(pd, px), np.outer(pd2, px2), rtol=1e-12)


def test_update_management_balances():
    x, d = np.array([10.0]), np.array([0.001])
    px, pd, _ = pulse_probabilities(x, d, 0.01, DW, UpdateParams(update_bl_management=False))
    assert px[0] == pytest.approx(pd[0])


def test_bl_management_shortens_train():
    _, _, bl = pulse_probabilities(np.array([1.0]), np.array([1.0]), 2.5 * DW, DW, UpdateParams(desired_bl=31))
    assert bl == 3
    _, _, bl = pulse_probabilities(np.array([1.0]), np.array([1.0]), 100 * DW, DW, UpdateParams(desired_bl=31))
    assert bl == 31


def test_bl4_exhaustive_enumeration():
    x, d = np.array([0.4, -0.9, 0.15]), np.array([0.7, -0.2])
    lr = 1.7 * DW
    up = UpdateParams(desired_bl=4, update_bl_management=False)
    px, pd, bl = pulse_probabilities(x, d, lr, DW, up)
    assert bl == 4
    expect = np.zeros((2, 3))
    for i, j in itertools.product(range(2), range(3)):
        for xs in itertools.product((0, 1), repeat=4):
            for ds in itertools.product((0, 1), repeat=4):
                prob = np.prod([px[j] if b else 1 - px[j] for b in xs]) * np.prod([pd[i] if b else 1 - pd[i] for b in ds])
                expect[i, j] += prob * sum(a * b for a, b in zip(xs, ds))
    np.testing.assert_allclose(expect, 4 * np.outer(pd, px), rtol=1e-12)
    np.testing.assert_allclose(expect * DW, lr * np.abs(np.outer(d, x)), rtol=1e-12)


def test_same_stream_same_pattern():
    x, d = np.linspace(-1, 1, 7), np.linspace(-0.5, 0.5, 3)
    a = coincidence_counts(x, d, 0.005, DW, UpdateParams(), RandomStream(7))
    b = coincidence_counts(x, d, 0.005, DW, UpdateParams(), RandomStream(7))
    np.testing.assert_array_equal(a, b)


def test_deterministic_implicit_rounds_half_up():
    up = UpdateParams(pulse_type=PulseType.DeterministicImplicit, desired_bl=10)
    counts = coincidence_counts(np.array([1.0, 2.0, -1.5]), np.array([1.0]), 1.5 * DW, DW, up, RandomStream(0))
    np.testing.assert_array_equal(counts, [[2, 3, 2]])


def test_deterministic_implicit_clips_at_bl():
    up = UpdateParams(pulse_type=PulseType.DeterministicImplicit, desired_bl=4)
    counts = coincidence_counts(np.array([100.0]), np.array([1.0]), DW, DW, up, RandomStream(0))
    assert counts[0, 0] == 4


def test_directions():
    arr = const_array(2, 2)
    up = UpdateParams(pulse_type=PulseType.DeterministicImplicit)
    pulsed_outer_update(arr, np.array([1.0, -1.0]), np.array([1.0, -1.0]), DW, up, RandomStream(0))
    np.testing.assert_allclose(arr.weights, [[-DW, DW], [DW, -DW]], atol=1e-9)


def test_errors():
    with pytest.raises(ValueError):
        UpdateParams(desired_bl=0)
    with pytest.raises(ValueError):
        UpdateParams(x_res_implicit=-1)
    with pytest.raises(ValueError):
        pulse_probabilities(np.ones(2), np.ones(2), 0.1, 0.0, UpdateParams())
    with pytest.raises(ValueError):
        pulsed_outer_update(const_array(2, 3), np.ones(2), np.ones(2), 0.1, UpdateParams(), RandomStream(0))
    with pytest.raises(ValueError):
        pulsed_outer_update(const_array(2, 2), np.ones(2), np.ones(2), -0.1, UpdateParams(), RandomStream(0))
