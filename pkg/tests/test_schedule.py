import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from memstab.schedule import NoiseSchedule, make_linear_schedule, select_inference_timesteps


def test_single_step():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert s.alpha_bar.tolist() == [0.5]


@given(st.integers(1, 300), st.floats(1e-5, 0.3), st.floats(0, 0.3))
def test_monotone_and_in_range(n, b0, gap):
    s = make_linear_schedule(n, b0, min(b0 + gap, 0.99))
    assert np.all(s.alpha_bar > 0) and np.all(s.alpha_bar <= 1)
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_cumprod_matches_extended_precision():
    mpmath.mp.dps = 50
    s = make_linear_schedule(1000, 1e-4, 2e-2)
    acc = mpmath.mpf(1)
    ref = []
    for k in range(1000):
        # same linspace points, formed exactly then rounded once
        beta = mpmath.mpf(1e-4) + (mpmath.mpf(2e-2) - mpmath.mpf(1e-4)) * k / 999
        acc *= 1 - beta
        ref.append(float(acc))
    np.testing.assert_allclose(s.alpha_bar, ref, rtol=1e-13, atol=0)


@pytest.mark.parametrize("b0,b1", [(0, 0.1), (0.2, 0.1), (0.1, 1.0), (-0.1, 0.1)])
def test_bad_beta_range(b0, b1):
    with pytest.raises(ValueError):
        make_linear_schedule(10, b0, b1)


def test_stride_20_enumeration():
    s = select_inference_timesteps(make_linear_schedule(), 50)
    expected = [980 - 20 * k for k in range(50)]
    assert s.inference_timesteps.tolist() == expected
    assert s.T == 50


def test_full_and_single_selection():
    base = make_linear_schedule(40)
    assert select_inference_timesteps(base, 40).inference_timesteps.tolist() == list(range(39, -1, -1))
    assert select_inference_timesteps(base, 1).inference_timesteps.size == 1


@pytest.mark.parametrize("T", [0, 41])
def test_T_out_of_range(T):
    with pytest.raises(ValueError):
        select_inference_timesteps(make_linear_schedule(40), T)


def test_reselect_idempotent():
    once = select_inference_timesteps(make_linear_schedule(), 50)
    twice = select_inference_timesteps(once, 50)
    assert once.inference_timesteps.tolist() == twice.inference_timesteps.tolist()


def test_invariants_enforced():
    with pytest.raises(ValueError):
        NoiseSchedule(3, np.array([0.9, 0.95, 0.5]), np.array([2, 1, 0]))
    with pytest.raises(ValueError):
        NoiseSchedule(3, np.array([0.9, 0.5, 0.1]), np.array([0, 1]))


def test_step_alpha_bars_end_at_one():
    s = select_inference_timesteps(make_linear_schedule(), 50)
    cur, nxt = s.step_alpha_bars()
    assert nxt[-1] == 1.0
    np.testing.assert_array_equal(nxt[:-1], cur[1:])
    assert cur[0] < 1e-4
