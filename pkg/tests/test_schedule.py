import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from refstyle.errors import ParameterError, ShapeError
from refstyle.schedule import (
    build_schedule,
    ddim_denoise_step,
    ddim_invert_step,
    marginal_noise,
    plan_timesteps,
    predict_x0,
)

from conftest import rel_err

# pure-python running product of (1 - beta) over the SD1.5 scaled-linear table
ALPHA_BAR_1000 = 0.004660098513077234


def brute_alpha_bar(n, b0, b1, t):
    prod = 1.0
    for i in range(t):
        root = math.sqrt(b0) + (math.sqrt(b1) - math.sqrt(b0)) * i / (n - 1)
        prod *= 1.0 - root * root
    return prod


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    assert s.betas.tolist() == [0.5]
    assert s.alphas.tolist() == [0.5]
    assert s.alpha_bars.tolist() == [0.5]


def test_sd_schedule_terminal_alpha_bar(schedule):
    assert brute_alpha_bar(1000, 0.00085, 0.012, 1000) == pytest.approx(ALPHA_BAR_1000, rel=1e-12)
    assert schedule.alpha_bar(1000) == pytest.approx(ALPHA_BAR_1000, rel=1e-12)


def test_running_product_invariant(schedule):
    prod = 1.0
    for t in range(1, 1001):
        prod *= schedule.alphas[t - 1]
        assert abs(schedule.alpha_bar(t) - prod) <= 1e-12 * prod
    assert np.all((schedule.betas > 0) & (schedule.betas < 1))
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert schedule.alpha_bar(0) == 1.0


@pytest.mark.parametrize("args", [(10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0), (0, 0.1, 0.2)])
def test_bad_schedule_parameters(args):
    with pytest.raises(ParameterError):
        build_schedule(*args)


def test_tables_are_read_only(schedule):
    with pytest.raises(ValueError):
        schedule.betas[0] = 0.3


def test_plan_single_step(schedule):
    assert plan_timesteps(schedule, 1).steps == (1,)


def test_plan_thirty_steps_matches_stride_oracle(schedule):
    plan = plan_timesteps(schedule, 30)
    stride = 1000 // 30
    expected = sorted((stride * k + 1 for k in range(30)), reverse=True)
    assert list(plan.steps) == expected
    assert plan.steps[0] == 958 and plan.steps[-1] == 1


def test_plan_full_schedule():
    assert plan_timesteps(build_schedule(10, 0.1, 0.2), 10).steps == tuple(range(10, 0, -1))


def test_plan_too_many_steps(schedule):
    with pytest.raises(ParameterError):
        plan_timesteps(schedule, 1001)


@given(st.integers(1, 1000))
def test_plan_strictly_decreasing_subset(s):
    steps = plan_timesteps(build_schedule(), s).steps
    assert len(steps) == s
    assert all(1 <= t <= 1000 for t in steps)
    assert all(a > b for a, b in zip(steps, steps[1:]))


def test_plan_orders():
    plan = plan_timesteps(build_schedule(10, 0.1, 0.2), 3)
    assert plan.steps == (7, 4, 1)
    assert plan.descending() == [(7, 4), (4, 1), (1, 0)]
    assert plan.ascending() == [(0, 1), (1, 4), (4, 7)]


def test_marginal_noise_trivial_cases(schedule):
    x0 = np.array([[0.3, -1.2]])
    eps = np.array([[0.7, 0.1]])
    ab = schedule.alpha_bar(400)
    assert np.array_equal(marginal_noise(x0, 400, np.zeros_like(x0), schedule), np.sqrt(ab) * x0)
    assert np.array_equal(marginal_noise(np.zeros_like(x0), 400, eps, schedule), np.sqrt(1 - ab) * eps)


def test_marginal_noise_scalar_instance():
    s = build_schedule(1, 0.75, 0.75)  # alpha_bar = 0.25
    out = marginal_noise(np.array([1.0]), 1, np.array([1.0]), s)
    assert out[0] == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-15)


def test_marginal_noise_shape_error(schedule):
    with pytest.raises(ShapeError):
        marginal_noise(np.zeros(3), 5, np.zeros(4), schedule)


def test_predict_x0_cases(schedule):
    x = np.array([0.4, -2.0])
    assert np.allclose(predict_x0(x, np.zeros(2), 300, schedule), x / np.sqrt(schedule.alpha_bar(300)), rtol=1e-15)
    s = build_schedule(1, 0.64, 0.64)  # alpha_bar = 0.36
    assert predict_x0(np.array([1.0]), np.array([0.5]), 1, s)[0] == pytest.approx(1.0, abs=1e-15)


def test_denoise_terminal_step_returns_x0(schedule):
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal((2, 8))
    x_t = marginal_noise(x0, 37, eps, schedule)
    assert rel_err(ddim_denoise_step(x_t, eps, 37, 0, schedule), x0) < 1e-13


def test_denoise_zero_eps_is_rescale(schedule):
    x = np.array([1.5, -0.5])
    out = ddim_denoise_step(x, np.zeros(2), 600, 200, schedule)
    ratio = np.sqrt(schedule.alpha_bar(200) / schedule.alpha_bar(600))
    assert np.allclose(out, ratio * x, rtol=1e-14)


def test_step_direction_errors(schedule):
    x = np.zeros(2)
    with pytest.raises(ParameterError):
        ddim_denoise_step(x, x, 10, 10, schedule)
    with pytest.raises(ParameterError):
        ddim_invert_step(x, x, 10, 5, schedule)


def test_invert_zero_eps_chain(schedule):
    plan = plan_timesteps(schedule, 30)
    x = np.array([0.2, 0.9, -0.4])
    z = x
    for t, t_next in plan.ascending():
        z = ddim_invert_step(z, np.zeros(3), t, t_next, schedule)
    assert rel_err(z, np.sqrt(schedule.alpha_bar(plan.steps[0])) * x) < 1e-13


def test_invert_scalar_instance():
    s = build_schedule(2, 0.36, 0.4375)  # alpha_bar = 0.64, 0.36
    assert s.alpha_bar(1) == pytest.approx(0.64, abs=1e-15)
    assert s.alpha_bar(2) == pytest.approx(0.36, abs=1e-15)
    # x0 = (1 - 0.6 * 0.25) / 0.8 = 1.0625; 0.6 * 1.0625 + 0.8 * 0.25
    out = ddim_invert_step(np.array([1.0]), np.array([0.25]), 1, 2, s)
    assert out[0] == pytest.approx(0.8375, abs=1e-14)


def test_invert_then_denoise_chain(schedule):
    rng = np.random.default_rng(3)
    plan = plan_timesteps(schedule, 20)
    x = rng.standard_normal(16)
    eps = {t: rng.standard_normal(16) for t in plan.steps}
    z = x
    for t, t_next in plan.ascending():
        z = ddim_invert_step(z, eps[t_next], t, t_next, schedule)
    for t, t_prev in plan.descending():
        z = ddim_denoise_step(z, eps[t], t, t_prev, schedule)
    assert rel_err(z, x) < 1e-10


arrays = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).standard_normal((2, 5)))


@given(arrays, st.integers(1, 1000))
def test_predict_x0_inverts_marginal(pair, t):
    s = build_schedule()
    x0, eps = pair
    assert rel_err(predict_x0(marginal_noise(x0, t, eps, s), eps, t, s), x0) < 1e-10


@given(arrays, st.integers(0, 999), st.integers(1, 1000))
def test_one_step_round_trip(pair, t, dt):
    s = build_schedule()
    t_next = min(t + dt, 1000)
    if t_next <= t:
        return
    x, e = pair
    back = ddim_denoise_step(ddim_invert_step(x, e, t, t_next, s), e, t_next, t, s)
    assert rel_err(back, x) < 1e-10
