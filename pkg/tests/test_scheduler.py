import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from todinv.scheduler import (ScheduleError, SchedulerParams, add_noise, build_schedule, ddim_coefficients,
                              ddim_inverse_step, ddim_step, schedule_from_alpha_bar)


def test_leading_spacing_and_prev():
    p = build_schedule(T=50)
    assert p.inference_timesteps[0] == 980 and p.inference_timesteps[-1] == 0
    assert p.inversion_timesteps == tuple(range(0, 1000, 20))
    # the last sampling step lands on clean data
    assert p.alpha_bar_prev[-1] == 1.0
    assert p.alpha_bar_prev[0] == p.alpha_bar[960]


def test_scaled_linear_betas():
    p = build_schedule(num_train_steps=10, beta_start=0.01, beta_end=0.04, T=2)
    betas = np.linspace(0.1, 0.2, 10) ** 2
    np.testing.assert_allclose(p.alpha_bar, np.cumprod(1 - betas), rtol=1e-14)
    lin = build_schedule(num_train_steps=10, beta_start=0.01, beta_end=0.04, T=2, kind="linear")
    np.testing.assert_allclose(lin.alpha_bar, np.cumprod(1 - np.linspace(0.01, 0.04, 10)), rtol=1e-14)


def test_coefficients_match_x0_parameterisation():
    # one DDIM step written via the predicted clean sample
    p = build_schedule(T=10)
    rng = np.random.default_rng(0)
    for t in p.inference_timesteps:
        i = p.index_of(t)
        a, ap = p.alpha_bar[t], p.alpha_bar_prev[i]
        z, e = rng.standard_normal(5), rng.standard_normal(5)
        x0 = (z - np.sqrt(1 - a) * e) / np.sqrt(a)
        expected = np.sqrt(ap) * x0 + np.sqrt(1 - ap) * e
        np.testing.assert_allclose(ddim_step(z, e, t, p), expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kwargs", [
    dict(T=0), dict(T=1001), dict(beta_start=0.0), dict(beta_start=0.2, beta_end=0.1),
    dict(beta_end=1.0), dict(kind="cosine"), dict(num_train_steps=0),
])
def test_build_schedule_rejects(kwargs):
    with pytest.raises(ScheduleError):
        build_schedule(**kwargs)


def test_alpha_bar_must_decrease():
    with pytest.raises(ScheduleError):
        schedule_from_alpha_bar(np.array([0.9, 0.95, 0.5]), 2)


def test_unknown_timestep():
    with pytest.raises(ScheduleError, match="not an inference step"):
        build_schedule(T=10).coefficients(7)


def test_add_noise_shape_and_range():
    p = build_schedule(T=10)
    with pytest.raises(ValueError):
        add_noise(np.zeros(3), np.zeros(4), 5, p)
    with pytest.raises(ScheduleError):
        add_noise(np.zeros(3), np.zeros(3), 1000, p)
    z = add_noise(np.ones(3), np.zeros(3), 0, p)
    np.testing.assert_allclose(z, np.sqrt(p.alpha_bar[0]))


def test_degenerate_phi_raises():
    p = build_schedule(T=10)
    bad = SchedulerParams(p.num_train_steps, p.inference_timesteps, p.alpha_bar, p.alpha_bar_prev,
                          np.zeros_like(p.phi), p.psi)
    with pytest.raises(ScheduleError, match="degenerate"):
        ddim_inverse_step(np.ones(2), np.ones(2), p.inference_timesteps[0], bad)


def test_dict_round_trip():
    p = build_schedule(T=7)
    q = SchedulerParams.from_dict(p.to_dict())
    assert q.same_schedule(p) and q.beta_schedule == "scaled_linear"
    np.testing.assert_array_equal(q.phi, p.phi)


@settings(max_examples=200, deadline=None)
@given(T=st.integers(1, 100), seed=st.integers(0, 2 ** 32 - 1), dtype=st.sampled_from(["f32", "f64"]))
def test_inverse_undoes_step(T, seed, dtype):
    p = build_schedule(T=T)
    rng = np.random.default_rng(seed)
    t = int(rng.choice(p.inference_timesteps))
    torch_dtype = torch.float32 if dtype == "f32" else torch.float64
    z = torch.as_tensor(rng.standard_normal(32), dtype=torch_dtype)
    e = torch.as_tensor(rng.standard_normal(32), dtype=torch_dtype)
    back = ddim_inverse_step(ddim_step(z, e, t, p), e, t, p)
    tol = 1e-6 if dtype == "f32" else 1e-12
    assert float((back - z).norm() / z.norm()) < tol


@settings(max_examples=50, deadline=None)
@given(a=st.floats(1e-4, 0.999), b=st.floats(1e-4, 0.999))
def test_coefficients_identity(a, b):
    # same-level step is the identity
    phi, psi = ddim_coefficients(a, a)
    assert phi == pytest.approx(1.0) and psi == pytest.approx(0.0, abs=1e-12)
    phi, psi = ddim_coefficients(min(a, b), max(a, b))
    assert phi >= 1.0 - 1e-12 and psi <= 1e-12
