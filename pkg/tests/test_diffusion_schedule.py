import numpy as np
import pytest
import torch

from models.diffusion_schedule import (from_betas, iterative_forward, make_schedule, q_sample,
                                       schedule_from_dict, training_loss)
from models.exceptions import ScheduleError, ShapeError


def test_single_step_schedule():
    sched = make_schedule(T=1, beta_start=0.1, beta_end=0.1)
    np.testing.assert_allclose(sched.alpha_bar, [0.9], rtol=1e-12)


def test_two_step_product():
    np.testing.assert_allclose(from_betas([0.1, 0.2]).alpha_bar, [0.9, 0.72], rtol=1e-12)
    np.testing.assert_allclose(make_schedule(T=2, beta_start=0.1, beta_end=0.2).beta, [0.1, 0.2])


def test_long_schedule_matches_loop_product():
    sched = make_schedule(T=1000, beta_start=1e-4, beta_end=2e-2)
    product = 1.0
    for beta in np.linspace(1e-4, 2e-2, 1000):
        product *= 1.0 - beta
    assert abs(sched.alpha_bar[999] - product) < 1e-10


@pytest.mark.parametrize('T', [1, 2, 200, 1000])
def test_schedule_invariants(T):
    sched = make_schedule(T=T)
    assert np.all((sched.beta > 0) & (sched.beta < 1))
    np.testing.assert_array_equal(sched.alpha, 1.0 - sched.beta)
    for t in range(1, T):
        assert abs(sched.alpha_bar[t] - sched.alpha_bar[t - 1] * sched.alpha[t]) <= 1e-12 * sched.alpha_bar[t]
    assert 0.0 < sched.alpha_bar[-1] < 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(np.diff(sched.snr()) < 0)


@pytest.mark.parametrize('kwargs', [
    dict(T=0),
    dict(T=10, beta_start=0.0),
    dict(T=10, beta_start=0.2, beta_end=0.1),
    dict(T=10, beta_end=1.0),
    dict(T=10, kind='cosine'),
])
def test_invalid_schedules_rejected(kwargs):
    with pytest.raises(ScheduleError):
        make_schedule(**kwargs)


def test_schedule_arrays_are_read_only():
    sched = make_schedule(T=5)
    with pytest.raises(ValueError):
        sched.beta[0] = 0.5


def test_q_sample_zero_noise():
    sched = make_schedule(T=50)
    x0 = torch.randn(2, 3, dtype=torch.float64)
    out = q_sample(x0, 17, torch.zeros_like(x0), sched)
    torch.testing.assert_close(out, np.sqrt(sched.alpha_bar[17]) * x0, rtol=0, atol=1e-15)


def test_q_sample_identity_limit():
    sched = make_schedule(T=1, beta_start=1e-12, beta_end=1e-12)
    x0 = torch.randn(4, dtype=torch.float64)
    out = q_sample(x0, 0, torch.randn(4, dtype=torch.float64), sched)
    torch.testing.assert_close(out, x0, rtol=0, atol=1e-5)


def test_q_sample_is_linear():
    sched = make_schedule(T=100)
    x0, eps = torch.randn(8, dtype=torch.float64), torch.randn(8, dtype=torch.float64)
    torch.testing.assert_close(q_sample(3.0 * x0, 40, 3.0 * eps, sched), 3.0 * q_sample(x0, 40, eps, sched),
                               rtol=1e-6, atol=0)


def test_q_sample_per_sample_timesteps():
    sched = make_schedule(T=100)
    x0, eps = torch.randn(3, 2), torch.randn(3, 2)
    t = torch.tensor([0, 50, 99])
    out = q_sample(x0, t, eps, sched)
    for i in range(3):
        torch.testing.assert_close(out[i], q_sample(x0[i], int(t[i]), eps[i], sched))


def test_q_sample_errors():
    sched = make_schedule(T=10)
    with pytest.raises(ShapeError):
        q_sample(torch.zeros(3), 1, torch.zeros(4), sched)
    with pytest.raises(ScheduleError):
        q_sample(torch.zeros(3), 10, torch.zeros(3), sched)
    with pytest.raises(ScheduleError):
        q_sample(torch.zeros(3), -1, torch.zeros(3), sched)


def test_q_sample_monte_carlo_moments():
    sched = make_schedule(T=200)
    t, n = 120, 10_000
    generator = torch.Generator().manual_seed(0)
    x0 = torch.tensor([0.7, -0.3, 1.2], dtype=torch.float64)
    eps = torch.randn(n, 3, generator=generator, dtype=torch.float64)
    samples = q_sample(x0.expand(n, 3), t, eps, sched).numpy()

    expected_mean = np.sqrt(sched.alpha_bar[t]) * x0.numpy()
    expected_var = 1.0 - sched.alpha_bar[t]
    standard_error = np.sqrt(expected_var / n)
    assert np.all(np.abs(samples.mean(axis=0) - expected_mean) < 4 * standard_error)
    assert np.all(np.abs(samples.var(axis=0) / expected_var - 1.0) < 0.05)


def test_training_loss_cases():
    eps = torch.randn(2, 3, 4, dtype=torch.float64)
    assert float(training_loss(eps, eps)) == 0.0
    assert float(training_loss(torch.zeros(5), torch.ones(5))) == 1.0
    with pytest.raises(ShapeError):
        training_loss(torch.zeros(2), torch.zeros(3))


def test_training_loss_matches_loop():
    generator = torch.Generator().manual_seed(1)
    a = torch.randn(3, 5, generator=generator, dtype=torch.float64)
    b = torch.randn(3, 5, generator=generator, dtype=torch.float64)
    total = 0.0
    for x, y in zip(a.flatten().tolist(), b.flatten().tolist()):
        total += (x - y) ** 2
    assert abs(float(training_loss(a, b)) - total / a.numel()) < 1e-12


def test_iterative_forward_single_step():
    sched = make_schedule(T=10)
    x0, n0 = torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
    expected = np.sqrt(1 - sched.beta[0]) * x0 + np.sqrt(sched.beta[0]) * n0
    torch.testing.assert_close(iterative_forward(x0, 0, [n0], sched), expected)


def test_iterative_forward_deterministic_chain():
    sched = make_schedule(T=30)
    x0 = torch.randn(4, dtype=torch.float64)
    out = iterative_forward(x0, 29, [torch.zeros(4, dtype=torch.float64)] * 30, sched)
    torch.testing.assert_close(out, np.sqrt(sched.alpha_bar[29]) * x0, rtol=1e-12, atol=0)


def test_iterative_forward_stream_length_checked():
    sched = make_schedule(T=10)
    with pytest.raises(ShapeError):
        iterative_forward(torch.zeros(2), 3, [torch.zeros(2)] * 3, sched)


def test_iterative_forward_matches_closed_form_moments():
    sched = make_schedule(T=200)
    t, n = 60, 10_000
    generator = torch.Generator().manual_seed(2)
    x0 = torch.full((n, 2), 0.8, dtype=torch.float64)
    stream = [torch.randn(n, 2, generator=generator, dtype=torch.float64) for _ in range(t + 1)]
    chains = iterative_forward(x0, t, stream, sched).numpy()

    mean = np.sqrt(sched.alpha_bar[t]) * 0.8
    var = 1.0 - sched.alpha_bar[t]
    assert np.all(np.abs(chains.mean(axis=0) - mean) < 4 * np.sqrt(var / n))
    assert np.all(np.abs(chains.var(axis=0) / var - 1.0) < 0.05)


def test_schedule_record_rebuilds_identical_tables():
    sched = make_schedule(T=200)
    record = sched.to_dict()
    assert (record['T'], record['kind'], record['beta_start'], record['beta_end']) == (200, 'linear', 1e-4, 2e-2)
    rebuilt = schedule_from_dict(record)
    assert rebuilt.matches(sched) and rebuilt.kind == 'linear'
    np.testing.assert_array_equal(rebuilt.alpha_bar, sched.alpha_bar)
    assert not rebuilt.matches(make_schedule(T=1000))
    assert not from_betas(sched.beta[:-1]).matches(sched)


@pytest.mark.parametrize('record', [{}, {'T': 3, 'betas': [0.1, 0.2]}, {'T': 2, 'betas': [0.1, 1.5]}])
def test_malformed_schedule_record(record):
    with pytest.raises(ScheduleError):
        schedule_from_dict(record)
