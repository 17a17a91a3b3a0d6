import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgdiff.posterior import DegeneratePosteriorError, ddpm_forward_marginal, posterior_from_moments, ddpm_moments
from subgdiff.process import (
    BlockBoundaryError,
    ProcessConfig,
    expectation_marginal,
    expectation_reverse_step,
    kstep_transfer,
    masked_marginal,
    masked_step,
    naive_loss_weight,
    subgdiff_reverse_step,
    twophase_coefficients,
    twophase_forward,
)
from subgdiff.schedule import ConfigError, ScheduleConfig, build_schedule, schedule_from_betas


def test_masked_step_examples():
    r = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    eps = np.random.default_rng(0).normal(size=r.shape)
    out = masked_step(r, np.array([0, 1]), 0.19, eps)
    np.testing.assert_array_equal(out[0], r[0])
    np.testing.assert_allclose(out[1], 0.9 * r[1] + math.sqrt(0.19) * eps[1])
    assert masked_step(1.0, 1, 0.19, 0.0) == pytest.approx(0.9, abs=1e-15)


def test_masked_marginal_examples():
    sched = schedule_from_betas([0.1, 0.2])
    np.testing.assert_allclose(masked_marginal([1, 0], sched, 2), (math.sqrt(0.9), 0.1), atol=1e-15)
    assert masked_marginal([0, 0], sched, 2) == (1.0, 0.0)
    np.testing.assert_allclose(masked_marginal([1, 1], sched, 2), ddpm_forward_marginal(sched, 2), atol=1e-15)


def test_expectation_marginal_hand_value():
    cfg = ProcessConfig(0.5, 1, schedule_from_betas([0.1]))
    mean, var = expectation_marginal(cfg, 1)
    assert mean == pytest.approx(0.5 * math.sqrt(0.9) + 0.5, abs=1e-15)
    assert mean == pytest.approx(0.97434, abs=1e-5)
    assert var == pytest.approx(0.025, abs=1e-15)


def test_expectation_marginal_limits():
    sched = build_schedule(ScheduleConfig(40, 1e-3, 0.05))
    for t in (4, 20, 40):
        np.testing.assert_allclose(expectation_marginal(ProcessConfig(1.0, 4, sched), t), ddpm_forward_marginal(sched, t), rtol=1e-12)
        assert expectation_marginal(ProcessConfig(0.0, 4, sched), t) == (1.0, 0.0)
    with pytest.raises(BlockBoundaryError):
        expectation_marginal(ProcessConfig(0.5, 4, sched), 6)


def test_kstep_transfer_product():
    sched = schedule_from_betas([0.1, 0.2, 0.3])
    assert kstep_transfer(1.0, 1, sched, 2, 0, 2, 0.0) == pytest.approx(math.sqrt(0.72), abs=1e-15)
    assert kstep_transfer(1.7, 0, sched, 2, 0, 2, 3.0) == 1.7
    with pytest.raises(BlockBoundaryError):
        kstep_transfer(1.0, 1, sched, 2, 1, 3, 0.0)


def test_kstep_transfer_composition():
    sched = schedule_from_betas([0.05, 0.1, 0.15, 0.2])
    rng = np.random.default_rng(2)
    n = 100_000
    r = np.full(n, 2.0)
    for t in range(1, 5):
        r = math.sqrt(1 - sched.betas[t - 1]) * r + math.sqrt(sched.betas[t - 1]) * rng.normal(size=n)
    jump = kstep_transfer(np.full(n, 2.0), np.ones(n), sched, 4, 0, 4, rng.normal(size=n))
    assert jump.var() == pytest.approx(r.var(), rel=0.02)
    assert jump.mean() == pytest.approx(r.mean(), rel=0.01)


def test_ddpm_reduction():
    sched = build_schedule(ScheduleConfig(300, 1e-7, 2e-2))
    cfg = ProcessConfig(1.0, 1, sched)
    for t in range(1, 301):
        c = twophase_coefficients(cfg, t)
        mc, var = ddpm_forward_marginal(sched, t)
        assert c.mean_coef_on == pytest.approx(mc, rel=1e-12)
        assert c.var_on == pytest.approx(var, rel=1e-10)
        assert c.delta == pytest.approx(1.0 - sched.beta_bar(t - 1), rel=1e-10, abs=1e-16)


def test_first_block_is_plain_masked_chain():
    sched = build_schedule(ScheduleConfig(60, 1e-3, 0.05))
    cfg = ProcessConfig(0.5, 10, sched)
    for t in range(1, 11):
        c = twophase_coefficients(cfg, t)
        assert c.mean_coef_on == pytest.approx(math.sqrt(sched.beta_bar(t)), rel=1e-12)
        assert (c.mean_coef_off, c.var_off) == (1.0, 0.0)


def simulate(sched, p, k, t, s_last, n, rng):
    """Stepwise chain: each completed block is replaced by its mask expectation."""
    r = np.ones(n)
    m = (t - 1) // k
    for j in range(m):
        moved = r.copy()
        for i in range(j * k + 1, (j + 1) * k + 1):
            b = sched.betas[i - 1]
            moved = math.sqrt(1 - b) * moved + math.sqrt(b) * rng.normal(size=n)
        r = p * moved + (1 - p) * r
    if s_last:
        for i in range(m * k + 1, t + 1):
            b = sched.betas[i - 1]
            r = math.sqrt(1 - b) * r + math.sqrt(b) * rng.normal(size=n)
    return r


@pytest.mark.parametrize("t,s", [(23, 1), (23, 0), (50, 1), (6, 1), (41, 0)])
def test_two_phase_monte_carlo(t, s):
    sched = build_schedule(ScheduleConfig(50, 1e-7, 5e-2))
    cfg = ProcessConfig(0.5, 5, sched)
    rt = simulate(sched, 0.5, 5, t, s, 200_000, np.random.default_rng(t + 100 * s))
    c = twophase_coefficients(cfg, t)
    mean, var = c.per_node([s])
    assert rt.mean() == pytest.approx(mean[0], rel=0.01)
    assert rt.var() == pytest.approx(var[0], rel=0.02)


def test_twophase_forward_shapes_and_noise():
    cfg = ProcessConfig(0.5, 5, build_schedule(ScheduleConfig(50, 1e-4, 0.05)))
    r0 = np.arange(12.0).reshape(4, 3)
    eps = np.ones((4, 3))
    rt, c = twophase_forward(cfg, r0, np.array([1, 1, 0, 0]), 17, eps=eps)
    np.testing.assert_allclose(rt[0], c.mean_coef_on * r0[0] + math.sqrt(c.var_on))
    np.testing.assert_allclose(rt[3], c.mean_coef_off * r0[3] + math.sqrt(c.var_off))
    with pytest.raises(ValueError):
        twophase_forward(cfg, r0, np.array([1, 0]), 17, eps=eps)


def test_reverse_step_holds_unselected_nodes():
    cfg = ProcessConfig(0.5, 5, build_schedule(ScheduleConfig(50, 1e-4, 0.05)))
    rng = np.random.default_rng(0)
    r = rng.normal(size=(4, 3))
    out = subgdiff_reverse_step(cfg, r, np.array([0, 1, 0, 1]), rng.normal(size=(4, 3)), 30, rng.normal(size=(4, 3)))
    np.testing.assert_array_equal(out[[0, 2]], r[[0, 2]])
    assert not np.allclose(out[[1, 3]], r[[1, 3]])
    np.testing.assert_array_equal(subgdiff_reverse_step(cfg, r, np.zeros(4), r, 30, r), r)


def test_reverse_step_reduces_to_ddpm():
    sched = build_schedule(ScheduleConfig(200, 1e-7, 2e-2))
    cfg = ProcessConfig(1.0, 1, sched)
    rng = np.random.default_rng(4)
    r, eps, z = (rng.normal(size=(5, 3)) for _ in range(3))
    for t in (1, 2, 77, 200):
        beta, ab = sched.beta(t), sched.beta_bar(t)
        sigma = math.sqrt((1 - sched.beta_bar(t - 1)) / (1 - ab) * beta) if t > 1 else 0.0
        ddpm = (r - beta / math.sqrt(1 - ab) * eps) / math.sqrt(1 - beta) + sigma * z
        np.testing.assert_allclose(subgdiff_reverse_step(cfg, r, np.ones(5), eps, t, z), ddpm, rtol=0, atol=1e-12)
        np.testing.assert_allclose(expectation_reverse_step(1.0, sched, r, np.ones(5), eps, t, z), ddpm, rtol=0, atol=1e-12)


def test_expectation_sampler_matches_lemma_route():
    sched = build_schedule(ScheduleConfig(30, 1e-3, 0.05))
    cfg = ProcessConfig(0.5, 1, sched)
    rng = np.random.default_rng(9)
    r, eps, z = (rng.normal(size=(6, 3)) for _ in range(3))
    s = np.array([1, 0, 1, 1, 0, 1])
    for t in (2, 15, 30):
        a = expectation_reverse_step(0.5, sched, r, s, eps, t, z)
        b = subgdiff_reverse_step(cfg, r, s, eps, t, z)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_naive_loss_weight():
    sched = schedule_from_betas([0.1, 0.2])
    assert naive_loss_weight(0, sched, 0.5, 2) == 0.0
    assert naive_loss_weight(1, sched, 0.5, 2) == pytest.approx(0.25, abs=1e-15)
    ddpm = posterior_from_moments(ddpm_moments(sched, 2)).loss_weight
    assert naive_loss_weight(1, sched, sched.beta_bar(1), 2) == pytest.approx(ddpm, rel=1e-12)
    assert naive_loss_weight(1, sched, 1.0, 1) == pytest.approx(1 / 1.8)


def test_degenerate_posterior():
    cfg = ProcessConfig(0.0, 1, schedule_from_betas([0.1, 0.2, 0.3]))
    with pytest.raises(DegeneratePosteriorError):
        cfg.posterior_on(2)
    assert cfg.posterior_on(1).noise_std == 0.0


def test_invalid_process():
    sched = schedule_from_betas([0.1, 0.2])
    with pytest.raises(ConfigError):
        ProcessConfig(1.5, 1, sched)
    with pytest.raises(ConfigError):
        ProcessConfig(0.5, 3, sched)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 8), st.integers(1, 40))
def test_marginal_never_exceeds_unit_power(p, k, t):
    sched = build_schedule(ScheduleConfig(40, 1e-4, 0.1))
    cfg = ProcessConfig(p, k, sched)
    c = twophase_coefficients(cfg, t)
    assert c.mean_coef_on**2 + c.var_on <= 1.0 + 1e-12
    assert c.var_off <= c.var_on + 1e-15
    assert c.mean_coef_on <= c.mean_coef_off + 1e-15
    if p == 1.0:
        assert c.mean_coef_on**2 + c.var_on == pytest.approx(1.0, abs=1e-12)
