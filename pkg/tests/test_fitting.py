import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcenter.fitting import (
    FitError,
    detect_frequency_jump,
    estimate_pi_fidelity,
    fit_dd_scaling,
    fit_ramsey,
    fit_stretched_exp,
    read_xy_csv,
    to_json,
    write_xy_csv,
)

FIG2C = [(1, 0.411), (2, 0.623), (4, 1.33), (8, 1.68)]


def test_stretched_exact_recovery():
    t = np.linspace(0, 1.5, 40)
    fit = fit_stretched_exp(t, np.exp(-(t / 0.411) ** 2.5))
    assert fit.t2 == pytest.approx(0.411, rel=1e-6)
    assert fit.stretch_n == pytest.approx(2.5, rel=1e-6)
    assert not fit.degenerate


@settings(max_examples=15)
@given(t2=st.floats(0.1, 10), n=st.floats(1.0, 3.5), amp=st.floats(0.3, 1.5), off=st.floats(-0.2, 0.2))
def test_stretched_recovers_random_parameters(t2, n, amp, off):
    t = np.linspace(0, 3 * t2, 50)
    fit = fit_stretched_exp(t, amp * np.exp(-(t / t2) ** n) + off)
    assert fit.t2 == pytest.approx(t2, rel=1e-5)
    assert fit.stretch_n == pytest.approx(n, rel=1e-5)


def test_stretched_noisy_exponent():
    # 5% noise leaves a per-fit spread of about 0.2 in n, so the bound applies to the ensemble
    t = np.linspace(0, 1.5, 50)
    fits = [fit_stretched_exp(t, np.exp(-(t / 0.411) ** 2.5) + 0.05 * np.random.default_rng(s).normal(size=t.size))
            for s in range(100)]
    n = np.array([f.stretch_n for f in fits])
    assert abs(n.mean() - 2.5) < 0.3
    assert np.median(np.abs(n - 2.5)) < 0.3
    assert np.std(n) == pytest.approx(np.mean([f.n_err for f in fits]), rel=0.35)


def test_fixed_exponent_agrees_with_free_fit():
    rng = np.random.default_rng(11)
    t = np.linspace(0, 1.5, 50)
    y = np.exp(-(t / 0.411) ** 2.5) + 0.01 * rng.normal(size=t.size)
    free = fit_stretched_exp(t, y)
    fixed = fit_stretched_exp(t, y, fix_n=2.5)
    assert abs(free.t2 - fixed.t2) < free.t2_err
    assert fixed.fixed == {"stretch_n": 2.5}
    assert fixed.covariance[3, 3] == 0


def test_jacobian_covariance_matches_finite_difference():
    rng = np.random.default_rng(3)
    t = np.linspace(0, 1.5, 60)
    y = 0.9 * np.exp(-(t / 0.5) ** 2) + 0.05 + 0.01 * rng.normal(size=t.size)
    fit = fit_stretched_exp(t, y)
    p = np.array([fit.amplitude, fit.t2, fit.offset, fit.stretch_n])
    model = lambda q: q[0] * np.exp(-(t / q[1]) ** q[3]) + q[2]
    jac = np.empty((t.size, 4))
    for k in range(4):
        h = 1e-6 * max(abs(p[k]), 1e-3)
        up, dn = p.copy(), p.copy()
        up[k] += h
        dn[k] -= h
        jac[:, k] = (model(up) - model(dn)) / (2 * h)
    s2 = np.sum((model(p) - y) ** 2) / (t.size - 4)
    cov = s2 * np.linalg.inv(jac.T @ jac)
    assert np.sqrt(np.diag(fit.covariance)) == pytest.approx(np.sqrt(np.diag(cov)), rel=0.01)


def test_constant_data_is_degenerate():
    fit = fit_stretched_exp(np.linspace(0, 1, 10), np.full(10, 0.3))
    assert fit.degenerate and math.isnan(fit.t2)
    assert fit.amplitude == 0
    assert json.loads(to_json(fit))["t2"] is None


@pytest.mark.parametrize("t", [np.arange(4.0), np.array([0, 1, 1, 2, 3.0])])
def test_stretched_input_errors(t):
    with pytest.raises(ValueError):
        fit_stretched_exp(t, np.exp(-t))


def test_dd_scaling_reference_points():
    fit = fit_dd_scaling(FIG2C)
    assert 0.55 <= fit.exponent <= 0.72
    assert fit.covariance.shape == (2, 2)


def test_dd_scaling_exact_power_law():
    n = np.array([1, 2, 4, 8, 16])
    fit = fit_dd_scaling(np.c_[n, 3.0 * n ** 0.5])
    assert fit.exponent == pytest.approx(0.5, abs=1e-9)
    assert fit.prefactor == pytest.approx(3.0, rel=1e-9)


def test_dd_scaling_errors():
    with pytest.raises(FitError, match="rank"):
        fit_dd_scaling([(2, 1.0), (2, 1.1), (2, 0.9)])
    with pytest.raises(ValueError):
        fit_dd_scaling([(1, 1.0), (2, 0.0), (4, 2.0)])
    with pytest.raises(ValueError):
        fit_dd_scaling([(1, 1.0), (2, 1.0)])


def test_ramsey_exact_recovery():
    t = np.linspace(0, 6, 301)
    y = 0.5 + 0.4 * np.exp(-(t / 2.7) ** 2) * np.cos(2 * np.pi * 5.0 * t + 0.3)
    fit = fit_ramsey(t, y)
    assert fit.freq == pytest.approx(5.0, rel=1e-6)
    assert fit.t2_star == pytest.approx(2.7, rel=1e-6)


def test_ramsey_nuclear_noisy():
    t = np.linspace(0, 30, 241)  # ms
    rng = np.random.default_rng(0)
    y = np.exp(-(t / 13.9) ** 2) * np.cos(2 * np.pi * 0.5 * t) + 0.02 * rng.normal(size=t.size)
    assert fit_ramsey(t, y).t2_star == pytest.approx(13.9, rel=0.02)


def test_ramsey_without_oscillation():
    t = np.linspace(0, 5, 50)
    with pytest.raises(FitError):
        fit_ramsey(t, np.exp(-t))


def _jump_trace(f1, f2, tj, t):
    phase = np.where(t < tj, f1 * t, f1 * tj + f2 * (t - tj))
    return 0.5 + 0.5 * np.exp(-(t / 20) ** 2) * np.cos(2 * np.pi * phase)


def test_jump_recovery():
    t = np.arange(151) * 0.02
    fit = detect_frequency_jump(t, _jump_trace(4.91, 4.23, 1.25, t))
    assert fit.jump
    assert fit.f_before == pytest.approx(4.91, rel=0.01)
    assert fit.f_after == pytest.approx(4.23, rel=0.01)
    assert abs(fit.t_jump - 1.25) <= 0.02 + 1e-9


def test_single_tone_has_no_jump():
    t = np.arange(151) * 0.02
    rng = np.random.default_rng(2)
    fit = detect_frequency_jump(t, _jump_trace(4.91, 4.91, 1.25, t) + 0.01 * rng.normal(size=t.size))
    assert not fit.jump and math.isnan(fit.t_jump)
    assert fit.f_before == fit.f_after


def test_tiny_jump_is_not_resolved():
    t = np.arange(151) * 0.02
    rng = np.random.default_rng(5)
    fit = detect_frequency_jump(t, _jump_trace(4.91, 4.90, 1.25, t) + 0.02 * rng.normal(size=t.size))
    assert not fit.jump


def test_fits_are_deterministic():
    t = np.arange(151) * 0.02
    y = _jump_trace(4.91, 4.23, 1.25, t)
    assert detect_frequency_jump(t, y) == detect_frequency_jump(t, y)


def test_pi_fidelity():
    n = np.arange(1, 9)
    assert estimate_pi_fidelity(np.c_[n, 0.92 ** n]).fidelity == pytest.approx(0.92, abs=1e-9)
    assert estimate_pi_fidelity([(1, 0.9)]).fidelity == pytest.approx(0.9, abs=1e-15)
    rng = np.random.default_rng(8)
    noisy = 0.95 * 0.92 ** n * np.exp(0.03 * rng.normal(size=n.size))
    est = estimate_pi_fidelity(np.c_[n, noisy])
    assert est.fidelity == pytest.approx(0.92, abs=0.04)
    with pytest.raises(ValueError):
        estimate_pi_fidelity([(1, 0.9), (2, -0.1)])


def test_csv_round_trip():
    x, y, e = np.linspace(0, 1, 5), np.linspace(1, 2, 5), np.full(5, 0.1)
    x2, y2, e2 = read_xy_csv(write_xy_csv(x, y, e))
    assert np.array_equal(x, x2) and np.array_equal(y, y2) and np.array_equal(e, e2)
    assert read_xy_csv("x,y\n1,2\n")[2] is None


@pytest.mark.parametrize("text, match", [("x,y\n1,2\n3,abc\n", "line 3"), ("1,2,3,4\n", "columns"),
                                         ("1,2\n1,2,3\n", "inconsistent")])
def test_csv_errors(text, match):
    with pytest.raises(ValueError, match=match):
        read_xy_csv(text)
