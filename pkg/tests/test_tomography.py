import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcenter.config import ERROR_BUDGET
from tcenter.engine import run_sequence
from tcenter.fitting import FitError
from tcenter.readout import IDEAL_READOUT, MATRIX_ORDER, ReadoutModel
from tcenter.sequences import bell_sequence
from tcenter.tomography import (
    IDEAL_STATES,
    OffDiagonalFit,
    PartialDensityMatrix,
    assemble,
    extract_offdiagonal,
    fidelity,
    phase_reversal_sweep,
    tomography_pipeline,
)

IDEAL_GATES = 1e-4  # RWA cutoff that isolates each nuclear line


def _rho(psi):
    return np.outer(psi, psi.conj())


def _random_rho(rng, rank=4):
    vecs = rng.normal(size=(rank, 4)) + 1j * rng.normal(size=(rank, 4))
    vecs /= np.linalg.norm(vecs, axis=1)[:, None]
    w = rng.dirichlet(np.ones(rank))
    return sum(wk * _rho(v) for wk, v in zip(w, vecs))


@pytest.mark.parametrize("which", list(IDEAL_STATES))
def test_fidelity_of_ideal_states(which):
    for other, psi in IDEAL_STATES.items():
        m = PartialDensityMatrix.from_density_matrix(_rho(psi))
        assert fidelity(m, which) == pytest.approx(1.0 if other == which else 0.0, abs=1e-12)


def test_fidelity_reference_value():
    # p1 + p4 = 0.842 and Re c = -0.35 for a Phi- estimate
    m = PartialDensityMatrix((0.421, 0.079, 0.079, 0.421), {"c": -0.35})
    assert fidelity(m, "phi-") == pytest.approx(0.771)


def test_mixed_state_fidelity():
    m = PartialDensityMatrix.from_density_matrix(np.eye(4) / 4)
    assert all(fidelity(m, w) == pytest.approx(0.25) for w in IDEAL_STATES)


@settings(max_examples=30)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_fidelity_is_bounded(seed):
    m = PartialDensityMatrix.from_density_matrix(_random_rho(np.random.default_rng(seed)))
    for which in IDEAL_STATES:
        assert -1e-12 <= fidelity(m, which) <= 1 + 1e-12


def test_cauchy_schwarz_enforced():
    with pytest.raises(ValueError, match="exceeds"):
        PartialDensityMatrix((0.5, 0.0, 0.0, 0.5), {"c": 0.6})
    with pytest.raises(ValueError, match="sum"):
        PartialDensityMatrix((0.5, 0.0, 0.0, 0.4))
    with pytest.raises(ValueError, match="needs"):
        fidelity(PartialDensityMatrix((0.5, 0.0, 0.0, 0.5), {"d": 0}), "phi+")


def test_assemble_shrinks_onto_bound():
    fit = OffDiagonalFit(-0.6, 0.0, 0.0, np.zeros((3, 3)))
    out = assemble((0.5, 0.0, 0.0, 0.5), fit, "phi-")
    assert out.matrix.entries["c"] == pytest.approx(-0.5)
    assert out.fidelity == pytest.approx(1.0)


def _signal(rho, theta, parity):
    p1, p2, p3, p4 = np.real(np.diag(rho))
    if parity == "phi":
        s, c = 4 * theta, rho[0, 3]
        return (p3 - p2) - 2 * c.real * np.cos(s) + 2 * c.imag * np.sin(s)
    s, d = 2 * theta, rho[1, 2]
    return (p4 - p1) + 2 * d.real * np.cos(s) + 2 * d.imag * np.sin(s)


@settings(max_examples=20)
@given(seed=st.integers(0, 2 ** 32 - 1), parity=st.sampled_from(["phi", "psi"]))
def test_extract_offdiagonal_inverts_signal_model(seed, parity):
    rho = _random_rho(np.random.default_rng(seed))
    theta = np.linspace(0, math.pi / 2 if parity == "phi" else math.pi, 17)
    fit = extract_offdiagonal(theta, _signal(rho, theta, parity), parity=parity)
    true = rho[0, 3] if parity == "phi" else rho[1, 2]
    assert fit.value == pytest.approx(true, abs=1e-10)


def test_diagonal_state_gives_no_coherence():
    theta = np.linspace(0, math.pi / 2, 17)
    rho = np.diag([0.1, 0.2, 0.3, 0.4])
    rng = np.random.default_rng(0)
    y = _signal(rho, theta, "phi") + 0.01 * rng.normal(size=theta.size)
    fit = extract_offdiagonal(theta, y)
    err = np.sqrt(np.diag(fit.covariance))
    assert abs(fit.re) < 3 * err[0] and abs(fit.im) < 3 * err[1]


def test_extract_errors():
    with pytest.raises(ValueError, match="period"):
        extract_offdiagonal(np.linspace(0, 0.5, 10), np.zeros(10))
    with pytest.raises(ValueError, match="8"):
        extract_offdiagonal(np.linspace(0, 2, 5), np.zeros(5))
    with pytest.raises(FitError, match="rank"):
        extract_offdiagonal(np.repeat([0.0, math.pi / 2], 5), np.zeros(10))


@pytest.mark.parametrize("which", ["phi-", "phi+", "psi+", "psi-"])
def test_ideal_pipeline_recovers_bell_states(catalog, which):
    result = tomography_pipeline(catalog, which, rwa_cutoff_mhz=IDEAL_GATES)
    assert result.fidelity == pytest.approx(1.0, abs=1e-6)
    assert result.target == which


def test_error_budget_fidelity_window(catalog):
    initial = ERROR_BUDGET.initial_batch(catalog)
    result = tomography_pipeline(catalog, "phi-", initial=initial, n_traj=len(initial),
                                 angle_errors=ERROR_BUDGET.angle_errors, model=ReadoutModel(),
                                 shots=10_000, seed=1)
    assert abs(result.fidelity - 0.69) <= 0.12


def _prepared_rho(catalog, initial, which):
    res = run_sequence(catalog, bell_sequence(catalog, which), initial, n_traj=len(initial),
                       rwa_cutoff_mhz=IDEAL_GATES)
    states = res.final[0]
    idx = [catalog.levels.index("↓" + lab) for lab in MATRIX_ORDER]
    sub = states[:, idx]
    return np.einsum("ki,kj->ij", sub, sub.conj()) / len(sub)


@pytest.mark.parametrize("which", ["phi-", "psi+"])
def test_round_trip_from_random_state(catalog, which):
    rng = np.random.default_rng(21)
    idx = [catalog.levels.index("↓" + lab) for lab in MATRIX_ORDER]
    initial = np.zeros((40, len(catalog.levels)), complex)
    for k in range(4):
        v = rng.normal(size=4) + 1j * rng.normal(size=4)
        initial[10 * k:10 * (k + 1), idx] = v / np.linalg.norm(v)
    rho = _prepared_rho(catalog, initial, which)
    parity = which[:3]
    theta = np.linspace(0, math.pi / 2 if parity == "phi" else math.pi, 17)
    sz = phase_reversal_sweep(catalog, which, theta, initial=initial, n_traj=len(initial), model=IDEAL_READOUT,
                              shots=10_000, seed=3, rwa_cutoff_mhz=IDEAL_GATES)
    fit = extract_offdiagonal(theta, sz, parity=parity)
    true = rho[0, 3] if parity == "phi" else rho[1, 2]
    err = np.sqrt(np.diag(fit.covariance))
    assert abs(fit.re - true.real) < 3 * err[0] + 2e-3
    assert abs(fit.im - true.imag) < 3 * err[1] + 2e-3
