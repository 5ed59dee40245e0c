import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tcenter.constants import G_ELECTRON, GYRO_H_MHZ_PER_T as GYRO_H, MU_B_OVER_H_MHZ_PER_T
from tcenter.register import (
    HYDROGEN,
    SILICON29,
    ConfigurationError,
    HyperfineTensor,
    Nucleus,
    RegisterConfig,
    build_hamiltonian,
    catalog_for,
    default_drive_axes,
    diagonalize,
    extract_spin_params,
    field_from_esr,
    flip_label,
    gyro_from_zeeman,
    normalize_label,
    spectrum_peaks,
    spin_operators,
    synthesize_spectrum,
    transition_catalog,
)


def test_h_nmr_lines_of_preset(catalog):
    assert catalog.frequency("↓⇓⇓", "↓⇓⇑") == pytest.approx(10.005, abs=1e-3)
    assert catalog.frequency("↑⇓⇓", "↑⇓⇑") == pytest.approx(12.141, abs=1e-3)


def test_conditional_shift_is_j(catalog, config):
    lo = catalog.frequency("↓⇓⇓", "↓⇓⇑")
    hi = catalog.frequency("↓⇑⇓", "↓⇑⇑")
    assert abs(hi - lo) == pytest.approx(abs(config.j_nn_khz) * 1e-3, rel=1e-3)


def test_extract_spin_params():
    zeeman, a_par = extract_spin_params(10.005, 12.141)
    assert zeeman == pytest.approx(11.073, abs=1e-9)
    assert a_par == pytest.approx(1.068, abs=1e-9)


def test_field_and_gyro():
    b = field_from_esr(7.3, 2.005)
    assert b == pytest.approx(0.2601, abs=1e-4)
    gyro = gyro_from_zeeman(11.073, b)
    assert 42.4 <= gyro <= 42.7


def test_levels_group_by_electron_manifold(catalog):
    labels = catalog.levels.labels
    assert len(labels) == 8
    up = [lab for lab in labels if lab[0] == "↑"]
    assert len(up) == 4
    # electron Zeeman dominates: the four ↑ levels lie above the four ↓ levels
    e = dict(zip(labels, catalog.levels.energies))
    assert min(e[lab] for lab in up) > max(e[lab] for lab in labels if lab[0] == "↓")


@pytest.mark.parametrize("mode", ["secular", "full"])
def test_hamiltonian_hermitian_and_traceless(config, mode):
    h = build_hamiltonian(config.with_mode(mode))
    assert np.allclose(h, h.conj().T, atol=1e-12)
    assert abs(np.trace(h)) < 1e-9


def test_secular_commutes_with_sz(config):
    h = build_hamiltonian(config)
    sz = spin_operators(3)[0][2]
    assert np.linalg.norm(h @ sz - sz @ h) < 1e-10


def test_full_mode_shifts_below_1khz(config):
    sec = catalog_for(config)
    full = catalog_for(config.with_mode("full"))
    for t in sec.of_kind("electron_conserving"):
        assert abs(full.frequency(t.lower, t.upper) - t.freq) < 1e-3


def test_full_mode_nuclear_flipping_lines_are_weak_and_near_esr(config):
    cfg = config.with_mode("full")
    levels = diagonalize(build_hamiltonian(cfg))
    cat = transition_catalog(levels, default_drive_axes(cfg), threshold=1e-12)
    esr = cat.esr_lines()
    strongest = max(t.abs_drive for t in esr)
    flips = cat.of_kind("nuclear_flipping")
    assert flips
    for t in flips:
        assert t.abs_drive < 0.1 * strongest
        assert min(abs(t.freq - e.freq) for e in esr) < 20.0


@given(b=st.floats(0.05, 1.0), a_zz=st.floats(-80, 80))
def test_two_spin_eigenvalues_match_closed_form(b, a_zz):
    cfg = RegisterConfig(b, (Nucleus(HYDROGEN, HyperfineTensor.from_components(a_zz)),))
    energies = np.sort(np.linalg.eigvalsh(build_hamiltonian(cfg)))
    fe = G_ELECTRON * MU_B_OVER_H_MHZ_PER_T * b
    nu = GYRO_H * b
    expect = sorted(ms * fe - nu * mi + a_zz * ms * mi for ms in (0.5, -0.5) for mi in (0.5, -0.5))
    assert np.allclose(energies, expect, atol=1e-9)


def test_pure_zeeman_single_esr_line():
    cfg = RegisterConfig(0.26, (Nucleus(HYDROGEN, HyperfineTensor.from_components(0.0)),))
    cat = catalog_for(cfg)
    freqs = {round(t.freq, 9) for t in cat.esr_lines()}
    assert len(freqs) == 1
    assert not cat.of_kind("nuclear_flipping")


def test_nucleus_free_register_has_one_esr_line():
    cat = catalog_for(RegisterConfig(0.26))
    assert len(cat.transitions) == 1


def test_four_conserving_esr_lines(catalog):
    assert len(catalog.esr_lines()) == 4


def test_catalog_csv_schema(catalog):
    lines = catalog.to_csv().splitlines()
    assert lines[0] == "from,to,freq_mhz,abs_drive,kind"
    assert len(lines) == 1 + len(catalog.transitions)


def test_find_reversed_conjugates_drive(catalog):
    t = catalog.find("↓⇓⇓", "↑⇓⇓")
    r = catalog.find("↑⇓⇓", "↓⇓⇓")
    assert (r.lower, r.upper) == (t.upper, t.lower)
    assert r.freq == t.freq
    assert r.drive["MW"] == pytest.approx(np.conj(t.drive["MW"]))


def test_unknown_transition_raises(catalog):
    with pytest.raises(ConfigurationError):
        catalog.find("↓⇓⇓", "↑⇑⇑")


def test_labels():
    assert normalize_label("dDU") == "↓⇓⇑"
    assert flip_label("↓⇓⇑", 0) == "↑⇓⇑"
    assert flip_label("↓⇓⇑", 2) == "↓⇓⇓"


def test_strong_mixing_labelled_mixed():
    # both nuclei quantized along x: every eigenvector spreads over four basis states
    tilted = HyperfineTensor.from_components(1.0, a_xz=50.0)
    cfg = RegisterConfig(1e-4, (Nucleus(SILICON29, tilted), Nucleus(HYDROGEN, tilted)))
    labels = catalog_for(cfg).levels.labels
    assert any(lab.startswith("mixed") for lab in labels)


@pytest.mark.parametrize("kwargs", [
    {"b_field_t": -1.0},
    {"b_field_t": math.nan},
    {"b_field_t": 0.2, "secular_mode": "bogus"},
    {"b_field_t": 0.2, "j_nn_khz": math.inf},
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigurationError):
        RegisterConfig(**kwargs)


def test_hyperfine_bound():
    with pytest.raises(ConfigurationError):
        HyperfineTensor.from_components(250.0)


def test_spectrum_peaks_at_esr_lines(catalog):
    spec = synthesize_spectrum(catalog, 0.05, kinds=("electron_flipping_nuclear_conserving",))
    peaks = spectrum_peaks(spec)
    esr = sorted(t.freq for t in catalog.esr_lines())
    assert len(peaks) == 4
    assert np.allclose(sorted(peaks), esr, atol=0.01)
