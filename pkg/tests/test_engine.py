import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tcenter import RegisterConfig, catalog_for
from tcenter.engine import (
    RWA_CUTOFF_FACTOR,
    initial_states,
    optical_pump,
    pulse_propagator,
    run_sequence,
)
from tcenter.noise import DephasingNoise, QuasiStatic
from tcenter.register import ConfigurationError
from tcenter.sequences import (
    DEFAULT_NUCLEAR_RABI_MHZ,
    Delay,
    Laser,
    Pulse,
    ReadoutMarker,
    Ref,
    Sequence,
    experiment_for,
    make_experiment,
    rotation,
)

ESR = ("↓⇓⇓", "↑⇓⇓")
E_RABI = 1 / 0.18


def _population(catalog, state, label):
    return float(np.abs(state[catalog.levels.index(label)]) ** 2)


def _run_single(catalog, items, initial="↓⇓⇓", **kw):
    return run_sequence(catalog, Sequence(tuple(items) + (ReadoutMarker(),)), initial, **kw).final[0][0]


@given(detuning=st.floats(-3, 3), phase=st.floats(-7, 7), rabi=st.floats(0.1, 10), duration=st.floats(0, 2))
def test_pulse_propagators_are_unitary(catalog, detuning, phase, rabi, duration):
    t = catalog.find(*ESR)
    prop = pulse_propagator(catalog, Pulse("MW", t.freq + detuning, phase, rabi, duration))
    u = prop.interaction(0.37)
    assert np.allclose(u @ u.conj().T, np.eye(8), atol=1e-10)


def test_pi_pulse_on_esr(catalog):
    t = catalog.find(*ESR)
    state = _run_single(catalog, [rotation(t, math.pi, E_RABI)])
    assert t.abs_drive * 1 / (2 * E_RABI * t.abs_drive) == pytest.approx(0.09)
    assert _population(catalog, state, "↑⇓⇓") > 0.999


def test_back_to_back_half_pi_compose(catalog):
    t = catalog.find(*ESR)
    half = rotation(t, math.pi / 2, E_RABI, 0.4)
    a = _run_single(catalog, [half, half])
    b = _run_single(catalog, [rotation(t, math.pi, E_RABI, 0.4)])
    assert np.allclose(a, b, atol=1e-9)


@given(split=st.floats(0.05, 0.95), t0=st.floats(0, 50))
def test_phase_composition(catalog, split, t0):
    t = catalog.find(*ESR)
    total = 0.2
    p = lambda d: pulse_propagator(catalog, Pulse("MW", t.freq + 0.7, 0.3, E_RABI, d))
    whole = p(total).interaction(t0)
    parts = p(total - split * total).interaction(t0 + split * total) @ p(split * total).interaction(t0)
    assert np.allclose(whole, parts, atol=1e-9)


def test_norm_preserved_over_long_sequence(catalog):
    t = catalog.find(*ESR)
    block = (rotation(t, math.pi / 3, E_RABI, 0.2), Delay(0.013, (("e", 0.5),)))
    res = run_sequence(catalog, Sequence(block * 5000 + (ReadoutMarker(),)), "↓⇓⇓")
    assert np.linalg.norm(res.final[0][0]) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("start", ["↓⇓⇓", "↑⇓⇓"])
def test_xy8_is_self_inverse(catalog, start):
    t = catalog.find(*ESR)
    seq = experiment_for("xy8", catalog, ESR, E_RABI, [0.0])
    pulses = [it for it in seq.resolve({"tau": 0.0}) if isinstance(it, Pulse)][1:-1]
    rng = np.random.default_rng(3)
    psi = np.zeros(8, complex)
    a, b = rng.normal(size=2) + 1j * rng.normal(size=2)
    psi[catalog.levels.index(ESR[0])], psi[catalog.levels.index(ESR[1])] = a, b
    psi /= np.linalg.norm(psi)
    out = run_sequence(catalog, Sequence(tuple(pulses) + (ReadoutMarker(),)), psi, rwa_cutoff_mhz=1e-6)
    overlap = abs(np.vdot(psi, out.final[0][0]))
    assert overlap == pytest.approx(1.0, abs=1e-8)
    assert t.freq > 0


def test_rwa_cutoff_halving_changes_little(catalog):
    t = catalog.find(*ESR)
    seq = experiment_for("rabi", catalog, ESR, E_RABI, np.linspace(0, 0.3, 7))
    default = run_sequence(catalog, seq).populations()
    halved = run_sequence(catalog, seq, rwa_cutoff_mhz=RWA_CUTOFF_FACTOR * E_RABI / 2).populations()
    assert np.max(np.abs(default - halved)) < 1e-4
    assert t.kind == "electron_flipping_nuclear_conserving"


@given(detuning=st.floats(-3, 3), duration=st.floats(0, 1), rabi=st.floats(0.1, 5))
def test_two_level_oracle(detuning, duration, rabi):
    bare = catalog_for(RegisterConfig(0.26))
    t = bare.transitions[0]
    omega = rabi * t.abs_drive
    state = _run_single(bare, [Pulse("MW", t.freq + detuning, 0.0, rabi, duration)], "↓", rwa_cutoff_mhz=5.0)
    w = math.hypot(omega, detuning)
    expect = (omega / w) ** 2 * math.sin(math.pi * w * duration) ** 2
    assert _population(bare, state, "↑") == pytest.approx(expect, abs=1e-6)


def test_selectivity_matches_two_level_oracle(catalog):
    target = catalog.find("↓⇓⇓", "↓⇓⇑")
    spectator = catalog.find("↓⇑⇓", "↓⇑⇑")
    rabi = 1e-3 / target.abs_drive  # 1 kHz on the target
    pulse = rotation(target, math.pi, rabi)
    full = _population(catalog, _run_single(catalog, [pulse], "↓⇑⇓"), "↓⇑⇑")
    omega = rabi * spectator.abs_drive
    delta = spectator.freq - target.freq
    w = math.hypot(omega, delta)
    oracle = (omega / w) ** 2 * math.sin(math.pi * w * pulse.duration_us) ** 2
    assert full == pytest.approx(oracle, abs=1e-4)
    assert full == pytest.approx(0.027, abs=2e-3)


def test_default_nuclear_rabi_suppresses_spectator(catalog):
    target = catalog.find("↓⇓⇓", "↓⇓⇑")
    pulse = rotation(target, math.pi, DEFAULT_NUCLEAR_RABI_MHZ / target.abs_drive)
    assert _population(catalog, _run_single(catalog, [pulse], "↓⇑⇓"), "↓⇑⇑") < 1e-3
    assert _population(catalog, _run_single(catalog, [pulse], "↓⇓⇓"), "↓⇓⇑") > 0.999


def test_far_pulse_is_identity_with_warning(catalog):
    with pytest.warns(UserWarning, match="identity"):
        prop = pulse_propagator(catalog, Pulse("MW", 1.0, 0.0, 1.0, 1.0))
    assert prop.empty


def test_unresolved_ref_rejected(catalog):
    with pytest.raises(ConfigurationError):
        pulse_propagator(catalog, Pulse("MW", Ref("f"), 0.0, 1.0, 1.0))


def test_laser_pumps_electron(catalog):
    rng = np.random.default_rng(0)
    t = catalog.find(*ESR)
    states = initial_states(catalog, "↓⇓⇓", 200, rng)
    half = pulse_propagator(catalog, rotation(t, math.pi / 2, E_RABI))
    states = half.apply(states, 0.0)
    pumped, jumped = optical_pump(catalog, states, 1.0, "C", rng)
    assert 0.35 < jumped.mean() < 0.65
    down = [i for i, lab in enumerate(catalog.levels.labels) if lab.startswith("↓")]
    assert np.allclose(np.sum(np.abs(pumped[:, down]) ** 2, axis=1), 1.0)


def test_laser_nuclear_scrambling(catalog):
    class Model:
        p_n_flip_per_cycle = 1.0

    seq = Sequence((Laser("C"), ReadoutMarker()))
    res = run_sequence(catalog, seq, "↑⇓⇓", n_traj=400, seed=1, readout_model=Model())
    pops = dict(zip(res.labels, res.populations()[0]))
    # every trajectory cycles and exactly one nucleus flips; eigenstates are slightly tilted
    assert pops["↓⇑⇓"] + pops["↓⇓⇑"] == pytest.approx(1.0, abs=2e-3)
    assert 0.4 < pops["↓⇑⇓"] < 0.6


def test_mixed_initial_mapping(catalog):
    res = run_sequence(catalog, Sequence((ReadoutMarker(),)), {"↓⇓⇓": 0.25, "↓⇑⇑": 0.75}, n_traj=4000, seed=2)
    pops = dict(zip(res.labels, res.populations()[0]))
    assert pops["↓⇑⇑"] == pytest.approx(0.75, abs=0.03)


def test_bad_initial(catalog):
    with pytest.raises(ConfigurationError):
        run_sequence(catalog, Sequence((ReadoutMarker(),)), {"↓⇓⇓": 0.5})
    with pytest.raises(ConfigurationError):
        run_sequence(catalog, Sequence((ReadoutMarker(),)), np.ones(8))


def test_static_detuning_on_delay(catalog):
    seq = make_experiment("ramsey", freq_mhz=catalog.frequency(*ESR), rabi_mhz=E_RABI,
                          values=np.linspace(0, 1, 11), drive_element=catalog.find(*ESR).abs_drive)
    shifted = Sequence(tuple(Delay(it.duration_us, (("e", 2.0),)) if isinstance(it, Delay) else it
                             for it in seq.items), seq.sweep)
    p = run_sequence(catalog, shifted).electron_up()
    taus = np.linspace(0, 1, 11)
    assert np.allclose(p, 0.5 * (1 + np.cos(2 * np.pi * 2.0 * taus)), atol=2e-3)


def test_seeded_determinism(catalog):
    noise = DephasingNoise({"e": QuasiStatic(50.0)})
    seq = experiment_for("ramsey", catalog, ESR, E_RABI, np.linspace(0, 5, 6))
    a = run_sequence(catalog, seq, noise=noise, n_traj=50, seed=9).populations()
    b = run_sequence(catalog, seq, noise=noise, n_traj=50, seed=9).populations()
    c = run_sequence(catalog, seq, noise=noise, n_traj=50, seed=10).populations()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_silent_noise_gives_no_decay(catalog):
    seq = experiment_for("hahn_echo", catalog, ESR, E_RABI, np.linspace(0, 100, 5))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        quiet = run_sequence(catalog, seq, noise=DephasingNoise({"e": QuasiStatic(0.0)}), n_traj=3).populations()
    clean = run_sequence(catalog, seq).populations()
    assert np.allclose(quiet, clean, atol=1e-9)
