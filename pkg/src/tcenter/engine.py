"""Pulse engine: propagates state batches through a pulse sequence.

States are kept in the eigenbasis of the static Hamiltonian, in the
interaction picture with respect to it, so free evolution is the identity and
only pulses, noise phases, optical pumping and spin flips change the state.
During a pulse the Hamiltonian is made time independent by a multi-level
rotating frame: every level reachable through a near-resonant transition of
the driven channel gets a photon number ``k`` and the frame removes
``k * f_drive`` from its energy. Terms far off resonance (beyond the RWA
cutoff) and counter-rotating terms are dropped. Noise acts only during
delays.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence as Seq

import numpy as np

from .noise import DephasingNoise, NoiseRealization
from .register import UP_E, ConfigurationError, TransitionCatalog, spin_operators
from .sequences import Delay, Laser, Pulse, ReadoutMarker, Ref, Sequence

RWA_CUTOFF_FACTOR = 50.0


@dataclass(frozen=True, eq=False)
class Propagator:
    """Rotating-frame propagator of one resolved pulse.

    ``g`` holds the frame energies ``E - k f`` so that the interaction-picture
    map for a pulse starting at ``t0`` is
    ``exp(2 pi i g t1) u_rot exp(-2 pi i g t0)``.
    """

    u_rot: np.ndarray
    g: np.ndarray
    duration: float
    included: tuple[tuple[int, int], ...]
    dropped: tuple[tuple[int, int], ...] = ()
    frame: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.included

    def interaction(self, t0: float) -> np.ndarray:
        t1 = t0 + self.duration
        return np.exp(2j * np.pi * self.g * t1)[:, None] * self.u_rot * np.exp(-2j * np.pi * self.g * t0)[None, :]

    def apply(self, states: np.ndarray, t0: float) -> np.ndarray:
        if self.empty or self.duration == 0:
            return states
        return states @ self.interaction(t0).T


def _assign_photons(n: int, edges: list[tuple[int, int]]):
    """Photon numbers per level; edges that contradict earlier (closer) ones are dropped."""
    k = [None] * n
    comp = list(range(n))
    kept, dropped = [], []
    for i, j in edges:
        if k[i] is None and k[j] is None:
            k[i], k[j] = 0, 1
            comp[j] = comp[i]
        elif k[j] is None:
            k[j] = k[i] + 1
            comp[j] = comp[i]
        elif k[i] is None:
            k[i] = k[j] - 1
            comp[i] = comp[j]
        elif comp[i] == comp[j]:
            if k[j] != k[i] + 1:
                dropped.append((i, j))
                continue
        else:
            old, delta = comp[j], k[i] + 1 - k[j]
            for m in range(n):
                if comp[m] == old:
                    comp[m] = comp[i]
                    k[m] += delta
        kept.append((i, j))
    return np.array([0 if x is None else x for x in k], dtype=float), kept, dropped


def pulse_propagator(catalog: TransitionCatalog, pulse: Pulse, rwa_cutoff_mhz: float | None = None) -> Propagator:
    """Build the propagator of a resolved pulse.

    Transitions of ``pulse.channel`` within ``rwa_cutoff_mhz`` of the drive
    frequency (default ``50 * rabi``) are kept; the coupling of transition
    ``l -> u`` is ``rabi * <u|D|l> / 2 * exp(-i phase)``.
    """
    if any(isinstance(v, Ref) for v in (pulse.freq_mhz, pulse.phase_rad, pulse.rabi_mhz, pulse.duration_us)):
        raise ConfigurationError("pulse has unresolved sweep references")
    energies = catalog.levels.energies
    n = len(energies)
    cutoff = RWA_CUTOFF_FACTOR * pulse.rabi_mhz if rwa_cutoff_mhz is None else rwa_cutoff_mhz
    if not cutoff > 0:
        raise ConfigurationError("RWA cutoff must be > 0")
    near = []
    for t in catalog.transitions:
        d = t.drive.get(pulse.channel, 0.0)
        det = abs(t.freq - pulse.freq_mhz)
        if abs(d) > 0 and det <= cutoff:
            near.append((det, t.i, t.j, d))
    near.sort(key=lambda x: x[0])
    k, kept, dropped = _assign_photons(n, [(i, j) for _, i, j, _ in near])
    frame = {pulse.channel: (float(pulse.freq_mhz), float(pulse.phase_rad))}
    if not kept:
        warnings.warn(f"no {pulse.channel} transition within {cutoff} MHz of {pulse.freq_mhz} MHz; pulse is identity",
                      stacklevel=2)
        return Propagator(np.eye(n, dtype=complex), np.zeros(n), float(pulse.duration_us), (), (), frame)
    g = energies - k * pulse.freq_mhz
    g = g - g.mean()
    h = np.diag(g).astype(complex)
    coupling = {(i, j): d for _, i, j, d in near}
    phase = np.exp(-1j * pulse.phase_rad)
    for i, j in kept:
        c = 0.5 * pulse.rabi_mhz * coupling[(i, j)] * phase
        h[j, i] += c
        h[i, j] += np.conj(c)
    w, v = np.linalg.eigh(h)
    u = (v * np.exp(-2j * np.pi * w * pulse.duration_us)) @ v.conj().T
    return Propagator(u, g, float(pulse.duration_us), tuple(kept), tuple(dropped), frame)


def pi_duration(transition, rabi_mhz: float, channel: str | None = None, angle: float = math.pi) -> float:
    """Pulse length rotating ``transition`` by ``angle`` at nominal rate ``rabi_mhz``."""
    d = abs(transition.drive[channel or transition.channel])
    return angle / (2 * math.pi * rabi_mhz * d)


# ---------------------------------------------------------------------------
# state helpers


def spin_z_diagonals(catalog: TransitionCatalog) -> dict[str, np.ndarray]:
    """``<i|S_z|i>`` for each spin in the eigenbasis, keyed by spin name."""
    v = catalog.levels.vectors
    n = catalog.levels.n_spins
    names = catalog.config.spin_names if catalog.config is not None else ("e",) + tuple(f"n{k}" for k in range(1, n))
    ops = spin_operators(n)
    return {name: np.real(np.einsum("ki,kl,li->i", v.conj(), ops[m][2], v)) for m, name in enumerate(names)}


def initial_states(catalog: TransitionCatalog, initial, n_traj: int, rng: np.random.Generator) -> np.ndarray:
    """Batch ``(n_traj, dim)`` from a label, a state vector, a batch or a population mapping."""
    levels = catalog.levels
    dim = len(levels)
    if isinstance(initial, str):
        psi = np.zeros(dim, complex)
        psi[levels.index(initial)] = 1
        return np.tile(psi, (n_traj, 1))
    if isinstance(initial, Mapping):
        labels = list(initial)
        p = np.array([initial[lab] for lab in labels], float)
        if np.any(p < 0) or not np.isclose(p.sum(), 1, atol=1e-9):
            raise ConfigurationError("initial populations must be non-negative and sum to 1")
        pick = rng.choice(len(labels), size=n_traj, p=p / p.sum())
        out = np.zeros((n_traj, dim), complex)
        out[np.arange(n_traj), [levels.index(labels[m]) for m in pick]] = 1
        return out
    arr = np.asarray(initial, dtype=complex)
    if arr.ndim == 1:
        arr = np.tile(arr, (n_traj, 1))
    if arr.shape[-1] != dim:
        raise ConfigurationError(f"initial state has dimension {arr.shape[-1]}, register has {dim}")
    norms = np.linalg.norm(arr, axis=1)
    if not np.allclose(norms, 1, atol=1e-9):
        raise ConfigurationError("initial state is not normalized")
    return arr.copy()


def to_product(catalog: TransitionCatalog, states: np.ndarray, t: float) -> np.ndarray:
    """Interaction-picture eigenbasis amplitudes -> lab-frame product-basis amplitudes."""
    lab = states * np.exp(-2j * np.pi * catalog.levels.energies * t)[None, :]
    return lab @ catalog.levels.vectors.T


def from_product(catalog: TransitionCatalog, prod: np.ndarray, t: float) -> np.ndarray:
    eig = prod @ catalog.levels.vectors.conj()
    return eig * np.exp(2j * np.pi * catalog.levels.energies * t)[None, :]


def electron_masks(n_spins: int) -> tuple[np.ndarray, np.ndarray]:
    """Product-basis masks of electron-up and electron-down states."""
    dim = 2 ** n_spins
    up = np.array([(i >> (n_spins - 1)) & 1 == 0 for i in range(dim)])
    return up, ~up


def flip_spin_product(prod: np.ndarray, k: int, n_spins: int, which: np.ndarray) -> np.ndarray:
    """Apply X on spin ``k`` to the trajectories selected by boolean ``which``."""
    if not np.any(which):
        return prod
    perm = np.arange(2 ** n_spins) ^ (1 << (n_spins - 1 - k))
    out = prod.copy()
    out[which] = prod[which][:, perm]
    return out


def optical_pump(catalog: TransitionCatalog, states: np.ndarray, t: float, transition: str,
                 rng: np.random.Generator, p_n_flip: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Stochastic optical cycle: measure the electron and reset it to the dark state.

    Laser ``C`` excites the ``↑`` electron (bright) and leaves it ``↓``; ``B``
    does the reverse. A trajectory that cycles flips its electron and, with
    probability ``p_n_flip``, one randomly chosen nucleus. Returns the new
    states and the boolean mask of trajectories that cycled.
    """
    n = catalog.levels.n_spins
    prod = to_product(catalog, states, t)
    up, down = electron_masks(n)
    bright, dark = (up, down) if transition == "C" else (down, up)
    p_bright = np.sum(np.abs(prod[:, bright]) ** 2, axis=1)
    jumped = rng.random(len(prod)) < p_bright
    out = prod.copy()
    out[jumped[:, None] & ~bright[None, :]] = 0
    out[~jumped[:, None] & bright[None, :]] = 0
    out = flip_spin_product(out, 0, n, jumped)
    if p_n_flip > 0 and n > 1:
        scramble = jumped & (rng.random(len(prod)) < p_n_flip)
        which_nuc = rng.integers(1, n, size=len(prod))
        for k in range(1, n):
            out = flip_spin_product(out, k, n, scramble & (which_nuc == k))
    norms = np.linalg.norm(out, axis=1)
    out /= np.where(norms > 0, norms, 1)[:, None]
    return from_product(catalog, out, t), jumped


# ---------------------------------------------------------------------------
# sequence runner


@dataclass
class RunResult:
    """States recorded at every readout marker, per sweep point.

    ``records[p][r]`` is the ``(n_traj, dim)`` state batch (interaction
    picture, eigenbasis) at readout ``r`` of sweep point ``p``.
    """

    catalog: TransitionCatalog
    params: list[dict]
    records: list[list[np.ndarray]]
    final: list[np.ndarray]
    times: list[float] = field(default_factory=list)
    dropped: set = field(default_factory=set)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.catalog.levels.labels

    def populations(self, read: int = -1) -> np.ndarray:
        """Trajectory-averaged level populations, shape ``(n_points, dim)``."""
        return np.array([np.mean(np.abs(r[read]) ** 2, axis=0) for r in self.records])

    def electron_up(self, read: int = -1) -> np.ndarray:
        return electron_up_probability(self.populations(read), self.labels)

    def density_matrices(self, read: int = -1) -> np.ndarray:
        """Trajectory-averaged density matrices, shape ``(n_points, dim, dim)``."""
        return np.array([np.einsum("ti,tj->ij", r[read], r[read].conj()) / len(r[read]) for r in self.records])


def electron_up_probability(pops: np.ndarray, labels: Seq[str]) -> np.ndarray:
    mask = np.array([_core(lab)[0] == UP_E for lab in labels])
    return np.asarray(pops)[..., mask].sum(axis=-1)


def nuclear_populations(pops: np.ndarray, labels: Seq[str]) -> dict[str, np.ndarray]:
    """Populations of each nuclear configuration, summed over the electron."""
    out: dict[str, np.ndarray] = {}
    pops = np.asarray(pops)
    for m, lab in enumerate(labels):
        key = _core(lab)[1:]
        out[key] = out.get(key, 0) + pops[..., m]
    return out


def _core(label: str) -> str:
    return label[6:-1] if label.startswith("mixed[") else label


def sequence_duration(items) -> float:
    return float(sum(it.duration_us for it in items if not isinstance(it, ReadoutMarker)))


def run_sequence(catalog: TransitionCatalog, sequence: Sequence, initial="↓⇓⇓", *,
                 noise: DephasingNoise | None = None, n_traj: int = 1, seed: int = 0,
                 rwa_cutoff_mhz: float | None = None, readout_model=None,
                 noise_dt_us: float | None = None) -> RunResult:
    """Run ``sequence`` at every sweep point.

    Laser items pump the electron stochastically; nuclear spins are scrambled
    during pumping with ``readout_model.p_n_flip_per_cycle`` (none without a
    model).

    Each sweep point draws its own noise realization and pumping randomness
    from a child seed of ``seed``, so results do not depend on the order in
    which points are evaluated.
    """
    if n_traj < 1:
        raise ConfigurationError("n_traj must be >= 1")
    p_n_flip = 0.0 if readout_model is None else readout_model.p_n_flip_per_cycle
    zdiag = spin_z_diagonals(catalog)
    cache: dict = {}
    dropped: set = set()
    records, finals, params = [], [], []
    for idx, point in enumerate(sequence.points()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        items = sequence.resolve(point)
        states = initial_states(catalog, initial, n_traj, rng)
        total = sequence_duration(items)
        real = None
        if noise is not None and not noise.is_silent:
            unknown = set(noise.spins) - set(zdiag)
            if unknown:
                raise ConfigurationError(f"noise on unknown spin(s): {', '.join(sorted(unknown))}")
            real = NoiseRealization(noise, n_traj, total, rng, noise_dt_us)
        t = 0.0
        reads = []
        for it in items:
            if isinstance(it, Pulse):
                key = (it.channel, it.freq_mhz, it.phase_rad, it.rabi_mhz, it.duration_us, rwa_cutoff_mhz)
                prop = cache.get(key)
                if prop is None:
                    prop = cache[key] = pulse_propagator(catalog, it, rwa_cutoff_mhz)
                dropped.update(prop.dropped)
                states = prop.apply(states, t)
                t += it.duration_us
            elif isinstance(it, Delay):
                states = _free_evolution(catalog, states, zdiag, real, it, t, noise, rng)
                t += it.duration_us
            elif isinstance(it, Laser):
                states, _ = optical_pump(catalog, states, t, it.transition, rng, p_n_flip)
                t += it.duration_us
            else:
                reads.append(states.copy())
        records.append(reads)
        finals.append(states)
        params.append(point)
    return RunResult(catalog, params, records, finals, dropped=dropped)


def _free_evolution(catalog, states, zdiag, real, delay: Delay, t0: float, noise, rng):
    t1 = t0 + delay.duration_us
    n_traj = len(states)
    cycles = np.zeros((n_traj, states.shape[1]))
    for name, det in delay.detuning_mhz:
        if name not in zdiag:
            raise ConfigurationError(f"detuning on unknown spin {name!r}")
        cycles += det * delay.duration_us * zdiag[name][None, :]
    if real is not None:
        for name in real.spins:
            cycles += real.phase(name, t0, t1)[:, None] * zdiag[name][None, :]
    if np.any(cycles):
        states = states * np.exp(-2j * np.pi * cycles)
    if noise is not None and noise.t1_ms and delay.duration_us > 0:
        n = catalog.levels.n_spins
        names = list(zdiag)
        prod = to_product(catalog, states, t1)
        for name, t1_ms in noise.t1_ms.items():
            p = 0.5 * (1 - math.exp(-delay.duration_us / (t1_ms * 1e3)))
            prod = flip_spin_product(prod, names.index(name), n, rng.random(n_traj) < p)
        states = from_product(catalog, prod, t1)
    return states
