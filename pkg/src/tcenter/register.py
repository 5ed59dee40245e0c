"""Static spin Hamiltonian of the electron + nuclear register and its transitions.

Basis convention: one qubit per spin, ordered electron first and then the
nuclei in configuration order. Index 0 of each qubit is spin up, so the
product state ``|↑⇑⇑>`` is basis vector 0. All energies are in MHz.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .constants import (
    G_ELECTRON,
    GYRO_H_MHZ_PER_T,
    GYRO_SI29_MHZ_PER_T,
    KHZ,
    MU_B_OVER_H_MHZ_PER_T,
)

UP_E, DOWN_E = "↑", "↓"
UP_N, DOWN_N = "⇑", "⇓"
HYPERFINE_BOUND_MHZ = 200.0
DRIVE_THRESHOLD = 1e-6

KIND_NMR = "electron_conserving"
KIND_ESR = "electron_flipping_nuclear_conserving"
KIND_FLIP = "nuclear_flipping"

_ASCII = {"u": UP_E, "d": DOWN_E, "U": UP_N, "D": DOWN_N}


class ConfigurationError(ValueError):
    """Invalid register, sequence or noise configuration."""


@dataclass(frozen=True)
class SpinSpecies:
    """A spin-1/2 species.

    ``gyro`` is the signed gyromagnetic ratio in MHz/T for nuclei and the
    dimensionless g-factor for the electron.
    """

    label: str
    gyro: float
    spin: Fraction = Fraction(1, 2)

    def __post_init__(self):
        if self.label not in ("electron", "H", "Si29"):
            raise ConfigurationError(f"unknown species {self.label!r}")
        if self.spin != Fraction(1, 2):
            raise ConfigurationError("only spin-1/2 species are supported")
        if not np.isfinite(self.gyro):
            raise ConfigurationError(f"non-finite gyro for {self.label}")


ELECTRON = SpinSpecies("electron", G_ELECTRON)
HYDROGEN = SpinSpecies("H", GYRO_H_MHZ_PER_T)
SILICON29 = SpinSpecies("Si29", GYRO_SI29_MHZ_PER_T)


@dataclass(frozen=True, eq=False)
class HyperfineTensor:
    """3x3 hyperfine tensor in MHz, rows indexing the electron spin axis."""

    a: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        if a.shape != (3, 3):
            raise ConfigurationError(f"hyperfine tensor must be 3x3, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ConfigurationError("hyperfine tensor has non-finite entries")
        if np.any(np.abs(a) >= HYPERFINE_BOUND_MHZ):
            raise ConfigurationError(
                f"hyperfine entries must be below {HYPERFINE_BOUND_MHZ} MHz")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @classmethod
    def from_components(cls, a_zz, a_xz=0.0, a_yz=0.0, a_xx=0.0, a_yy=0.0, a_xy=0.0):
        """Symmetric tensor from its independent components."""
        return cls(np.array([[a_xx, a_xy, a_xz],
                             [a_xy, a_yy, a_yz],
                             [a_xz, a_yz, a_zz]], dtype=float))

    @property
    def a_zz(self) -> float:
        return float(self.a[2, 2])

    def __eq__(self, other):
        return isinstance(other, HyperfineTensor) and np.array_equal(self.a, other.a)

    def __hash__(self):
        return hash(self.a.tobytes())


@dataclass(frozen=True)
class Nucleus:
    species: SpinSpecies
    hyperfine: HyperfineTensor


@dataclass(frozen=True)
class RegisterConfig:
    """Physical parameters of one register."""

    b_field_t: float
    nuclei: tuple[Nucleus, ...] = ()
    electron: SpinSpecies = ELECTRON
    j_nn_khz: float = 2.0
    secular_mode: str = "secular"

    def __post_init__(self):
        object.__setattr__(self, "nuclei", tuple(self.nuclei))
        if not np.isfinite(self.b_field_t) or self.b_field_t < 0:
            raise ConfigurationError(f"b_field_t must be finite and >= 0, got {self.b_field_t}")
        if not np.isfinite(self.j_nn_khz):
            raise ConfigurationError("j_nn_khz must be finite")
        if self.electron.label != "electron":
            raise ConfigurationError("register needs exactly one electron")
        if any(n.species.label == "electron" for n in self.nuclei):
            raise ConfigurationError("register needs exactly one electron")
        if self.secular_mode not in ("secular", "full"):
            raise ConfigurationError(f"secular_mode must be 'secular' or 'full', got {self.secular_mode!r}")

    @property
    def n_spins(self) -> int:
        return 1 + len(self.nuclei)

    @property
    def dim(self) -> int:
        return 2 ** self.n_spins

    @property
    def spin_names(self) -> tuple[str, ...]:
        return ("e",) + tuple(n.species.label for n in self.nuclei)

    def nucleus_index(self, label: str) -> int:
        """Position of a nucleus within the spin ordering (electron is 0)."""
        for k, n in enumerate(self.nuclei):
            if n.species.label == label:
                return k + 1
        raise ConfigurationError(f"no nucleus {label!r} in register")

    def with_mode(self, mode: str) -> "RegisterConfig":
        return replace(self, secular_mode=mode)

    @property
    def electron_zeeman_mhz(self) -> float:
        return self.electron.gyro * MU_B_OVER_H_MHZ_PER_T * self.b_field_t


# ---------------------------------------------------------------------------
# operators and labels

_SX = np.array([[0, 0.5], [0.5, 0]], dtype=complex)
_SY = np.array([[0, -0.5j], [0.5j, 0]], dtype=complex)
_SZ = np.array([[0.5, 0], [0, -0.5]], dtype=complex)


def embed(op: np.ndarray, k: int, n_spins: int) -> np.ndarray:
    """Embed a single-spin operator acting on spin ``k`` into the full space."""
    out = np.array([[1.0 + 0j]])
    for m in range(n_spins):
        out = np.kron(out, op if m == k else np.eye(2))
    return out


def spin_operators(n_spins: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(Sx, Sy, Sz) for every spin in the product space."""
    return [tuple(embed(s, k, n_spins) for s in (_SX, _SY, _SZ)) for k in range(n_spins)]


def basis_label(index: int, n_spins: int) -> str:
    bits = [(index >> (n_spins - 1 - k)) & 1 for k in range(n_spins)]
    chars = [DOWN_E if bits[0] else UP_E]
    chars += [DOWN_N if b else UP_N for b in bits[1:]]
    return "".join(chars)


def basis_labels(n_spins: int) -> list[str]:
    return [basis_label(i, n_spins) for i in range(2 ** n_spins)]


def normalize_label(label: str) -> str:
    """Accept ASCII spellings (``dDU``) as well as arrows (``↓⇓⇑``)."""
    if label.startswith("mixed"):
        return label
    return "".join(_ASCII.get(ch, ch) for ch in label)


def label_index(label: str, n_spins: int) -> int:
    label = normalize_label(label)
    try:
        return basis_labels(n_spins).index(label)
    except ValueError:
        raise ConfigurationError(f"unknown state label {label!r}") from None


def flip_label(label: str, k: int) -> str:
    """Flip spin ``k`` of a product-state label."""
    label = normalize_label(label)
    swap = {UP_E: DOWN_E, DOWN_E: UP_E, UP_N: DOWN_N, DOWN_N: UP_N}
    return label[:k] + swap[label[k]] + label[k + 1:]


# ---------------------------------------------------------------------------
# Hamiltonian


def build_hamiltonian(config: RegisterConfig) -> np.ndarray:
    """Static Hamiltonian in MHz (energy / h).

    In ``secular`` mode only the ``S_z (A_zx I_x + A_zy I_y + A_zz I_z)``
    part of each hyperfine coupling is kept, so the result commutes with
    ``S_z``. ``full`` mode keeps every tensor component.
    """
    n = config.n_spins
    ops = spin_operators(n)
    h = config.electron_zeeman_mhz * ops[0][2]
    for k, nuc in enumerate(config.nuclei, start=1):
        h = h - nuc.species.gyro * config.b_field_t * ops[k][2]
        a = nuc.hyperfine.a
        rows = (2,) if config.secular_mode == "secular" else (0, 1, 2)
        for i in rows:
            for j in range(3):
                if a[i, j] != 0.0:
                    h = h + a[i, j] * ops[0][i] @ ops[k][j]
    if len(config.nuclei) >= 2 and config.j_nn_khz != 0.0:
        h = h + config.j_nn_khz * KHZ * ops[1][2] @ ops[2][2]
    if not np.all(np.isfinite(h)):
        raise ConfigurationError("Hamiltonian has non-finite entries")
    return h


@dataclass(frozen=True, eq=False)
class Levels:
    """Eigenlevels sorted by (energy, label).

    ``vectors[:, i]`` is the eigenvector of level ``i`` in the product basis,
    phased so that its dominant component is real and positive.
    """

    energies: np.ndarray
    vectors: np.ndarray
    labels: tuple[str, ...]
    purity: np.ndarray

    def __len__(self):
        return len(self.energies)

    def index(self, label: str) -> int:
        label = normalize_label(label)
        try:
            return self.labels.index(label)
        except ValueError:
            raise ConfigurationError(f"no level labelled {label!r}") from None

    @property
    def n_spins(self) -> int:
        return int(round(np.log2(len(self.energies))))


def diagonalize(h: np.ndarray, labels: Sequence[str] | None = None) -> Levels:
    """Diagonalize a Hermitian operator and label levels by dominant basis state.

    Levels whose largest basis weight does not exceed 1/2 get the label
    ``mixed[<dominant>]``.
    """
    h = np.asarray(h, dtype=complex)
    if not np.allclose(h, h.conj().T, atol=1e-12 * max(1.0, np.abs(h).max())):
        raise ConfigurationError("operator is not Hermitian")
    dim = h.shape[0]
    n_spins = int(round(np.log2(dim)))
    if labels is None:
        labels = basis_labels(n_spins)
    w, v = np.linalg.eigh(h)
    weights = np.abs(v) ** 2
    dom = np.argmax(weights, axis=0)
    purity = weights[dom, np.arange(dim)]
    # fix the arbitrary eigenvector phase
    ph = v[dom, np.arange(dim)]
    v = v * (np.abs(ph) / ph)[None, :]
    names = [labels[d] if p > 0.5 else f"mixed[{labels[d]}]" for d, p in zip(dom, purity)]
    order = sorted(range(dim), key=lambda i: (w[i], names[i]))
    return Levels(energies=w[order].copy(), vectors=v[:, order].copy(),
                  labels=tuple(names[i] for i in order), purity=purity[order].copy())


# ---------------------------------------------------------------------------
# transitions


def default_drive_axes(config: RegisterConfig) -> dict[str, np.ndarray]:
    """MW drives ``2 S_x`` of the electron; RF drives ``2 I_x`` of every nucleus."""
    ops = spin_operators(config.n_spins)
    rf = sum((2 * ops[k][0] for k in range(1, config.n_spins)),
             np.zeros((config.dim, config.dim), dtype=complex))
    return {"MW": 2 * ops[0][0], "RF": rf}


@dataclass(frozen=True)
class Transition:
    """A driven transition from ``lower`` to ``upper`` (``freq`` >= 0).

    ``drive[ch]`` is ``<upper| D_ch |lower>`` for drive channel ``ch``.
    """

    lower: str
    upper: str
    i: int
    j: int
    freq: float
    drive: Mapping[str, complex]
    kind: str

    def reversed(self) -> "Transition":
        return Transition(self.upper, self.lower, self.j, self.i, self.freq,
                          {k: complex(np.conj(v)) for k, v in self.drive.items()}, self.kind)

    @property
    def channel(self) -> str:
        """The channel that naturally drives this transition."""
        return "RF" if self.kind == KIND_NMR else "MW"

    @property
    def abs_drive(self) -> float:
        return abs(self.drive.get(self.channel, 0.0))


def _core(label: str) -> str:
    return label[6:-1] if label.startswith("mixed[") else label


def classify(lower: str, upper: str) -> str:
    a, b = _core(lower), _core(upper)
    e_flip = a[0] != b[0]
    n_flip = a[1:] != b[1:]
    if e_flip and n_flip:
        return KIND_FLIP
    if e_flip:
        return KIND_ESR
    return KIND_NMR


@dataclass(frozen=True, eq=False)
class TransitionCatalog:
    levels: Levels
    transitions: tuple[Transition, ...]
    drive_axes: Mapping[str, np.ndarray] = field(default_factory=dict)
    config: RegisterConfig | None = None

    def find(self, a: str, b: str) -> Transition:
        """Transition between two labelled levels, oriented ``a -> b``."""
        a, b = normalize_label(a), normalize_label(b)
        for t in self.transitions:
            if (t.lower, t.upper) == (a, b):
                return t
            if (t.lower, t.upper) == (b, a):
                return t.reversed()
        raise ConfigurationError(f"no catalogued transition {a} -> {b}")

    def has(self, a: str, b: str) -> bool:
        try:
            self.find(a, b)
            return True
        except ConfigurationError:
            return False

    def frequency(self, a: str, b: str) -> float:
        return self.find(a, b).freq

    def of_kind(self, kind: str) -> list[Transition]:
        return [t for t in self.transitions if t.kind == kind]

    def esr_lines(self) -> list[Transition]:
        """Nuclear-spin-conserving ESR transitions sorted by frequency."""
        return sorted(self.of_kind(KIND_ESR), key=lambda t: t.freq)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["from", "to", "freq_mhz", "abs_drive", "kind"])
        for t in self.transitions:
            w.writerow([t.lower, t.upper, repr(float(t.freq)), repr(float(t.abs_drive)), t.kind])
        return buf.getvalue()

    def levels_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "energy_mhz", "purity"])
        for lab, e, p in zip(self.levels.labels, self.levels.energies, self.levels.purity):
            w.writerow([lab, repr(float(e)), repr(float(p))])
        return buf.getvalue()


def transition_catalog(levels: Levels, drive_axes: Mapping[str, np.ndarray],
                       threshold: float = DRIVE_THRESHOLD,
                       config: RegisterConfig | None = None) -> TransitionCatalog:
    """List every level pair connected by any drive channel above ``threshold``."""
    v = levels.vectors
    elements = {ch: v.conj().T @ op @ v for ch, op in drive_axes.items()}
    out = []
    for i, j in itertools.combinations(range(len(levels)), 2):
        # i < j, so levels[j] is the upper level
        drive = {ch: complex(m[j, i]) for ch, m in elements.items()}
        if max(abs(d) for d in drive.values()) <= threshold:
            continue
        out.append(Transition(levels.labels[i], levels.labels[j], i, j,
                              float(levels.energies[j] - levels.energies[i]), drive,
                              classify(levels.labels[i], levels.labels[j])))
    return TransitionCatalog(levels, tuple(out), dict(drive_axes), config)


def catalog_for(config: RegisterConfig) -> TransitionCatalog:
    """Hamiltonian -> levels -> catalog with the default drive axes."""
    levels = diagonalize(build_hamiltonian(config))
    return transition_catalog(levels, default_drive_axes(config), config=config)


# ---------------------------------------------------------------------------
# parameter extraction


def extract_spin_params(f_down_mhz: float, f_up_mhz: float) -> tuple[float, float]:
    """Nuclear Zeeman frequency and longitudinal hyperfine from the two NMR lines."""
    if f_down_mhz < 0 or f_up_mhz < 0:
        raise ValueError("NMR frequencies must be non-negative")
    return (f_up_mhz + f_down_mhz) / 2, (f_up_mhz - f_down_mhz) / 2


def gyro_from_zeeman(zeeman_mhz: float, b_field_t: float) -> float:
    """Gyromagnetic ratio in MHz/T."""
    return zeeman_mhz / b_field_t


def field_from_esr(f_e_ghz: float, g_e: float = G_ELECTRON) -> float:
    """Magnetic field (T) from the bare electron spin resonance frequency."""
    if f_e_ghz < 0 or g_e <= 0:
        raise ValueError("need f_e >= 0 and g_e > 0")
    return f_e_ghz * 1e3 / (g_e * MU_B_OVER_H_MHZ_PER_T)


# ---------------------------------------------------------------------------
# spectra


def lorentzian(f, f0, fwhm):
    hw = fwhm / 2
    return hw ** 2 / ((f - f0) ** 2 + hw ** 2)


def synthesize_spectrum(catalog: TransitionCatalog, linewidth_mhz: float,
                        populations: Mapping[str, float] | Sequence[float] | None = None,
                        freqs: Iterable[float] | None = None, channel: str = "MW",
                        kinds: Sequence[str] = (KIND_ESR, KIND_FLIP)) -> list[tuple[float, float]]:
    """Sum of unit-height Lorentzians weighted by ``|drive|^2`` and source population.

    The source of each line is its lower level. ``populations`` may be a
    mapping from labels or an array ordered like ``catalog.levels``; the
    default is equal population everywhere.
    """
    if linewidth_mhz <= 0:
        raise ValueError("linewidth must be positive")
    labels = catalog.levels.labels
    if populations is None:
        pops = np.full(len(labels), 1.0 / len(labels))
    elif isinstance(populations, Mapping):
        pops = np.zeros(len(labels))
        for lab, p in populations.items():
            pops[catalog.levels.index(lab)] = p
    else:
        pops = np.asarray(populations, dtype=float)
    lines = [(t.freq, abs(t.drive.get(channel, 0.0)) ** 2 * pops[t.i])
             for t in catalog.transitions if t.kind in kinds]
    lines = [(f, w) for f, w in lines if w > 0]
    if freqs is None:
        if not lines:
            return []
        fs = [f for f, _ in lines]
        lo, hi = min(fs) - 5 * linewidth_mhz, max(fs) + 5 * linewidth_mhz
        step = min(linewidth_mhz / 20, (hi - lo) / 200)
        freqs = np.arange(lo, hi + step, step)
    freqs = np.asarray(list(freqs), dtype=float)
    spec = np.zeros_like(freqs)
    for f0, w in lines:
        spec += w * lorentzian(freqs, f0, linewidth_mhz)
    return list(zip(freqs.tolist(), spec.tolist()))


def spectrum_peaks(spectrum: Sequence[tuple[float, float]], rel_prominence: float = 0.05) -> list[float]:
    """Peak positions with prominence above a fraction of the tallest peak."""
    from scipy.signal import find_peaks

    f = np.array([p[0] for p in spectrum])
    y = np.array([p[1] for p in spectrum])
    if len(y) == 0:
        return []
    idx, _ = find_peaks(y, prominence=rel_prominence * y.max())
    return f[idx].tolist()
