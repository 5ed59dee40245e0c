"""Repetitive nuclear-spin readout through the electron and population estimation.

One readout cycle maps a chosen nuclear configuration onto the electron with
a conditional pi pulse, then excites the electron optically. While the
electron is bright it emits Poisson-distributed photons. An electron flip
during excitation truncates the emission at a uniformly random fraction of
the cycle, and with probability ``p_n_flip_per_cycle`` the optical cycle
flips a nucleus, so the configuration stops being read as bright. Background
counts are Poisson in every cycle.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .register import ConfigurationError, DOWN_N, UP_N

#: estimate order
NUCLEAR_STATES = (UP_N + UP_N, UP_N + DOWN_N, DOWN_N + UP_N, DOWN_N + DOWN_N)
#: density-matrix row order used by the tomography module
MATRIX_ORDER = (DOWN_N + DOWN_N, DOWN_N + UP_N, UP_N + DOWN_N, UP_N + UP_N)


class EstimationError(ValueError):
    """Population estimation is impossible with the given data."""


@dataclass(frozen=True)
class ReadoutModel:
    """Optical readout parameters. Defaults are illustrative, not measured."""

    photons_per_cycle: float = 0.5
    p_e_flip_per_cycle: float = 0.02
    p_n_flip_per_cycle: float = 0.01
    background_per_cycle: float = 0.01
    n_repetitions: int = 2

    def __post_init__(self):
        if not self.photons_per_cycle >= 0 or not self.background_per_cycle >= 0:
            raise ConfigurationError("photon rates must be >= 0")
        for name in ("p_e_flip_per_cycle", "p_n_flip_per_cycle"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.n_repetitions < 1:
            raise ConfigurationError("n_repetitions must be >= 1")


IDEAL_READOUT = ReadoutModel(photons_per_cycle=1.0, p_e_flip_per_cycle=0.0, p_n_flip_per_cycle=0.0,
                             background_per_cycle=0.0)


@dataclass(frozen=True)
class ReadoutRecord:
    shot: int
    counts: np.ndarray
    state: str


@dataclass(frozen=True, eq=False)
class ReadoutBatch:
    """Per-cycle counts of many shots, ``counts[shot, cycle]``.

    ``state`` is the nuclear configuration the readout was conditioned on
    (``None`` for a background reference).
    """

    counts: np.ndarray
    state: str | None

    def __len__(self):
        return self.counts.shape[0]

    def __iter__(self) -> Iterator[ReadoutRecord]:
        for k, row in enumerate(self.counts):
            yield ReadoutRecord(k, row, self.state or "background")

    def pl(self, n_repetitions: int) -> np.ndarray:
        """Counts summed over the first ``n_repetitions`` cycles, per shot."""
        return self.counts[:, :n_repetitions].sum(axis=1)


def nuclear_distribution(state) -> dict[str, float]:
    """Nuclear-configuration populations from a mapping or a 4x4 density matrix.

    Mappings may use nuclear (``⇑⇓``) or full register (``↓⇑⇓``) labels;
    full labels are summed over the electron. Matrices use the row order
    ``⇓⇓, ⇓⇑, ⇑⇓, ⇑⇑``.
    """
    out = dict.fromkeys(NUCLEAR_STATES, 0.0)
    if isinstance(state, Mapping):
        for label, p in state.items():
            core = label[6:-1] if label.startswith("mixed[") else label
            key = core[-2:]
            if key not in out:
                raise ConfigurationError(f"unknown nuclear state {label!r}")
            out[key] += float(p)
    else:
        rho = np.asarray(state)
        if rho.shape != (4, 4):
            raise ConfigurationError("density matrix must be 4x4 in the order ⇓⇓, ⇓⇑, ⇑⇓, ⇑⇑")
        if not np.allclose(rho, rho.conj().T, atol=1e-9):
            raise ConfigurationError("density matrix is not Hermitian")
        for k, label in enumerate(MATRIX_ORDER):
            out[label] = float(rho[k, k].real)
    total = sum(out.values())
    if any(p < -1e-9 for p in out.values()) or not math.isclose(total, 1.0, abs_tol=1e-6):
        raise ConfigurationError("populations must be non-negative and sum to 1")
    return {k: max(v, 0.0) / total for k, v in out.items()}


def simulate_readout(state, target: str | None, model: ReadoutModel, n_shots: int, seed: int = 0,
                     n_cycles: int | None = None) -> ReadoutBatch:
    """Sample ``n_shots`` repetitive readouts conditioned on ``target``.

    ``target=None`` gives the pulse-free background reference.
    """
    if n_shots < 1:
        raise ConfigurationError("n_shots must be >= 1")
    n_cycles = model.n_repetitions if n_cycles is None else n_cycles
    rng = np.random.default_rng(seed)
    pops = nuclear_distribution(state)
    labels = list(NUCLEAR_STATES)
    drawn = rng.choice(4, size=n_shots, p=np.array([pops[s] for s in labels]))
    bright = drawn == labels.index(target) if target is not None else np.zeros(n_shots, bool)
    counts = np.empty((n_shots, n_cycles), dtype=np.int64)
    for c in range(n_cycles):
        truncated = rng.random(n_shots) < model.p_e_flip_per_cycle
        fraction = np.where(truncated, rng.random(n_shots), 1.0)
        mean = model.photons_per_cycle * fraction * bright
        counts[:, c] = rng.poisson(mean) + rng.poisson(model.background_per_cycle, n_shots)
        bright = bright & ~(rng.random(n_shots) < model.p_n_flip_per_cycle)
    return ReadoutBatch(counts, target)


def expected_counts(state, target: str | None, model: ReadoutModel, n_cycles: int | None = None) -> np.ndarray:
    """Mean counts per cycle: ``bg + eta (1 - p_e/2) (1 - p_n)^(N-1) p_target``."""
    n_cycles = model.n_repetitions if n_cycles is None else n_cycles
    p = 0.0 if target is None else nuclear_distribution(state)[target]
    n = np.arange(n_cycles)
    signal = model.photons_per_cycle * (1 - model.p_e_flip_per_cycle / 2) * (1 - model.p_n_flip_per_cycle) ** n
    return model.background_per_cycle + signal * p


@dataclass(frozen=True)
class PopulationEstimate:
    """Normalized nuclear populations in the order ⇑⇑, ⇑⇓, ⇓⇑, ⇓⇓."""

    populations: dict[str, float]
    stderr: dict[str, float] = field(default_factory=dict)
    clamped: bool = False

    def __iter__(self):
        return iter(self.populations[s] for s in NUCLEAR_STATES)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return tuple(self)

    def matrix_order(self) -> tuple[float, float, float, float]:
        """Populations as ``(p1, p2, p3, p4)`` for ``⇓⇓, ⇓⇑, ⇑⇓, ⇑⇑``."""
        return tuple(self.populations[s] for s in MATRIX_ORDER)


def populations_from_pl(pl: Mapping[str, float], background: float = 0.0,
                        pl_stderr: Mapping[str, float] | None = None) -> PopulationEstimate:
    """Background-subtract and normalize photoluminescence per nuclear state."""
    missing = [s for s in NUCLEAR_STATES if s not in pl]
    if missing:
        raise EstimationError(f"missing readout for {', '.join(missing)}")
    raw = {s: pl[s] - background for s in NUCLEAR_STATES}
    clamped = any(v < 0 for v in raw.values())
    sub = {s: max(v, 0.0) for s, v in raw.items()}
    total = sum(sub.values())
    if not total > 0:
        raise EstimationError("all background-subtracted signals are zero")
    pops = {s: v / total for s, v in sub.items()}
    err = {}
    if pl_stderr is not None:
        for s in NUCLEAR_STATES:
            # first-order propagation through the normalization
            grad = {t: ((1 if t == s else 0) - pops[s]) / total for t in NUCLEAR_STATES}
            err[s] = math.sqrt(sum((grad[t] * pl_stderr[t]) ** 2 for t in NUCLEAR_STATES))
    return PopulationEstimate(pops, err, clamped)


def estimate_populations(records: Mapping[str, ReadoutBatch], background: ReadoutBatch | None = None,
                         n_repetitions: int = 2) -> PopulationEstimate:
    """Population estimate from the four conditioned readouts and a background reference."""
    pl, err = {}, {}
    for s in NUCLEAR_STATES:
        if s not in records:
            raise EstimationError(f"missing readout for {s}")
        x = records[s].pl(n_repetitions)
        pl[s] = float(np.mean(x))
        err[s] = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    bg = float(np.mean(background.pl(n_repetitions))) if background is not None else 0.0
    return populations_from_pl(pl, bg, err)


def read_populations(state, model: ReadoutModel, shots: int | None = None, seed: int = 0) -> PopulationEstimate:
    """Full readout of a nuclear state: four conditioned readouts plus background.

    ``shots=None`` uses expected counts instead of sampling.
    """
    n = model.n_repetitions
    if shots is None:
        pl = {s: float(expected_counts(state, s, model, n).sum()) for s in NUCLEAR_STATES}
        return populations_from_pl(pl, float(expected_counts(state, None, model, n).sum()))
    ss = np.random.SeedSequence(seed).spawn(5)
    records = {s: simulate_readout(state, s, model, shots, ss[k], n) for k, s in enumerate(NUCLEAR_STATES)}
    background = simulate_readout(state, None, model, shots, ss[4], n)
    return estimate_populations(records, background, n)


def nuclear_expectation(populations) -> float:
    """``<sigma_z>`` of Si29: ``(p⇑⇑ + p⇑⇓) - (p⇓⇑ + p⇓⇓)``, clipped to [-1, 1].

    Accepts a :class:`PopulationEstimate`, a label mapping or a tuple in the
    order ⇑⇑, ⇑⇓, ⇓⇑, ⇓⇓.
    """
    if isinstance(populations, PopulationEstimate):
        populations = populations.populations
    if isinstance(populations, Mapping):
        p = [populations[s] for s in NUCLEAR_STATES]
    else:
        p = list(populations)
    return float(np.clip(p[0] + p[1] - p[2] - p[3], -1.0, 1.0))


def records_csv(batches) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shot", "cycle", "counts", "state"])
    for batch in batches:
        label = batch.state or "background"
        for shot, row in enumerate(batch.counts):
            for cycle, c in enumerate(row, start=1):
                w.writerow([shot, cycle, int(c), label])
    return buf.getvalue()


def histogram_csv(batch: ReadoutBatch, n_cycles: int | None = None) -> str:
    """Relative frequency of total counts over the first ``n_cycles`` cycles."""
    totals = batch.pl(n_cycles or batch.counts.shape[1])
    bins = np.bincount(totals)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["counts_bin", "frequency"])
    for k, n in enumerate(bins):
        w.writerow([k, repr(float(n / len(totals)))])
    return buf.getvalue()
