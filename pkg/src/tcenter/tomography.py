"""Phase-reversal tomography of two-nuclear-spin Bell states.

Density matrices use the row order ``⇓⇓, ⇓⇑, ⇑⇓, ⇑⇑`` (Si29 first) with
populations ``p1..p4`` and upper-triangle entries::

    p1  a   b   c
        p2  d   e
            p3  f
                p4

Reversing the two preparation gates with azimuths ``phi1`` (Si29 gate) and
``phi2`` (H gate) maps coherences onto the Si29 polarization. For the even
states (Phi) the signal is
``(p3 - p2) - 2 Re(c) cos(phi1 + phi2) + 2 Im(c) sin(phi1 + phi2)``; for the
odd states (Psi), with the H gate conditioned on Si29 ⇑, it is
``(p4 - p1) + 2 Re(d) cos(phi2 - phi1) + 2 Im(d) sin(phi2 - phi1)``. The odd
case is derived here by the same gate algebra rather than quoted. With
``phi1 = theta, phi2 = 3 theta`` the even signal oscillates as ``4 theta``
and the odd one as ``2 theta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import run_sequence
from .fitting import FitError, fit_gaussian_fringe
from .readout import IDEAL_READOUT, MATRIX_ORDER, ReadoutModel, nuclear_expectation, read_populations
from .register import UP_N, TransitionCatalog
from .sequences import DEFAULT_NUCLEAR_RABI_MHZ, Ref, Sweep, bell_name, bell_sequence

ENTRY_POSITIONS = {"a": (0, 1), "b": (0, 2), "c": (0, 3), "d": (1, 2), "e": (1, 3), "f": (2, 3)}
BASIS = tuple(MATRIX_ORDER)
IDEAL_STATES = {
    "phi+": np.array([1, 0, 0, 1]) / math.sqrt(2),
    "phi-": np.array([-1, 0, 0, 1]) / math.sqrt(2),
    "psi+": np.array([0, 1, 1, 0]) / math.sqrt(2),
    "psi-": np.array([0, -1, 1, 0]) / math.sqrt(2),
}


@dataclass(frozen=True)
class PartialDensityMatrix:
    """Populations plus whichever off-diagonal entries were measured."""

    populations: tuple[float, float, float, float]
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        p = tuple(float(x) for x in self.populations)
        if len(p) != 4:
            raise ValueError("need four populations")
        object.__setattr__(self, "populations", p)
        if not math.isclose(sum(p), 1.0, abs_tol=1e-6):
            raise ValueError(f"populations sum to {sum(p)}, not 1")
        entries = {}
        for name, v in self.entries.items():
            if name not in ENTRY_POSITIONS:
                raise ValueError(f"unknown entry {name!r}")
            i, j = ENTRY_POSITIONS[name]
            v = complex(v)
            if abs(v) ** 2 > p[i] * p[j] + 1e-6:
                raise ValueError(f"|{name}|^2 = {abs(v) ** 2:.6g} exceeds p{i + 1} p{j + 1} = {p[i] * p[j]:.6g}")
            entries[name] = v
        object.__setattr__(self, "entries", entries)

    @property
    def unknown(self) -> list[str]:
        return [k for k in ENTRY_POSITIONS if k not in self.entries]

    @classmethod
    def from_density_matrix(cls, rho, keep=("a", "b", "c", "d", "e", "f")) -> "PartialDensityMatrix":
        rho = np.asarray(rho)
        return cls(tuple(np.real(np.diag(rho))), {k: rho[ENTRY_POSITIONS[k]] for k in keep})

    def to_dict(self) -> dict:
        return {"basis": list(BASIS),
                "populations": dict(zip(("p1", "p2", "p3", "p4"), self.populations)),
                "entries": {k: [v.real, v.imag] for k, v in self.entries.items()},
                "unknown": self.unknown}


def fidelity(matrix: PartialDensityMatrix, ideal: str) -> float:
    """Overlap ``Tr(rho rho_ideal)`` with a Bell state.

    Phi-: ``(p1 + p4)/2 - Re c``; Phi+: ``+ Re c``; Psi-: ``(p2 + p3)/2 - Re d``;
    Psi+: ``+ Re d``.
    """
    which = bell_name(ideal)
    p1, p2, p3, p4 = matrix.populations
    key = "c" if which.startswith("phi") else "d"
    if key not in matrix.entries:
        raise ValueError(f"fidelity to {which} needs off-diagonal entry {key!r}")
    sign = 1.0 if which.endswith("+") else -1.0
    base = 0.5 * (p1 + p4) if key == "c" else 0.5 * (p2 + p3)
    return float(base + sign * matrix.entries[key].real)


@dataclass
class OffDiagonalFit:
    """``re + i im`` of the coherence probed by a phase sweep, with the signal offset."""

    re: float
    im: float
    offset: float
    covariance: np.ndarray

    def __iter__(self):
        return iter((self.re, self.im, self.offset))

    @property
    def value(self) -> complex:
        return complex(self.re, self.im)

    def to_dict(self) -> dict:
        names = ["re", "im", "offset"]
        cov = np.asarray(self.covariance)
        return {"model": "phase_reversal", "re": self.re, "im": self.im, "offset": self.offset,
                "stderr": {k: math.sqrt(max(float(cov[i, i]), 0.0)) for i, k in enumerate(names)},
                "covariance": cov.tolist(), "parameters": names}


def extract_offdiagonal(theta, sigma_z, yerr=None, parity: str = "phi",
                        multiplier: float | None = None) -> OffDiagonalFit:
    """Linear least-squares fit of a phase-reversal sweep.

    The reversal phase entering the signal is ``multiplier * theta``; with
    ``phi1 = theta, phi2 = 3 theta`` that is 4 for the even and 2 for the
    odd parity (the defaults). For ``parity='phi'`` the model is
    ``offset - 2 re cos + 2 im sin``; for ``'psi'`` it is
    ``offset + 2 re cos + 2 im sin``.
    """
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(sigma_z, dtype=float)
    if theta.shape != y.shape or theta.ndim != 1:
        raise ValueError("theta and sigma_z must be 1-D arrays of equal length")
    if len(theta) < 8:
        raise ValueError("need at least 8 sweep points")
    if parity not in ("phi", "psi"):
        raise ValueError("parity must be 'phi' or 'psi'")
    if multiplier is None:
        multiplier = 4.0 if parity == "phi" else 2.0
    if np.ptp(theta) * multiplier < 2 * math.pi - 1e-9:
        raise ValueError("sweep must span at least one period of the reversal phase")
    s = multiplier * theta
    sign = -1.0 if parity == "phi" else 1.0
    design = np.c_[np.ones_like(s), 2 * sign * np.cos(s), 2 * np.sin(s)]
    w = np.ones_like(y) if yerr is None else 1 / np.asarray(yerr, dtype=float)
    dw = design * w[:, None]
    if np.linalg.matrix_rank(dw) < 3:
        raise FitError("rank-deficient design: degenerate phase grid")
    coef, *_ = np.linalg.lstsq(dw, y * w, rcond=None)
    resid = (y - design @ coef) * w
    cov = np.linalg.inv(dw.T @ dw)
    if yerr is None:
        dof = len(y) - 3
        cov = cov * (float(resid @ resid) / dof if dof > 0 else 0.0)
    # reorder to (re, im, offset)
    perm = [1, 2, 0]
    return OffDiagonalFit(float(coef[1]), float(coef[2]), float(coef[0]), cov[np.ix_(perm, perm)])


@dataclass
class TomographyResult:
    matrix: PartialDensityMatrix
    fidelity: float
    covariance: np.ndarray
    target: str
    theta: np.ndarray | None = None
    sigma_z: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"target": self.target, **self.matrix.to_dict(), "fidelity": self.fidelity,
                "covariance": {"parameters": ["re", "im", "offset"],
                               "matrix": np.asarray(self.covariance).tolist()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def assemble(populations, fit: OffDiagonalFit, target: str) -> TomographyResult:
    """Combine measured populations ``(p1..p4)`` and a coherence fit into a result."""
    which = bell_name(target)
    key = "c" if which.startswith("phi") else "d"
    p = np.clip(np.asarray(populations, dtype=float), 0, None)
    p = p / p.sum()
    i, j = ENTRY_POSITIONS[key]
    v = fit.value
    bound = math.sqrt(p[i] * p[j])
    if abs(v) > bound:
        # shot noise can push the estimate past Cauchy-Schwarz; shrink onto the bound
        v = v * bound / abs(v)
    m = PartialDensityMatrix(tuple(p), {key: v})
    return TomographyResult(m, fidelity(m, which), fit.covariance, which)


# ---------------------------------------------------------------------------
# simulation pipeline


def _nuclear_state(result, point: int = 0) -> dict[str, float]:
    pops = result.populations()[point]
    return dict(zip(result.labels, pops))


def population_measurement(catalog: TransitionCatalog, which: str, *, initial="↓⇑⇑", noise=None,
                           model: ReadoutModel = IDEAL_READOUT, shots: int | None = None, n_traj: int = 1,
                           seed: int = 0, angle_errors=(0.0, 0.0), rwa_cutoff_mhz: float | None = None,
                           rabi_mhz: float = DEFAULT_NUCLEAR_RABI_MHZ):
    """Populations ``(p1..p4)`` right after Bell-state preparation."""
    seq = bell_sequence(catalog, which, rabi_mhz=rabi_mhz, angle_errors=angle_errors)
    res = run_sequence(catalog, seq, initial, noise=noise, n_traj=n_traj, seed=seed,
                       rwa_cutoff_mhz=rwa_cutoff_mhz, readout_model=model)
    est = read_populations(_nuclear_state(res), model, shots, seed)
    return est.matrix_order()


def phase_reversal_sweep(catalog: TransitionCatalog, which: str, theta, *, initial="↓⇑⇑", noise=None,
                         model: ReadoutModel = IDEAL_READOUT, shots: int | None = None, n_traj: int = 1,
                         seed: int = 0, angle_errors=(0.0, 0.0), rwa_cutoff_mhz: float | None = None,
                         rabi_mhz: float = DEFAULT_NUCLEAR_RABI_MHZ, free_evolution_us: float = 0.0):
    """Si29 polarization after preparation and reversal with ``phi1 = theta, phi2 = 3 theta``."""
    theta = np.asarray(theta, dtype=float)
    seq = bell_sequence(catalog, which, free_evolution_us=free_evolution_us,
                        reversal_phases=(Ref("theta"), Ref("theta", 3.0)), rabi_mhz=rabi_mhz,
                        angle_errors=angle_errors, sweep=Sweep("theta", tuple(theta)))
    res = run_sequence(catalog, seq, initial, noise=noise, n_traj=n_traj, seed=seed,
                       rwa_cutoff_mhz=rwa_cutoff_mhz, readout_model=model)
    seeds = np.random.SeedSequence(seed).generate_state(len(theta))
    return np.array([nuclear_expectation(read_populations(_nuclear_state(res, k), model, shots, int(seeds[k])))
                     for k in range(len(theta))])


def tomography_pipeline(catalog: TransitionCatalog, which: str = "phi-", theta=None, **kw) -> TomographyResult:
    """Prepare, measure populations, sweep the reversal phase, fit and compute the fidelity."""
    which = bell_name(which)
    if theta is None:
        theta = np.linspace(0, math.pi / 2 if which.startswith("phi") else math.pi, 17)
    theta = np.asarray(theta, dtype=float)
    pops = population_measurement(catalog, which, **kw)
    sz = phase_reversal_sweep(catalog, which, theta, **kw)
    fit = extract_offdiagonal(theta, sz, parity=which[:3])
    out = assemble(pops, fit, which)
    out.theta, out.sigma_z = theta, sz
    return out


@dataclass
class BellT2:
    t2: float
    stderr: float
    no_decay: bool


def bell_ramsey_t2(tau, sigma_z, omega: float, yerr=None) -> BellT2:
    """Gaussian-envelope dephasing time of a Bell-state Ramsey trace at angular frequency ``omega``."""
    if not omega > 0:
        raise ValueError("omega must be > 0")
    t2, err, flat = fit_gaussian_fringe(tau, sigma_z, omega, yerr)
    return BellT2(t2, err, flat)


def bell_ramsey_trace(catalog: TransitionCatalog, which: str, tau_us, omega_rad_per_us: float, *,
                      noise=None, n_traj: int = 1000, seed: int = 0, initial="↓⇑⇑",
                      rwa_cutoff_mhz: float | None = None, rabi_mhz: float = DEFAULT_NUCLEAR_RABI_MHZ):
    """Si29 polarization after free evolution ``tau`` and reversal with ``phi1 = 0, phi2 = omega tau``.

    Populations are read exactly (no shot noise); returns ``(mean, stderr)``
    over trajectories.
    """
    tau = np.asarray(tau_us, dtype=float)
    seq = bell_sequence(catalog, which, free_evolution_us=Ref("tau"),
                        reversal_phases=(0.0, Ref("tau", omega_rad_per_us)), rabi_mhz=rabi_mhz,
                        sweep=Sweep("tau", tuple(tau)))
    res = run_sequence(catalog, seq, initial, noise=noise, n_traj=n_traj, seed=seed, rwa_cutoff_mhz=rwa_cutoff_mhz)
    si_up = np.array([lab[6:-1][1] if lab.startswith("mixed[") else lab[1] for lab in res.labels]) == UP_N
    sign = np.where(si_up, 1.0, -1.0)
    per_traj = np.array([np.abs(r[-1]) ** 2 @ sign for r in res.records])
    mean = per_traj.mean(axis=1)
    err = per_traj.std(axis=1, ddof=1) / math.sqrt(n_traj) if n_traj > 1 else np.zeros_like(mean)
    return mean, err
