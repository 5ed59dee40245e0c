"""Classical dephasing noise on spin detunings.

Two processes are supported: quasi-static Gaussian noise (one value per
trajectory) and the Ornstein-Uhlenbeck process (Lorentzian spectrum). Noise
strengths are in kHz, correlation times in ms and sampled series are in kHz
on a microsecond grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .register import ConfigurationError

NUCLEAR_PAIR = ("Si29", "H")


@dataclass(frozen=True)
class QuasiStatic:
    sigma_khz: float

    def __post_init__(self):
        if not self.sigma_khz >= 0:
            raise ConfigurationError("sigma must be >= 0")

    @classmethod
    def from_t2star(cls, t2star_ms: float) -> "QuasiStatic":
        """Noise giving coherence ``exp(-(t/T2*)^2)``."""
        return cls(math.sqrt(2) / (2 * math.pi * t2star_ms))

    @property
    def t2star_ms(self) -> float:
        return math.inf if self.sigma_khz == 0 else math.sqrt(2) / (2 * math.pi * self.sigma_khz)


@dataclass(frozen=True)
class OrnsteinUhlenbeck:
    sigma_khz: float
    tau_c_ms: float

    def __post_init__(self):
        if not self.sigma_khz >= 0:
            raise ConfigurationError("sigma must be >= 0")
        if not self.tau_c_ms > 0:
            raise ConfigurationError("tau_c must be > 0")


@dataclass(frozen=True)
class DephasingNoise:
    """Per-spin detuning noise.

    ``spins`` maps spin names (``e``, ``Si29``, ``H``) to a process.
    ``cross_correlation`` correlates the Si29 and H processes. ``t1_ms``
    optionally adds random spin flips; absent means infinite T1.
    """

    spins: Mapping[str, QuasiStatic | OrnsteinUhlenbeck] = field(default_factory=dict)
    cross_correlation: float = 0.0
    seed: int = 0
    t1_ms: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not -1.0 <= self.cross_correlation <= 1.0:
            raise ConfigurationError(
                f"cross_correlation {self.cross_correlation} gives a non-PSD correlation matrix")
        for name, t1 in self.t1_ms.items():
            if not t1 > 0:
                raise ConfigurationError(f"t1 for {name} must be > 0")

    @property
    def is_silent(self) -> bool:
        return all(p.sigma_khz == 0 for p in self.spins.values()) and not self.t1_ms


@dataclass(frozen=True)
class MeissnerEvent:
    """Step of the electron resonance after a superconducting-film transition."""

    delta_f_mhz: float = 0.7
    t_jump_after_first_pulse_us: float = 1.25

    def __post_init__(self):
        if self.delta_f_mhz < 0 or self.t_jump_after_first_pulse_us < 0:
            raise ConfigurationError("Meissner event parameters must be >= 0")


def _correlated_normals(rng: np.random.Generator, names, rho: float, size) -> dict[str, np.ndarray]:
    """Standard normals per spin; Si29/H correlated with coefficient ``rho``."""
    z = {n: rng.standard_normal(size) for n in names}
    if all(n in z for n in NUCLEAR_PAIR):
        if abs(rho) > 1:
            raise ConfigurationError("non-PSD correlation matrix")
        a, b = NUCLEAR_PAIR
        # lower Cholesky factor of [[1, rho], [rho, 1]]; valid at |rho| = 1
        z[b] = rho * z[a] + math.sqrt(max(0.0, 1 - rho * rho)) * z[b]
    return z


def sample_detuning_series(noise: DephasingNoise, dt_us: float, total_us: float,
                           n_traj: int = 1, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Detuning series in kHz, shape ``(n_traj, n_steps + 1)`` per spin.

    Quasi-static noise is constant along each trajectory. OU noise uses the
    exact AR(1) discretization started from the stationary distribution.
    """
    if not dt_us > 0:
        raise ValueError("dt must be > 0")
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    n_steps = int(math.ceil(total_us / dt_us - 1e-9))
    names = list(noise.spins)
    z0 = _correlated_normals(rng, names, noise.cross_correlation, n_traj)
    out: dict[str, np.ndarray] = {}
    ou = [n for n in names if isinstance(noise.spins[n], OrnsteinUhlenbeck)]
    innov = None
    if ou and n_steps > 0:
        innov = _correlated_normals(rng, names, noise.cross_correlation, (n_steps, n_traj))
    for n in names:
        proc = noise.spins[n]
        sigma = proc.sigma_khz
        if isinstance(proc, QuasiStatic):
            out[n] = np.repeat((sigma * z0[n])[:, None], n_steps + 1, axis=1)
            continue
        decay = math.exp(-dt_us / (proc.tau_c_ms * 1e3))
        kick = sigma * math.sqrt(1 - decay * decay)
        x = np.empty((n_traj, n_steps + 1))
        x[:, 0] = sigma * z0[n]
        for k in range(n_steps):
            x[:, k + 1] = decay * x[:, k] + kick * innov[n][k]
        out[n] = x
    return out


class NoiseRealization:
    """Sampled noise for a batch of trajectories, queried by time interval.

    ``phase(spin, t0, t1)`` is the integrated detuning (MHz us = cycles)
    between two times, from the trapezoid-integrated OU series or the
    constant quasi-static value.
    """

    def __init__(self, noise: DephasingNoise, n_traj: int, total_us: float,
                 rng: np.random.Generator, dt_us: float | None = None):
        self.noise = noise
        self.n_traj = n_traj
        self.total_us = total_us
        if dt_us is None:
            taus = [p.tau_c_ms * 1e3 for p in noise.spins.values() if isinstance(p, OrnsteinUhlenbeck)]
            dt_us = max(total_us / 2000, 1e-3)
            if taus:
                dt_us = min(dt_us, min(taus) / 20)
        self.dt = dt_us
        self.rng = rng
        series = sample_detuning_series(noise, dt_us, max(total_us, dt_us), n_traj, rng)
        self.static: dict[str, np.ndarray] = {}
        self.cumulative: dict[str, np.ndarray] = {}
        for name, x in series.items():
            x = x * 1e-3  # kHz -> MHz
            if isinstance(noise.spins[name], QuasiStatic):
                self.static[name] = x[:, 0]
            else:
                c = np.zeros_like(x)
                c[:, 1:] = np.cumsum(0.5 * (x[:, 1:] + x[:, :-1]) * dt_us, axis=1)
                self.cumulative[name] = c

    def detuning(self, spin: str, t: float) -> np.ndarray:
        """Instantaneous detuning (MHz) per trajectory."""
        if spin in self.static:
            return self.static[spin]
        if spin in self.cumulative:
            k = min(int(t / self.dt), self.cumulative[spin].shape[1] - 2)
            return (self.cumulative[spin][:, k + 1] - self.cumulative[spin][:, k]) / self.dt
        return np.zeros(self.n_traj)

    def phase(self, spin: str, t0: float, t1: float) -> np.ndarray:
        if spin in self.static:
            return self.static[spin] * (t1 - t0)
        if spin in self.cumulative:
            c = self.cumulative[spin]
            return self._interp(c, t1) - self._interp(c, t0)
        return np.zeros(self.n_traj)

    def _interp(self, c: np.ndarray, t: float) -> np.ndarray:
        x = min(max(t / self.dt, 0.0), c.shape[1] - 1.0)
        k = min(int(x), c.shape[1] - 2)
        frac = x - k
        return c[:, k] + frac * (c[:, k + 1] - c[:, k])

    @property
    def spins(self):
        return list(self.static) + list(self.cumulative)


def analytic_bell_t2(t2_si_ms: float, t2_h_ms: float, correlation: float) -> tuple[float, float]:
    """Gaussian dephasing times of the even (Phi) and odd (Psi) Bell states.

    The cross term enters linearly in ``correlation``; at +-1 the rates add
    or subtract, at 0 they add in quadrature.
    """
    if t2_si_ms <= 0 or t2_h_ms <= 0:
        raise ValueError("coherence times must be positive")
    if not -1 <= correlation <= 1:
        raise ValueError("correlation must lie in [-1, 1]")
    base = 1 / t2_si_ms ** 2 + 1 / t2_h_ms ** 2
    cross = 2 * correlation / (t2_si_ms * t2_h_ms)

    def t2(rate_sq):
        # guard tiny negative values from cancellation at |rho| = 1
        return math.inf if rate_sq <= 1e-15 * base else 1 / math.sqrt(rate_sq)

    return t2(base + cross), t2(base - cross)


def ou_decay_analytic(segments: list[tuple[float, float, int]], sigma_khz: float, tau_c_ms: float) -> float:
    """Coherence ``exp(-chi/2)`` for OU noise under a piecewise switching function.

    ``segments`` lists ``(start_us, end_us, sign)``. The phase variance is the
    double integral of ``y(t1) y(t2) sigma^2 exp(-|t1-t2|/tau_c)`` evaluated in
    closed form segment by segment.
    """
    b = 2 * math.pi * sigma_khz * 1e-3  # rad / us
    tau = tau_c_ms * 1e3
    chi = 0.0
    for a0, a1, sa in segments:
        for c0, c1, sc in segments:
            chi += sa * sc * _exp_kernel_integral(a0, a1, c0, c1, tau)
    return math.exp(-0.5 * b * b * chi)


def _x_minus_one_minus_exp(x):
    """``x - 1 + exp(-x)``, accurate for small ``x``."""
    if x < 1e-3:
        return x * x * (0.5 - x / 6 + x * x / 24 - x ** 3 / 120)
    return x + math.expm1(-x)


def _exp_kernel_integral(a0, a1, c0, c1, tau):
    """Integral of exp(-|s-t|/tau) over s in [a0,a1], t in [c0,c1]."""
    if a1 <= a0 or c1 <= c0:
        return 0.0
    if (a0, a1) == (c0, c1):
        return 2 * tau * tau * _x_minus_one_minus_exp((a1 - a0) / tau)
    if a0 >= c1:
        # factored form avoids cancellation when tau is much longer than the intervals
        return (tau * tau * math.exp(-(a0 - c1) / tau)
                * math.expm1(-(a1 - a0) / tau) * math.expm1(-(c1 - c0) / tau))
    if c0 >= a1:
        return _exp_kernel_integral(c0, c1, a0, a1, tau)
    # overlapping intervals: split at the breakpoints
    pts = sorted({a0, a1, c0, c1})
    total = 0.0
    for i in range(len(pts) - 1):
        for j in range(len(pts) - 1):
            s0, s1, t0, t1 = pts[i], pts[i + 1], pts[j], pts[j + 1]
            if a0 <= s0 and s1 <= a1 and c0 <= t0 and t1 <= c1:
                total += _exp_kernel_integral(s0, s1, t0, t1, tau)
    return total


def dd_segments(total_us: float, n_pulses: int) -> list[tuple[float, float, int]]:
    """CPMG-style switching function: tau/2N, tau/N, ..., tau/2N with alternating sign."""
    if n_pulses == 0:
        return [(0.0, total_us, 1)]
    edges = [0.0] + [total_us * (2 * k + 1) / (2 * n_pulses) for k in range(n_pulses)] + [total_us]
    return [(edges[k], edges[k + 1], 1 if k % 2 == 0 else -1) for k in range(len(edges) - 1)]


def ou_coherence_time(n_pulses: int, sigma_khz: float, tau_c_ms: float) -> float:
    """Slow-bath coherence time (ms) under N refocusing pulses, ``(12 N^2 tau_c / b^2)^(1/3)``."""
    b = 2 * math.pi * sigma_khz  # rad / ms
    return (12 * n_pulses ** 2 * tau_c_ms / b ** 2) ** (1 / 3)


def monte_carlo_decay(catalog, kind: str, taus, noise: DephasingNoise, *, transition=("↓⇓⇓", "↑⇓⇓"),
                      rabi_mhz: float = 1 / 0.18, n: int = 1, n_traj: int = 400, seed: int = 0,
                      virtual_detuning_mhz: float = 0.0):
    """Coherence of an electron experiment under sampled noise.

    Runs the sequence with both final pi/2 phases on identical noise
    realizations and returns ``(coherence, stderr)`` per delay, where the
    coherence is the trajectory-averaged difference of the two bright
    populations.
    """
    from .engine import run_sequence
    from .sequences import experiment_for, toggle_final_phase

    seq = experiment_for(kind, catalog, transition, rabi_mhz, taus, n=n,
                         virtual_detuning_mhz=virtual_detuning_mhz)
    upper = catalog.levels.index(transition[1])
    runs = [run_sequence(catalog, s, transition[0], noise=noise, n_traj=n_traj, seed=seed)
            for s in (seq, toggle_final_phase(seq))]
    diffs = np.array([[np.abs(a[-1][:, upper]) ** 2 - np.abs(b[-1][:, upper]) ** 2
                       for a, b in zip(runs[0].records, runs[1].records)]])[0]
    return diffs.mean(axis=1), diffs.std(axis=1, ddof=1) / math.sqrt(n_traj) if n_traj > 1 else np.zeros(len(diffs))


def apply_meissner(sequence, event: MeissnerEvent, spin: str = "e"):
    """Step the resonance of ``spin`` by ``+delta_f`` partway through a sequence.

    The step happens ``t_jump_after_first_pulse_us`` after the end of the
    first pulse; delays after it carry the extra static detuning (a delay
    straddling the step is split in two). For a Ramsey sequence with the
    drive at or below resonance this slows the fringe by ``delta_f``.
    Pulses are left unchanged.
    """
    from dataclasses import replace

    from .sequences import Delay, Pulse, ReadoutMarker, Sequence

    out = []
    det = ((spin, event.delta_f_mhz),)
    for point in sequence.points():
        items = sequence.resolve(point)
        first = next((k for k, it in enumerate(items) if isinstance(it, Pulse)), None)
        if first is None:
            raise ConfigurationError("sequence has no pulse")
        new = list(items[:first + 1])
        t, t_jump = 0.0, event.t_jump_after_first_pulse_us
        for it in items[first + 1:]:
            if isinstance(it, ReadoutMarker):
                new.append(it)
                continue
            d = it.duration_us
            if isinstance(it, Delay) and event.delta_f_mhz != 0 and t + d > t_jump:
                if t >= t_jump:
                    new.append(replace(it, detuning_mhz=it.detuning_mhz + det))
                else:
                    new.append(replace(it, duration_us=t_jump - t))
                    new.append(replace(it, duration_us=t + d - t_jump, detuning_mhz=it.detuning_mhz + det))
            else:
                new.append(it)
            t += d
        out.append(Sequence(tuple(new)))
    return out if sequence.sweep is not None else out[0]
