"""Curve fits for coherence data.

All nonlinear fits use :func:`scipy.optimize.least_squares` (trust-region
reflective, bounded) from deterministic initial guesses. Decay times are fit
as logarithms so they stay positive. Covariances come from the Jacobian at
the solution, scaled by the reduced chi-square unless per-point standard
errors are supplied.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

MAX_NFEV = 20000
_TOL = dict(xtol=1e-15, ftol=1e-15, gtol=1e-15)


class FitError(RuntimeError):
    """A fit did not converge or the data cannot determine the model."""

    def __init__(self, message: str, residuals=None):
        self.residuals = None if residuals is None else np.asarray(residuals)
        if self.residuals is not None and self.residuals.size:
            message += f" (rms residual {np.sqrt(np.mean(self.residuals ** 2)):.3g}, n={self.residuals.size})"
        super().__init__(message)


def _as_xy(t, y, yerr=None, min_points=2):
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if len(t) < min_points:
        raise ValueError(f"need at least {min_points} points, got {len(t)}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise ValueError("data must be finite")
    if yerr is not None:
        yerr = np.asarray(yerr, dtype=float)
        if yerr.shape != y.shape or np.any(yerr <= 0):
            raise ValueError("standard errors must be positive and match y")
    return t, y, yerr


def _covariance(res, n_points, absolute: bool):
    jac = res.jac
    dof = max(n_points - jac.shape[1], 1)
    try:
        cov = np.linalg.pinv(jac.T @ jac)
    except np.linalg.LinAlgError:
        return np.full((jac.shape[1],) * 2, np.nan)
    if not absolute:
        cov = cov * (2 * res.cost / dof)
    return cov


def _solve(fun, p0, bounds, n_points, yerr):
    res = optimize.least_squares(fun, p0, bounds=bounds, method="trf", max_nfev=MAX_NFEV, **_TOL)
    if not res.success and res.status <= 0:
        raise FitError(f"fit did not converge: {res.message}", res.fun)
    return res, _covariance(res, n_points, yerr is not None)


def _transform_cov(cov, scale):
    """Covariance after the elementwise reparameterization ``p -> f(p)`` with ``df/dp = scale``."""
    d = np.diag(scale)
    return d @ cov @ d


# ---------------------------------------------------------------------------
# stretched exponential


@dataclass
class DecayFit:
    """``amplitude * exp(-(t/t2)**stretch_n) + offset``.

    ``degenerate`` is set when the data carry no decay (then ``t2`` is NaN).
    ``covariance`` is over ``(amplitude, t2, offset, stretch_n)``; fixed
    parameters have zero rows and columns.
    """

    t2: float
    amplitude: float
    offset: float
    stretch_n: float
    covariance: np.ndarray
    fixed: dict = field(default_factory=dict)
    degenerate: bool = False

    @property
    def t2_err(self) -> float:
        return float(np.sqrt(self.covariance[1, 1]))

    @property
    def n_err(self) -> float:
        return float(np.sqrt(self.covariance[3, 3]))

    def __call__(self, t):
        return self.amplitude * np.exp(-(np.asarray(t) / self.t2) ** self.stretch_n) + self.offset

    def to_dict(self) -> dict:
        names = ["amplitude", "t2", "offset", "stretch_n"]
        return {"model": "stretched_exp", "degenerate": self.degenerate, "fixed": self.fixed,
                **{k: _num(getattr(self, k)) for k in names},
                "stderr": {k: _num(math.sqrt(max(self.covariance[i, i], 0))) for i, k in enumerate(names)},
                "covariance": _matrix(self.covariance), "parameters": names}


def _seed_stretched(t, y, fix_n, fix_offset):
    off = 0.0 if fix_offset is None else fix_offset
    amp = y[0] - off if abs(y[0] - off) > 0 else np.ptp(y)
    r = (y - off) / amp
    mask = (r > 0.05) & (r < 0.95) & (t > 0)
    n0 = fix_n if fix_n is not None else 2.0
    if mask.sum() >= 2:
        lx, ly = np.log(t[mask]), np.log(-np.log(r[mask]))
        if fix_n is None and np.ptp(lx) > 0:
            slope, icpt = np.polyfit(lx, ly, 1)
            if slope > 0.2:
                n0 = float(np.clip(slope, 0.3, 6.0))
        icpt = float(np.mean(ly - n0 * lx))
        t2 = math.exp(-icpt / n0)
    else:
        below = np.nonzero(r < math.exp(-1))[0]
        t2 = t[below[0]] if below.size and t[below[0]] > 0 else t[-1]
    if not np.isfinite(t2) or t2 <= 0:
        t2 = max(t[-1], 1e-12)
    return amp, t2, off, n0


def fit_stretched_exp(t, y, fix_n: float | None = None, yerr=None, fix_offset: float | None = None) -> DecayFit:
    """Fit ``A exp(-(t/T2)^n) + offset``.

    The starting point comes from a straight-line fit of
    ``log(-log(y/A))`` against ``log t``.
    """
    t, y, yerr = _as_xy(t, y, yerr, min_points=5)
    if np.any(np.diff(t) <= 0):
        raise ValueError("t must be strictly increasing")
    fixed = {}
    if fix_n is not None:
        if not fix_n > 0:
            raise ValueError("fixed stretch exponent must be > 0")
        fixed["stretch_n"] = float(fix_n)
    if fix_offset is not None:
        fixed["offset"] = float(fix_offset)
    scale = max(np.max(np.abs(y)), 1e-300)
    if np.ptp(y) <= 1e-12 * scale:
        off = float(np.mean(y)) if fix_offset is None else fix_offset
        return DecayFit(math.nan, 0.0, off, fix_n if fix_n is not None else math.nan,
                        np.full((4, 4), np.nan), fixed, degenerate=True)
    amp0, t20, off0, n00 = _seed_stretched(t, y, fix_n, fix_offset)
    w = 1.0 if yerr is None else 1 / yerr
    free = [True, True, fix_offset is None, fix_n is None]

    def unpack(q):
        it = iter(q)
        a = next(it)
        lt = next(it)
        off = next(it) if free[2] else fix_offset
        n = math.exp(next(it)) if free[3] else fix_n
        return a, lt, off, n

    def resid(q):
        a, lt, off, n = unpack(q)
        return w * (a * np.exp(-(t / math.exp(lt)) ** n) + off - y)

    q0 = [amp0, math.log(t20)] + ([off0] if free[2] else []) + ([math.log(n00)] if free[3] else [])
    lo = [-np.inf, -np.inf] + ([-np.inf] if free[2] else []) + ([math.log(0.05)] if free[3] else [])
    hi = [np.inf, np.inf] + ([np.inf] if free[2] else []) + ([math.log(20.0)] if free[3] else [])
    q0 = np.clip(q0, np.array(lo) + 1e-9, np.array(hi) - 1e-9)
    res, cov_q = _solve(resid, q0, (lo, hi), len(t), yerr)
    a, lt, off, n = unpack(res.x)
    t2 = math.exp(lt)
    # map the free-parameter covariance back to (A, T2, offset, n)
    full = np.zeros((4, 4))
    idx = [0, 1] + ([2] if free[2] else []) + ([3] if free[3] else [])
    jac = [1.0, t2] + ([1.0] if free[2] else []) + ([n] if free[3] else [])
    cov_p = _transform_cov(cov_q, jac)
    for i, ii in enumerate(idx):
        for j, jj in enumerate(idx):
            full[ii, jj] = cov_p[i, j]
    return DecayFit(t2, float(a), float(off), float(n), full, fixed)


# ---------------------------------------------------------------------------
# DD scaling


@dataclass
class ScalingFit:
    """``T_coh(N) = prefactor * N**exponent``; covariance over (exponent, log prefactor)."""

    exponent: float
    prefactor: float
    covariance: np.ndarray

    def to_dict(self) -> dict:
        return {"model": "dd_scaling", "exponent": self.exponent, "prefactor": self.prefactor,
                "stderr": {"exponent": _num(math.sqrt(max(self.covariance[0, 0], 0)))},
                "covariance": _matrix(self.covariance), "parameters": ["exponent", "log_prefactor"]}


def fit_dd_scaling(pairs) -> ScalingFit:
    """Linear least squares of ``log T`` against ``log N``."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 3:
        raise ValueError("need at least 3 (N, T_coh) pairs")
    n, tc = arr[:, 0], arr[:, 1]
    if np.any(n < 1):
        raise ValueError("pulse numbers must be >= 1")
    if np.any(tc <= 0):
        raise ValueError("coherence times must be positive")
    x, y = np.log(n), np.log(tc)
    design = np.c_[x, np.ones_like(x)]
    if np.linalg.matrix_rank(design) < 2:
        raise FitError("rank-deficient design: all pulse numbers are equal")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    dof = len(y) - 2
    s2 = float(resid @ resid / dof) if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(design.T @ design)
    return ScalingFit(float(coef[0]), float(math.exp(coef[1])), cov)


# ---------------------------------------------------------------------------
# Ramsey


@dataclass
class RamseyFit:
    """``offset + amplitude * exp(-(t/t2_star)**2) * cos(2 pi freq t + phase)``.

    Covariance over ``(freq, t2_star, phase, amplitude, offset)``.
    """

    freq: float
    t2_star: float
    phase: float
    amplitude: float
    offset: float
    covariance: np.ndarray

    def __iter__(self):
        return iter((self.freq, self.t2_star, self.phase, self.amplitude))

    def __call__(self, t):
        t = np.asarray(t)
        return self.offset + self.amplitude * np.exp(-(t / self.t2_star) ** 2) * np.cos(
            2 * np.pi * self.freq * t + self.phase)

    def to_dict(self) -> dict:
        names = ["freq", "t2_star", "phase", "amplitude", "offset"]
        return {"model": "ramsey_gaussian", **{k: _num(getattr(self, k)) for k in names},
                "stderr": {k: _num(math.sqrt(max(self.covariance[i, i], 0))) for i, k in enumerate(names)},
                "covariance": _matrix(self.covariance), "parameters": names}


def dominant_frequency(t, y, noise_factor: float = 4.0) -> float:
    """Frequency of the largest non-DC periodogram peak (data resampled uniformly)."""
    t, y, _ = _as_xy(t, y, min_points=4)
    grid = np.linspace(t[0], t[-1], len(t))
    yy = np.interp(grid, t, y)
    yy = yy - yy.mean()
    n_fft = 16 * len(yy)
    spec = np.abs(np.fft.rfft(yy * np.hanning(len(yy)), n_fft)) ** 2
    freqs = np.fft.rfftfreq(n_fft, grid[1] - grid[0])
    # ignore the window's DC lobe
    span = grid[-1] - grid[0]
    valid = freqs > 1.0 / span
    if not np.any(valid) or not np.any(spec[valid] > 0):
        raise FitError("no spectral peak: trace has no oscillation")
    k = np.argmax(np.where(valid, spec, 0))
    floor = np.median(spec[valid])
    if spec[k] <= noise_factor * floor or spec[k] <= 1e-20 * max(np.sum(yy ** 2), 1e-300) or np.ptp(yy) == 0:
        raise FitError("no spectral peak above the noise floor")
    return float(freqs[k])


def fit_ramsey(t, y, yerr=None, freq_guess: float | None = None) -> RamseyFit:
    """Gaussian-damped cosine fit seeded from the periodogram peak."""
    t, y, yerr = _as_xy(t, y, yerr, min_points=6)
    span = t[-1] - t[0]
    f0 = dominant_frequency(t, y) if freq_guess is None else freq_guess
    if f0 * span < 2 - 1e-9 and freq_guess is None:
        raise FitError("fewer than two oscillation periods sampled")
    w = 1.0 if yerr is None else 1 / yerr

    def model(q, tt):
        f, lt, ph, a, off = q
        return off + a * np.exp(-(tt * np.exp(-lt)) ** 2) * np.cos(2 * np.pi * f * tt + ph)

    def resid(q):
        return w * (model(q, t) - y)

    # envelope time bounded to [1e-3, 1e6] x span; the upper end means no visible decay
    lo = [-np.inf, math.log(1e-3 * span), -np.inf, -np.inf, -np.inf]
    hi = [np.inf, math.log(1e6 * span), np.inf, np.inf, np.inf]
    best = None
    for t2_seed in (span / 3, span, 3 * span, 30 * span):
        # linear seed for amplitude and phase at f0 including the trial envelope
        env = np.exp(-(t / t2_seed) ** 2)
        design = np.c_[env * np.cos(2 * np.pi * f0 * t), env * np.sin(2 * np.pi * f0 * t), np.ones_like(t)]
        (c, s, off), *_ = np.linalg.lstsq(design, y, rcond=None)
        q0 = [f0, math.log(t2_seed), math.atan2(-s, c), math.hypot(c, s), off]
        try:
            res = optimize.least_squares(resid, q0, bounds=(lo, hi), method="trf", max_nfev=MAX_NFEV, **_TOL)
        except (ValueError, FloatingPointError):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None or not np.all(np.isfinite(best.x)):
        raise FitError("Ramsey fit failed", None if best is None else best.fun)
    f, lt, ph, a, off = best.x
    if a < 0:
        a, ph = -a, ph + math.pi
    if f < 0:
        f, ph = -f, -ph
    ph = (ph + math.pi) % (2 * math.pi) - math.pi
    cov_q = _covariance(best, len(t), yerr is not None)
    cov = _transform_cov(cov_q, [1.0, math.exp(lt), 1.0, 1.0, 1.0])
    return RamseyFit(float(f), float(math.exp(lt)), float(ph), float(a), float(off), cov)


def fit_gaussian_fringe(t, y, omega: float, yerr=None):
    """Fringe at fixed angular frequency ``omega`` under a Gaussian envelope.

    Model ``offset + exp(-(t/T)^2) (c cos(omega t) + s sin(omega t))``.
    Returns ``(T, T_err, no_decay)``; ``no_decay`` is set when the envelope
    is flat within numerical precision (``T`` is then infinite).
    """
    t, y, yerr = _as_xy(t, y, yerr, min_points=5)
    if not omega > 0:
        raise ValueError("omega must be > 0")
    w = 1.0 if yerr is None else 1 / yerr
    cos, sin = np.cos(omega * t), np.sin(omega * t)

    def resid(q):
        g, c, s, off = q  # g = 1/T^2 >= 0
        return w * (off + np.exp(-g * t * t) * (c * cos + s * sin) - y)

    design = np.c_[cos, sin, np.ones_like(t)]
    (c0, s0, off0), *_ = np.linalg.lstsq(design, y, rcond=None)
    flat = np.max(np.abs(design @ [c0, s0, off0] - y)) <= 1e-9 * max(np.max(np.abs(y)), 1e-12)
    if flat:
        return math.inf, 0.0, True
    best = None
    for t_seed in (t[-1] / 3, t[-1], 3 * t[-1]):
        res = optimize.least_squares(resid, [1 / t_seed ** 2, c0, s0, off0],
                                     bounds=([0, -np.inf, -np.inf, -np.inf], np.inf),
                                     method="trf", max_nfev=MAX_NFEV, **_TOL)
        if best is None or res.cost < best.cost:
            best = res
    g = best.x[0]
    if g <= 0:
        return math.inf, 0.0, True
    cov = _covariance(best, len(t), yerr is not None)
    tt = 1 / math.sqrt(g)
    return tt, float(0.5 * tt / g * math.sqrt(max(cov[0, 0], 0))), False


# ---------------------------------------------------------------------------
# frequency jump


@dataclass
class JumpFit:
    """Phase-continuous two-frequency fit; ``jump`` is False for a single tone."""

    f_before: float
    f_after: float
    t_jump: float
    jump: bool
    rss_single: float
    rss_jump: float
    p_value: float

    def __iter__(self):
        return iter((self.f_before, self.f_after, self.t_jump))

    def to_dict(self) -> dict:
        return {k: _num(v) if isinstance(v, float) else v for k, v in asdict(self).items()}


def _two_tone(q, t, tj):
    f1, f2, ph, a, off, g = q
    phase = np.where(t < tj, 2 * np.pi * f1 * t, 2 * np.pi * (f1 * tj + f2 * (t - tj))) + ph
    return off + a * np.exp(-g * t * t) * np.cos(phase)


def detect_frequency_jump(t, y, min_periods: float = 2.0, min_jump: float | None = None,
                          alpha: float = 1e-3) -> JumpFit:
    """Search sample points for a change of fringe frequency.

    Every sample point leaving at least ``min_periods`` oscillations on
    both sides is a candidate change point. Candidates are scanned with a
    loose tolerance, each fit warm-started from its neighbour, and the
    best few are refit tightly; the smallest residual wins. A jump is
    reported only if it lowers the residual significantly (F-test at level
    ``alpha``) and the two frequencies differ by more than ``min_jump``
    (default: half the Fourier resolution, ``1 / (2 * span)``).
    """
    t, y, _ = _as_xy(t, y, min_points=12)
    span = t[-1] - t[0]
    single = fit_ramsey(t, y)
    f0 = single.freq
    rss_single = float(np.sum((single(t) - y) ** 2))
    min_jump = 1 / (2 * span) if min_jump is None else min_jump
    candidates = [k for k in range(2, len(t) - 2)
                  if (t[k] - t[0]) * f0 >= min_periods and (t[-1] - t[k]) * f0 >= min_periods]
    if not candidates:
        return JumpFit(f0, f0, math.nan, False, rss_single, rss_single, 1.0)
    bounds = ([0, 0, -np.inf, -np.inf, -np.inf, 0], np.inf)
    base = [single.phase, single.amplitude, single.offset, 1 / single.t2_star ** 2]

    def fit(tj, q0, tight):
        tol = _TOL if tight else dict(xtol=1e-8, ftol=1e-8, gtol=1e-8)
        return optimize.least_squares(lambda q: _two_tone(q, t, tj) - y, q0, bounds=bounds, method="trf",
                                      max_nfev=MAX_NFEV if tight else 200, **tol)

    # seeds for the two frequencies from the first and last admissible segments
    k_first, k_last = candidates[0], candidates[-1]
    f_early = _segment_freq(t[:k_first + 1], y[:k_first + 1], f0)
    f_late = _segment_freq(t[k_last:], y[k_last:], f0)
    scan = {}
    q_prev = None
    for k in candidates:
        starts = [[f_early, f_late] + base, [f0, f0] + base]
        if q_prev is not None:
            starts.append(q_prev)
        res = min((fit(t[k], q, False) for q in starts), key=lambda r: r.cost)
        scan[k] = res
        q_prev = res.x
    ranked = sorted(candidates, key=lambda k: scan[k].cost)[:3]
    top = candidates.index(ranked[0])
    ranked += [candidates[m] for m in range(max(top - 2, 0), min(top + 3, len(candidates)))
               if candidates[m] not in ranked]
    best = None
    for k in ranked:
        res = min((fit(t[k], q, True) for q in (scan[k].x, scan[ranked[0]].x)), key=lambda r: r.cost)
        if best is None or res.cost < best[0].cost:
            best = (res, k)
    res, k = best
    rss_jump = 2 * res.cost
    dof = len(t) - 7
    if rss_jump <= 1e-24 * len(t):
        p = 0.0 if rss_single > 1e-20 * len(t) else 1.0
    else:
        fstat = ((rss_single - rss_jump) / 2) / (rss_jump / dof)
        p = float(stats.f.sf(fstat, 2, dof)) if fstat > 0 else 1.0
    f1, f2 = float(res.x[0]), float(res.x[1])
    if p < alpha and abs(f2 - f1) > min_jump:
        return JumpFit(f1, f2, float(t[k]), True, rss_single, float(rss_jump), p)
    return JumpFit(f0, f0, math.nan, False, rss_single, float(rss_jump), p)


def _segment_freq(t, y, fallback):
    if len(t) < 6:
        return fallback
    try:
        return fit_ramsey(t, y, freq_guess=fallback).freq
    except (FitError, ValueError):
        return fallback


# ---------------------------------------------------------------------------
# pulse fidelity


@dataclass
class PulseFidelity:
    fidelity: float
    stderr: float
    intercept: float


def estimate_pi_fidelity(pairs) -> PulseFidelity:
    """Per-pulse fidelity ``f`` from amplitudes decaying as ``A0 f^N``.

    With two or more distinct pulse numbers ``log A`` is fit linearly in
    ``N`` with a free intercept; with a single pulse number the fit goes
    through ``A0 = 1``.
    """
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 1:
        raise ValueError("need (N, amplitude) pairs")
    n, amp = arr[:, 0], arr[:, 1]
    if np.any(amp <= 0):
        raise ValueError("amplitudes must be positive")
    if np.any(n <= 0):
        raise ValueError("pulse numbers must be positive")
    y = np.log(amp)
    if len(np.unique(n)) == 1:
        slope = float(np.sum(n * y) / np.sum(n * n))
        return PulseFidelity(math.exp(slope), 0.0, 1.0)
    design = np.c_[n, np.ones_like(n)]
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    dof = len(y) - 2
    s2 = float(resid @ resid / dof) if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(design.T @ design)
    f = math.exp(coef[0])
    return PulseFidelity(f, f * math.sqrt(cov[0, 0]), math.exp(coef[1]))


# ---------------------------------------------------------------------------
# I/O


def _num(v):
    v = float(v)
    if math.isnan(v):
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _matrix(m):
    return [[_num(x) for x in row] for row in np.asarray(m)]


def read_xy_csv(text: str):
    """Parse ``x,y[,stderr]`` CSV (header optional). Returns ``(x, y, stderr or None)``."""
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or row[0].strip().startswith("#"):
            continue
        try:
            rows.append([float(v) for v in row])
        except ValueError:
            if not rows and lineno == 1:
                continue  # header
            raise ValueError(f"line {lineno}: non-numeric value in {row!r}") from None
        if len(rows[-1]) not in (2, 3):
            raise ValueError(f"line {lineno}: expected 2 or 3 columns, got {len(rows[-1])}")
    if not rows:
        return np.array([]), np.array([]), None
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise ValueError("inconsistent number of columns")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1], (arr[:, 2] if arr.shape[1] == 3 else None)


def write_xy_csv(x, y, yerr=None, header=("x", "y", "stderr")) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header if yerr is not None else header[:2])
    for k in range(len(x)):
        row = [repr(float(x[k])), repr(float(y[k]))]
        if yerr is not None:
            row.append(repr(float(yerr[k])))
        w.writerow(row)
    return buf.getvalue()


def to_json(obj) -> str:
    d = obj.to_dict() if hasattr(obj, "to_dict") else obj
    return json.dumps(d, indent=2, sort_keys=True) + "\n"
