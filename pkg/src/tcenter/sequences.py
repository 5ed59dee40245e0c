"""Pulse sequences: items, sweeps, the text format and the standard experiments.

Any numeric field of an item can be a :class:`Ref`, a linear function of the
sequence's sweep parameter. That is how Ramsey virtual detuning (final phase
proportional to the delay) and duration/frequency sweeps are expressed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, fields, replace
from typing import Iterable, Union

from .register import (
    DOWN_E,
    DOWN_N,
    UP_E,
    UP_N,
    ConfigurationError,
    TransitionCatalog,
    flip_label,
    normalize_label,
)

X_PHASE = 0.0
Y_PHASE = math.pi / 2
DEFAULT_NUCLEAR_RABI_MHZ = 2e-3 / math.sqrt(15)  # spectator on a 2 kHz neighbour completes a full cycle


@dataclass(frozen=True)
class Ref:
    """``scale * <sweep value> + offset``."""

    name: str
    scale: float = 1.0
    offset: float = 0.0

    def resolve(self, params: dict) -> float:
        try:
            return self.scale * params[self.name] + self.offset
        except KeyError:
            raise ConfigurationError(f"unknown sweep parameter {self.name!r}") from None


Value = Union[float, Ref]


def _resolve(v, params):
    return v.resolve(params) if isinstance(v, Ref) else v


def shift(v: Value, delta: float) -> Value:
    return replace(v, offset=v.offset + delta) if isinstance(v, Ref) else v + delta


def scaled(v: Value, factor: float) -> Value:
    if isinstance(v, Ref):
        return Ref(v.name, v.scale * factor, v.offset * factor)
    return v * factor


@dataclass(frozen=True)
class Pulse:
    channel: str
    freq_mhz: Value
    phase_rad: Value
    rabi_mhz: Value
    duration_us: Value

    def __post_init__(self):
        if self.channel not in ("MW", "RF"):
            raise ConfigurationError(f"pulse channel must be MW or RF, got {self.channel!r}")
        for name in ("duration_us", "rabi_mhz"):
            v = getattr(self, name)
            if not isinstance(v, Ref) and v < 0:
                raise ConfigurationError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Delay:
    """Free evolution. ``detuning_mhz`` adds static detunings per spin name.

    Repeated spin names are summed, so concatenating detuning tuples adds
    the detunings.
    """

    duration_us: Value
    detuning_mhz: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if not isinstance(self.duration_us, Ref) and self.duration_us < 0:
            raise ConfigurationError("delay must be >= 0")
        merged: dict[str, float] = {}
        for name, val in self.detuning_mhz:
            merged[name] = merged.get(name, 0.0) + float(val)
        object.__setattr__(self, "detuning_mhz", tuple(merged.items()))


@dataclass(frozen=True)
class Laser:
    transition: str
    duration_us: Value = 1.0

    def __post_init__(self):
        if self.transition not in ("B", "C"):
            raise ConfigurationError(f"laser transition must be B or C, got {self.transition!r}")


@dataclass(frozen=True)
class ReadoutMarker:
    pass


Item = Union[Pulse, Delay, Laser, ReadoutMarker]


@dataclass(frozen=True)
class Sweep:
    name: str
    values: tuple[float, ...]


@dataclass(frozen=True)
class Sequence:
    items: tuple[Item, ...]
    sweep: Sweep | None = None

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        refs = self.referenced_names()
        if self.sweep is not None and self.sweep.name not in refs:
            raise ConfigurationError(f"sweep parameter {self.sweep.name!r} is not referenced by any item")
        unknown = refs - ({self.sweep.name} if self.sweep else set())
        if unknown:
            raise ConfigurationError(f"unknown sweep parameter(s): {', '.join(sorted(unknown))}")

    def referenced_names(self) -> set[str]:
        names = set()
        for it in self.items:
            for f in fields(it):
                v = getattr(it, f.name)
                if isinstance(v, Ref):
                    names.add(v.name)
        return names

    def points(self) -> list[dict]:
        if self.sweep is None:
            return [{}]
        return [{self.sweep.name: v} for v in self.sweep.values]

    def resolve(self, params: dict) -> list[Item]:
        out = []
        for it in self.items:
            kw = {f.name: _resolve(getattr(it, f.name), params) for f in fields(it)}
            out.append(type(it)(**kw))
        return out

    def __add__(self, other: "Sequence") -> "Sequence":
        sweeps = [s for s in (self.sweep, other.sweep) if s is not None]
        if len(sweeps) == 2 and sweeps[0] != sweeps[1]:
            raise ConfigurationError("cannot concatenate sequences with different sweeps")
        return Sequence(self.items + other.items, sweeps[0] if sweeps else None)

    def pulse_count(self) -> int:
        return sum(isinstance(it, Pulse) for it in self.items)

    def to_text(self) -> str:
        return format_sequence(self)

    @classmethod
    def from_text(cls, text: str) -> "Sequence":
        return parse_sequence(text)


# ---------------------------------------------------------------------------
# text format


def _fmt(v: Value) -> str:
    if isinstance(v, Ref):
        return "{" + f"{v.name};{v.scale!r};{v.offset!r}" + "}"
    return repr(float(v))


_REF = re.compile(r"^\{(\w+);([^;]+);([^;]+)\}$")


def _parse_value(s: str, lineno: int) -> Value:
    m = _REF.match(s)
    try:
        if m:
            return Ref(m.group(1), float(m.group(2)), float(m.group(3)))
        return float(s)
    except ValueError:
        raise ConfigurationError(f"line {lineno}: bad number {s!r}") from None


def format_sequence(seq: Sequence) -> str:
    lines = []
    if seq.sweep is not None:
        lines.append("SWEEP " + seq.sweep.name + " " + " ".join(repr(float(v)) for v in seq.sweep.values))
    for it in seq.items:
        if isinstance(it, Pulse):
            lines.append(f"{it.channel} f={_fmt(it.freq_mhz)} ph={_fmt(it.phase_rad)} "
                         f"rabi={_fmt(it.rabi_mhz)} t={_fmt(it.duration_us)}")
        elif isinstance(it, Delay):
            extra = "".join(f" det.{name}={val!r}" for name, val in it.detuning_mhz)
            lines.append(f"DELAY t={_fmt(it.duration_us)}{extra}")
        elif isinstance(it, Laser):
            lines.append(f"LASER {it.transition} t={_fmt(it.duration_us)}")
        else:
            lines.append("READ")
    return "\n".join(lines) + "\n"


def parse_sequence(text: str) -> Sequence:
    items: list[Item] = []
    sweep = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "SWEEP":
            if not rest:
                raise ConfigurationError(f"line {lineno}: SWEEP needs a name")
            sweep = Sweep(rest[0], tuple(_parse_value(v, lineno) for v in rest[1:]))
            continue
        if head == "READ":
            items.append(ReadoutMarker())
            continue
        if head == "LASER":
            if not rest:
                raise ConfigurationError(f"line {lineno}: LASER needs a transition")
            kv = _kv(rest[1:], lineno)
            items.append(Laser(rest[0], kv.get("t", 1.0)))
            continue
        kv = _kv(rest, lineno)
        if head in ("MW", "RF"):
            try:
                items.append(Pulse(head, kv["f"], kv["ph"], kv["rabi"], kv["t"]))
            except KeyError as e:
                raise ConfigurationError(f"line {lineno}: missing field {e.args[0]}") from None
        elif head == "DELAY":
            det = tuple((k[4:], float(v)) for k, v in kv.items() if k.startswith("det."))
            if "t" not in kv:
                raise ConfigurationError(f"line {lineno}: missing field t")
            items.append(Delay(kv["t"], det))
        else:
            raise ConfigurationError(f"line {lineno}: unknown item {head!r}")
    return Sequence(tuple(items), sweep)


def _kv(tokens, lineno):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = _parse_value(v, lineno)
    return out


# ---------------------------------------------------------------------------
# building blocks


def rotation(transition, angle: float, rabi_mhz: float, phase: Value = 0.0, channel: str | None = None) -> Pulse:
    """Resonant pulse rotating a catalogued transition by ``angle`` radians.

    ``rabi_mhz`` is the nominal rate for a unit drive element, so the
    duration accounts for the transition's actual matrix element.
    """
    channel = channel or transition.channel
    d = abs(transition.drive.get(channel, 0.0))
    if d == 0:
        raise ConfigurationError(f"transition {transition.lower}->{transition.upper} is not driven on {channel}")
    return Pulse(channel, transition.freq, phase, rabi_mhz, angle / (2 * math.pi * rabi_mhz * d))


def toggle_final_phase(seq: Sequence) -> Sequence:
    """Copy with pi added to the phase of the last pulse (projection onto the other pole)."""
    items = list(seq.items)
    for k in range(len(items) - 1, -1, -1):
        if isinstance(items[k], Pulse):
            items[k] = replace(items[k], phase_rad=shift(items[k].phase_rad, math.pi))
            return Sequence(tuple(items), seq.sweep)
    raise ConfigurationError("sequence has no pulse to toggle")


_XY4 = (X_PHASE, Y_PHASE, X_PHASE, Y_PHASE)
_XY8 = _XY4 + (Y_PHASE, X_PHASE, Y_PHASE, X_PHASE)

EXPERIMENTS = ("rabi", "ramsey", "hahn_echo", "cpmg", "xy4", "xy8", "nmr_sweep", "odmr_sweep", "t1")


def make_experiment(kind: str, *, freq_mhz: float, rabi_mhz: float, values: Iterable[float],
                    drive_element: float = 1.0, channel: str = "MW", n: int = 1,
                    virtual_detuning_mhz: float = 0.0, final_phase: float = 0.0,
                    duration_us: float | None = None) -> Sequence:
    """Standard sequence for one experiment kind, swept over ``values``.

    The sweep parameter is the pulse duration (``rabi``), total free
    evolution time ``tau`` (Ramsey and all decoupling kinds, ``t1``) or the
    drive frequency (``nmr_sweep``/``odmr_sweep``). Decoupling pulses follow
    CPMG spacing ``tau/2N, tau/N, ..., tau/2N``; CPMG pulses are about Y,
    XY4 is X-Y-X-Y and XY8 is XY4 followed by Y-X-Y-X. ``n`` counts CPMG
    pulses or XY repetitions.
    """
    values = tuple(float(v) for v in values)
    if rabi_mhz <= 0:
        raise ConfigurationError("rabi rate must be positive")
    t_pi = 1 / (2 * rabi_mhz * drive_element)

    def pulse(angle, phase, freq=freq_mhz):
        return Pulse(channel, freq, phase, rabi_mhz, t_pi * angle / math.pi)

    if kind == "rabi":
        items = [Pulse(channel, freq_mhz, 0.0, rabi_mhz, Ref("t")), ReadoutMarker()]
        return Sequence(tuple(items), Sweep("t", values))
    if kind in ("odmr_sweep", "nmr_sweep"):
        dur = duration_us if duration_us is not None else t_pi
        items = [Pulse(channel, Ref("f"), 0.0, rabi_mhz, dur), ReadoutMarker()]
        return Sequence(tuple(items), Sweep("f", values))
    if kind == "t1":
        return Sequence((Delay(Ref("tau")), ReadoutMarker()), Sweep("tau", values))
    if kind == "ramsey":
        final = Ref("tau", 2 * math.pi * virtual_detuning_mhz, final_phase)
        items = [pulse(math.pi / 2, X_PHASE), Delay(Ref("tau")), pulse(math.pi / 2, final), ReadoutMarker()]
        return Sequence(tuple(items), Sweep("tau", values))
    if kind == "hahn_echo":
        kind, n = "cpmg", 1
    if kind == "cpmg":
        if n < 1:
            raise ConfigurationError("CPMG needs N >= 1")
        phases = (Y_PHASE,) * n
    elif kind == "xy4":
        phases = _XY4 * n
    elif kind == "xy8":
        phases = _XY8 * n
    else:
        raise ConfigurationError(f"unknown experiment kind {kind!r}")
    m = len(phases)
    items = [pulse(math.pi / 2, X_PHASE), Delay(Ref("tau", 1 / (2 * m)))]
    for k, ph in enumerate(phases):
        items.append(pulse(math.pi, ph))
        items.append(Delay(Ref("tau", 1 / (2 * m) if k == m - 1 else 1 / m)))
    items += [pulse(math.pi / 2, final_phase), ReadoutMarker()]
    return Sequence(tuple(items), Sweep("tau", values))


def experiment_for(kind: str, catalog: TransitionCatalog, transition: tuple[str, str], rabi_mhz: float,
                   values: Iterable[float], **kw) -> Sequence:
    """:func:`make_experiment` on a catalogued transition (frequency and element taken from it)."""
    t = catalog.find(*transition)
    channel = kw.pop("channel", t.channel)
    return make_experiment(kind, freq_mhz=t.freq, rabi_mhz=rabi_mhz, values=values,
                           drive_element=abs(t.drive[channel]), channel=channel, **kw)


# ---------------------------------------------------------------------------
# initialization


def initialization_sequence(catalog: TransitionCatalog, target: str, cycles: int = 50,
                            rabi_mhz: float = 0.5, laser_us: float = 5.0,
                            mapping: bool | None = None) -> Sequence:
    """Optical pumping loop that accumulates population in ``target``.

    Each cycle pumps the electron into the target manifold (laser C for
    ``↓``, B for ``↑``) and then inverts the three non-target nuclear-
    conserving ESRs so their population is re-excited by the next laser.
    With ``mapping`` (default: whenever the nuclear target is not ``⇓⇓``),
    every cycle also drives nuclear-flipping ESRs from the single-flip
    neighbours of the target straight into the target nuclear state, each
    followed by a pumping laser pulse.
    """
    target = normalize_label(target)
    n_spins = len(target)
    e_target = target[0]
    laser = Laser("C" if e_target == DOWN_E else "B", laser_us)
    other_e = UP_E if e_target == DOWN_E else DOWN_E
    nuclear_states = _nuclear_states(n_spins - 1)
    block: list[Item] = [laser]
    for nuc in nuclear_states:
        if nuc == target[1:]:
            continue
        t = catalog.find(e_target + nuc, other_e + nuc)
        block.append(rotation(t, math.pi, rabi_mhz))
    if mapping is None:
        mapping = target[1:] != DOWN_N * (n_spins - 1)
    if mapping:
        for k in range(1, n_spins):
            src = flip_label(target, k)
            dst = other_e + target[1:]
            if not catalog.has(src, dst):
                raise ConfigurationError(
                    f"target {target} unreachable: nuclear-flipping transition {src} -> {dst} is not in the catalog")
            block += [rotation(catalog.find(src, dst), math.pi, rabi_mhz), laser]
    return Sequence(tuple(block * cycles) + (laser,))


def _nuclear_states(n: int) -> list[str]:
    out = [""]
    for _ in range(n):
        out = [s + c for s in out for c in (UP_N, DOWN_N)]
    return out


# ---------------------------------------------------------------------------
# Bell states

BELL_STATES = ("phi+", "phi-", "psi+", "psi-")
_BELL_ALIASES = {"Φ+": "phi+", "Φ−": "phi-", "Φ-": "phi-", "Ψ+": "psi+", "Ψ−": "psi-", "Ψ-": "psi-"}


def bell_name(which: str) -> str:
    w = _BELL_ALIASES.get(which, which).strip().lower()
    m = re.fullmatch(r"(phi|psi)[-_ ]?(plus|minus|\+|-)", w)
    if not m:
        raise ConfigurationError(f"unknown Bell state {which!r}")
    return m.group(1) + {"plus": "+", "minus": "-"}.get(m.group(2), m.group(2))


@dataclass(frozen=True)
class BellGates:
    """The two conditional nuclear rotations used to make a Bell state.

    ``si`` rotates Si29 by pi/2 conditioned on H ⇑; ``h`` rotates H by pi,
    conditioned on Si29 ⇓ for the Phi states and Si29 ⇑ for the Psi states.
    """

    si: object
    h: object
    si_sign: int
    h_sign: int


def bell_gates(catalog: TransitionCatalog, which: str, electron: str = DOWN_E) -> BellGates:
    which = bell_name(which)
    si = catalog.find(electron + UP_N + UP_N, electron + DOWN_N + UP_N)
    cond = DOWN_N if which.startswith("phi") else UP_N
    h = catalog.find(electron + cond + UP_N, electron + cond + DOWN_N)
    si, h = _canonical(si), _canonical(h)
    return BellGates(si, h, _sense(si), _sense(h))


def _canonical(t):
    return t if t.i < t.j else t.reversed()


def _sense(t) -> int:
    """+1 when the nuclear-up state of the rotated spin is the lower level."""
    k = next(i for i in range(1, len(t.lower)) if t.lower[i] != t.upper[i])
    return 1 if t.lower[k] == UP_N else -1


def gate_phase(t, sense: int, phi: Value, channel: str = "RF") -> Value:
    """Engine pulse phase realizing ``exp(-i theta/2 (cos phi X + sin phi Y))`` in the (⇑, ⇓) basis."""
    arg = math.atan2(t.drive[channel].imag, t.drive[channel].real)
    return shift(phi, arg) if sense > 0 else shift(scaled(phi, -1.0), arg)


def bell_sequence(catalog: TransitionCatalog, which: str, free_evolution_us: float | Ref = 0.0,
                  reversal_phases: tuple[Value, Value] | None = None,
                  rabi_mhz: float = DEFAULT_NUCLEAR_RABI_MHZ, angle_errors: tuple[float, float] = (0.0, 0.0),
                  sweep: Sweep | None = None, readout: bool = True) -> Sequence:
    """Bell-state preparation from ``|↓⇑⇑>`` and optional phase-reversal.

    Preparation: Si29 pi/2 conditioned on H ⇑, then H pi conditioned on
    Si29 (⇓ for Phi, ⇑ for Psi). The sign of the state is set by the phase
    of the first gate. With ``reversal_phases = (phi1, phi2)`` the two
    gates are applied again in reverse order, the H gate with azimuth
    ``phi2`` and the Si29 gate with ``phi1``. ``angle_errors`` adds
    rotation-angle errors (radians) to the Si29 and H gates.
    """
    which = bell_name(which)
    g = bell_gates(catalog, which)
    sign_phase = 0.0 if which in ("phi-", "psi+") else math.pi
    err_si, err_h = angle_errors
    items: list[Item] = [
        rotation(g.si, math.pi / 2 + err_si, rabi_mhz, gate_phase(g.si, g.si_sign, sign_phase)),
        rotation(g.h, math.pi + err_h, rabi_mhz, gate_phase(g.h, g.h_sign, 0.0)),
    ]
    if isinstance(free_evolution_us, Ref) or free_evolution_us > 0:
        items.append(Delay(free_evolution_us))
    if reversal_phases is not None:
        phi1, phi2 = reversal_phases
        items.append(rotation(g.h, math.pi + err_h, rabi_mhz, gate_phase(g.h, g.h_sign, phi2)))
        items.append(rotation(g.si, math.pi / 2 + err_si, rabi_mhz, gate_phase(g.si, g.si_sign, phi1)))
    if readout:
        items.append(ReadoutMarker())
    return Sequence(tuple(items), sweep)
