"""Named presets and INI configuration files.

A configuration file looks like::

    [register]
    b_field_t = 0.2601
    j_nn_khz = -2.0
    secular_mode = secular

    [nucleus.Si29]
    a_zz = -7.22965
    a_xz = 0.1

    [noise.e]
    kind = ou
    sigma_khz = 83.36
    tau_c_ms = 1587

    [noise]
    cross_correlation = 1.0
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .constants import G_ELECTRON
from .noise import DephasingNoise, OrnsteinUhlenbeck, QuasiStatic
from .register import (
    ELECTRON,
    HYDROGEN,
    SILICON29,
    ConfigurationError,
    HyperfineTensor,
    Nucleus,
    RegisterConfig,
    SpinSpecies,
)

SPECIES = {"Si29": SILICON29, "H": HYDROGEN}
TENSOR_KEYS = ("a_zz", "a_xz", "a_yz", "a_xx", "a_yy", "a_xy")

#: Register matching the measured T1 centre at 0.2601 T.
PAPER_T1 = RegisterConfig(
    b_field_t=0.2601,
    nuclei=(
        Nucleus(SILICON29, HyperfineTensor.from_components(-7.22965, a_xz=0.1, a_yz=0.1)),
        Nucleus(HYDROGEN, HyperfineTensor.from_components(-2.136)),
    ),
    j_nn_khz=-2.0,
)

ELECTRON_NOISE = OrnsteinUhlenbeck(sigma_khz=83.36, tau_c_ms=1587.0)
SI29_NOISE = QuasiStatic.from_t2star(13.9)
H_NOISE = QuasiStatic.from_t2star(4.0)

REGISTER_PRESETS = {"paper-T1": PAPER_T1}



@dataclass(frozen=True)
class ErrorBudget:
    """Imperfect Bell-state preparation.

    ``initial`` holds the populations left by initialization and
    ``angle_errors`` the (Si29, H) gate rotation-angle offsets in radians.
    """

    initial: dict = field(default_factory=lambda: {"↓⇑⇑": 1.0})
    angle_errors: tuple[float, float] = (0.0, 0.0)

    def initial_batch(self, catalog, resolution: int = 100) -> np.ndarray:
        """Basis states replicated in proportion to ``initial`` (exact for multiples of 1/resolution)."""
        counts = {lab: round(p * resolution) for lab, p in self.initial.items()}
        if sum(counts.values()) != resolution or any(
                not math.isclose(c / resolution, self.initial[lab], abs_tol=1e-12) for lab, c in counts.items()):
            raise ConfigurationError(f"initial populations are not multiples of 1/{resolution}")
        dim = len(catalog.levels)
        rows = []
        for lab, c in counts.items():
            psi = np.zeros(dim, complex)
            psi[catalog.levels.index(lab)] = 1
            rows += [psi] * c
        return np.array(rows)


def _angle_error(fidelity: float, angle: float) -> float:
    """Under-rotation of a gate of nominal ``angle`` from a miscalibrated drive.

    The relative error is the one that makes a pi pulse transfer only
    ``fidelity`` of the population.
    """
    return -angle * 2 * math.acos(math.sqrt(fidelity)) / math.pi


#: 88% initialization into ↓⇑⇑ and 89%/88% Si29/H gate fidelities
ERROR_BUDGET = ErrorBudget(
    initial={"↓⇑⇑": 0.88, "↓⇑⇓": 0.04, "↓⇓⇑": 0.04, "↓⇓⇓": 0.04},
    angle_errors=(_angle_error(0.89, math.pi / 2), _angle_error(0.88, math.pi)),
)
IDEAL_BUDGET = ErrorBudget()
NOISE_PRESETS = {
    "paper-noise-correlated": DephasingNoise({"e": ELECTRON_NOISE, "Si29": SI29_NOISE, "H": H_NOISE},
                                             cross_correlation=1.0),
    "paper-noise-uncorrelated": DephasingNoise({"e": ELECTRON_NOISE, "Si29": SI29_NOISE, "H": H_NOISE},
                                               cross_correlation=0.0),
    "electron-ou": DephasingNoise({"e": ELECTRON_NOISE}),
    "nuclear-correlated": DephasingNoise({"Si29": SI29_NOISE, "H": H_NOISE}, cross_correlation=1.0),
    "quiet": DephasingNoise({}),
}


def register_preset(name: str) -> RegisterConfig:
    try:
        return REGISTER_PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown register preset {name!r}; known: {', '.join(REGISTER_PRESETS)}") from None


def noise_preset(name: str) -> DephasingNoise:
    try:
        return NOISE_PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown noise preset {name!r}; known: {', '.join(NOISE_PRESETS)}") from None


# ---------------------------------------------------------------------------
# INI files


def _line_of(text: str, section: str, key: str | None = None) -> int:
    """1-based line of a section header or of a key inside it (0 if not found)."""
    current = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[(.+)\]$", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*[=:]", line):
            return n
    return 0


class _Reader:
    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source
        self.cp = configparser.ConfigParser(interpolation=None)
        self.cp.optionxform = str
        try:
            self.cp.read_string(text, source=source)
        except configparser.Error as e:
            line = getattr(e, "lineno", 0)
            raise ConfigurationError(f"{source}:{line}: {e.message.splitlines()[0]}") from None

    def fail(self, section, key, msg):
        return ConfigurationError(f"{self.source}:{_line_of(self.text, section, key)}: [{section}] "
                                  + (f"{key}: " if key else "") + msg)

    def float(self, section, key, default=None):
        if not self.cp.has_option(section, key):
            if default is None:
                raise self.fail(section, None, f"missing key {key!r}")
            return default
        raw = self.cp.get(section, key)
        try:
            v = float(raw)
        except ValueError:
            raise self.fail(section, key, f"expected a number, got {raw!r}") from None
        if not math.isfinite(v):
            raise self.fail(section, key, "must be finite")
        return v

    def check_keys(self, section, allowed):
        for key in self.cp.options(section):
            if key not in allowed:
                raise self.fail(section, key, "unknown key")


def loads_register(text: str, source: str = "<config>") -> RegisterConfig:
    r = _Reader(text, source)
    if not r.cp.has_section("register"):
        raise ConfigurationError(f"{source}:0: missing [register] section")
    r.check_keys("register", ("b_field_t", "j_nn_khz", "secular_mode", "g_electron"))
    nuclei = []
    for section in r.cp.sections():
        if not section.startswith("nucleus."):
            continue
        name = section.split(".", 1)[1]
        if name not in SPECIES:
            raise r.fail(section, None, f"unknown nucleus {name!r}; known: {', '.join(SPECIES)}")
        r.check_keys(section, TENSOR_KEYS + ("gyro_mhz_per_t",))
        comps = {k: r.float(section, k, 0.0) for k in TENSOR_KEYS}
        species = SPECIES[name]
        if r.cp.has_option(section, "gyro_mhz_per_t"):
            species = SpinSpecies(name, r.float(section, "gyro_mhz_per_t"))
        try:
            nuclei.append(Nucleus(species, HyperfineTensor.from_components(**comps)))
        except ConfigurationError as e:
            raise r.fail(section, None, str(e)) from None
    order = {"Si29": 0, "H": 1}
    nuclei.sort(key=lambda n: order[n.species.label])
    electron = ELECTRON
    if r.cp.has_option("register", "g_electron"):
        electron = SpinSpecies("electron", r.float("register", "g_electron"))
    b_field = r.float("register", "b_field_t")
    j_nn = r.float("register", "j_nn_khz", 2.0)
    try:
        return RegisterConfig(
            b_field_t=b_field,
            nuclei=tuple(nuclei),
            electron=electron,
            j_nn_khz=j_nn,
            secular_mode=r.cp.get("register", "secular_mode", fallback="secular").strip(),
        )
    except ConfigurationError as e:
        raise r.fail("register", None, str(e)) from None


def loads_noise(text: str, source: str = "<config>") -> DephasingNoise | None:
    """Noise sections of a config file, or ``None`` when there are none."""
    r = _Reader(text, source)
    spins, t1 = {}, {}
    found = False
    for section in r.cp.sections():
        if not section.startswith("noise."):
            continue
        found = True
        name = section.split(".", 1)[1]
        kind = r.cp.get(section, "kind", fallback="quasi_static").strip()
        r.check_keys(section, ("kind", "sigma_khz", "t2star_ms", "tau_c_ms", "t1_ms"))
        if r.cp.has_option(section, "t1_ms"):
            t1[name] = r.float(section, "t1_ms")
        try:
            if kind == "quasi_static":
                if r.cp.has_option(section, "t2star_ms"):
                    spins[name] = QuasiStatic.from_t2star(r.float(section, "t2star_ms"))
                else:
                    spins[name] = QuasiStatic(r.float(section, "sigma_khz"))
            elif kind == "ou":
                spins[name] = OrnsteinUhlenbeck(r.float(section, "sigma_khz"), r.float(section, "tau_c_ms"))
            else:
                raise r.fail(section, "kind", f"expected quasi_static or ou, got {kind!r}")
        except ConfigurationError as e:
            if str(e).startswith(source):
                raise
            raise r.fail(section, None, str(e)) from None
    rho, seed = 0.0, 0
    if r.cp.has_section("noise"):
        found = True
        r.check_keys("noise", ("cross_correlation", "seed"))
        rho = r.float("noise", "cross_correlation", 0.0)
        seed = int(r.float("noise", "seed", 0.0))
    if not found:
        return None
    try:
        return DephasingNoise(spins, cross_correlation=rho, seed=seed, t1_ms=t1)
    except ConfigurationError as e:
        raise r.fail("noise", "cross_correlation", str(e)) from None


def load_config(path: str) -> tuple[RegisterConfig, DephasingNoise | None]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return loads_register(text, path), loads_noise(text, path)


def dumps_config(config: RegisterConfig, noise: DephasingNoise | None = None) -> str:
    lines = ["[register]", f"b_field_t = {config.b_field_t!r}", f"j_nn_khz = {config.j_nn_khz!r}",
             f"secular_mode = {config.secular_mode}"]
    if config.electron.gyro != G_ELECTRON:
        lines.append(f"g_electron = {config.electron.gyro!r}")
    idx = {"a_zz": (2, 2), "a_xz": (2, 0), "a_yz": (2, 1), "a_xx": (0, 0), "a_yy": (1, 1), "a_xy": (0, 1)}
    for nuc in config.nuclei:
        lines += ["", f"[nucleus.{nuc.species.label}]"]
        if nuc.species.gyro != SPECIES[nuc.species.label].gyro:
            lines.append(f"gyro_mhz_per_t = {nuc.species.gyro!r}")
        for key in TENSOR_KEYS:
            v = float(nuc.hyperfine.a[idx[key]])
            if v != 0.0 or key == "a_zz":
                lines.append(f"{key} = {v!r}")
    if noise is not None:
        lines += ["", "[noise]", f"cross_correlation = {noise.cross_correlation!r}", f"seed = {noise.seed}"]
        for name in sorted(set(noise.spins) | set(noise.t1_ms)):
            lines += ["", f"[noise.{name}]"]
            proc = noise.spins.get(name)
            if isinstance(proc, OrnsteinUhlenbeck):
                lines += ["kind = ou", f"sigma_khz = {proc.sigma_khz!r}", f"tau_c_ms = {proc.tau_c_ms!r}"]
            elif proc is not None:
                lines += ["kind = quasi_static", f"sigma_khz = {proc.sigma_khz!r}"]
            if name in noise.t1_ms:
                lines.append(f"t1_ms = {noise.t1_ms[name]!r}")
    return "\n".join(lines) + "\n"
