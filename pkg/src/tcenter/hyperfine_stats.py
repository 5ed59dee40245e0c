"""Statistics of a first-principles 29Si hyperfine dataset and isotope placement.

Each table row is one lattice-site label. Off-plane sites come in mirror
pairs with the same ``A_zz`` and left/right ``A_xz`` values, so a row with
both ``A_xz`` fields filled counts twice.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .constants import SI29_ABUNDANCE
from .register import ConfigurationError

HEADER = ("label", "distance_a", "a_zz_mhz", "a_xz_left_mhz", "a_xz_right_mhz")
#: reference figures quoted for the full 1000-atom dataset at 2 MHz
REFERENCE_COUNT_2MHZ = 28
REFERENCE_EXPECTED_2MHZ = 1.3


class TableError(ConfigurationError):
    """Malformed hyperfine table."""


@dataclass(frozen=True)
class SiteRecord:
    """One labelled lattice site (or mirror pair) and its couplings in MHz."""

    label: str
    distance_angstrom: float | None
    a_zz_mhz: float
    a_xz_mhz: tuple[float, ...]

    @property
    def multiplicity(self) -> int:
        return len(self.a_xz_mhz)


@dataclass(frozen=True)
class SiteTable:
    records: tuple[SiteRecord, ...] = ()
    provenance: str = ""

    def __post_init__(self):
        labels = [r.label for r in self.records]
        if len(set(labels)) != len(labels):
            raise TableError("duplicate site label")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def expanded_azz(self) -> np.ndarray:
        """``A_zz`` per physical site, mirror pairs repeated."""
        return np.array([r.a_zz_mhz for r in self.records for _ in range(r.multiplicity)], dtype=float)


def _field(raw: str, name: str, line: int, source: str, required: bool) -> float | None:
    raw = raw.strip()
    if not raw:
        if required:
            raise TableError(f"{source}:{line}: {name} is empty")
        return None
    try:
        v = float(raw)
    except ValueError:
        raise TableError(f"{source}:{line}: {name}: expected a number, got {raw!r}") from None
    if not math.isfinite(v):
        raise TableError(f"{source}:{line}: {name} must be finite")
    return v


def loads_table(text: str, source: str = "<table>") -> SiteTable:
    """Parse a hyperfine table from CSV text. Empty text gives an empty table."""
    if not text.strip():
        return SiteTable((), source)
    reader = csv.reader(io.StringIO(text))
    header = tuple(h.strip() for h in next(reader))
    if header != HEADER:
        raise TableError(f"{source}:1: expected header {','.join(HEADER)}")
    records, seen = [], {}
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(HEADER):
            raise TableError(f"{source}:{line}: expected {len(HEADER)} fields, got {len(row)}")
        label = row[0].strip()
        if not label:
            raise TableError(f"{source}:{line}: empty label")
        if label in seen:
            raise TableError(f"{source}:{line}: duplicate label {label!r} (first on line {seen[label]})")
        seen[label] = line
        dist = _field(row[1], "distance_a", line, source, False)
        if dist is not None and dist <= 0:
            raise TableError(f"{source}:{line}: distance_a must be > 0")
        azz = _field(row[2], "a_zz_mhz", line, source, True)
        if abs(azz) >= 200:
            raise TableError(f"{source}:{line}: |a_zz_mhz| must be < 200 MHz")
        left = _field(row[3], "a_xz_left_mhz", line, source, True)
        right = _field(row[4], "a_xz_right_mhz", line, source, False)
        axz = (left,) if right is None else (left, right)
        records.append(SiteRecord(label, dist, azz, axz))
    return SiteTable(tuple(records), source)


def load_table(path=None) -> SiteTable:
    """Load a table from ``path``, or the bundled dataset when ``path`` is None."""
    if path is None:
        ref = resources.files("tcenter") / "data" / "table_s1.csv"
        return loads_table(ref.read_text(encoding="utf-8"), "bundled:table_s1.csv")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise TableError(f"{path}: {e.strerror}") from None
    return loads_table(text, str(path))


def dumps_table(table: SiteTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in table:
        right = repr(r.a_xz_mhz[1]) if r.multiplicity == 2 else ""
        dist = "" if r.distance_angstrom is None else repr(r.distance_angstrom)
        w.writerow([r.label, dist, repr(r.a_zz_mhz), repr(r.a_xz_mhz[0]), right])
    return buf.getvalue()


def count_sites_above(table: SiteTable, threshold_mhz: float) -> int:
    """Number of physical sites with ``|A_zz| > threshold_mhz``."""
    if not threshold_mhz > 0:
        raise ConfigurationError("threshold must be > 0")
    return int(sum(r.multiplicity for r in table if abs(r.a_zz_mhz) > threshold_mhz))


def expected_strong_count(table: SiteTable, threshold_mhz: float, abundance: float = SI29_ABUNDANCE) -> float:
    """Mean number of 29Si nuclei on sites above threshold."""
    if not 0 <= abundance <= 1:
        raise ConfigurationError("abundance must lie in [0, 1]")
    return count_sites_above(table, threshold_mhz) * abundance


@dataclass(frozen=True)
class RegisterSample:
    """Monte Carlo distribution of strongly coupled 29Si counts."""

    threshold_mhz: float
    abundance: float
    n_samples: int
    n_sites: int
    histogram: np.ndarray
    p_at_least_one: float
    p_at_least_one_stderr: float
    p_at_least_one_analytic: float
    mean_count: float
    azz_mode_bin_mhz: tuple[float, float] | None = None
    azz_histogram: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "threshold_mhz": self.threshold_mhz,
            "abundance": self.abundance,
            "n_samples": self.n_samples,
            "count": self.n_sites,
            "expected": self.n_sites * self.abundance,
            "mean_count": self.mean_count,
            "p_at_least_one": self.p_at_least_one,
            "p_at_least_one_stderr": self.p_at_least_one_stderr,
            "p_at_least_one_analytic": self.p_at_least_one_analytic,
            "histogram": [int(x) for x in self.histogram],
            "azz_mode_bin_mhz": None if self.azz_mode_bin_mhz is None else list(self.azz_mode_bin_mhz),
        }


def monte_carlo_register(table: SiteTable, threshold_mhz: float, abundance: float = SI29_ABUNDANCE,
                         n_samples: int = 100_000, seed: int = 0, bin_mhz: float = 5.0) -> RegisterSample:
    """Populate every site above threshold with 29Si independently per sample.

    Besides the count histogram, occupied |A_zz| values are binned in
    ``bin_mhz`` steps and the most frequent bin is reported.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    if not 0 <= abundance <= 1:
        raise ConfigurationError("abundance must lie in [0, 1]")
    azz = np.abs(table.expanded_azz())
    strong = azz[azz > threshold_mhz]
    n = strong.size
    rng = np.random.default_rng(seed)
    occupied = rng.random((n_samples, n)) < abundance
    counts = occupied.sum(axis=1)
    hist = np.bincount(counts, minlength=n + 1)
    p = float(np.mean(counts >= 1))
    mode, azz_hist = None, {}
    hits = occupied.sum(axis=0)
    if hits.sum() > 0:
        edges = np.floor(strong / bin_mhz) * bin_mhz
        for lo, h in zip(edges, hits):
            azz_hist[float(lo)] = azz_hist.get(float(lo), 0) + int(h)
        lo = max(azz_hist, key=azz_hist.get)
        mode = (lo, lo + bin_mhz)
    return RegisterSample(
        threshold_mhz=threshold_mhz,
        abundance=abundance,
        n_samples=n_samples,
        n_sites=n,
        histogram=hist,
        p_at_least_one=p,
        p_at_least_one_stderr=math.sqrt(p * (1 - p) / n_samples),
        p_at_least_one_analytic=1 - (1 - abundance) ** n,
        mean_count=float(counts.mean()),
        azz_mode_bin_mhz=mode,
        azz_histogram=dict(sorted(azz_hist.items())),
    )


def census(table: SiteTable, thresholds=(1.0, 2.0), abundance: float = SI29_ABUNDANCE,
           n_samples: int = 100_000, seed: int = 0) -> dict:
    """Per-threshold counts, expectations and P(>=1), with the reference figures at 2 MHz."""
    out = {"source": table.provenance, "abundance": abundance, "thresholds": []}
    for k, t in enumerate(thresholds):
        mc = monte_carlo_register(table, t, abundance, n_samples, seed + k)
        entry = {"threshold": t, "count": mc.n_sites, "expected": mc.n_sites * abundance,
                 "p_at_least_one": mc.p_at_least_one,
                 "p_at_least_one_stderr": mc.p_at_least_one_stderr,
                 "p_at_least_one_analytic": mc.p_at_least_one_analytic,
                 "histogram": [int(x) for x in mc.histogram],
                 "azz_mode_bin_mhz": None if mc.azz_mode_bin_mhz is None else list(mc.azz_mode_bin_mhz)}
        if t == 2.0:
            entry["reference"] = {
                "count": REFERENCE_COUNT_2MHZ, "expected": REFERENCE_EXPECTED_2MHZ,
                "note": (f"table count {mc.n_sites} vs full-dataset count {REFERENCE_COUNT_2MHZ}; "
                         f"expected {mc.n_sites * abundance:.2f} vs approximately {REFERENCE_EXPECTED_2MHZ}"),
            }
        out["thresholds"].append(entry)
    return out


def census_json(table: SiteTable, **kw) -> str:
    return json.dumps(census(table, **kw), indent=2, sort_keys=True) + "\n"
