"""Command-line entry point: ``tcenter <command> [options]``.

Commands write their results into the output directory (``--out``, else
``$TCENTER_OUT``, else ``./tcenter-out``) together with ``manifest.json``,
which records the arguments, seed and a SHA-256 hash per output file.
``tcenter replay manifest.json`` re-runs a recorded command and checks the
outputs hash-identically.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import re
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ERROR_BUDGET,
    IDEAL_BUDGET,
    NOISE_PRESETS,
    REGISTER_PRESETS,
    load_config,
    noise_preset,
    register_preset,
)
from .engine import run_sequence
from .fitting import (
    FitError,
    detect_frequency_jump,
    estimate_pi_fidelity,
    fit_dd_scaling,
    fit_ramsey,
    fit_stretched_exp,
    read_xy_csv,
    to_json,
    write_xy_csv,
)
from .hyperfine_stats import census, load_table
from .noise import DephasingNoise, MeissnerEvent, apply_meissner, monte_carlo_decay
from .readout import IDEAL_READOUT, ReadoutModel
from .register import (
    DOWN_E,
    DOWN_N,
    DRIVE_THRESHOLD,
    UP_E,
    UP_N,
    ConfigurationError,
    build_hamiltonian,
    default_drive_axes,
    diagonalize,
    transition_catalog,
)
from .sequences import DEFAULT_NUCLEAR_RABI_MHZ, Sequence, bell_name, experiment_for
from .tomography import bell_ramsey_t2, bell_ramsey_trace, extract_offdiagonal, tomography_pipeline

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
DEFAULT_OUT = "tcenter-out"
ELECTRON_RABI_MHZ = 1 / 0.18  # 90 ns pi pulse
SIMULATE_KINDS = ("rabi", "ramsey", "hahn_echo", "cpmg", "xy4", "xy8", "t1", "odmr", "nmr",
                  "bell-tomography", "bell-ramsey", "meissner")
DECAY_KINDS = ("ramsey", "hahn_echo", "cpmg", "xy4", "xy8")
STDERR_FLOOR = 1e-3  # relative to the data range
FIT_KINDS = ("stretched", "dd-scaling", "ramsey", "jump", "bell-offdiag", "pi-fidelity")


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# argument helpers


_UNITS = {"hz": 1e-6, "khz": 1e-3, "mhz": 1.0, "ghz": 1e3}


def frequency_mhz(text: str) -> float:
    """Parse ``5``, ``5MHz``, ``500 kHz`` into MHz."""
    m = re.fullmatch(r"\s*([-+]?[\d.]+(?:[eE][-+]?\d+)?)\s*([a-zA-Z]*)\s*", text)
    if not m or (m.group(2) and m.group(2).lower() not in _UNITS):
        raise argparse.ArgumentTypeError(f"not a frequency: {text!r}")
    return float(m.group(1)) * _UNITS[m.group(2).lower() or "mhz"]


def value_grid(text: str) -> np.ndarray:
    """``start:stop:num`` (inclusive linspace) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, num = text.split(":")
            return np.linspace(float(start), float(stop), int(num))
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:num or a comma list, got {text!r}") from None


def transition_pair(text: str) -> tuple[str, str]:
    parts = re.split(r"\s*(?:,|->)\s*", text.strip())
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'from,to', got {text!r}")
    return parts[0], parts[1]


def _common(p: argparse.ArgumentParser, *, register=True, seed=True):
    if register:
        p.add_argument("--preset", default="paper-T1", help=f"register preset ({', '.join(REGISTER_PRESETS)})")
        p.add_argument("--config", help="INI file with [register]/[nucleus.*]/[noise*] sections")
        p.add_argument("--mode", choices=("secular", "full"), help="override the hyperfine mode")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default: $TCENTER_OUT or ./tcenter-out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcenter", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tcenter {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("catalog", help="energy levels and transition table")
    _common(p, seed=False)
    p.add_argument("--drive-threshold", type=float, default=DRIVE_THRESHOLD,
                   help="smallest |drive element| listed")

    p = sub.add_parser("simulate", help="run an experiment and write a sweep CSV")
    p.add_argument("kind", choices=SIMULATE_KINDS)
    _common(p)
    p.add_argument("--noise", help=f"noise preset ({', '.join(NOISE_PRESETS)}) or 'none'")
    p.add_argument("--traj", type=int, help="Monte Carlo trajectories")
    p.add_argument("--shots", type=int, help="readout shots per point (default: exact expectation)")
    p.add_argument("--values", type=value_grid, help="sweep grid, start:stop:num or a comma list")
    p.add_argument("--transition", type=transition_pair, help="driven transition 'from,to'")
    p.add_argument("--rabi", type=frequency_mhz, help="Rabi frequency")
    p.add_argument("--n", type=int, default=1, help="CPMG pulses or XY repetitions")
    p.add_argument("--virtual-detuning", type=frequency_mhz, default=0.0)
    p.add_argument("--state", default="phi-", help="Bell state: phi+, phi-, psi+, psi-")
    p.add_argument("--budget", choices=("ideal", "error-budget"), default="ideal",
                   help="initialization and gate errors for Bell preparation")
    p.add_argument("--gates", choices=("ideal", "physical"), default="ideal",
                   help="ideal: only the addressed transition is driven; physical: include off-resonant lines")
    p.add_argument("--readout", choices=("ideal", "default"), default="ideal")
    p.add_argument("--omega", type=float, default=2 * math.pi * 0.5e-3,
                   help="bell-ramsey reversal phase rate (rad/us)")
    p.add_argument("--jump", type=frequency_mhz, default=0.7, help="meissner step")
    p.add_argument("--t-jump", type=float, default=1.25, help="meissner step time after the first pulse (us)")
    p.add_argument("--drive-offset", type=frequency_mhz, default=0.0, help="drive minus resonance")

    p = sub.add_parser("fit", help="fit a CSV and write JSON parameters")
    p.add_argument("kind", choices=FIT_KINDS)
    p.add_argument("data", help="CSV x,y[,stderr]")
    _common(p, register=False, seed=False)
    p.add_argument("--fix-n", type=float, help="fixed stretch exponent")
    p.add_argument("--fix-offset", type=float, help="fixed offset")
    p.add_argument("--state", default="phi-", help="Bell state of a bell-offdiag sweep")

    p = sub.add_parser("hyperfine", help="29Si hyperfine census and isotope Monte Carlo")
    _common(p, register=False)
    p.add_argument("--table", help="hyperfine table CSV (default: bundled dataset)")
    p.add_argument("--threshold", type=float, action="append", help="A_zz threshold in MHz (repeatable)")
    p.add_argument("--abundance", type=float, default=None)
    p.add_argument("--samples", type=int, default=100_000)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out", help="directory for the re-run (default: a temporary directory)")
    return parser


# ---------------------------------------------------------------------------
# outputs


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


class Outputs:
    def __init__(self, directory: Path):
        self.dir = directory
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str):
        write_atomic(self.dir / name, text)
        self.files[name] = sha256(self.dir / name)

    def manifest(self, args: argparse.Namespace, argv: list[str]):
        config = getattr(args, "config", None)
        data = {
            "tool": "tcenter",
            "version": __version__,
            "subcommand": args.command,
            "argv": argv,
            "preset": getattr(args, "preset", None),
            "config": config and str(Path(config).resolve()),
            "config_sha256": config and sha256(Path(config)),
            "seed": getattr(args, "seed", None),
            "out": str(self.dir),
            "files": [{"name": k, "sha256": v} for k, v in sorted(self.files.items())],
        }
        write_atomic(self.dir / "manifest.json", json.dumps(data, indent=2, sort_keys=True) + "\n")


def sweep_csv(x, mean, stderr=None) -> str:
    return write_xy_csv(x, mean, stderr, header=("sweep_value", "mean", "stderr"))


# ---------------------------------------------------------------------------
# commands


def _register(args):
    noise = None
    if args.config:
        try:
            config, noise = load_config(args.config)
        except OSError as e:
            raise InputError(f"{args.config}: {e.strerror}") from None
    else:
        config = register_preset(args.preset)
    if args.mode:
        config = replace(config, secular_mode=args.mode)
    return config, noise


def _catalog(config, threshold=DRIVE_THRESHOLD):
    levels = diagonalize(build_hamiltonian(config))
    return transition_catalog(levels, default_drive_axes(config), threshold=threshold, config=config)


def cmd_catalog(args, out: Outputs):
    config, _ = _register(args)
    if not args.drive_threshold > 0:
        raise InputError("--drive-threshold must be > 0")
    cat = _catalog(config, args.drive_threshold)
    out.write("transitions.csv", cat.to_csv())
    out.write("levels.csv", cat.levels_csv())
    kinds = {}
    for t in cat.transitions:
        kinds[t.kind] = kinds.get(t.kind, 0) + 1
    print(f"{len(cat.levels)} levels, {len(cat.transitions)} transitions: "
          + ", ".join(f"{k} {v}" for k, v in sorted(kinds.items())))


def _noise(args, from_config, default=None):
    if args.noise == "none":
        return None
    if args.noise:
        return noise_preset(args.noise)
    if from_config is not None:
        return from_config
    return noise_preset(default) if default else None


def _default_transition(cat, nuclear: bool) -> tuple[str, str]:
    """ESR (or last-nucleus NMR) line out of the all-down state of the register."""
    n_nuc = cat.levels.n_spins - 1
    ground = DOWN_E + DOWN_N * n_nuc
    if not nuclear:
        return ground, UP_E + DOWN_N * n_nuc
    if n_nuc == 0:
        raise InputError("nmr needs at least one nucleus")
    return ground, ground[:-1] + UP_N


def _upper_population(res, index):
    per = np.array([np.abs(r[-1][:, index]) ** 2 for r in res.records])
    n = per.shape[1]
    err = per.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else None
    return per.mean(axis=1), err


def cmd_simulate(args, out: Outputs):
    config, cfg_noise = _register(args)
    cat = _catalog(config)
    kind = args.kind
    if kind == "bell-tomography":
        return _simulate_bell_tomography(args, cat, cfg_noise, out)
    if kind == "bell-ramsey":
        return _simulate_bell_ramsey(args, cat, cfg_noise, out)

    transition = args.transition or _default_transition(cat, nuclear=kind == "nmr")
    t = cat.find(*transition)
    rabi = args.rabi or (DEFAULT_NUCLEAR_RABI_MHZ if t.channel == "RF" else ELECTRON_RABI_MHZ)
    noise = _noise(args, cfg_noise)
    if kind == "meissner":
        return _simulate_meissner(args, cat, transition, rabi, out)
    values = args.values
    if kind in DECAY_KINDS:
        if values is None:
            values = np.linspace(0, 2, 201) if kind == "ramsey" else np.linspace(0, 3000, 31)
        n_traj = args.traj or (400 if noise is not None else 1)
        mean, err = monte_carlo_decay(cat, kind, values, noise or DephasingNoise({}), transition=transition,
                                      rabi_mhz=rabi, n=args.n, n_traj=n_traj, seed=args.seed,
                                      virtual_detuning_mhz=args.virtual_detuning)
        out.write("sweep.csv", sweep_csv(values, mean, err if n_traj > 1 else None))
        return
    abs_d = t.abs_drive
    if kind == "rabi":
        values = values if values is not None else np.linspace(0, 2 / (rabi * abs_d), 101)
        seq = experiment_for("rabi", cat, transition, rabi, values)
    elif kind in ("odmr", "nmr"):
        span = 2.0 if kind == "odmr" else 3e-3
        values = values if values is not None else np.linspace(t.freq - span, t.freq + span, 121)
        seq = experiment_for(f"{kind}_sweep", cat, transition, rabi, values)
    else:  # t1
        values = values if values is not None else np.linspace(0, 1e6, 21)
        seq = experiment_for("t1", cat, transition, rabi, values)
    start = transition[1] if kind == "t1" else transition[0]
    n_traj = args.traj or (200 if noise is not None else 1)
    res = run_sequence(cat, seq, start, noise=noise, n_traj=n_traj, seed=args.seed)
    mean, err = _upper_population(res, cat.levels.index(transition[1]))
    out.write("sweep.csv", sweep_csv(values, mean, err))


def _simulate_meissner(args, cat, transition, rabi, out):
    values = args.values if args.values is not None else np.arange(151) * 0.02
    detuning = args.virtual_detuning or 5.0
    seq = experiment_for("ramsey", cat, transition, rabi, values, virtual_detuning_mhz=detuning)
    seq = Sequence(tuple(replace(it, freq_mhz=it.freq_mhz + args.drive_offset) if hasattr(it, "freq_mhz") else it
                         for it in seq.items), seq.sweep)
    event = MeissnerEvent(args.jump, args.t_jump)
    upper = cat.levels.index(transition[1])
    y = [np.mean(np.abs(run_sequence(cat, s, transition[0]).final[0][:, upper]) ** 2)
         for s in apply_meissner(seq, event)]
    out.write("sweep.csv", sweep_csv(values, np.array(y)))


def _simulate_bell_tomography(args, cat, cfg_noise, out):
    which = bell_name(args.state)
    budget = ERROR_BUDGET if args.budget == "error-budget" else IDEAL_BUDGET
    initial = budget.initial_batch(cat)
    kw = dict(initial=initial, n_traj=len(initial), angle_errors=budget.angle_errors,
              model=IDEAL_READOUT if args.readout == "ideal" else ReadoutModel(), shots=args.shots,
              seed=args.seed, noise=_noise(args, cfg_noise),
              rwa_cutoff_mhz=1e-4 if args.gates == "ideal" else None)
    if kw["noise"] is not None:
        kw["n_traj"] = len(initial) * max(1, (args.traj or 1000) // len(initial))
        kw["initial"] = np.tile(initial, (kw["n_traj"] // len(initial), 1))
    theta = args.values
    result = tomography_pipeline(cat, which, theta, **kw)
    out.write("sweep.csv", sweep_csv(result.theta, result.sigma_z))
    out.write("tomography.json", result.to_json())
    print(f"{which}: fidelity {result.fidelity:.6f}")


def _simulate_bell_ramsey(args, cat, cfg_noise, out):
    which = bell_name(args.state)
    noise = _noise(args, cfg_noise, default="nuclear-correlated")
    if noise is not None and "e" in noise.spins:
        # in the ↓ manifold electron noise is a global phase of the nuclear state
        noise = replace(noise, spins={k: v for k, v in noise.spins.items() if k != "e"})
    values = args.values if args.values is not None else np.linspace(0, 10_000, 41)
    n_traj = args.traj or 1000
    mean, err = bell_ramsey_trace(cat, which, values, args.omega, noise=noise, n_traj=n_traj, seed=args.seed)
    out.write("sweep.csv", sweep_csv(values, mean, err if n_traj > 1 else None))
    fit = bell_ramsey_t2(values, mean, args.omega)
    out.write("t2.json", json.dumps({"state": which, "t2_us": fit.t2, "stderr_us": fit.stderr,
                                      "no_decay": fit.no_decay}, indent=2, sort_keys=True) + "\n")


def _read_csv(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    try:
        x, y, err = read_xy_csv(text)
    except ValueError as e:
        raise InputError(f"{path}: {e}") from None
    if len(x) == 0:
        raise InputError(f"{path}: no data rows")
    if err is not None:
        # Monte Carlo points where every trajectory agrees report ~0 error; floor it so
        # a single point cannot dominate the weights
        err = np.maximum(err, STDERR_FLOOR * max(float(np.ptp(y)), 1e-12))
    return x, y, err


def cmd_fit(args, out: Outputs):
    x, y, err = _read_csv(args.data)
    kind = args.kind
    try:
        if kind == "stretched":
            result = fit_stretched_exp(x, y, fix_n=args.fix_n, yerr=err, fix_offset=args.fix_offset)
        elif kind == "dd-scaling":
            result = fit_dd_scaling(np.c_[x, y])
        elif kind == "ramsey":
            result = fit_ramsey(x, y, yerr=err)
        elif kind == "jump":
            result = detect_frequency_jump(x, y)
        elif kind == "bell-offdiag":
            result = extract_offdiagonal(x, y, err, parity=bell_name(args.state)[:3])
        else:
            pf = estimate_pi_fidelity(np.c_[x, y])
            result = {"model": "pi_fidelity", "fidelity": pf.fidelity, "stderr": pf.stderr,
                      "intercept": pf.intercept}
    except FitError:
        raise
    except (ValueError, ConfigurationError) as e:
        raise InputError(f"{args.data}: {e}") from None
    text = to_json(result)
    out.write("fit.json", text)
    print(text, end="")


def cmd_hyperfine(args, out: Outputs):
    table = load_table(args.table)
    thresholds = tuple(args.threshold or (1.0, 2.0))
    if any(not t > 0 for t in thresholds):
        raise InputError("thresholds must be > 0")
    kw = {} if args.abundance is None else {"abundance": args.abundance}
    if args.samples < 1:
        raise InputError("--samples must be >= 1")
    stats = census(table, thresholds=thresholds, n_samples=args.samples, seed=args.seed, **kw)
    out.write("hyperfine.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    for entry in stats["thresholds"]:
        print(f"|A_zz| > {entry['threshold']:g} MHz: {entry['count']} sites, expected 29Si "
              f"{entry['expected']:.4g}, P(>=1) {entry['p_at_least_one']:.4f} "
              f"(analytic {entry['p_at_least_one_analytic']:.4f})")
        if "reference" in entry:
            print("  " + entry["reference"]["note"])


def cmd_replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        argv = list(manifest["argv"])
        recorded = {f["name"]: f["sha256"] for f in manifest["files"]}
    except (OSError, ValueError, KeyError, TypeError) as e:
        print(f"error: unreadable manifest {args.manifest}: {e}", file=sys.stderr)
        return EXIT_INPUT
    if manifest.get("config") and manifest.get("config_sha256"):
        if not Path(manifest["config"]).exists() or sha256(Path(manifest["config"])) != manifest["config_sha256"]:
            print(f"error: config {manifest['config']} is missing or changed", file=sys.stderr)
            return EXIT_INPUT
    with tempfile.TemporaryDirectory() as tmp:
        target = Path(args.out) if args.out else Path(tmp)
        code = main(argv + ["--out", str(target)])
        if code != EXIT_OK:
            return code
        bad = [name for name, h in recorded.items()
               if not (target / name).exists() or sha256(target / name) != h]
    if bad:
        print(f"replay mismatch: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"replay identical: {len(recorded)} file(s)")
    return EXIT_OK


def _strip_out(argv: list[str]) -> list[str]:
    clean, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out":
            skip = True
        elif not a.startswith("--out="):
            clean.append(a)
    return clean


COMMANDS = {"catalog": cmd_catalog, "simulate": cmd_simulate, "fit": cmd_fit, "hyperfine": cmd_hyperfine}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command == "replay":
        return cmd_replay(args)
    out = Outputs(Path(args.out or os.environ.get("TCENTER_OUT") or DEFAULT_OUT))
    try:
        COMMANDS[args.command](args, out)
    except (InputError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (FitError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        resid = getattr(e, "residuals", None)
        if resid is not None and len(resid):
            r = np.asarray(resid, dtype=float)
            print(f"residuals: n={r.size} rms={math.sqrt(float(np.mean(r * r))):.4g} "
                  f"max|r|={float(np.max(np.abs(r))):.4g}", file=sys.stderr)
        return EXIT_NUMERIC
    out.manifest(args, _strip_out(argv))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
