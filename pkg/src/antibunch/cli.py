"""``antibunch`` command line: simulate, correlate, normalize, fit, scan,
saturation, tcspc, replay.

Every command writes its primary output to ``--out`` (``-`` for stdout) and,
for file outputs, a ``<out>.manifest.json`` run manifest next to it.  The
manifest holds the resolved config, the options, the seed and sha256
digests of all inputs and outputs; ``antibunch replay`` reruns it and checks
the digests.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
import warnings
from typing import Any, Callable, Dict, Optional

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import ConfigError
from .constants import frequency_to_energy
from .correlator import (CorrelationError, CorrelationRequest, correlate,
                         correlate_segments, poisson_normalize)
from .fitting import (FitError, FitProblem, extract_g2_zero, fit, fit_doublet_scan,
                      fit_power_series)
from .fitting.models import REGISTRY
from .io import (FormatError, histogram_to_text, json_text, parse_histogram, parse_table,
                 parse_timestamps, read_bytes, sha256_bytes, table_to_text,
                 timestamps_to_bytes, write_bytes)
from .irf import ConvolutionError, IrfParams
from .physics import linewidth_from_t2, saturation_parameter, tcspc_decay
from .rng import substream
from .sim import max_threads, simulate_stream
from .spectra import line_profile, scan_spectrum

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST_SUFFIX = ".manifest.json"


class UsageError(ValueError):
    pass


class Run:
    """Bookkeeping for one command: input digests and the resolved config."""

    def __init__(self):
        self.inputs: Dict[str, str] = {}
        self.config: Optional[dict] = None

    def read(self, path) -> bytes:
        data = read_bytes(path)
        self.inputs[str(path)] = sha256_bytes(data)
        return data

    def load_config(self, opts, cfg=None):
        if cfg is None:
            try:
                text = self.read(opts["config"])
            except OSError as exc:
                raise ConfigError(f"{opts['config']}: {exc.strerror}") from None
            try:
                raw = json.loads(text)
            except ValueError as exc:
                raise ConfigError(f"{opts['config']}: malformed JSON: {exc}") from None
            cfg = cfgmod.resolve(raw)
        self.config = cfg
        mf = (self.config.get("channels") or {}).get("mode_fraction")
        if isinstance(mf, dict) and os.path.exists(mf["table"]):
            self.read(mf["table"])
        return self.config


def _seed(opts, cfg):
    if opts.get("seed") is not None:
        return int(opts["seed"])
    return int((cfg.get("simulation") or {}).get("seed", 0))


# ---------------------------------------------------------------- commands

def run_simulate(opts, run: Run, cfg=None) -> bytes:
    cfg = run.load_config(opts, cfg)
    sim = cfgmod.build_sim_config(cfg, _seed(opts, cfg))
    stream = simulate_stream(sim)
    return timestamps_to_bytes(stream, opts["format"])


def run_correlate(opts, run: Run, cfg=None) -> bytes:
    stream = parse_timestamps(run.read(opts["input"]), opts.get("duration_ps"))
    try:
        req = CorrelationRequest(opts["start_ch"], opts["stop_ch"], opts["bin_ps"],
                                 opts["window_ps"], opts["mode"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for ch in (req.start_channel, req.stop_channel):
        if ch not in stream.channel_ids():
            raise CorrelationError(f"channel {ch} not present in input "
                                   f"(channels: {stream.channel_ids()})")
    if opts.get("segments", 1) > 1:
        h = correlate_segments(stream, req, opts["segments"])
    else:
        h = correlate(stream, req)
    if not opts.get("raw"):
        h = poisson_normalize(h)
    return histogram_to_text(h).encode()


def run_normalize(opts, run: Run, cfg=None) -> bytes:
    h = parse_histogram(run.read(opts["input"]).decode("utf-8"))
    return histogram_to_text(poisson_normalize(h)).encode()


def _parse_init(items):
    out = {}
    for item in items or ():
        for part in item.split(","):
            if not part.strip():
                continue
            key, sep, val = part.partition("=")
            if not sep:
                raise UsageError(f"--init expects name=value, got {part!r}")
            try:
                out[key.strip()] = float(val)
            except ValueError:
                raise UsageError(f"--init value for {key.strip()!r} is not a number") from None
    return out


def _parse_fix(items):
    return [p.strip() for item in items or () for p in item.split(",") if p.strip()]


def _fit_columns(table, opts, names):
    cols = {}
    for role, name in zip(("x", "y", "sigma"), names):
        if name is None:
            continue
        if name not in table:
            raise UsageError(f"column {name!r} not in input (columns: {sorted(table)})")
        cols[role] = table[name]
    return cols


def run_fit(opts, run: Run, cfg=None) -> bytes:
    model = opts["model"]
    text = run.read(opts["input"]).decode("utf-8")
    init = _parse_init(opts.get("init"))
    fixed = _parse_fix(opts.get("fix"))
    irf = IrfParams(opts.get("irf_fwhm_ps") or 0.0)
    report: Dict[str, Any] = {"model": model, "irf_fwhm_ps": irf.fwhm, "input": opts["input"]}
    is_hist = "tau_ps,raw,normalized,sigma" in text.splitlines()[:40]

    if model == "power_series":
        table = parse_table(text)
        for need in ("power_nw",):
            if need not in table:
                raise UsageError(f"power_series needs a {need!r} column")
        inten = table.get(opts.get("y") or "intensity_noisy", table.get("intensity"))
        fwhm = table.get("fwhm_noisy", table.get("fwhm_uev"))
        beta = init.pop("beta", None) if "beta" in fixed else None
        r = fit_power_series(table["power_nw"], inten, fwhm,
                             table.get("intensity_sigma"), table.get("fwhm_sigma"),
                             beta=beta, p0=init or None)
        report["fit"] = r.fit.as_dict()
        report["power_series"] = {"gamma0_uev": r.gamma0, "gamma0_err_uev": r.gamma0_err,
                                  "t2_from_gamma0_ps": r.t2_from_gamma0,
                                  "degenerate": [list(d) for d in r.degenerate],
                                  "message": r.message}
        return json_text(report).encode()

    if model not in REGISTRY:
        raise UsageError(f"unknown model {model!r}; choose from "
                         f"{sorted(REGISTRY) + ['power_series']}")
    if is_hist:
        h = parse_histogram(text)
        if not h.is_normalized:
            h = poisson_normalize(h)
        if model in ("g2_background_irf", "g2_resonant_weak_irf"):
            g = extract_g2_zero(h, model, irf, p0=init or None, fixed=fixed,
                                irf_sensitivity=opts.get("irf_sensitivity", False),
                                tau_limit=opts.get("tau_max_ps"))
            report["fit"] = g.fit.as_dict()
            report["g2_zero"] = {"convolved": g.convolved, "convolved_err": g.convolved_err,
                                 "deconvolved": g.deconvolved,
                                 "deconvolved_err": g.deconvolved_err}
            if g.irf_sensitivity:
                report["g2_zero"]["irf_sensitivity"] = [
                    {"irf_scale": f, "convolved": c, "deconvolved": d}
                    for f, c, d in g.irf_sensitivity]
            return json_text(report).encode()
        x, y, s = h.taus, h.normalized, h.sigma
    else:
        table = parse_table(text)
        cols = _fit_columns(table, opts, (opts.get("x"), opts.get("y"), opts.get("sigma")))
        if "x" not in cols or "y" not in cols:
            raise UsageError("table input needs --x and --y column names")
        x, y = cols["x"], cols["y"]
        s = cols.get("sigma")
        if s is None:
            s = np.ones_like(y)
            report["sigma"] = "unit weights (no --sigma column)"
    if model == "lorentzian_doublet":
        d = fit_doublet_scan(x, y, s, p0=init or None, fixed=fixed)
        report["fit"] = d.fit.as_dict()
        report["doublet"] = {"splitting_uev": d.splitting, "splitting_err_uev": d.splitting_err,
                             "centers_uev": list(d.centers), "fwhm_uev": d.fwhm,
                             "weights": list(d.weights), "unresolved": d.unresolved,
                             "degenerate_centers": d.degenerate_centers}
        return json_text(report).encode()
    res = fit(FitProblem(model, x, y, s, p0=init or None, fixed=fixed, irf=irf))
    report["fit"] = res.as_dict()
    return json_text(report).encode()


def _noisy(values, scale, rng):
    return values + rng.normal(0.0, 1.0, len(values)) * scale


def run_scan(opts, run: Run, cfg=None) -> bytes:
    cfg = run.load_config(opts, cfg)
    e = cfgmod.build_emitter(cfg)
    d = cfgmod.build_drive(cfg, e)
    ch = cfgmod.build_channels(cfg)
    sc = cfg.get("scan") or cfgmod.resolve({"schema": 1, "scan": {}})["scan"]
    step = frequency_to_energy(sc["step_mhz"])
    if not step > 0 or not sc["detuning_max_uev"] > sc["detuning_min_uev"]:
        raise ConfigError("config keys 'scan.*': need step_mhz > 0 and max > min detuning")
    n = int(math.floor((sc["detuning_max_uev"] - sc["detuning_min_uev"]) / step + 1e-9)) + 1
    delta = sc["detuning_min_uev"] + step * np.arange(n)
    out = scan_spectrum(e, d, delta, ch, stray_light=sc["stray_light"])
    cols = {k: out[k] for k in ("detuning_uev", "emitter", "mode", "total_emission")}
    if sc["noise_fraction"] > 0:
        rng = substream(_seed(opts, cfg), "scan_noise")
        for k in ("emitter", "mode"):
            scale = sc["noise_fraction"] * float(np.max(out[k])) if np.max(out[k]) > 0 else 0.0
            cols[k + "_noisy"] = _noisy(out[k], scale, rng)
            cols[k + "_sigma"] = np.full(n, scale if scale > 0 else 1.0)
    comments = [f"scan step {sc['step_mhz']} MHz = {step!r} ueV",
                f"saturation parameter {saturation_parameter(e, d)!r}",
                f"mode fraction {ch.mode_fraction!r}"]
    if opts.get("spectra"):
        axis = np.arange(-3 * sc["resolution_uev"], 3 * sc["resolution_uev"] + 1e-9,
                         sc["resolution_uev"] / 10.0) + sc["mode_detuning_uev"] / 2.0
        em = line_profile(axis, 0.0, sc["resolution_uev"])
        mo = line_profile(axis, sc["mode_detuning_uev"], sc["resolution_uev"])
        long = {"detuning_uev": np.repeat(delta, len(axis)),
                "energy_uev": np.tile(axis, n),
                "emitter": np.outer(out["emitter"], em).ravel(),
                "mode": np.outer(out["mode"], mo).ravel()}
        long["spectrum"] = long["emitter"] + long["mode"]
        comments.append(f"spectrometer resolution {sc['resolution_uev']!r} ueV FWHM")
        return table_to_text(long, comments).encode()
    return table_to_text(cols, comments).encode()


def run_saturation(opts, run: Run, cfg=None) -> bytes:
    cfg = run.load_config(opts, cfg)
    e = cfgmod.build_emitter(cfg)
    beta = float((cfg.get("drive") or {}).get("beta_per_ps2_nw", 1e-6))
    sat = cfg.get("saturation")
    if sat is None:
        raise ConfigError("missing required config key 'saturation'")
    if (sat["powers_nw"] is None) == (sat["saturation_values"] is None):
        raise ConfigError("config key 'saturation': give exactly one of "
                          "'powers_nw' or 'saturation_values'")
    if sat["powers_nw"] is not None:
        powers = np.array(sat["powers_nw"], float)
        s = beta * powers * e.t1 * e.t2
    else:
        s = np.array(sat["saturation_values"], float)
        powers = s / (beta * e.t1 * e.t2)
    if np.any(powers < 0):
        raise ConfigError("config key 'saturation': powers must be >= 0")
    gamma0 = linewidth_from_t2(e.t2)
    cols = {
        "power_nw": powers,
        "saturation_parameter": s,
        "intensity": 0.5 * s / (1.0 + s),
        "intensity_fraction": s / (1.0 + s),
        "fwhm_uev": gamma0 * np.sqrt(1.0 + s),
    }
    nf = sat["noise_fraction"]
    if nf > 0:
        rng = substream(_seed(opts, cfg), "saturation_noise")
        for k, name in (("intensity", "intensity"), ("fwhm_uev", "fwhm")):
            sig = nf * cols[k]
            sig = np.where(sig > 0, sig, nf * float(np.max(cols[k])) or 1.0)
            cols[name + "_noisy"] = _noisy(cols[k], sig, rng)
            cols[name + "_sigma"] = sig
    comments = [f"t1_ps {e.t1!r} t2_ps {e.t2!r} beta {beta!r}",
                f"zero-power linewidth {gamma0!r} ueV"]
    return table_to_text(cols, comments).encode()


def run_tcspc(opts, run: Run, cfg=None) -> bytes:
    cfg = run.load_config(opts, cfg)
    e = cfgmod.build_emitter(cfg)
    irf = cfgmod.build_irf(cfg)
    tc = cfg.get("tcspc") or cfgmod.resolve({"schema": 1, "tcspc": {}})["tcspc"]
    if not (tc["bin_ps"] > 0 and tc["t_max_ps"] > tc["t_min_ps"]):
        raise ConfigError("config keys 'tcspc.*': need bin_ps > 0 and t_max_ps > t_min_ps")
    n = int(math.floor((tc["t_max_ps"] - tc["t_min_ps"]) / tc["bin_ps"] + 1e-9)) + 1
    t = tc["t_min_ps"] + tc["bin_ps"] * np.arange(n)
    ideal = tcspc_decay(t - tc["t0_ps"], e)
    conv = tcspc_decay(t - tc["t0_ps"], e, irf)
    cols = {"t_ps": t, "ideal": ideal, "convolved": conv, "counts": tc["peak_counts"] * conv}
    if tc["noise_fraction"] > 0:
        rng = substream(_seed(opts, cfg), "tcspc_noise")
        scale = tc["noise_fraction"] * tc["peak_counts"]
        cols["counts"] = _noisy(cols["counts"], scale, rng)
        cols["sigma"] = np.full(n, scale)
    else:
        cols["sigma"] = np.sqrt(np.maximum(cols["counts"], 1.0))
    return table_to_text(cols, [f"t1_ps {e.t1!r} irf_fwhm_ps {irf.fwhm!r}"]).encode()


COMMANDS: Dict[str, Callable] = {
    "simulate": run_simulate,
    "correlate": run_correlate,
    "normalize": run_normalize,
    "fit": run_fit,
    "scan": run_scan,
    "saturation": run_saturation,
    "tcspc": run_tcspc,
}


# ---------------------------------------------------------------- manifests

def manifest_path(out) -> Optional[str]:
    return None if out in (None, "-") else str(out) + MANIFEST_SUFFIX


def build_manifest(command, opts, run: Run, out, data: bytes, wall, argv):
    return {
        "tool": "antibunch",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "options": {k: v for k, v in opts.items() if k not in ("out", "manifest")},
        "config": run.config,
        "seed": (_seed(opts, run.config) if run.config is not None else None),
        "threads": max_threads(),
        "inputs": dict(run.inputs),
        "outputs": {str(out): sha256_bytes(data)},
        "wall_clock_s": wall,
    }


def execute(command, opts, argv=(), cfg=None) -> bytes:
    """Run one command; write its output and manifest. Returns the output bytes."""
    run = Run()
    t0 = time.perf_counter()
    data = COMMANDS[command](opts, run, cfg)
    wall = time.perf_counter() - t0
    out = opts["out"]
    write_bytes(out, data)
    mpath = opts.get("manifest") or manifest_path(out)
    if mpath:
        write_bytes(mpath, json_text(build_manifest(command, opts, run, out, data, wall,
                                                    argv)).encode())
    return data


def replay(manifest_file, out=None) -> Dict[str, Any]:
    """Rerun a manifest and compare digests of inputs and the primary output."""
    try:
        with open(manifest_file) as fh:
            man = json.load(fh)
        command = man["command"]
        opts = dict(man["options"])
        (orig_out, digest), = man["outputs"].items()
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"{manifest_file}: not a run manifest ({exc})") from None
    if command not in COMMANDS:
        raise UsageError(f"{manifest_file}: unknown command {command!r}")
    for path, sha in man["inputs"].items():
        if path == "-":
            raise FormatError("run read stdin; replay needs the input as a file")
        if not os.path.exists(path):
            raise FormatError(f"input {path} is missing")
        got = sha256_bytes(read_bytes(path))
        if got != sha:
            raise FormatError(f"input {path} changed since the run (sha256 {got} != {sha})")
    cfg = cfgmod.resolve(man["config"]) if man.get("config") is not None else None
    if out is None:
        fd, tmp = tempfile.mkstemp(prefix="antibunch-replay-")
        os.close(fd)
    else:
        tmp = out
    try:
        opts["out"] = tmp
        opts["manifest"] = None
        run = Run()
        data = COMMANDS[command](opts, run, cfg)
        write_bytes(tmp, data)
    finally:
        if out is None and os.path.exists(tmp):
            os.unlink(tmp)
    got = sha256_bytes(data)
    return {"command": command, "output": orig_out, "expected": digest, "reproduced": got,
            "match": got == digest}


# ---------------------------------------------------------------- parser

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="antibunch", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"antibunch {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False, seed=False):
        if config:
            sp.add_argument("config", help="JSON run configuration")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides simulation.seed")
        sp.add_argument("--out", required=True, help="output path, '-' for stdout")
        sp.add_argument("--manifest", help="manifest path (default <out>.manifest.json)")

    sp = sub.add_parser("simulate", help="simulate a detected timestamp stream")
    common(sp, config=True, seed=True)
    sp.add_argument("--format", choices=("binary", "csv"), default="binary")

    sp = sub.add_parser("correlate", help="coincidence histogram of two channels")
    sp.add_argument("input", help="timestamp file, '-' for stdin")
    common(sp)
    sp.add_argument("--start-ch", type=int, required=True)
    sp.add_argument("--stop-ch", type=int, required=True)
    sp.add_argument("--bin-ps", type=float, required=True)
    sp.add_argument("--window-ps", type=float, required=True, help="tau_max (half window)")
    sp.add_argument("--mode", choices=("all_pairs", "start_stop"), default="all_pairs")
    sp.add_argument("--raw", action="store_true", help="skip Poisson normalization")
    sp.add_argument("--duration-ps", type=float,
                    help="integration time; default is the span of the timestamps")
    sp.add_argument("--segments", type=_positive_int, default=1,
                    help="correlate N time segments (in parallel) and merge")

    sp = sub.add_parser("normalize", help="Poisson-normalize a raw histogram")
    sp.add_argument("input")
    common(sp)

    sp = sub.add_parser("fit", help="fit a model to a histogram or table")
    sp.add_argument("input", help="histogram or CSV table, '-' for stdin")
    common(sp)
    sp.add_argument("--model", required=True,
                    choices=sorted(REGISTRY) + ["power_series"])
    sp.add_argument("--init", action="append", metavar="NAME=VALUE",
                    help="initial value(s), repeatable or comma separated")
    sp.add_argument("--fix", action="append", metavar="NAME",
                    help="hold parameter(s) at the initial value")
    sp.add_argument("--irf-fwhm-ps", type=float, default=0.0)
    sp.add_argument("--tau-max-ps", type=float, help="fit window |tau| <= this")
    sp.add_argument("--irf-sensitivity", action="store_true",
                    help="refit with the IRF width scaled by 0.9 and 1.1")
    sp.add_argument("--x")
    sp.add_argument("--y")
    sp.add_argument("--sigma")

    for name, helptext in (("scan", "laser-detuning scan tables"),
                           ("saturation", "intensity and linewidth vs power"),
                           ("tcspc", "IRF-convolved decay curve")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, config=True, seed=True)
        if name == "scan":
            sp.add_argument("--spectra", action="store_true",
                            help="emit per-detuning display spectra (long format)")

    sp = sub.add_parser("replay", help="rerun a manifest and verify output digests")
    sp.add_argument("manifest_file")
    sp.add_argument("--out", help="keep the reproduced output here")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    opts = {k: v for k, v in vars(ns).items() if k != "command"}
    try:
        if ns.command == "replay":
            res = replay(ns.manifest_file, ns.out)
            sys.stderr.write(json_text(res))
            return EXIT_OK if res["match"] else EXIT_RUNTIME
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            execute(ns.command, opts, argv)
        for w in caught:
            sys.stderr.write(f"antibunch: warning: {w.message}\n")
        return EXIT_OK
    except (ConfigError, UsageError) as exc:
        sys.stderr.write(f"antibunch: error: {exc}\n")
        return EXIT_USAGE
    except (FitError, CorrelationError, FormatError, ConvolutionError, OSError,
            ValueError, KeyError) as exc:
        sys.stderr.write(f"antibunch: {ns.command} failed: {exc}\n")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - keep the exit-code contract
        sys.stderr.write(f"antibunch: {ns.command} failed unexpectedly: "
                         f"{type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
