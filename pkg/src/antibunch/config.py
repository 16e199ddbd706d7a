"""JSON run configuration (``"schema": 1``).

Physical quantities carry their unit in the key name (``_ps``, ``_uev``,
``_nw``).  Unknown keys are rejected with the dotted path of the offender.
"""

from __future__ import annotations

import copy
import json
import math
from typing import Any, Dict

from .constants import energy_to_angular
from .irf import IrfParams
from .physics import DriveParams, EmitterParams
from .sim import SOURCES, ChannelModel, DetectorModel, SimConfig

SCHEMA_VERSION = 1
_REQ = object()
_NUM = (int, float)


class ConfigError(ValueError):
    pass


SCHEMA: Dict[str, Dict[str, tuple]] = {
    "emitter": {
        "t1_ps": (_NUM, _REQ),
        "t2_ps": (_NUM, _REQ),
        "transition_energy_uev": (_NUM, 0.0),
        "fss_splitting_uev": (_NUM, None),
        "fss_weights": (list, None),
    },
    "drive": {
        "power_nw": (_NUM, None),
        "saturation_parameter": (_NUM, None),
        "beta_per_ps2_nw": (_NUM, 1e-6),
        "laser_detuning_uev": (_NUM, 0.0),
    },
    "channels": {
        "mode_fraction": ((int, float, dict), 1.0),
        "background_rate_per_ps": (dict, {}),
    },
    "simulation": {
        "duration_ps": (_NUM, _REQ),
        "dt_ps": (_NUM, None),
        "seed": (int, 0),
    },
    "irf": {
        "fwhm_ps": (_NUM, 0.0),
    },
    "scan": {
        "detuning_min_uev": (_NUM, -40.0),
        "detuning_max_uev": (_NUM, 40.0),
        "step_mhz": (_NUM, 270.0),
        "stray_light": (_NUM, 0.0),
        "noise_fraction": (_NUM, 0.0),
        "resolution_uev": (_NUM, 35.0),
        "mode_detuning_uev": (_NUM, 0.0),
    },
    "saturation": {
        "powers_nw": (list, None),
        "saturation_values": (list, None),
        "noise_fraction": (_NUM, 0.0),
    },
    "tcspc": {
        "t_min_ps": (_NUM, -1000.0),
        "t_max_ps": (_NUM, 6000.0),
        "bin_ps": (_NUM, 16.0),
        "t0_ps": (_NUM, 0.0),
        "peak_counts": (_NUM, 1000.0),
        "noise_fraction": (_NUM, 0.0),
    },
}

_MODE_TABLE_KEYS = {"table": str, "detuning_uev": _NUM, "temperature_k": _NUM}
_DETECTOR_KEYS = {
    "source": (str, "mode"),
    "efficiency": (_NUM, 1.0),
    "jitter_fwhm_ps": (_NUM, 0.0),
    "dead_time_ps": (_NUM, 0.0),
}


def _check_type(path, value, types):
    if isinstance(value, bool) or not isinstance(value, types):
        raise ConfigError(f"config key '{path}' has invalid type {type(value).__name__}")


def _fill(section, raw, spec):
    if not isinstance(raw, dict):
        raise ConfigError(f"config key '{section}' must be an object")
    for key in raw:
        if key not in spec:
            raise ConfigError(f"unknown config key '{section}.{key}'")
    out = {}
    for key, (types, default) in spec.items():
        path = f"{section}.{key}"
        if key in raw and raw[key] is not None:
            _check_type(path, raw[key], types)
            out[key] = copy.deepcopy(raw[key])
        elif default is _REQ:
            raise ConfigError(f"missing required config key '{path}'")
        else:
            out[key] = copy.deepcopy(default)
    return out


def resolve(raw: Dict[str, Any]) -> Dict[str, Any]:
    """Validate ``raw`` and return it with every default filled in."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "schema" not in raw:
        raise ConfigError("missing required config key 'schema'")
    if raw["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"config key 'schema' must be {SCHEMA_VERSION}, got {raw['schema']!r}")
    out: Dict[str, Any] = {"schema": SCHEMA_VERSION}
    for key in raw:
        if key != "schema" and key not in SCHEMA and key != "detectors":
            raise ConfigError(f"unknown config key '{key}'")
    for section, spec in SCHEMA.items():
        if section in raw:
            out[section] = _fill(section, raw[section], spec)
    if "detectors" in raw:
        dets = raw["detectors"]
        if not isinstance(dets, dict):
            raise ConfigError("config key 'detectors' must be an object of channel id -> detector")
        out["detectors"] = {}
        for cid, det in dets.items():
            try:
                ch = int(cid)
            except ValueError:
                raise ConfigError(f"config key 'detectors.{cid}' must be an integer channel id") from None
            if not 0 <= ch < 256:
                raise ConfigError(f"config key 'detectors.{cid}' must be within 0..255")
            out["detectors"][str(ch)] = _fill(f"detectors.{cid}", det, _DETECTOR_KEYS)
    ch = out.get("channels")
    if ch is not None:
        mf = ch["mode_fraction"]
        if isinstance(mf, dict):
            for k in mf:
                if k not in _MODE_TABLE_KEYS:
                    raise ConfigError(f"unknown config key 'channels.mode_fraction.{k}'")
                _check_type(f"channels.mode_fraction.{k}", mf[k], _MODE_TABLE_KEYS[k])
            if "table" not in mf:
                raise ConfigError("missing required config key 'channels.mode_fraction.table'")
        for k, v in ch["background_rate_per_ps"].items():
            if k not in SOURCES:
                raise ConfigError(f"unknown config key 'channels.background_rate_per_ps.{k}'")
            _check_type(f"channels.background_rate_per_ps.{k}", v, _NUM)
    drive = out.get("drive")
    if drive is not None and drive["power_nw"] is not None and drive["saturation_parameter"] is not None:
        raise ConfigError("config keys 'drive.power_nw' and 'drive.saturation_parameter' "
                          "are mutually exclusive")
    return out


def load(path) -> Dict[str, Any]:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return resolve(raw)


def _need(cfg, section):
    if section not in cfg:
        raise ConfigError(f"missing required config key '{section}'")
    return cfg[section]


def _wrap(path, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config key '{path}': {exc}") from None


def build_emitter(cfg) -> EmitterParams:
    e = _need(cfg, "emitter")
    w = tuple(e["fss_weights"]) if e["fss_weights"] is not None else None
    return _wrap("emitter", EmitterParams, float(e["t1_ps"]), float(e["t2_ps"]),
                 float(e["transition_energy_uev"]), e["fss_splitting_uev"], w)


def build_drive(cfg, emitter: EmitterParams) -> DriveParams:
    d = _need(cfg, "drive")
    beta = float(d["beta_per_ps2_nw"])
    det = energy_to_angular(float(d["laser_detuning_uev"]))
    if d["saturation_parameter"] is not None:
        return _wrap("drive.saturation_parameter", DriveParams.from_saturation,
                     float(d["saturation_parameter"]), emitter, beta, det)
    if d["power_nw"] is None:
        raise ConfigError("missing required config key 'drive.power_nw' "
                          "(or 'drive.saturation_parameter')")
    return _wrap("drive", DriveParams, float(d["power_nw"]), beta, det)


def build_channels(cfg) -> ChannelModel:
    ch = cfg.get("channels") or {"mode_fraction": 1.0, "background_rate_per_ps": {}}
    mf = ch["mode_fraction"]
    if isinstance(mf, dict):
        from .spectra import read_mode_fraction_table
        try:
            table = read_mode_fraction_table(mf["table"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"config key 'channels.mode_fraction.table': {exc}") from None
        where = {k: mf[k] for k in ("detuning_uev", "temperature_k") if k in mf}
        eta = _wrap("channels.mode_fraction", table, **where)
    else:
        eta = float(mf)
    rates = {SOURCES[k]: float(v) for k, v in ch["background_rate_per_ps"].items()}
    return _wrap("channels", ChannelModel, eta, rates)


def build_detectors(cfg) -> Dict[int, DetectorModel]:
    out = {}
    for cid, d in (cfg.get("detectors") or {}).items():
        out[int(cid)] = _wrap(f"detectors.{cid}", DetectorModel, float(d["efficiency"]),
                              float(d["jitter_fwhm_ps"]), float(d["dead_time_ps"]), d["source"])
    return out


def build_irf(cfg) -> IrfParams:
    return _wrap("irf.fwhm_ps", IrfParams, float((cfg.get("irf") or {"fwhm_ps": 0.0})["fwhm_ps"]))


def build_sim_config(cfg, seed=None) -> SimConfig:
    e = build_emitter(cfg)
    d = build_drive(cfg, e)
    sim = _need(cfg, "simulation")
    s = int(sim["seed"] if seed is None else seed)
    dt = None if sim["dt_ps"] is None else float(sim["dt_ps"])
    simcfg = _wrap("simulation", SimConfig, e, d, build_channels(cfg), build_detectors(cfg),
                   float(sim["duration_ps"]), s, dt)
    _wrap("simulation.dt_ps", simcfg.step)
    return simcfg


def hbt_pair_config(t1, t2, saturation, duration_ps, seed=0, pair_fwhm=400.0,
                    mode_fraction=1.0) -> Dict[str, Any]:
    """Config for an emitter watched through the mode channel by an HBT pair
    whose combined timing response has FWHM ``pair_fwhm``."""
    jitter = pair_fwhm / math.sqrt(2.0)
    return resolve({
        "schema": 1,
        "emitter": {"t1_ps": t1, "t2_ps": t2},
        "drive": {"saturation_parameter": saturation},
        "channels": {"mode_fraction": mode_fraction},
        "detectors": {"0": {"source": "mode", "jitter_fwhm_ps": jitter},
                      "1": {"source": "mode", "jitter_fwhm_ps": jitter}},
        "simulation": {"duration_ps": duration_ps, "seed": seed},
        "irf": {"fwhm_ps": pair_fwhm},
    })
