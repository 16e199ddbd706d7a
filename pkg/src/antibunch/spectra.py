"""Laser-detuning scans, spectrometer display spectra and mode-fraction tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .constants import energy_to_angular, fwhm_to_sigma
from .physics import DriveParams, EmitterParams, saturation_parameter, steady_state_population
from .sim import ChannelModel, EMITTER, MODE

SPECTROMETER_RESOLUTION = 35.0  # µeV


def scan_spectrum(e: EmitterParams, d: DriveParams, detunings, channels: ChannelModel,
                  stray_light: float = 0.0, energy_axis=None, mode_detuning: float = 0.0,
                  resolution: float = SPECTROMETER_RESOLUTION):
    """Integrated channel intensities along a laser-detuning scan.

    ``detunings`` are laser-exciton detunings in µeV.  The emitter channel
    carries ``(1 - eta)`` of the emission plus ``stray_light``; the mode
    channel carries ``eta`` of it.  Fine-structure components are driven
    independently with the same saturation parameter.

    With ``energy_axis`` (µeV relative to the exciton line) a display map of
    shape ``(len(detunings), len(energy_axis))`` is added, each line smeared
    by the spectrometer ``resolution``; ``mode_detuning`` places the cavity
    line on that axis.  The resolution never enters the integrated traces.
    """
    delta = np.asarray(detunings, dtype=float)
    if delta.size == 0:
        raise ValueError("empty detuning grid")
    if delta.size > 1:
        steps = np.diff(delta)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise ValueError("detuning grid must be monotone")
    if resolution < 0:
        raise ValueError("resolution must be >= 0")
    s = saturation_parameter(e, d)
    emission = np.zeros_like(delta)
    for offset, weight in e.components():
        emission += weight * steady_state_population(
            s, energy_to_angular(delta - offset), e.t2)
    eta = channels.mode_fraction
    out = {
        "detuning_uev": delta,
        "emitter": (1.0 - eta) * emission + stray_light,
        "mode": eta * emission,
        "total_emission": emission,
    }
    if energy_axis is not None:
        axis = np.asarray(energy_axis, dtype=float)
        out["energy_uev"] = axis
        out["map"] = (np.outer(out["emitter"], line_profile(axis, 0.0, resolution))
                      + np.outer(out["mode"], line_profile(axis, mode_detuning, resolution)))
    return out


def line_profile(axis, center, resolution):
    """Unit-area Gaussian spectrometer response of FWHM ``resolution``."""
    axis = np.asarray(axis, dtype=float)
    if resolution == 0:
        out = np.zeros_like(axis)
        out[np.argmin(np.abs(axis - center))] = 1.0
        return out
    sig = fwhm_to_sigma(resolution)
    return np.exp(-0.5 * ((axis - center) / sig) ** 2) / (sig * np.sqrt(2 * np.pi))


@dataclass
class ModeFractionTable:
    """Empirical mode-emission ratio eta versus QD-mode detuning (and
    optionally temperature), linearly interpolated."""

    detuning_uev: np.ndarray
    mode_fraction: np.ndarray
    temperature_k: Optional[np.ndarray] = None

    def __post_init__(self):
        self.detuning_uev = np.asarray(self.detuning_uev, float)
        self.mode_fraction = np.asarray(self.mode_fraction, float)
        if self.temperature_k is not None:
            self.temperature_k = np.asarray(self.temperature_k, float)
        if np.any((self.mode_fraction < 0) | (self.mode_fraction > 1)):
            raise ValueError("mode fractions must lie in [0, 1]")

    def __call__(self, detuning_uev=None, temperature_k=None) -> float:
        if detuning_uev is not None:
            key, val = self.detuning_uev, detuning_uev
        elif temperature_k is not None and self.temperature_k is not None:
            key, val = self.temperature_k, temperature_k
        else:
            raise ValueError("give a detuning (or a temperature if the table has one)")
        order = np.argsort(key)
        return float(np.interp(val, key[order], self.mode_fraction[order]))

    def channel_model(self, background_rates=None, **where) -> ChannelModel:
        return ChannelModel(self(**where), dict(background_rates or {}))


def read_mode_fraction_table(path) -> ModeFractionTable:
    """CSV with columns ``detuning_uev, mode_fraction`` and optional ``temperature_k``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(row for row in fh if not row.startswith("#")))
    if not rows or "detuning_uev" not in rows[0] or "mode_fraction" not in rows[0]:
        raise ValueError(f"{path}: need columns detuning_uev and mode_fraction")
    det = [float(r["detuning_uev"]) for r in rows]
    eta = [float(r["mode_fraction"]) for r in rows]
    temp = None
    if "temperature_k" in rows[0] and all(r["temperature_k"] for r in rows):
        temp = [float(r["temperature_k"]) for r in rows]
    return ModeFractionTable(det, eta, temp)


def write_mode_fraction_table(path, table: ModeFractionTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["detuning_uev", "mode_fraction"]
        if table.temperature_k is not None:
            cols.append("temperature_k")
        w.writerow(cols)
        for i in range(len(table.detuning_uev)):
            row = [repr(float(table.detuning_uev[i])), repr(float(table.mode_fraction[i]))]
            if table.temperature_k is not None:
                row.append(repr(float(table.temperature_k[i])))
            w.writerow(row)


__all__ = ["scan_spectrum", "line_profile", "ModeFractionTable", "read_mode_fraction_table",
           "write_mode_fraction_table", "SPECTROMETER_RESOLUTION", "EMITTER", "MODE"]
