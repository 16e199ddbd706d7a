"""Closed-form two-level emitter quantities and the analytic g2/decay models."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .constants import HBAR
from .irf import ExpSum, IrfParams, convolve_with_irf

# |T1/T2 - 1| below this switches g2_resonant_weak to its T1 = T2 limit
EQUAL_TIMES_TOL = 1e-4


@dataclass(frozen=True)
class EmitterParams:
    """Two-level emitter.

    Times in ps, energies in µeV. ``fss_weights`` are relative strengths of
    the two fine-structure components (normalized on use).
    """

    t1: float
    t2: float
    transition_energy: float = 0.0
    fss_splitting: Optional[float] = None
    fss_weights: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not (self.t1 > 0 and self.t2 > 0):
            raise ValueError(f"t1 and t2 must be positive, got t1={self.t1}, t2={self.t2}")
        if self.t2 > 2 * self.t1 * (1 + 1e-12):
            raise ValueError(f"t2={self.t2} exceeds the coherence bound 2*t1={2 * self.t1}")
        if self.fss_splitting is not None and not self.fss_splitting > 0:
            raise ValueError("fss_splitting must be > 0 when given")
        if self.fss_weights is not None:
            if len(self.fss_weights) != 2 or min(self.fss_weights) <= 0:
                raise ValueError("fss_weights must be two positive numbers")

    def components(self):
        """(offset from transition_energy [µeV], normalized weight) per line."""
        if self.fss_splitting is None:
            return [(0.0, 1.0)]
        w1, w2 = self.fss_weights or (1.0, 1.0)
        tot = w1 + w2
        half = 0.5 * self.fss_splitting
        return [(-half, w1 / tot), (half, w2 / tot)]


@dataclass(frozen=True)
class DriveParams:
    """cw laser drive: power [nW], beta [rad^2 ps^-2 nW^-1], detuning [rad/ps]."""

    power: float
    beta: float
    laser_detuning: float = 0.0

    def __post_init__(self):
        if not self.power >= 0:
            raise ValueError(f"power must be >= 0, got {self.power}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")

    @property
    def rabi_sq(self) -> float:
        return self.beta * self.power

    @property
    def rabi(self) -> float:
        return math.sqrt(self.rabi_sq)

    @classmethod
    def from_saturation(cls, s, emitter: EmitterParams, beta=1e-6, laser_detuning=0.0):
        """Drive whose saturation parameter on ``emitter`` equals ``s``."""
        return cls(power=s / (beta * emitter.t1 * emitter.t2), beta=beta,
                   laser_detuning=laser_detuning)


@dataclass(frozen=True)
class G2BackgroundModel:
    """Background-diluted antibunching: signal fraction ``rho``, time ``t_m`` [ps]."""

    rho: float
    t_m: float

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not self.t_m > 0:
            raise ValueError(f"t_m must be > 0, got {self.t_m}")


def saturation_parameter(e: EmitterParams, d: DriveParams) -> float:
    """s = Omega^2 T1 T2 with Omega^2 = beta P0."""
    return d.rabi_sq * e.t1 * e.t2


def steady_state_population(s, detuning, t2):
    """Excited-state population 0.5 s / (1 + s + (detuning t2)^2)."""
    s = np.asarray(s, dtype=float)
    x = np.asarray(detuning, dtype=float) * t2
    return 0.5 * s / (1.0 + s + x * x)


def resonant_intensity(e: EmitterParams, d: DriveParams) -> float:
    """Normalized resonant emission intensity, 0.5 s / (1 + s)."""
    if d.laser_detuning != 0:
        raise ValueError("resonant_intensity requires zero laser detuning; "
                         "use detuned_intensity")
    s = saturation_parameter(e, d)
    return 0.5 * s / (1.0 + s)


def detuned_intensity(e: EmitterParams, d: DriveParams, detuning=None):
    """Steady-state excited population for a detuned drive.

    ``detuning`` (rad/ps, scalar or array) overrides ``d.laser_detuning``.
    """
    delta = d.laser_detuning if detuning is None else detuning
    return steady_state_population(saturation_parameter(e, d), delta, e.t2)


def g2_background(tau, m: G2BackgroundModel):
    """1 - rho^2 exp(-|tau|/t_m)."""
    return g2_background_expsum(m.rho ** 2, m.t_m)(tau)


def g2_background_expsum(depth, t_m) -> ExpSum:
    return ExpSum(1.0, ((-depth, t_m, 0),))


def g2_resonant_weak_expsum(t1, t2) -> ExpSum:
    """Weak-pump resonant g2 as an exponential sum.

    Near t1 == t2 the two pole terms cancel catastrophically and the
    analytic limit 1 - (1 + |tau|/T) exp(-|tau|/T) is used instead.
    """
    if abs(t1 / t2 - 1.0) < EQUAL_TIMES_TOL:
        t = 0.5 * (t1 + t2)
        return ExpSum(1.0, ((-1.0, t, 0), (-1.0, t, 1)))
    a2 = 1.0 / (1.0 - t1 / t2)
    a1 = 1.0 / (1.0 - t2 / t1)
    return ExpSum(1.0, ((-a2, t2, 0), (-a1, t1, 0)))


def g2_resonant_weak(tau, e: EmitterParams):
    """Resonant g2 in the weak-pump limit; zero at tau = 0."""
    return g2_resonant_weak_expsum(e.t1, e.t2)(tau)


def tcspc_expsum(t1) -> ExpSum:
    return ExpSum(0.0, ((1.0, t1, 0),), one_sided=True)


def tcspc_decay(t, e: EmitterParams, irf: IrfParams = IrfParams()):
    """exp(-t/T1) for t >= 0 (zero before), convolved with the Gaussian IRF."""
    return convolve_with_irf(tcspc_expsum(e.t1), irf)(t)


def t2_from_linewidth(gamma0):
    """Coherence time [ps] from zero-power linewidth [µeV]: T2 = 2 hbar / Gamma0."""
    gamma0 = np.asarray(gamma0, dtype=float)
    if np.any(~(gamma0 > 0)):
        raise ValueError("linewidth must be positive")
    out = 2.0 * HBAR / gamma0
    return float(out) if out.ndim == 0 else out


def linewidth_from_t2(t2):
    """Zero-power linewidth [µeV] from T2 [ps]."""
    t2 = np.asarray(t2, dtype=float)
    if np.any(~(t2 > 0)):
        raise ValueError("t2 must be positive")
    out = 2.0 * HBAR / t2
    return float(out) if out.ndim == 0 else out


def power_broadened_fwhm(e: EmitterParams, d: DriveParams) -> float:
    """Gamma0 sqrt(1 + s) in µeV."""
    return linewidth_from_t2(e.t2) * math.sqrt(1.0 + saturation_parameter(e, d))
