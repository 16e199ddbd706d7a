"""Fit models with analytic Jacobians and initial-guess heuristics.

Every model maps ``(x, p)`` to predictions; ``jacobian`` returns the
``(len(x), len(p))`` matrix of partial derivatives.
"""

from __future__ import annotations

import math

import numpy as np

from ..constants import HBAR
from ..irf import IrfParams, _one_sided_exp, _one_sided_texp
from ..physics import EQUAL_TIMES_TOL
from .engine import central_difference

_SQRT_2PI = math.sqrt(2 * math.pi)


def _exp1(t, lam, sigma):
    """One-sided exponential, optionally Gaussian-convolved."""
    t = np.asarray(t, dtype=float)
    if sigma == 0:
        return np.where(t >= 0, np.exp(-lam * np.maximum(t, 0)), 0.0)
    return _one_sided_exp(t, lam, sigma)


def _texp1(t, lam, sigma):
    t = np.asarray(t, dtype=float)
    if sigma == 0:
        tp = np.maximum(t, 0)
        return np.where(t >= 0, tp * np.exp(-lam * tp), 0.0)
    return _one_sided_texp(t, lam, sigma)


def _two_sided(t, lam, sigma):
    if sigma == 0:
        return np.exp(-lam * np.abs(np.asarray(t, dtype=float)))
    return _exp1(t, lam, sigma) + _exp1(-t, lam, sigma)


def _two_sided_dlam(t, lam, sigma):
    if sigma == 0:
        a = np.abs(np.asarray(t, dtype=float))
        return -a * np.exp(-lam * a)
    return -(_texp1(t, lam, sigma) + _texp1(-t, lam, sigma))


def _gauss(t, sigma):
    return np.exp(-0.5 * (t / sigma) ** 2) / (sigma * _SQRT_2PI)


class Model:
    name = ""
    param_names: tuple = ()
    lower: tuple = ()
    upper: tuple = ()

    def __init__(self, irf: IrfParams = IrfParams()):
        self.irf = irf
        self.sigma = irf.sigma

    def __call__(self, x, p):
        raise NotImplementedError

    def jacobian(self, x, p):
        return central_difference(lambda q: self(x, q), p, np.ones(len(p), bool))

    def guess(self, x, y):
        raise NotImplementedError

    def deconvolved(self):
        """Same model with an ideal instrument response."""
        return type(self)(IrfParams(0.0))


def _smooth(y, width=3):
    if len(y) < width:
        return np.asarray(y, float)
    k = np.ones(width) / width
    return np.convolve(y, k, mode="same")


class G2Background(Model):
    """1 - depth * exp(-|tau|/t_m) (x) IRF; depth = rho^2 (rho1 rho2 for
    cross-correlations)."""

    name = "g2_background_irf"
    param_names = ("rho_sq", "t_m")
    lower = (0.0, 1e-3)
    upper = (1.0, np.inf)

    def __call__(self, x, p):
        depth, tm = p
        return 1.0 - depth * _two_sided(x, 1.0 / tm, self.sigma)

    def jacobian(self, x, p):
        depth, tm = p
        lam = 1.0 / tm
        c = _two_sided(x, lam, self.sigma)
        dc = _two_sided_dlam(x, lam, self.sigma)
        return np.column_stack([-c, depth * dc / tm ** 2])

    def guess(self, x, y):
        """Depth from the dip minimum (IRF-corrected crudely), t_m from the
        half-depth crossing."""
        x = np.asarray(x, float)
        ys = _smooth(np.asarray(y, float))
        i0 = int(np.argmin(np.abs(x)))
        depth = float(np.clip(1.0 - ys[i0], 0.01, 0.99))
        half = 1.0 - 0.5 * depth
        right = np.flatnonzero((x > 0) & (ys >= half))
        t_half = float(x[right[0]]) if len(right) else float(np.max(np.abs(x))) / 4
        t_m = max(t_half / math.log(2.0), 1.0)
        if self.sigma > 0:
            t_m = max(t_m - 0.5 * self.sigma, 0.3 * t_m)
            depth = min(depth * 1.3, 0.99)
        return np.array([depth, t_m])


class G2ResonantWeak(Model):
    """Weak-pump resonant g2 (x) IRF, parameters (t1, t2).

    The model is symmetric under t1 <-> t2; the labels follow the initial
    guess.
    """

    name = "g2_resonant_weak_irf"
    param_names = ("t1", "t2")
    lower = (1.0, 1.0)
    upper = (np.inf, np.inf)

    def __call__(self, x, p):
        t1, t2 = p
        if abs(t1 / t2 - 1.0) < EQUAL_TIMES_TOL:
            t = 0.5 * (t1 + t2)
            lam = 1.0 / t
            return 1.0 - _two_sided(x, lam, self.sigma) + lam * _two_sided_dlam(x, lam, self.sigma)
        a = t2 / (t2 - t1)
        b = t1 / (t1 - t2)
        return (1.0 - a * _two_sided(x, 1.0 / t2, self.sigma)
                - b * _two_sided(x, 1.0 / t1, self.sigma))

    def jacobian(self, x, p):
        t1, t2 = p
        if abs(t1 / t2 - 1.0) < 100 * EQUAL_TIMES_TOL:
            # pole terms cancel here; differences are better conditioned
            return super().jacobian(x, p)
        l1, l2 = 1.0 / t1, 1.0 / t2
        c1 = _two_sided(x, l1, self.sigma)
        c2 = _two_sided(x, l2, self.sigma)
        s1 = -_two_sided_dlam(x, l1, self.sigma)  # dC/dT = S/T^2
        s2 = -_two_sided_dlam(x, l2, self.sigma)
        a = t2 / (t2 - t1)
        b = t1 / (t1 - t2)
        d2 = (t1 - t2) ** 2
        da_dt1 = t2 / d2
        db_dt1 = -t2 / d2
        da_dt2 = -t1 / d2
        db_dt2 = t1 / d2
        j1 = -da_dt1 * c2 - db_dt1 * c1 - b * s1 / t1 ** 2
        j2 = -da_dt2 * c2 - a * s2 / t2 ** 2 - db_dt2 * c1
        return np.column_stack([j1, j2])

    def guess(self, x, y):
        """Half-recovery delay sets the overall scale; t2 starts at 0.7 t1."""
        x = np.asarray(x, float)
        ys = _smooth(np.asarray(y, float))
        right = np.flatnonzero((x > 0) & (ys >= 0.5 * (1.0 + ys[np.argmin(np.abs(x))])))
        t_half = float(x[right[0]]) if len(right) else float(np.max(np.abs(x))) / 4
        t_half = max(t_half - 0.5 * self.sigma, 0.5 * t_half, 1.0)
        # 1 - (1+u)e^-u = 1/2 at u ~ 1.68
        t1 = t_half / 1.68 * 1.2
        return np.array([t1, 0.7 * t1])


def _lorentz(x, c, w):
    u = 2.0 * (np.asarray(x, float) - c) / w
    return 1.0 / (1.0 + u * u), u


def _local_maxima(y):
    y = np.asarray(y, float)
    idx = np.flatnonzero((y[1:-1] >= y[:-2]) & (y[1:-1] > y[2:])) + 1
    return idx[np.argsort(y[idx])[::-1]]


def _halfwidth(x, y, i, base):
    half = base + 0.5 * (y[i] - base)
    lo = i
    while lo > 0 and y[lo] > half:
        lo -= 1
    hi = i
    while hi < len(y) - 1 and y[hi] > half:
        hi += 1
    return float(x[hi] - x[lo])


class LorentzianSinglet(Model):
    """amplitude / (1 + (2 (x - center)/fwhm)^2) + background."""

    name = "lorentzian_singlet"
    param_names = ("amplitude", "center", "fwhm", "background")
    lower = (0.0, -np.inf, 1e-9, -np.inf)
    upper = (np.inf, np.inf, np.inf, np.inf)

    def __call__(self, x, p):
        a, c, w, bg = p
        return a * _lorentz(x, c, w)[0] + bg

    def jacobian(self, x, p):
        a, c, w, bg = p
        lz, u = _lorentz(x, c, w)
        l2 = lz * lz
        return np.column_stack([lz, 4 * a * u * l2 / w, 2 * a * u * u * l2 / w, np.ones_like(lz)])

    def guess(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        bg = float(np.min(y))
        i = int(np.argmax(_smooth(y)))
        w = max(_halfwidth(x, _smooth(y), i, bg), abs(x[1] - x[0]))
        return np.array([y[i] - bg, x[i], w, bg])


class LorentzianDoublet(Model):
    """Two Lorentzians of common FWHM on a constant background."""

    name = "lorentzian_doublet"
    param_names = ("amp1", "center1", "amp2", "center2", "fwhm", "background")
    lower = (0.0, -np.inf, 0.0, -np.inf, 1e-9, -np.inf)
    upper = (np.inf, np.inf, np.inf, np.inf, np.inf, np.inf)

    def __call__(self, x, p):
        a1, c1, a2, c2, w, bg = p
        return a1 * _lorentz(x, c1, w)[0] + a2 * _lorentz(x, c2, w)[0] + bg

    def jacobian(self, x, p):
        a1, c1, a2, c2, w, bg = p
        l1, u1 = _lorentz(x, c1, w)
        l2, u2 = _lorentz(x, c2, w)
        q1, q2 = l1 * l1, l2 * l2
        return np.column_stack([
            l1, 4 * a1 * u1 * q1 / w,
            l2, 4 * a2 * u2 * q2 / w,
            2 * (a1 * u1 * u1 * q1 + a2 * u2 * u2 * q2) / w,
            np.ones_like(l1),
        ])

    def guess(self, x, y):
        """Centers at the two highest local maxima of the smoothed trace."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ys = _smooth(y)
        bg = float(np.min(ys))
        peaks = _local_maxima(ys)
        if len(peaks) == 0:
            peaks = np.array([int(np.argmax(ys))])
        i1 = int(peaks[0])
        if len(peaks) > 1:
            i2 = int(peaks[1])
        else:
            i2 = min(i1 + 2, len(x) - 1) if i1 + 2 < len(x) else max(i1 - 2, 0)
        if x[i2] < x[i1]:
            i1, i2 = i2, i1
        sep = abs(x[i2] - x[i1])
        w = _halfwidth(x, ys, i1, bg)
        w = max(min(w, sep if sep > 0 else w), abs(x[1] - x[0]))
        return np.array([ys[i1] - bg, x[i1], ys[i2] - bg, x[i2], w, bg])


class SaturationCurve(Model):
    """amplitude * 0.5 s / (1 + s), s = beta P t1 t2; x is power [nW]."""

    name = "saturation_eq1"
    param_names = ("amplitude", "beta", "t1", "t2")
    lower = (0.0, 0.0, 1e-3, 1e-3)
    upper = (np.inf, np.inf, np.inf, np.inf)

    def __call__(self, x, p):
        a, beta, t1, t2 = p
        s = beta * np.asarray(x, float) * t1 * t2
        return a * 0.5 * s / (1.0 + s)

    def jacobian(self, x, p):
        a, beta, t1, t2 = p
        x = np.asarray(x, float)
        s = beta * x * t1 * t2
        dfds = a * 0.5 / (1.0 + s) ** 2
        return np.column_stack([0.5 * s / (1.0 + s), dfds * x * t1 * t2,
                                dfds * beta * x * t2, dfds * beta * x * t1])

    def guess(self, x, y, t1=500.0, t2=500.0):
        """Amplitude from twice the highest point, knee where the curve
        reaches half of its maximum."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ymax = float(np.max(y))
        a = 2.0 * ymax * 1.2
        above = np.flatnonzero(y >= 0.5 * ymax)
        p_knee = float(x[above[0]]) if len(above) else float(np.median(x))
        beta = 1.0 / (max(p_knee, 1e-12) * t1 * t2)
        return np.array([a, beta, t1, t2])


class TcspcDecay(Model):
    """amplitude * (exp(-(t - t0)/t1) H(t - t0)) (x) IRF + background."""

    name = "tcspc_decay_irf"
    param_names = ("amplitude", "t1", "t0", "background")
    lower = (0.0, 1e-3, -np.inf, -np.inf)
    upper = (np.inf, np.inf, np.inf, np.inf)

    def __call__(self, x, p):
        a, t1, t0, bg = p
        return a * _exp1(np.asarray(x, float) - t0, 1.0 / t1, self.sigma) + bg

    def jacobian(self, x, p):
        a, t1, t0, bg = p
        tau = np.asarray(x, float) - t0
        lam = 1.0 / t1
        e = _exp1(tau, lam, self.sigma)
        te = _texp1(tau, lam, self.sigma)
        if self.sigma > 0:
            de = _gauss(tau, self.sigma) - lam * e
        else:
            de = -lam * e
        return np.column_stack([e, a * te / t1 ** 2, -a * de, np.ones_like(e)])

    def guess(self, x, y):
        """t0 at the steepest rise, t1 from the 1/e point after the peak."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ys = _smooth(y)
        bg = float(np.median(ys[: max(3, len(ys) // 20)]))
        i = int(np.argmax(ys))
        rise = np.diff(ys[: i + 1])
        t0 = float(x[int(np.argmax(rise))]) if len(rise) else float(x[i])
        amp = float(ys[i] - bg)
        after = np.flatnonzero((x > x[i]) & (ys <= bg + amp / math.e))
        t1 = float(x[after[0]] - x[i]) if len(after) else float(x[-1] - x[i]) / 3
        return np.array([amp, max(t1, 1.0), t0, bg])


REGISTRY = {m.name: m for m in (G2Background, G2ResonantWeak, LorentzianSinglet,
                                LorentzianDoublet, SaturationCurve, TcspcDecay)}


def get_model(model_id: str, irf: IrfParams = IrfParams()) -> Model:
    try:
        return REGISTRY[model_id](irf)
    except KeyError:
        raise KeyError(f"unknown model {model_id!r}; choose from {sorted(REGISTRY)}") from None


def linewidth_model(p_nw, beta, t1, t2):
    """Power-broadened FWHM [µeV]: (2 hbar / t2) sqrt(1 + beta P t1 t2)."""
    return 2.0 * HBAR / t2 * np.sqrt(1.0 + beta * np.asarray(p_nw, float) * t1 * t2)
