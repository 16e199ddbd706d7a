"""Gaussian instrument-response convolution.

Models built from exponentials in ``|t|`` (or one-sided decays ``t >= 0``)
are convolved in closed form using the complementary error function.
Anything else falls back to adaptive quadrature.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special

from .constants import fwhm_to_sigma

_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ConvolutionError(RuntimeError):
    """Quadrature failed to converge at a given delay."""

    def __init__(self, tau, message):
        super().__init__(f"IRF quadrature did not converge at tau={float(tau)!r} ps: {message}")
        self.tau = float(tau)


@dataclass(frozen=True)
class IrfParams:
    """Gaussian instrument response, ``fwhm`` in ps (0 means ideal)."""

    fwhm: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.fwhm) or self.fwhm < 0:
            raise ValueError(f"IRF fwhm must be >= 0, got {self.fwhm}")

    @property
    def sigma(self) -> float:
        return fwhm_to_sigma(self.fwhm)


def _one_sided_exp(t, lam, sigma):
    """(exp(-lam*t) H(t)) convolved with a unit-area Gaussian of width sigma."""
    t = np.asarray(t, dtype=float)
    z = (lam * sigma * sigma - t) / (sigma * _SQRT2)
    out = np.empty_like(z)
    pos = z >= 0
    # erfcx keeps the z >= 0 branch free of overflow
    out[pos] = 0.5 * np.exp(-0.5 * (t[pos] / sigma) ** 2) * special.erfcx(z[pos])
    neg = ~pos
    out[neg] = 0.5 * np.exp(0.5 * (lam * sigma) ** 2 - lam * t[neg]) * special.erfc(z[neg])
    return out


def _one_sided_texp(t, lam, sigma):
    """(t exp(-lam*t) H(t)) convolved with a unit-area Gaussian."""
    t = np.asarray(t, dtype=float)
    base = _one_sided_exp(t, lam, sigma)
    gauss = np.exp(-0.5 * (t / sigma) ** 2)
    return (t - lam * sigma * sigma) * base + 0.5 * sigma * _SQRT_2_OVER_PI * gauss


@dataclass(frozen=True)
class ExpSum:
    """``offset + sum_k amp_k (|t|/tau_k)^p_k exp(-|t|/tau_k)``.

    ``terms`` holds ``(amp, tau, p)`` triples with ``p`` in {0, 1}.  With
    ``one_sided=True`` the exponential part vanishes for ``t < 0`` (decay
    curves); the offset is always present.
    """

    offset: float = 0.0
    terms: tuple = field(default_factory=tuple)
    one_sided: bool = False

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        a = np.abs(t)
        out = np.full_like(a, self.offset)
        for amp, tau, p in self.terms:
            x = a / tau
            out = out + amp * (x if p else 1.0) * np.exp(-x)
        if self.one_sided:
            out = np.where(t < 0, self.offset, out)
        return out

    def convolved(self, t, sigma):
        t = np.asarray(t, dtype=float)
        if sigma == 0:
            return self(t)
        out = np.full(t.shape, self.offset, dtype=float)
        for amp, tau, p in self.terms:
            lam = 1.0 / tau
            if p:
                f = lambda s: _one_sided_texp(s, lam, sigma) * lam  # noqa: E731
            else:
                f = lambda s: _one_sided_exp(s, lam, sigma)  # noqa: E731
            part = f(t)
            if not self.one_sided:
                part = part + f(-t)
            out = out + amp * part
        return out


def _quad_convolve(model, t, sigma):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    norm = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
    half = 10.0 * sigma
    out = np.empty_like(t)
    for i, ti in enumerate(t):
        def integrand(s, ti=ti):
            return float(model(ti - s)) * norm * math.exp(-0.5 * (s / sigma) ** 2)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            pts = [ti] if -half < ti < half else None
            val, err, info = integrate.quad(
                integrand, -half, half, points=pts, limit=400,
                epsabs=1e-12, epsrel=1e-10, full_output=1)[:3]
        if not np.isfinite(val) or (err > 1e-7 and err > 1e-7 * abs(val)):
            raise ConvolutionError(ti, f"estimated error {err:.3g}")
        out[i] = val
    return out


def convolve_with_irf(model: Callable, irf: IrfParams, method: str = "auto") -> Callable:
    """Return ``model`` convolved with the Gaussian IRF.

    ``method`` is ``"auto"`` (closed form when ``model`` is an :class:`ExpSum`,
    quadrature otherwise), ``"closed"`` or ``"quad"``.
    """
    if irf.fwhm == 0:
        return model
    sigma = irf.sigma
    if method == "closed" and not isinstance(model, ExpSum):
        raise TypeError("closed-form convolution requires an ExpSum model")
    if isinstance(model, ExpSum) and method in ("auto", "closed"):
        def convolved(t):
            return model.convolved(t, sigma)
    else:
        def convolved(t):
            scalar = np.ndim(t) == 0
            out = _quad_convolve(model, t, sigma)
            return out[0] if scalar else out.reshape(np.shape(t))
    convolved.model = model
    convolved.irf = irf
    return convolved
