"""Fit front-ends: generic problems, doublet scans, g2(0), power series."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Sequence

import numpy as np

from ..correlator import CorrelationHistogram
from ..irf import IrfParams
from ..physics import t2_from_linewidth
from .engine import FitError, FitResult, least_squares
from .models import REGISTRY, SaturationCurve, get_model, linewidth_model


@dataclass
class FitProblem:
    model: str
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    p0: Optional[Dict[str, float]] = None
    bounds: Dict[str, tuple] = field(default_factory=dict)
    fixed: Sequence[str] = ()
    irf: IrfParams = IrfParams()

    def __post_init__(self):
        if self.model not in REGISTRY:
            raise FitError(f"unknown model {self.model!r}; choose from {sorted(REGISTRY)}")
        self.x = np.asarray(self.x, float)
        self.y = np.asarray(self.y, float)
        self.sigma = np.asarray(self.sigma, float)
        if not (self.x.shape == self.y.shape == self.sigma.shape):
            raise FitError("x, y and sigma must have equal length")
        names = REGISTRY[self.model].param_names
        for key in list(self.bounds) + list(self.fixed) + list(self.p0 or {}):
            if key not in names:
                raise FitError(f"model {self.model} has no parameter {key!r}; "
                               f"parameters are {names}")


def fit(p: FitProblem) -> FitResult:
    """Weighted LM fit of a registered model.

    Missing initial values come from the model's heuristic guess.
    """
    model = get_model(p.model, p.irf)
    names = list(model.param_names)
    start = model.guess(p.x, p.y)
    for k, v in (p.p0 or {}).items():
        start[names.index(k)] = v
    lower = np.array(model.lower, float)
    upper = np.array(model.upper, float)
    for k, (lo, hi) in p.bounds.items():
        i = names.index(k)
        lower[i] = -np.inf if lo is None else lo
        upper[i] = np.inf if hi is None else hi
    start = np.clip(start, lower, upper)
    fixed = np.array([n in p.fixed for n in names])
    return least_squares(model, model.jacobian, p.x, p.y, p.sigma, start, names,
                         lower, upper, fixed)


def _param_error(res: FitResult, grad: np.ndarray) -> float:
    """1-sigma of a derived quantity with gradient ``grad`` w.r.t. all params."""
    free = res.free
    g = grad[free]
    cov = res.covariance[np.ix_(free, free)]
    if np.any(g != 0) and not np.all(np.isfinite(cov[np.ix_(g != 0, g != 0)])):
        return float("inf")
    gz = np.where(g != 0, g, 0.0)
    cz = np.where(np.isfinite(cov), cov, 0.0)
    return float(math.sqrt(max(gz @ cz @ gz, 0.0)))


@dataclass
class DoubletFit:
    fit: FitResult
    splitting: float
    splitting_err: float
    centers: tuple
    fwhm: float
    weights: tuple
    unresolved: bool
    degenerate_centers: bool


def fit_doublet_scan(x, y, sigma=None, p0: Optional[Dict[str, float]] = None,
                     fixed: Sequence[str] = ()) -> DoubletFit:
    """Two common-width Lorentzians plus constant background.

    ``unresolved`` flags a splitting below a quarter of the fitted FWHM;
    ``degenerate_centers`` flags a doublet that collapses onto one line.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if sigma is None:
        sigma = np.full_like(y, max(float(np.std(y[: max(3, len(y) // 10)])), 1e-12))
    res = fit(FitProblem("lorentzian_doublet", x, y, sigma, p0=p0, fixed=fixed))
    a1, c1, a2, c2, w, _ = res.params
    split = abs(c2 - c1)
    grad = np.zeros(len(res.params))
    sign = 1.0 if c2 >= c1 else -1.0
    grad[3], grad[1] = sign, -sign
    err = _param_error(res, grad)
    tot = a1 + a2
    weights = (a1 / tot, a2 / tot) if tot > 0 else (0.5, 0.5)
    degenerate = (
        bool(res.degenerate)
        or split < 1e-3 * w
        or min(weights) < 1e-3
        or not np.isfinite(err)
        or err > split
    )
    return DoubletFit(res, split, err, (c1, c2), w, weights, split < 0.25 * w, degenerate)


class G2Zero(NamedTuple):
    convolved: float
    convolved_err: float
    deconvolved: float
    deconvolved_err: float
    fit: FitResult
    irf_sensitivity: Optional[tuple] = None


def _g2_zero_from_fit(model, res):
    x0 = np.array([0.0])
    val = float(model(x0, res.params)[0])
    grad = np.zeros(len(res.params))
    grad[res.free] = model.jacobian(x0, res.params)[0][res.free]
    return val, _param_error(res, grad)


def histogram_fit_data(h: CorrelationHistogram, tau_limit: Optional[float] = None):
    if not h.is_normalized:
        raise FitError("histogram must be Poisson-normalized before fitting")
    x = h.taus
    y = h.normalized
    s = h.sigma
    if tau_limit is not None:
        m = np.abs(x) <= tau_limit
        x, y, s = x[m], y[m], s[m]
    return x, y, s


def extract_g2_zero(h: CorrelationHistogram, model_id: str, irf: IrfParams,
                    p0: Optional[Dict[str, float]] = None, fixed: Sequence[str] = (),
                    irf_sensitivity: bool = False, tau_limit: Optional[float] = None) -> G2Zero:
    """Fit the IRF-convolved model and report g2(0) with and without the IRF.

    ``irf_sensitivity`` reruns the fit with the IRF width scaled by 0.9 and
    1.1 and returns the resulting convolved/deconvolved g2(0) pairs.
    """
    if model_id not in ("g2_background_irf", "g2_resonant_weak_irf"):
        raise FitError(f"{model_id} is not a correlation model")
    x, y, s = histogram_fit_data(h, tau_limit)

    def run(irf_):
        res = fit(FitProblem(model_id, x, y, s, p0=p0, fixed=fixed, irf=irf_))
        conv = get_model(model_id, irf_)
        c, ce = _g2_zero_from_fit(conv, res)
        d, de = _g2_zero_from_fit(conv.deconvolved(), res)
        return c, ce, d, de, res

    c, ce, d, de, res = run(irf)
    sens = None
    if irf_sensitivity and irf.fwhm > 0:
        sens = tuple((f, *run(IrfParams(irf.fwhm * f))[:4:2]) for f in (0.9, 1.1))
    return G2Zero(c, ce, d, de, res, sens)


@dataclass
class PowerSeriesFit:
    fit: FitResult
    gamma0: Optional[float]
    gamma0_err: Optional[float]
    t2_from_gamma0: Optional[float]
    degenerate: list
    message: str

    def saturation_curve(self, powers):
        a, beta, t1, t2 = (self.fit[n] for n in ("amplitude", "beta", "t1", "t2"))
        s = beta * np.asarray(powers, float) * t1 * t2
        return s, a * 0.5 * s / (1.0 + s)


def fit_power_series(powers, intensities=None, linewidths=None, intensity_sigma=None,
                     linewidth_sigma=None, beta: Optional[float] = None,
                     p0: Optional[Dict[str, float]] = None) -> PowerSeriesFit:
    """Joint or separate fit of saturation intensities and power-broadened widths.

    Parameters are (amplitude, beta, t1, t2).  ``beta`` fixes the
    power-to-Rabi coefficient.  Structurally, intensities alone fix only
    ``beta t1 t2`` and the amplitude; widths add ``t2``; ``t1`` then needs a
    fixed ``beta``.  Unconstrained combinations end up in ``degenerate``.
    """
    powers = np.asarray(powers, float)
    if len(powers) < 4:
        raise FitError("power series fits need at least 4 power points")
    if intensities is None and linewidths is None:
        raise FitError("provide intensities and/or linewidths")
    n = len(powers)
    blocks_y, blocks_s, kinds = [], [], []
    if intensities is not None:
        yi = np.asarray(intensities, float)
        si = (np.full(n, 0.02 * np.max(yi)) if intensity_sigma is None
              else np.broadcast_to(np.asarray(intensity_sigma, float), (n,)))
        blocks_y.append(yi)
        blocks_s.append(si)
        kinds.append(np.zeros(n, int))
    if linewidths is not None:
        yl = np.asarray(linewidths, float)
        sl = (np.full(n, 0.02 * np.min(yl)) if linewidth_sigma is None
              else np.broadcast_to(np.asarray(linewidth_sigma, float), (n,)))
        blocks_y.append(yl)
        blocks_s.append(sl)
        kinds.append(np.ones(n, int))
    y = np.concatenate(blocks_y)
    s = np.concatenate(blocks_s)
    kind = np.concatenate(kinds)
    xp = np.tile(powers, len(kinds))
    sat = SaturationCurve()

    def model(_, p):
        out = np.empty(len(xp))
        m0 = kind == 0
        out[m0] = sat(xp[m0], p)
        out[~m0] = linewidth_model(xp[~m0], p[1], p[2], p[3])
        return out

    def jac(_, p):
        a, b, t1, t2 = p
        out = np.zeros((len(xp), 4))
        m0 = kind == 0
        out[m0] = sat.jacobian(xp[m0], p)
        pl = xp[~m0]
        sq = np.sqrt(1.0 + b * pl * t1 * t2)
        g0 = linewidth_model(0.0, b, t1, t2)
        dsq = 0.5 / sq
        out[~m0, 1] = g0 * dsq * pl * t1 * t2
        out[~m0, 2] = g0 * dsq * b * pl * t2
        out[~m0, 3] = -g0 / t2 * sq + g0 * dsq * b * pl * t1
        return out

    # heuristic start
    t2_0 = t1_0 = 500.0
    if linewidths is not None:
        yl = np.asarray(linewidths, float)
        t2_0 = t2_from_linewidth(float(np.min(yl)))
        t1_0 = t2_0
    if intensities is not None:
        start = sat.guess(powers, intensities, t1_0, t2_0)
    else:
        yl = np.asarray(linewidths, float)
        g0 = float(np.min(yl))
        # (G/G0)^2 - 1 = beta P t1 t2 at the largest power
        k = ((yl[-1] / g0) ** 2 - 1.0) / max(powers[-1], 1e-12)
        start = np.array([1.0, max(k, 1e-12) / (t1_0 * t2_0), t1_0, t2_0])
    fixed = np.zeros(4, bool)
    if beta is not None:
        fixed[1] = True
        # keep the knee where the data put it: rescale t1 for the given beta
        knee = start[1] * start[2] * start[3]
        start[1] = beta
        start[2] = knee / (beta * start[3])
    if intensities is None:
        fixed[0] = True
    for k_, v in (p0 or {}).items():
        start[list(sat.param_names).index(k_)] = v
    lower = np.array([0.0, 0.0, 1e-3, 1e-3])
    upper = np.full(4, np.inf)
    res = least_squares(model, jac, xp, y, s, start, list(sat.param_names), lower, upper,
                        fixed)
    gamma0 = gamma0_err = t2g = None
    if linewidths is not None:
        gamma0 = float(linewidth_model(0.0, *res.params[1:]))
        grad = np.zeros(4)
        grad[3] = -gamma0 / res.params[3]
        gamma0_err = _param_error(res, grad)
        t2g = t2_from_linewidth(gamma0)
    deg = list(res.degenerate)
    if deg:
        msg = "degenerate parameter combinations: " + "; ".join(
            "{" + ", ".join(d) + "}" for d in deg)
    else:
        msg = "all free parameters identified"
    return PowerSeriesFit(res, gamma0, gamma0_err, t2g, deg, msg)
