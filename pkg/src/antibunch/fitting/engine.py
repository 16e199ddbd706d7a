"""Bounded Levenberg-Marquardt weighted least squares.

Minimizes ``chi2 = sum(((y - f(x; p)) / sigma)**2)`` over the free
parameters, projecting trial steps onto the box bounds.  Uncertainties come
from the inverse curvature matrix ``(J^T W J)^-1`` at the optimum
(absolute sigma).  Exactly or nearly flat directions of chi2 are detected
from the singular values of the column-normalized weighted Jacobian and
reported instead of producing meaningless error bars.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

MAX_ITER = 500
CHI2_RTOL = 1e-10
STEP_RTOL = 1e-10
DEGENERACY_RTOL = 1e-7


class FitError(RuntimeError):
    pass


@dataclass
class FitResult:
    names: list
    params: np.ndarray
    errors: np.ndarray
    covariance: np.ndarray
    chi2: float
    dof: int
    residuals: np.ndarray
    iterations: int
    converged: bool
    reason: str
    free: np.ndarray
    chi2_initial: float
    degenerate: list = field(default_factory=list)

    @property
    def redchi(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else float("nan")

    def __getitem__(self, name):
        return float(self.params[self.names.index(name)])

    def error(self, name):
        return float(self.errors[self.names.index(name)])

    def as_dict(self):
        return {
            "params": {n: float(v) for n, v in zip(self.names, self.params)},
            "errors": {n: float(v) for n, v in zip(self.names, self.errors)},
            "fixed": [n for n, f in zip(self.names, self.free) if not f],
            "chi2": float(self.chi2),
            "dof": int(self.dof),
            "redchi": float(self.redchi),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "reason": self.reason,
            "degenerate": [list(d) for d in self.degenerate],
        }


def central_difference(fun, p, free, rel_step=1e-6):
    """Jacobian of ``fun`` w.r.t. the free entries of ``p`` by central differences."""
    p = np.asarray(p, dtype=float)
    cols = []
    for i in np.flatnonzero(free):
        h = rel_step * (abs(p[i]) if p[i] != 0 else 1.0)
        up = p.copy()
        dn = p.copy()
        up[i] += h
        dn[i] -= h
        cols.append((fun(up) - fun(dn)) / (2 * h))
    return np.column_stack(cols) if cols else np.zeros((len(fun(p)), 0))


def _degenerate_directions(jw, names_free):
    """Null directions of the weighted Jacobian, as tuples of parameter names."""
    if jw.shape[1] == 0:
        return []
    norms = np.linalg.norm(jw, axis=0)
    dead = norms == 0
    out = [(names_free[i],) for i in np.flatnonzero(dead)]
    live = np.flatnonzero(~dead)
    if len(live) < 2:
        return out
    jn = jw[:, live] / norms[live]
    _, s, vt = np.linalg.svd(jn, full_matrices=False)
    for k in np.flatnonzero(s < DEGENERACY_RTOL * s[0]):
        v = np.abs(vt[k])
        involved = tuple(names_free[live[i]] for i in np.flatnonzero(v > 0.1 * v.max()))
        out.append(involved)
    return out


def least_squares(model: Callable, jacobian: Optional[Callable], x, y, sigma, p0,
                  names: Sequence[str], lower=None, upper=None, fixed=None,
                  max_iter: int = MAX_ITER) -> FitResult:
    """Fit ``model(x, p)`` to ``y``.

    ``jacobian(x, p)`` returns ``d model / d p`` for all parameters, or is
    None to use central differences.  ``fixed`` is a boolean mask.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    p = np.asarray(p0, dtype=float).copy()
    n = len(p)
    names = list(names)
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    free = np.ones(n, bool) if fixed is None else ~np.asarray(fixed, bool)
    nfree = int(free.sum())
    if y.shape != sigma.shape:
        raise FitError("y and sigma must have equal length")
    if np.any(~(sigma > 0)):
        raise FitError("all sigma must be positive")
    if len(y) < nfree + 1:
        raise FitError(f"{len(y)} data points cannot constrain {nfree} free parameters")
    if not np.all(np.isfinite(p)):
        raise FitError("initial guess must be finite")
    if np.any(p < lower) or np.any(p > upper):
        raise FitError("initial guess lies outside the bounds")
    w = 1.0 / sigma

    def resid(q):
        return (y - model(x, q)) * w

    def jac_w(q):
        if jacobian is None:
            jf = central_difference(lambda qq: model(x, qq), q, free)
        else:
            jf = np.asarray(jacobian(x, q))[:, free]
        return jf * w[:, None]

    r = resid(p)
    chi2 = float(r @ r)
    chi2_0 = chi2
    if not np.isfinite(chi2):
        raise FitError("model is not finite at the initial guess")
    lam = 1e-3
    it = 0
    converged = False
    reason = "max iterations reached"
    if nfree == 0:
        converged, reason = True, "no free parameters"
    while not converged and it < max_iter:
        j = jac_w(p)
        g = j.T @ r
        a = j.T @ j
        if chi2 == 0.0 or not np.any(g):
            converged, reason = True, "zero gradient"
            break
        diag = np.diag(a).copy()
        diag[diag == 0] = 1.0
        improved = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(a + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = p.copy()
            trial[free] = np.clip(p[free] + step, lower[free], upper[free])
            r_t = resid(trial)
            chi2_t = float(r_t @ r_t)
            if np.isfinite(chi2_t) and chi2_t <= chi2:
                improved = True
                break
            lam *= 10
        it += 1
        if not improved:
            converged, reason = True, "no downhill step (local minimum)"
            break
        dchi = chi2 - chi2_t
        dp = np.abs(trial - p)
        scale = np.maximum(np.abs(p), np.abs(trial))
        p, r, chi2 = trial, r_t, chi2_t
        lam = max(lam / 10, 1e-12)
        if dchi <= CHI2_RTOL * max(chi2, 1e-300):
            converged, reason = True, "relative chi2 change below tolerance"
        elif np.all(dp[free] <= STEP_RTOL * np.where(scale[free] > 0, scale[free], 1.0)):
            converged, reason = True, "parameter step below tolerance"

    j = jac_w(p)
    names_free = [nm for nm, f in zip(names, free) if f]
    degenerate = _degenerate_directions(j, names_free)
    cov = np.full((n, n), np.nan)
    errors = np.zeros(n)
    if nfree:
        a = j.T @ j
        bad = set(nm for d in degenerate for nm in d)
        ok = np.array([nm not in bad for nm in names_free])
        cov_free = np.full((nfree, nfree), np.nan)
        if ok.any():
            sub = a[np.ix_(ok, ok)]
            cov_free[np.ix_(ok, ok)] = np.linalg.pinv(sub)
        idx = np.flatnonzero(free)
        cov[np.ix_(idx, idx)] = cov_free
        errors[free] = np.where(ok, np.sqrt(np.abs(np.diag(cov_free))), np.inf)
    dof = len(y) - nfree
    return FitResult(names, p, errors, cov, chi2, dof, r.copy(), it, converged, reason,
                     free, chi2_0, degenerate)
