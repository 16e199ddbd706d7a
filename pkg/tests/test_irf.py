import math

import numpy as np
import pytest

from antibunch.constants import FWHM_PER_SIGMA, fwhm_to_sigma
from antibunch.irf import ConvolutionError, ExpSum, IrfParams, convolve_with_irf

import oracles


def test_irf_params():
    assert IrfParams(400.0).sigma == pytest.approx(400.0 / FWHM_PER_SIGMA)
    assert IrfParams().sigma == 0.0
    for bad in (-1.0, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            IrfParams(bad)


@pytest.mark.parametrize("model", [
    ExpSum(0.0, ((1.0, 650.0, 0),), one_sided=True),
    ExpSum(0.5, ((2.0, 300.0, 1),), one_sided=True),
    ExpSum(1.0, ((-0.8, 500.0, 0), (0.3, 120.0, 1))),
])
def test_closed_form_against_quadrature_oracle(model):
    t = np.linspace(-5000, 5000, 31)
    closed = convolve_with_irf(model, IrfParams(400.0))(t)
    ref = oracles.gaussian_convolve_quad(lambda u: float(model(u)), t, 400.0)
    assert np.max(np.abs(closed - ref)) < 1e-6


def test_closed_form_far_tails_are_finite():
    # exp(lam^2 sigma^2 / 2) overflows for tiny tau unless erfcx is used
    model = ExpSum(0.0, ((1.0, 5.0, 0),), one_sided=True)
    t = np.array([-1e5, -3000.0, 0.0, 3000.0, 1e5])
    v = convolve_with_irf(model, IrfParams(400.0))(t)
    assert np.all(np.isfinite(v)) and np.all(v >= 0)
    # a 5 ps decay is a near-delta of area 5: convolved ~ 5 * Gaussian
    sig = fwhm_to_sigma(400.0)
    assert v[2] == pytest.approx(5.0 / (sig * math.sqrt(2 * math.pi)), rel=0.02)


def test_quad_path_for_generic_callable():
    f = lambda t: np.exp(-np.asarray(t, float) ** 2 / (2 * 300.0 ** 2))  # noqa: E731
    g = convolve_with_irf(f, IrfParams(400.0))
    sig = fwhm_to_sigma(400.0)
    tot = math.hypot(300.0, sig)
    t = np.array([0.0, 500.0])
    expected = 300.0 / tot * np.exp(-t ** 2 / (2 * tot ** 2))
    np.testing.assert_allclose(g(t), expected, atol=1e-9)
    assert np.ndim(g(0.0)) == 0


def test_closed_method_requires_expsum():
    with pytest.raises(TypeError):
        convolve_with_irf(lambda t: t, IrfParams(100.0), "closed")


def test_quadrature_failure_names_tau():
    def nasty(t):
        return 1.0 / abs(float(t) - 0.3) if float(t) != 0.3 else np.inf

    with pytest.raises(ConvolutionError) as exc:
        convolve_with_irf(nasty, IrfParams(10.0), "quad")(0.0)
    assert "tau=0.0" in str(exc.value)
