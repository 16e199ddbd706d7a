from .engine import FitError, FitResult, least_squares
from .models import REGISTRY, get_model
from .analysis import (
    DoubletFit,
    FitProblem,
    G2Zero,
    PowerSeriesFit,
    extract_g2_zero,
    fit,
    fit_doublet_scan,
    fit_power_series,
)

__all__ = [
    "FitError", "FitResult", "least_squares", "REGISTRY", "get_model", "DoubletFit",
    "FitProblem", "G2Zero", "PowerSeriesFit", "extract_g2_zero", "fit", "fit_doublet_scan",
    "fit_power_series",
]
