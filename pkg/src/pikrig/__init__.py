"""Physics-informed Kriging on the extended design space.

A centered Gaussian random field closed under linear differential
operators lets derivative values, PDE residuals, and boundary conditions
join the prediction problem as first-class data.  This package provides
the squared-exponential kernel with mixed derivatives up to total order
four (:mod:`pikrig.kernel`), extended-point designs and operator encoding
(:mod:`pikrig.design`), the co-Kriging and Lagrangian predictors
(:mod:`pikrig.predictors`), LOOCV calibration (:mod:`pikrig.calibration`),
predictive uncertainty (:mod:`pikrig.uq`), a potential-flow laboratory
(:mod:`pikrig.flowlab`), and an experiment CLI (:mod:`pikrig.cli`).
"""

from .design import ExtendedPoint, ObservationSet, OperatorSystem
from .kernel import SqExpKernel
from .predictors import (
    KrigingWeights,
    SolveConfig,
    co_kriging,
    co_kriging_schur,
    lagrangian_kriging,
    ordinary_kriging,
    simple_kriging,
)

__version__ = "0.1.0"

__all__ = [
    "ExtendedPoint",
    "ObservationSet",
    "OperatorSystem",
    "SqExpKernel",
    "SolveConfig",
    "KrigingWeights",
    "simple_kriging",
    "ordinary_kriging",
    "co_kriging",
    "co_kriging_schur",
    "lagrangian_kriging",
    "__version__",
]
