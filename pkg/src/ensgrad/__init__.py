"""Ensemble (regression) gradient estimators for robust optimisation.

Estimate the gradient of a mean objective `L(u) = avg_m loss(x_m, u)` from
black-box evaluations of `loss` over a Gaussian control ensemble, by linear
least-squares regression of the values onto the ensemble anomalies. The
subpackages provide the linear algebra (`linalg`), ensemble handling
(`sampling`), benchmark objectives (`objectives`), the estimator family
(`estimators`), a Monte-Carlo benchmark harness (`harness`), and a CLI
(`cli`).
"""

__version__ = "0.1.0"

from .errors import DegenerateEnsembleError, DimensionError, InsufficientSampleError

__all__ = [
    "DegenerateEnsembleError",
    "DimensionError",
    "InsufficientSampleError",
    "__version__",
]
