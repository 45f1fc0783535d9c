"""Centring, cross-covariances, and damped pseudo-inversion.

Notation: a matrix `U` holds one ensemble member per column, `Ut` (U-tilde)
its column anomalies. Everything here is a pure function of ndarray inputs;
the estimators are thin compositions of these.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionError, InsufficientSampleError

# Relative singular-value cutoff for plain (lam=0) pseudo-inversion.
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class PinvConfig:
    """Damping for pseudo-inversion: `lam` is relative to the largest
    singular value, so it is scale-free. `lam=0` means Moore-Penrose."""

    lam: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"damping must be finite and >= 0, got {self.lam}")


def center_columns(mat):
    """Split a (d, N) matrix into (anomalies, column-sample mean)."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] < 1:
        raise DimensionError(f"expected a nonempty 2-D matrix, got shape {mat.shape}")
    mean = mat.mean(axis=1)
    return mat - mean[:, None], mean


@lru_cache(maxsize=256)
def _svd_of_bytes(buf, shape):
    a = np.frombuffer(buf, dtype=float).reshape(shape)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    for arr in (u, s, vt):
        arr.setflags(write=False)
    return u, s, vt


def _svd(a):
    """SVD with a small cache, so lambda sweeps over one matrix factor once.

    Returned arrays are shared and read-only.
    """
    a = np.ascontiguousarray(a, dtype=float)
    return _svd_of_bytes(a.tobytes(), a.shape)


def tikhonov_pinv(a, cfg=PinvConfig()):
    """Damped pseudo-inverse via SVD: singular values `s` become
    `s/(s^2 + (lam*s1)^2)`. At `lam=0` this is the Moore-Penrose inverse
    with singular values below `RANK_RTOL*s1` truncated."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"expected a nonempty 2-D matrix, got shape {a.shape}")
    u, s, vt = _svd(a)
    s1 = s[0]
    if s1 == 0.0:  # zero matrix
        return np.zeros((a.shape[1], a.shape[0]))
    if cfg.lam == 0.0:
        d = np.where(s > RANK_RTOL * s1, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    else:
        d = s / (s**2 + (cfg.lam * s1) ** 2)
    return (vt.T * d) @ u.T


def sample_cross_cov(values, anomalies):
    """Unbiased sample cross-covariance `values @ anomalies.T / (N-1)`.

    `values` need not be centred: constant components hit the centred
    anomalies and vanish, so no explicit centring is applied (tests should
    not centre twice)."""
    values = np.asarray(values, dtype=float)
    anomalies = np.asarray(anomalies, dtype=float)
    n = anomalies.shape[-1]
    if n < 2:
        raise InsufficientSampleError(f"need at least 2 members, got {n}")
    if values.shape[-1] != n:
        raise DimensionError(
            f"values have {values.shape[-1]} columns but anomalies have {n}"
        )
    return values @ anomalies.T / (n - 1)


def uncentred_cross_cov(values, members, mu):
    """True-mean cross-covariance `(1/N) * sum_n f_n (u_n - mu)^T`.

    Unbiased, but for values with a nonzero mean `eta` it carries the extra
    term `eta*(ubar - mu)^T` relative to the centred estimator, making it
    noisier in practice."""
    values = np.asarray(values, dtype=float)
    members = np.asarray(members, dtype=float)
    mu = np.asarray(mu, dtype=float)
    n = members.shape[-1]
    if n < 1:
        raise InsufficientSampleError("need at least 1 member")
    if values.shape[-1] != n:
        raise DimensionError(
            f"values have {values.shape[-1]} columns but members have {n}"
        )
    if mu.shape != (members.shape[0],):
        raise DimensionError(
            f"mean has shape {mu.shape}, expected ({members.shape[0]},)"
        )
    return values @ (members - mu[:, None]).T / n


def lls_gradient(values, anomalies, cfg=PinvConfig()):
    """Regression coefficients `values @ anomalies^+`: the minimum-norm
    linear least-squares fit of the values onto the anomalies."""
    values = np.asarray(values, dtype=float)
    anomalies = np.asarray(anomalies, dtype=float)
    if values.shape[-1] != anomalies.shape[-1]:
        raise DimensionError(
            f"values have {values.shape[-1]} columns but anomalies have "
            f"{anomalies.shape[-1]}"
        )
    return values @ tikhonov_pinv(anomalies, cfg)
