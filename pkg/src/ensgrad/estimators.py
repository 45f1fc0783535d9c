"""Ensemble gradient estimators behind one interface.

Every estimator maps `(objective, X, U, spec)` to a `GradientEstimate`. `X`
holds the uncertainty ensemble (one column per x-member), `U` the control
ensemble. Regularisation and the preconditioned form (trailing `Ut^+`
replaced by `Ut^T/(N-1)`, i.e. the gradient pre-multiplied by the sample
control covariance) are handled uniformly through `EstimatorSpec`.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEnsembleError, DimensionError
from .linalg import PinvConfig, sample_cross_cov, tikhonov_pinv
from .sampling import decorrelate

ESTIMATOR_IDS = (
    "plain_lls",
    "fragile",
    "paired",
    "stosag",
    "average_lls",
    "gen_stosag",
    "hybrid",
    "two_sided",
    "mirrored2s",
    "one_sided",
    "decorr",
    "avg_grad",
)

# Estimators consuming one fresh subsample of controls per x-member; the
# harness hands these a pooled ensemble of M*subsample_size members laid out
# as consecutive groups [v_1, w_1, v_2, w_2, ...].
SUBSAMPLED_IDS = ("average_lls", "gen_stosag", "hybrid", "two_sided")


@dataclass(frozen=True)
class EstimatorSpec:
    """Estimator selection plus the knobs shared by the whole family."""

    kind: str
    pinv: PinvConfig = PinvConfig()
    precondition: bool = False
    subsample_size: int = 2
    charge_cached: bool = False
    avg_grad_diagonal: bool = False

    def __post_init__(self):
        if self.kind not in ESTIMATOR_IDS:
            raise ValueError(f"unknown estimator {self.kind!r}; known: {ESTIMATOR_IDS}")
        if self.subsample_size < 2:
            raise ValueError(f"subsample_size must be >= 2, got {self.subsample_size}")


@dataclass
class GradientEstimate:
    """`grad` is the estimated gradient row of the mean objective. `evals`
    counts conditional-objective evaluations charged to this estimate
    (analytic gradient calls, for avg_grad); `cached` counts evaluations at
    the mean control that a surrounding optimisation loop already has."""

    grad: np.ndarray
    estimator: str
    lam: float
    evals: int
    cached: int = 0


class CountingObjective:
    """Wraps an ObjectiveSpec, counting distinct (x, u) evaluations and
    caching repeated requests so lambda sweeps do not re-evaluate."""

    def __init__(self, spec):
        self.spec = spec
        self.evals = 0
        self.grad_evals = 0
        self._cache = {}

    def _lookup(self, kind, arrays, compute, charge, grad=False):
        key = (kind,) + tuple((a.shape, a.tobytes()) for a in arrays)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        out = compute()
        if grad:
            self.grad_evals += charge
        else:
            self.evals += charge
        self._cache[key] = out
        return out

    def table(self, X, U):
        """Values loss(x_m, u_n) for every pair, shape (M, N)."""
        X = np.ascontiguousarray(X, dtype=float)
        U = np.ascontiguousarray(U, dtype=float)

        def compute():
            if self.spec.value_table is not None:
                return self.spec.value_table(X, U)
            return np.array(
                [[self.spec.value(x, u) for u in U.T] for x in X.T], dtype=float
            )

        return self._lookup("table", (X, U), compute, X.shape[1] * U.shape[1])

    def row(self, x, U):
        """Values loss(x, u_n) along one x, shape (N,)."""
        return self.table(np.asarray(x, dtype=float)[:, None], U)[0]

    def control_row(self, X, u):
        """Values loss(x_m, u) at one control, shape (M,)."""
        return self.table(X, np.asarray(u, dtype=float)[:, None])[:, 0]

    def pairs(self, X, U):
        """Diagonal values loss(x_n, u_n), shape (N,)."""
        X = np.ascontiguousarray(X, dtype=float)
        U = np.ascontiguousarray(U, dtype=float)
        if X.shape[1] != U.shape[1]:
            raise DimensionError(
                f"paired evaluation needs M == N, got M={X.shape[1]} N={U.shape[1]}"
            )

        def compute():
            if self.spec.value_pairs is not None:
                return self.spec.value_pairs(X, U)
            return np.array(
                [self.spec.value(x, u) for x, u in zip(X.T, U.T)], dtype=float
            )

        return self._lookup("pairs", (X, U), compute, U.shape[1])

    def grad_table(self, X, U):
        """Analytic gradients for every pair, shape (du, M, N)."""
        X = np.ascontiguousarray(X, dtype=float)
        U = np.ascontiguousarray(U, dtype=float)
        if self.spec.grad_u is None and self.spec.grad_u_table is None:
            raise ValueError(f"objective {self.spec.name!r} has no analytic gradient")

        def compute():
            if self.spec.grad_u_table is not None:
                return self.spec.grad_u_table(X, U)
            cols = [
                [self.spec.grad_u(x, u) for u in U.T] for x in X.T
            ]  # (M, N, du)
            return np.transpose(np.array(cols, dtype=float), (2, 0, 1))

        return self._lookup(
            "grad_table", (X, U), compute, X.shape[1] * U.shape[1], grad=True
        )

    def grad_pairs(self, X, U):
        """Analytic gradients along the diagonal only, shape (du, N)."""
        X = np.ascontiguousarray(X, dtype=float)
        U = np.ascontiguousarray(U, dtype=float)
        if X.shape[1] != U.shape[1]:
            raise DimensionError(
                f"paired evaluation needs M == N, got M={X.shape[1]} N={U.shape[1]}"
            )
        if self.spec.grad_u is None:
            raise ValueError(f"objective {self.spec.name!r} has no analytic gradient")

        def compute():
            return np.array(
                [self.spec.grad_u(x, u) for x, u in zip(X.T, U.T)], dtype=float
            ).T

        return self._lookup("grad_pairs", (X, U), compute, U.shape[1], grad=True)


def _as_counting(objective):
    return objective if isinstance(objective, CountingObjective) else CountingObjective(objective)


def _require_paired(X, U, kind):
    if X.n != U.n:
        raise DimensionError(f"{kind} requires M == N, got M={X.n} N={U.n}")


def _require_recentred(U, kind):
    if not U.recentred:
        raise ValueError(f"{kind} requires a recentred control ensemble")


def _apply_trail(row, anomalies, spec):
    """`row @ Ut^+` (damped), or `row @ Ut^T/(N-1)` in preconditioned form."""
    if spec.precondition:
        return sample_cross_cov(row, anomalies)
    return row @ tikhonov_pinv(anomalies, spec.pinv)


def _groups(X, U, spec, kind):
    """Consecutive control subsamples, one per x-member."""
    nm = spec.subsample_size
    if U.n != X.n * nm:
        raise DimensionError(
            f"{kind} needs M*subsample_size = {X.n}*{nm} controls, got {U.n}"
        )
    return [U.members[:, m * nm : (m + 1) * nm] for m in range(X.n)]


def _finish(grad, spec, evals, cached=0):
    if spec.charge_cached:
        evals, cached = evals + cached, 0
    return GradientEstimate(
        grad=np.asarray(grad, dtype=float),
        estimator=spec.kind,
        lam=spec.pinv.lam,
        evals=evals,
        cached=cached,
    )


def _plain_lls(obj, X, U, spec):
    row = obj.table(X.members, U.members).mean(axis=0)
    return _finish(_apply_trail(row, U.anomalies, spec), spec, X.n * U.n)


def _fragile(obj, X, U, spec):
    row = obj.row(X.members.mean(axis=1), U.members)
    return _finish(_apply_trail(row, U.anomalies, spec), spec, U.n)


def _paired(obj, X, U, spec):
    _require_paired(X, U, "paired")
    row = obj.pairs(X.members, U.members)
    return _finish(_apply_trail(row, U.anomalies, spec), spec, U.n)


def _stosag(obj, X, U, spec):
    _require_paired(X, U, "stosag")
    _require_recentred(U, "stosag")
    row = obj.pairs(X.members, U.members) - obj.control_row(X.members, U.true_mean)
    return _finish(_apply_trail(row, U.anomalies, spec), spec, U.n, cached=X.n)


def _one_sided(obj, X, U, spec):
    """Mirrored two-sided form with the reflected values replaced by their
    linear extrapolation 2*loss(X, mu) - loss(X, U); collapses to stosag."""
    _require_paired(X, U, "one_sided")
    _require_recentred(U, "one_sided")
    r_fwd = obj.pairs(X.members, U.members)
    r_back = 2.0 * obj.control_row(X.members, U.true_mean) - r_fwd
    row = 0.5 * (r_fwd - r_back)
    return _finish(_apply_trail(row, U.anomalies, spec), spec, U.n, cached=X.n)


def _mirrored2s(obj, X, U, spec):
    _require_paired(X, U, "mirrored2s")
    _require_recentred(U, "mirrored2s")
    w = 2.0 * U.true_mean[:, None] - U.members
    row = 0.5 * (obj.pairs(X.members, U.members) - obj.pairs(X.members, w))
    return _finish(_apply_trail(row, U.anomalies, spec), spec, 2 * U.n)


def _decorr(obj, X, U, spec):
    _require_paired(X, U, "decorr")
    _require_recentred(U, "decorr")
    base = obj.control_row(X.members, U.true_mean)
    psi = base - base.mean()
    u_eff = decorrelate(U, psi) if psi @ psi > 0.0 else U
    row = obj.pairs(X.members, u_eff.members)
    return _finish(_apply_trail(row, u_eff.anomalies, spec), spec, U.n, cached=X.n)


def _two_sided(obj, X, U, spec):
    v = U.members[:, 0::2]
    w = U.members[:, 1::2]
    if v.shape[1] != w.shape[1] or v.shape[1] != X.n:
        raise DimensionError(
            f"two_sided needs 2*M = {2 * X.n} controls laid out in pairs, got {U.n}"
        )
    diff = v - w
    if np.any(np.linalg.norm(diff, axis=0) == 0.0):
        raise DegenerateEnsembleError("two_sided: some pair has v == w")
    row = obj.pairs(X.members, v) - obj.pairs(X.members, w)
    if spec.precondition:
        grad = row @ diff.T / (2 * X.n)
    else:
        grad = row @ tikhonov_pinv(diff, spec.pinv)
    return _finish(grad, spec, 2 * X.n)


def _average_lls(obj, X, U, spec):
    """Mean over x-members of each group's own regression gradient."""
    nm = spec.subsample_size
    groups = _groups(X, U, spec, "average_lls")
    lam = spec.pinv.lam
    grads = []
    for x, g in zip(X.members.T, groups):
        row = obj.row(x, g)
        anoms = g - g.mean(axis=1, keepdims=True)
        if spec.precondition:
            grads.append(sample_cross_cov(row, anoms))
        elif nm == 2:
            # rank-1 group: pinv rows are +-vt^T/(2*|vt|^2), damped by 1/(1+lam^2)
            vt = anoms[:, 0]
            nrm2 = vt @ vt
            if nrm2 == 0.0:
                raise DegenerateEnsembleError("average_lls: some pair has v == w")
            grads.append((row[0] - row[1]) * vt / (2.0 * nrm2 * (1.0 + lam**2)))
        else:
            grads.append(row @ tikhonov_pinv(anoms, spec.pinv))
    return _finish(np.mean(grads, axis=0), spec, U.n)


def _group_cross_moments(obj, X, U, spec, kind):
    """Mean per-group cross-covariance and control covariance."""
    groups = _groups(X, U, spec, kind)
    c_sum = np.zeros(U.dim)
    cov_sum = np.zeros((U.dim, U.dim))
    for x, g in zip(X.members.T, groups):
        row = obj.row(x, g)
        anoms = g - g.mean(axis=1, keepdims=True)
        c_sum += row @ anoms.T / (anoms.shape[1] - 1)
        cov_sum += anoms @ anoms.T / (anoms.shape[1] - 1)
    return c_sum / X.n, cov_sum / X.n


def _gen_stosag(obj, X, U, spec):
    c_mean, cov_mean = _group_cross_moments(obj, X, U, spec, "gen_stosag")
    if spec.precondition:
        return _finish(c_mean, spec, U.n)
    return _finish(c_mean @ tikhonov_pinv(cov_mean, spec.pinv), spec, U.n)


def _hybrid(obj, X, U, spec):
    """Per-group cross-covariances against the pooled control covariance."""
    c_mean, _ = _group_cross_moments(obj, X, U, spec, "hybrid")
    if spec.precondition:
        return _finish(c_mean, spec, U.n)
    pooled = U.anomalies
    cov_pool = pooled @ pooled.T / (U.n - 1)
    return _finish(c_mean @ tikhonov_pinv(cov_pool, spec.pinv), spec, U.n)


def _avg_grad(obj, X, U, spec):
    """Average of analytic conditional gradients; no regression involved."""
    if spec.avg_grad_diagonal:
        _require_paired(X, U, "avg_grad (diagonal pairing)")
        return _finish(obj.grad_pairs(X.members, U.members).mean(axis=1), spec, U.n)
    table = obj.grad_table(X.members, U.members)
    return _finish(table.mean(axis=(1, 2)), spec, X.n * U.n)


_DISPATCH = {
    "plain_lls": _plain_lls,
    "fragile": _fragile,
    "paired": _paired,
    "stosag": _stosag,
    "average_lls": _average_lls,
    "gen_stosag": _gen_stosag,
    "hybrid": _hybrid,
    "two_sided": _two_sided,
    "mirrored2s": _mirrored2s,
    "one_sided": _one_sided,
    "decorr": _decorr,
    "avg_grad": _avg_grad,
}


def estimate(objective, X, U, spec):
    """Run one estimator: `objective` is an ObjectiveSpec (or an already
    counting wrapper), `X`/`U` are Ensembles, `spec` selects and configures
    the estimator."""
    obj = _as_counting(objective)
    return _DISPATCH[spec.kind](obj, X, U, spec)
