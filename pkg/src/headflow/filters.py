"""Linear Kalman filter and unscented Kalman filter primitives.

Process and measurement callables operate column-wise: they receive an
(n, m) array of state columns and return a (p, m) array, so a single
state is passed as a column. All returned covariances are symmetrized;
matrix square roots use Cholesky with escalating diagonal jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

JITTER_START = 1e-12
JITTER_MAX = 1e-6


class NotPositiveSemidefiniteError(np.linalg.LinAlgError):
    def __init__(self, min_eigenvalue: float):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(
            f"covariance is not PSD within jitter policy "
            f"(min eigenvalue ~ {min_eigenvalue:.3e})"
        )


class SingularInnovationError(np.linalg.LinAlgError):
    def __init__(self, condition_estimate: float):
        self.condition_estimate = condition_estimate
        super().__init__(
            f"innovation covariance is singular (cond ~ {condition_estimate:.3e})"
        )


class InvalidScalingError(ValueError):
    """Sigma-point scaling n + lambda must be positive."""


@dataclass
class GaussianBelief:
    """State mean and error covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.cov.copy())

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class UTWeights:
    n: int
    alpha: float
    beta: float
    lam: float
    eta: float
    w_mean: np.ndarray  # length 2n+1
    w_cov: np.ndarray


@dataclass
class NoiseModel:
    Q: np.ndarray
    R: np.ndarray


def ut_weights(
    n: int, alpha: float, beta: float = 2.0, beta_squared: bool = True
) -> UTWeights:
    """Unscented transform weights for an n-dimensional state.

    lambda = n (alpha^2 - 1) and eta = sqrt(n + lambda). The zeroth
    covariance weight adds (1 - alpha^2 + beta^2); pass
    beta_squared=False for the common variant that adds beta instead of
    beta^2.
    """
    if n < 1:
        raise InvalidScalingError(f"state dimension must be >= 1, got {n}")
    if alpha == 0:
        raise InvalidScalingError("alpha must be nonzero")
    lam = n * (alpha**2 - 1.0)
    if n + lam <= 0:
        raise InvalidScalingError(f"n + lambda = {n + lam} must be positive")
    eta = np.sqrt(n + lam)
    w_mean = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    w_cov = w_mean.copy()
    w_mean[0] = lam / (n + lam)
    beta_term = beta**2 if beta_squared else beta
    w_cov[0] = lam / (n + lam) + (1.0 - alpha**2 + beta_term)
    return UTWeights(
        n=n, alpha=alpha, beta=beta, lam=lam, eta=eta, w_mean=w_mean, w_cov=w_cov
    )


def cholesky_with_jitter(P: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, adding diagonal jitter 1e-12..1e-6 if needed.

    Returns (L, jitter_used). An exactly zero matrix factors to zero.
    Raises NotPositiveSemidefiniteError when the largest jitter still
    fails, carrying the smallest eigenvalue estimate.
    """
    P = np.asarray(P, dtype=float)
    if not np.any(P):
        return np.zeros_like(P), 0.0
    try:
        return np.linalg.cholesky(P), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(P.shape[0])
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1.0 + 1e-12):
        try:
            return np.linalg.cholesky(P + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    min_eig = float(np.min(np.linalg.eigvalsh((P + P.T) / 2.0)))
    raise NotPositiveSemidefiniteError(min_eig)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2.0


def sigma_points(belief: GaussianBelief, eta: float) -> np.ndarray:
    """2n+1 sigma points as columns: [x, x + eta*L_i, x - eta*L_i]."""
    L, _ = cholesky_with_jitter(belief.cov)
    x = belief.mean.reshape(-1, 1)
    spread = eta * L
    return np.hstack([x, x + spread, x - spread])


def unscented_transform(
    points: np.ndarray, w_mean: np.ndarray, w_cov: np.ndarray, noise=None
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance of transformed sigma points."""
    mean = points @ w_mean
    centered = points - mean.reshape(-1, 1)
    cov = (centered * w_cov) @ centered.T
    if noise is not None:
        cov = cov + noise
    return mean, symmetrize(cov)


def kf_predict(belief: GaussianBelief, F: np.ndarray, Q: np.ndarray) -> GaussianBelief:
    mean = F @ belief.mean
    cov = symmetrize(F @ belief.cov @ F.T + Q)
    return GaussianBelief(mean, cov)


def _solve_spd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve A X = B for symmetric positive definite A via Cholesky."""
    try:
        factor = sla.cho_factor(symmetrize(A), lower=True)
    except np.linalg.LinAlgError as exc:
        eigs = np.linalg.eigvalsh(symmetrize(A))
        cond = float(np.abs(eigs).max() / max(np.abs(eigs).min(), 1e-300))
        raise SingularInnovationError(cond) from exc
    return sla.cho_solve(factor, B)


def kf_update(
    belief: GaussianBelief, G: np.ndarray, R: np.ndarray, z: np.ndarray
) -> GaussianBelief:
    """Standard linear measurement update of a predicted belief."""
    P = belief.cov
    innovation_cov = G @ P @ G.T + R
    gain = _solve_spd(innovation_cov, G @ P).T
    mean = belief.mean + gain @ (z - G @ belief.mean)
    cov = symmetrize((np.eye(belief.dim) - gain @ G) @ P)
    return GaussianBelief(mean, cov)


def ukf_predict(
    belief: GaussianBelief, f, Q: np.ndarray, weights: UTWeights
) -> GaussianBelief:
    """Propagate through a (possibly nonlinear) process function via sigma points."""
    points = sigma_points(belief, weights.eta)
    propagated = np.asarray(f(points), dtype=float)
    mean, cov = unscented_transform(propagated, weights.w_mean, weights.w_cov, Q)
    return GaussianBelief(mean, cov)


def ukf_update(
    belief_pred: GaussianBelief, g, R: np.ndarray, z: np.ndarray, weights: UTWeights
) -> GaussianBelief:
    """Unscented measurement update; regenerates sigma points from the prediction."""
    points = sigma_points(belief_pred, weights.eta)
    Y = np.asarray(g(points), dtype=float)
    y_mean = Y @ weights.w_mean
    Yc = Y - y_mean.reshape(-1, 1)
    Xc = points - belief_pred.mean.reshape(-1, 1)
    Pyy = symmetrize((Yc * weights.w_cov) @ Yc.T + R)
    Pxy = (Xc * weights.w_cov) @ Yc.T
    gain = _solve_spd(Pyy, Pxy.T).T
    mean = belief_pred.mean + gain @ (z - y_mean)
    cov = symmetrize(belief_pred.cov - gain @ Pyy @ gain.T)
    return GaussianBelief(mean, cov)
