"""Matern covariance kernels and Gaussian linear algebra.

Every SPD solve in the package goes through a Cholesky factorization with
escalating diagonal jitter; explicit matrix inverses are never formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .errors import DataError, NumericalError

# Jitter ladder, applied relative to the mean diagonal of the matrix.
JITTER_STEPS = (0.0, 1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class MaternParams:
    """(amplitude, length_scale, smoothness) triple of a Matern kernel."""

    amplitude: float
    length_scale: float
    smoothness: float

    def __post_init__(self):
        for name in ("amplitude", "length_scale", "smoothness"):
            if not getattr(self, name) > 0:
                raise DataError(f"Matern {name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class CovSpec:
    """Kernel family tag plus its parameters; only 'matern' is supported."""

    params: MaternParams
    kind: str = "matern"

    def __post_init__(self):
        if self.kind != "matern":
            raise DataError(f"unsupported kernel kind {self.kind!r}")


def matern_cov(spec, s_grid, t_grid=None) -> np.ndarray:
    """Matern covariance matrix between two point sets.

    Entry (i, j) is ``amplitude * m_nu(|s_i - t_j| / length_scale)`` where
    ``m_nu`` is the standard Matern correlation with m_nu(0) = 1.
    """
    params = spec.params if isinstance(spec, CovSpec) else spec
    s = np.asarray(s_grid, dtype=float)
    t = s if t_grid is None else np.asarray(t_grid, dtype=float)
    nu = params.smoothness
    d = np.abs(s[:, None] - t[None, :]) / params.length_scale
    x = math.sqrt(2.0 * nu) * d
    corr = np.ones_like(x)
    pos = x > 1e-8
    if np.any(pos):
        xp = x[pos]
        corr[pos] = (2.0 ** (1.0 - nu) / gamma_fn(nu)) * (xp**nu) * kv(nu, xp)
    return params.amplitude * corr


class CholFactor:
    """Cholesky factor of an SPD matrix with jitter escalation.

    Factorization retries with diagonal jitter 1e-10, 1e-8, 1e-6 (scaled
    by the mean diagonal) before giving up.
    """

    def __init__(self, mat: np.ndarray):
        mat = np.asarray(mat, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise DataError(f"expected a square matrix, got shape {mat.shape}")
        scale = float(np.mean(np.diag(mat)))
        if scale <= 0:
            scale = 1.0
        err = None
        for eps in JITTER_STEPS:
            try:
                bumped = mat if eps == 0.0 else mat + (eps * scale) * np.eye(len(mat))
                self._cf = sla.cho_factor(bumped, lower=True, check_finite=False)
                self.n = len(mat)
                return
            except np.linalg.LinAlgError as exc:  # pragma: no cover - rethrown below
                err = exc
            except ValueError as exc:
                raise NumericalError(f"cannot factor matrix: {exc}") from exc
        raise NumericalError(
            f"matrix not positive definite after jitter up to {JITTER_STEPS[-1]}: {err}"
        )

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._cf, np.asarray(rhs, dtype=float), check_finite=False)

    def half_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve L z = rhs with the lower triangular factor."""
        return sla.solve_triangular(
            self._cf[0], np.asarray(rhs, dtype=float), lower=True, check_finite=False
        )

    def quad(self, vec: np.ndarray) -> float:
        """Quadratic form vec' M^{-1} vec (Mahalanobis square)."""
        z = self.half_solve(vec)
        return float(z @ z)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._cf[0]))))


def chol_lower(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor L with L L' = mat, with jitter escalation.

    Used to color random draws; very smooth kernels on dense grids are
    numerically rank deficient, and the small diagonal bump changes the
    drawn paths by far less than the kernel amplitude.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DataError(f"expected a square matrix, got shape {mat.shape}")
    scale = float(np.mean(np.diag(mat)))
    if scale <= 0:
        scale = 1.0
    err = None
    for eps in JITTER_STEPS:
        bumped = mat if eps == 0.0 else mat + (eps * scale) * np.eye(len(mat))
        try:
            return np.linalg.cholesky(bumped)
        except np.linalg.LinAlgError as exc:
            err = exc
    raise NumericalError(
        f"matrix not positive definite after jitter up to {JITTER_STEPS[-1]}: {err}"
    )


def chol_solve(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``mat @ out = rhs`` for SPD ``mat`` via Cholesky."""
    return CholFactor(mat).solve(rhs)


def mahalanobis_norm(vec: np.ndarray, mat: np.ndarray) -> float:
    """Covariance-weighted squared norm vec' mat^{-1} vec."""
    vec = np.asarray(vec, dtype=float)
    return CholFactor(mat).quad(vec)


def gauss_profile_loglik(resid: np.ndarray, cov: np.ndarray) -> tuple[float, float]:
    """Gaussian log-likelihood with the noise variance profiled out.

    For resid ~ N(0, sigma^2 V) the profile maximizer is
    ``sigma2_hat = resid' V^{-1} resid / n`` and the profiled value (up to
    an additive constant) is ``-(log det V + n log sigma2_hat + n) / 2``.
    """
    resid = np.asarray(resid, dtype=float)
    factor = CholFactor(cov)
    return profile_loglik_parts(factor.quad(resid), factor.logdet(), len(resid))


def profile_loglik_parts(quad_sum: float, logdet_sum: float, n: int) -> tuple[float, float]:
    """Profiled log-likelihood from accumulated quadratic forms and log-dets."""
    sigma2 = max(quad_sum / n, 1e-12)
    loglik = -0.5 * (logdet_sum + n * math.log(sigma2) + n)
    return loglik, sigma2
