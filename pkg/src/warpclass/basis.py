"""Spline bases, monotone interpolation, and quadrature on [0, 1].

Three basis families are collected here: B-spline design matrices for the
mean curves, a truncated power basis for functional regression
coefficients, and a monotonicity-preserving cubic Hermite interpolant used
to turn warp anchor offsets into full warping functions.  Trapezoidal
quadrature helpers realize every integral in the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import DataError

# Points this far outside a domain are treated as round-off and clipped.
DOMAIN_TOL = 1e-12


def _check_domain(x: np.ndarray, lo: float, hi: float, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size and (x.min() < lo - DOMAIN_TOL or x.max() > hi + DOMAIN_TOL):
        raise DataError(
            f"{what}: value outside [{lo}, {hi}] "
            f"(min {x.min():.6g}, max {x.max():.6g})"
        )
    return np.clip(x, lo, hi)


@dataclass(frozen=True)
class BSplineBasis:
    """Open B-spline basis on [0, 1] with clamped (order-fold) end knots.

    Parameters
    ----------
    interior_knots : tuple of float
        Strictly increasing knots inside (0, 1).
    order : int
        Polynomial order (degree + 1); 4 gives cubic splines.
    """

    interior_knots: tuple
    order: int = 4
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.order < 1:
            raise DataError(f"B-spline order must be >= 1, got {self.order}")
        ik = np.asarray(self.interior_knots, dtype=float)
        if ik.size and (np.any(np.diff(ik) <= 0) or ik.min() <= 0 or ik.max() >= 1):
            raise DataError("interior knots must be strictly increasing inside (0, 1)")
        full = np.concatenate([np.zeros(self.order), ik, np.ones(self.order)])
        full.flags.writeable = False
        object.__setattr__(self, "interior_knots", tuple(ik.tolist()))
        object.__setattr__(self, "knots", full)

    @classmethod
    def uniform(cls, n_interior: int = 8, order: int = 4) -> "BSplineBasis":
        """Basis with ``n_interior`` equally spaced knots in (0, 1)."""
        ik = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
        return cls(interior_knots=tuple(ik.tolist()), order=order)

    @property
    def size(self) -> int:
        """Number of basis functions q."""
        return len(self.interior_knots) + self.order

    def design(self, x) -> np.ndarray:
        """Design matrix with rows (psi_1(x_j), ..., psi_q(x_j))."""
        x = _check_domain(x, 0.0, 1.0, "B-spline design")
        return BSpline.design_matrix(x, self.knots, self.order - 1).toarray()

    def spline(self, coef: np.ndarray) -> BSpline:
        """Callable spline with the given coefficient vector."""
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (self.size,):
            raise DataError(f"expected {self.size} coefficients, got {coef.shape}")
        return BSpline(self.knots, coef, self.order - 1, extrapolate=True)


def bspline_design(grid, basis: BSplineBasis) -> np.ndarray:
    """Evaluate ``basis`` at every grid point; rows sum to 1 on [0, 1]."""
    return basis.design(grid)


@dataclass(frozen=True)
class TruncatedPowerBasis:
    """Truncated power basis {1, t, (t - k_3)_+, ..., (t - k_K)_+}.

    ``size`` is the total number of columns K; the first two are the
    global linear part and the remaining ``size - 2`` are hinge terms.
    """

    size: int
    knots: tuple

    def __post_init__(self):
        if self.size < 2:
            raise DataError(f"truncated power basis needs size >= 2, got {self.size}")
        kn = np.asarray(self.knots, dtype=float)
        if len(kn) != self.size - 2:
            raise DataError(
                f"expected {self.size - 2} hinge knots for size {self.size}, got {len(kn)}"
            )
        if kn.size and (np.any(np.diff(kn) <= 0) or kn.min() <= 0 or kn.max() >= 1):
            raise DataError(
                "hinge knots must be strictly increasing inside (0, 1); "
                "reduce the basis size if quantiles collide"
            )
        object.__setattr__(self, "knots", tuple(kn.tolist()))

    @classmethod
    def from_quantiles(cls, times, size: int) -> "TruncatedPowerBasis":
        """Place the hinge knots at equally spaced quantiles of ``times``."""
        t = np.unique(np.asarray(times, dtype=float))
        probs = np.arange(1, size - 1) / (size - 1)
        return cls(size=size, knots=tuple(np.quantile(t, probs).tolist()))

    def design(self, x) -> np.ndarray:
        x = _check_domain(x, 0.0, 1.0, "truncated power design")
        cols = [np.ones_like(x), x]
        for k in self.knots:
            cols.append(np.maximum(x - k, 0.0))
        return np.column_stack(cols)


def tpower_design(grid, basis: TruncatedPowerBasis) -> np.ndarray:
    """Design matrix of the truncated power basis at the grid points."""
    return basis.design(grid)


@dataclass(frozen=True)
class MonotoneInterpolant:
    """C1 piecewise-cubic Hermite interpolant with filtered slopes.

    Slopes are limited so that the interpolant is monotone on every
    interval where the data is monotone; evaluation outside the anchor
    span raises.
    """

    anchors: np.ndarray
    values: np.ndarray
    slopes: np.ndarray

    def __call__(self, t) -> np.ndarray:
        x, y, d = self.anchors, self.values, self.slopes
        t = _check_domain(t, x[0], x[-1], "monotone interpolant")
        idx = np.clip(np.searchsorted(x, t, side="right") - 1, 0, len(x) - 2)
        h = x[idx + 1] - x[idx]
        s = (t - x[idx]) / h
        s2 = s * s
        s3 = s2 * s
        return (
            y[idx] * (2.0 * s3 - 3.0 * s2 + 1.0)
            + h * d[idx] * (s3 - 2.0 * s2 + s)
            + y[idx + 1] * (-2.0 * s3 + 3.0 * s2)
            + h * d[idx + 1] * (s3 - s2)
        )


def hyman_interp(anchors, values) -> MonotoneInterpolant:
    """Monotonicity-preserving cubic Hermite interpolation.

    Initial slopes are three-point parabolic estimates; each is then
    limited to the monotone region of its two adjacent secants (zeroed at
    data extrema, capped at 3x the smaller neighbouring secant).  Data
    that is monotone yields a monotone interpolant; identity data is
    reproduced exactly.
    """
    x = np.asarray(anchors, dtype=float)
    y = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise DataError("anchors and values must be 1-D with equal lengths")
    if len(x) < 2:
        raise DataError("need at least two anchors")
    h = np.diff(x)
    if np.any(h <= 0):
        raise DataError("anchors must be strictly increasing")
    delta = np.diff(y) / h

    m = len(x)
    d = np.empty(m)
    if m == 2:
        d[:] = delta[0]
    else:
        d[1:-1] = (h[1:] * delta[:-1] + h[:-1] * delta[1:]) / (h[:-1] + h[1:])
        d[0] = ((2.0 * h[0] + h[1]) * delta[0] - h[0] * delta[1]) / (h[0] + h[1])
        d[-1] = ((2.0 * h[-1] + h[-2]) * delta[-1] - h[-1] * delta[-2]) / (
            h[-1] + h[-2]
        )

    # Slope filter: zero at extrema, sign-matched and capped elsewhere.
    for j in range(m):
        left = delta[j - 1] if j > 0 else delta[0]
        right = delta[j] if j < m - 1 else delta[-1]
        if left * right <= 0.0 and 0 < j < m - 1:
            d[j] = 0.0
            continue
        ref = right if j < m - 1 else left
        sign = np.sign(ref)
        if sign == 0.0:
            d[j] = 0.0
            continue
        cap = 3.0 * min(abs(left), abs(right)) if 0 < j < m - 1 else 3.0 * abs(ref)
        d[j] = sign * min(max(sign * d[j], 0.0), cap)

    return MonotoneInterpolant(anchors=x, values=y, slopes=d)


def quad_weights(grid) -> np.ndarray:
    """Trapezoidal quadrature weights; exact for degree <= 1 polynomials."""
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or len(g) < 2:
        raise DataError("quadrature grid must be 1-D with length >= 2")
    if np.any(np.diff(g) <= 0):
        raise DataError("quadrature grid must be strictly increasing")
    w = np.empty(len(g))
    w[0] = 0.5 * (g[1] - g[0])
    w[-1] = 0.5 * (g[-1] - g[-2])
    w[1:-1] = 0.5 * (g[2:] - g[:-2])
    return w


def cross_gram(f_cols: np.ndarray, g_cols: np.ndarray, grid) -> np.ndarray:
    """Matrix of pairwise quadrature inner products between column sets."""
    f_cols = np.atleast_2d(np.asarray(f_cols, dtype=float))
    g_cols = np.atleast_2d(np.asarray(g_cols, dtype=float))
    if f_cols.shape[0] != g_cols.shape[0]:
        raise DataError(
            f"row count mismatch: {f_cols.shape[0]} vs {g_cols.shape[0]}"
        )
    w = quad_weights(grid)
    if len(w) != f_cols.shape[0]:
        raise DataError("grid length does not match column rows")
    return f_cols.T @ (w[:, None] * g_cols)
