"""Second-level model: functional principal components of the aligned
curves feeding a penalized functional logistic classifier.

Registered curves are decomposed per coordinate into eigenfunctions of
the smoothed covariance; subject score vectors and a truncated-power
expansion of the functional coefficient reduce the functional logistic
regression to a generalized linear mixed model, fit by penalized
iteratively reweighted least squares with the random-effect variance
updated through an effective-degrees-of-freedom fixed point.

Prediction for a new subject alternates: assume a label, fit that
subject's warp under the assumed group, re-align, re-score, reclassify;
repeat until the label and probability stop moving.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .basis import TruncatedPowerBasis, cross_gram, quad_weights
from .curves import CurvePanel, SubjectCurve
from .errors import DataError, NumericalError
from .registration import (
    RegistrationFit,
    align_curves,
    align_single,
    fit_subject_warp,
)
from .rng import substream

_PROB_FLOOR = 1e-15
DEFAULT_CV_GRID = ((12, 6), (12, 10), (18, 6), (18, 10))


def _sigmoid(eta):
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# FPCA.


@dataclass(frozen=True)
class FpcaModel:
    """Truncated eigen-decomposition of one coordinate's covariance."""

    grid: np.ndarray
    mean: np.ndarray  # (n_grid,)
    eigenfunctions: np.ndarray  # (n_grid, k_x), quadrature-orthonormal
    eigenvalues: np.ndarray  # (k_x,), non-increasing, >= 0

    @property
    def k_x(self) -> int:
        return self.eigenfunctions.shape[1]


def smooth_covariance(values: np.ndarray, window: int = 11) -> np.ndarray:
    """Empirical covariance of curves on a grid, smoothed along diagonals.

    ``values`` is (n_subjects, n_grid).  The raw covariance (1/N
    normalization) is averaged over an 11-point moving window running
    along each diagonal, which preserves the near-diagonal ridge better
    than row/column smoothing, then symmetrized.
    """
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 2 or vals.shape[0] < 2:
        raise DataError("covariance needs at least 2 curves on a common grid")
    if window < 1 or window % 2 == 0:
        raise DataError(f"window must be odd and positive, got {window}")
    centered = vals - vals.mean(axis=0)
    cov = centered.T @ centered / vals.shape[0]
    out = np.empty_like(cov)
    g = cov.shape[0]
    half = window // 2
    for off in range(-(g - 1), g):
        diag = np.diagonal(cov, offset=off)
        m = len(diag)
        csum = np.concatenate([[0.0], np.cumsum(diag)])
        idx = np.arange(m)
        hi = np.minimum(idx + half + 1, m)
        lo = np.maximum(idx - half, 0)
        sm = (csum[hi] - csum[lo]) / (hi - lo)
        if off >= 0:
            out[idx, idx + off] = sm
        else:
            out[idx - off, idx] = sm
    return 0.5 * (out + out.T)


def fpca_decompose(cov: np.ndarray, grid, k_x: int, mean=None) -> FpcaModel:
    """Leading eigenpairs of the covariance under trapezoid quadrature.

    The weighted eigenproblem W^{1/2} C W^{1/2} gives functions that are
    orthonormal in the quadrature inner product.  Signs are fixed so each
    eigenfunction integrates to a non-negative value; numerically
    negative trailing eigenvalues are clipped at zero.
    """
    cov = np.asarray(cov, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if cov.shape != (len(grid), len(grid)):
        raise DataError("covariance must be square on the given grid")
    if not np.allclose(cov, cov.T, atol=1e-8):
        raise DataError("covariance must be symmetric")
    if k_x < 1 or k_x > len(grid):
        raise DataError(f"k_x must be in [1, {len(grid)}], got {k_x}")
    w = quad_weights(grid)
    sw = np.sqrt(w)
    sym = 0.5 * (cov + cov.T)
    weighted = sw[:, None] * sym * sw[None, :]
    vals, vecs = np.linalg.eigh(weighted)
    order = np.argsort(vals)[::-1][:k_x]
    lam = np.maximum(vals[order], 0.0)
    funcs = vecs[:, order] / sw[:, None]
    # eigh already orthonormalizes under w; renormalize to kill drift
    norms = np.sqrt(w @ funcs**2)
    funcs = funcs / norms
    integrals = w @ funcs
    for l in range(funcs.shape[1]):
        s = integrals[l]
        if s < 0 or (s == 0 and funcs[np.argmax(np.abs(funcs[:, l])), l] < 0):
            funcs[:, l] = -funcs[:, l]
    if mean is None:
        mean = np.zeros(len(grid))
    return FpcaModel(
        grid=grid,
        mean=np.asarray(mean, dtype=float),
        eigenfunctions=funcs,
        eigenvalues=lam,
    )


def project_scores(values, fpca: FpcaModel) -> np.ndarray:
    """Quadrature inner products of centered curves with the eigenfunctions.

    Accepts one curve (n_grid,) or a stack (n_subjects, n_grid).
    """
    vals = np.asarray(values, dtype=float)
    single = vals.ndim == 1
    vals = np.atleast_2d(vals)
    if vals.shape[1] != len(fpca.grid):
        raise DataError("curve grid does not match the decomposition grid")
    w = quad_weights(fpca.grid)
    scores = (vals - fpca.mean) @ (w[:, None] * fpca.eigenfunctions)
    return scores[0] if single else scores


def compute_J(fpca: FpcaModel, tpbasis: TruncatedPowerBasis) -> np.ndarray:
    """Cross-Gram matrix between eigenfunctions and the coefficient basis."""
    tp_cols = tpbasis.design(fpca.grid)
    return cross_gram(fpca.eigenfunctions, tp_cols, fpca.grid)


# ---------------------------------------------------------------------------
# Penalized logistic GLMM.


@dataclass
class ClassifierModel:
    """Fitted classifier: scalar part, coefficient splines, and FPCA refs."""

    b0: float
    b1: np.ndarray  # (p,)
    e: np.ndarray  # (2, k_e) spline coefficients of the functional terms
    sigma_e: float
    deviance_trace: list  # one inner IRLS deviance list per outer pass
    converged: bool
    scalar_b: np.ndarray | None = None  # scalar-only refit, for initialization
    coef_basis: TruncatedPowerBasis | None = None
    j_mats: np.ndarray | None = None  # (2, k_x, k_e)
    fpca: tuple | None = None  # per-coordinate FpcaModel
    n_passes: int = 0

    @property
    def k_e(self) -> int:
        return self.e.shape[1]

    def to_dict(self) -> dict:
        out = {
            "b0": float(self.b0),
            "b1": self.b1.tolist(),
            "e": self.e.tolist(),
            "sigma_e": float(self.sigma_e),
            "converged": bool(self.converged),
            "n_passes": int(self.n_passes),
            "deviance_trace": [[float(v) for v in inner] for inner in self.deviance_trace],
            "scalar_b": None if self.scalar_b is None else self.scalar_b.tolist(),
            "format_version": 1,
        }
        if self.coef_basis is not None:
            out["coef_basis"] = {
                "size": self.coef_basis.size,
                "knots": list(self.coef_basis.knots),
            }
        if self.j_mats is not None:
            out["j_mats"] = self.j_mats.tolist()
        if self.fpca is not None:
            out["fpca"] = [
                {
                    "grid": f.grid.tolist(),
                    "mean": f.mean.tolist(),
                    "eigenfunctions": f.eigenfunctions.tolist(),
                    "eigenvalues": f.eigenvalues.tolist(),
                }
                for f in self.fpca
            ]
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ClassifierModel":
        model = cls(
            b0=float(payload["b0"]),
            b1=np.asarray(payload["b1"], dtype=float),
            e=np.asarray(payload["e"], dtype=float),
            sigma_e=float(payload["sigma_e"]),
            deviance_trace=[list(map(float, t)) for t in payload["deviance_trace"]],
            converged=bool(payload["converged"]),
            n_passes=int(payload.get("n_passes", 0)),
        )
        if payload.get("scalar_b") is not None:
            model.scalar_b = np.asarray(payload["scalar_b"], dtype=float)
        if "coef_basis" in payload:
            model.coef_basis = TruncatedPowerBasis(
                size=int(payload["coef_basis"]["size"]),
                knots=tuple(payload["coef_basis"]["knots"]),
            )
        if "j_mats" in payload:
            model.j_mats = np.asarray(payload["j_mats"], dtype=float)
        if "fpca" in payload:
            model.fpca = tuple(
                FpcaModel(
                    grid=np.asarray(f["grid"], dtype=float),
                    mean=np.asarray(f["mean"], dtype=float),
                    eigenfunctions=np.asarray(f["eigenfunctions"], dtype=float),
                    eigenvalues=np.asarray(f["eigenvalues"], dtype=float),
                )
                for f in payload["fpca"]
            )
        return model


def _deviance(labels, eta, penalty_vec, theta) -> float:
    pi = np.clip(_sigmoid(eta), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    dev = -2.0 * float(labels @ np.log(pi) + (1.0 - labels) @ np.log(1.0 - pi))
    return dev + float(theta @ (penalty_vec * theta))


def _irls_pass(design, labels, penalty_vec, theta, max_newton=25):
    """Newton descent of the penalized deviance at fixed penalty weights.

    Step halving keeps the recorded deviance sequence non-increasing.
    Returns (theta, per-iteration deviances, final IRLS weights).
    """
    trace = []
    eta = design @ theta
    current = _deviance(labels, eta, penalty_vec, theta)
    trace.append(current)
    weights = None
    for _ in range(max_newton):
        pi = np.clip(_sigmoid(eta), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
        weights = np.maximum(pi * (1.0 - pi), 1e-10)
        grad = design.T @ (labels - pi) - penalty_vec * theta
        hess = (design.T * weights) @ design + np.diag(penalty_vec)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            # zero or collinear unpenalized columns make the system exactly
            # singular; the minimum-norm step leaves those directions alone
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(30):
            cand = theta + scale * step
            cand_dev = _deviance(labels, design @ cand, penalty_vec, cand)
            if cand_dev <= current + 1e-12:
                break
            scale *= 0.5
        else:
            break  # no descent direction left; keep current iterate
        theta = theta + scale * step
        eta = design @ theta
        moved = current - cand_dev
        current = cand_dev
        trace.append(current)
        if moved <= 1e-10 * max(1.0, abs(current)):
            break
    if weights is None:
        pi = np.clip(_sigmoid(eta), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
        weights = np.maximum(pi * (1.0 - pi), 1e-10)
    return theta, trace, weights


def fit_glmm(
    scalar_design: np.ndarray,
    functional_design: np.ndarray | None,
    labels,
    sigma_init: float = 1.0,
    max_passes: int = 50,
    tol: float = 1e-5,
) -> ClassifierModel:
    """Penalized logistic regression with a ridge variance fixed point.

    ``scalar_design`` is (N, 1+p) including the intercept column;
    ``functional_design`` is (N, 2*k_e) with one block per coordinate.
    The intercept, scalar coefficients, and the first two spline
    coefficients of each coordinate stay unpenalized; the rest carry a
    shared ridge weight 1/sigma_e^2, with sigma_e^2 re-estimated between
    passes as ||e_pen||^2 over the penalized block's effective degrees
    of freedom.
    """
    scalar_design = np.asarray(scalar_design, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    if scalar_design.ndim != 2 or scalar_design.shape[0] != len(y):
        raise DataError("design and labels disagree on the number of subjects")
    classes = np.unique(y)
    if not np.all(np.isin(classes, (0.0, 1.0))):
        raise DataError("labels must be 0/1")
    if len(classes) < 2:
        raise DataError("both classes must be present to fit the classifier")

    if functional_design is None:
        functional_design = np.zeros((len(y), 0))
    functional_design = np.asarray(functional_design, dtype=float)
    if functional_design.shape[0] != len(y) or functional_design.shape[1] % 2:
        raise DataError("functional design must be (N, 2*k_e)")
    k_e = functional_design.shape[1] // 2

    design = np.hstack([scalar_design, functional_design])
    n_scalar = scalar_design.shape[1]
    pen_mask = np.zeros(design.shape[1], dtype=bool)
    for a in (0, 1):
        block = n_scalar + a * k_e
        pen_mask[block + 2 : block + k_e] = True
    n_pen = int(pen_mask.sum())

    theta = np.zeros(design.shape[1])
    sigma2 = float(sigma_init) ** 2
    traces = []
    converged = False
    n_stalled = 0
    n_passes = 0
    for _ in range(max_passes):
        n_passes += 1
        penalty_vec = np.where(pen_mask, 1.0 / sigma2, 0.0) if n_pen else np.zeros(design.shape[1])
        theta, trace, weights = _irls_pass(design, y, penalty_vec, theta)
        traces.append(trace)
        if n_pen == 0:
            converged = True
            break

        hess = (design.T * weights) @ design + np.diag(penalty_vec)
        fisher = (design.T * weights) @ design
        try:
            inv_fisher = np.linalg.solve(hess, fisher)
        except np.linalg.LinAlgError:
            inv_fisher = np.linalg.lstsq(hess, fisher, rcond=None)[0]
        edf_pen = float(np.sum(np.diag(inv_fisher)[pen_mask]))
        e_pen = theta[pen_mask]
        sigma2_new = float(e_pen @ e_pen) / max(edf_pen, 1e-8)
        sigma2_new = max(sigma2_new, 1e-10)
        if abs(sigma2_new - sigma2) <= tol * max(sigma2, 1e-12):
            sigma2 = sigma2_new
            converged = True
            break
        sigma2 = sigma2_new

        # a pass that cannot decrease its own penalized objective at all
        # while the variance keeps moving means the fixed point is cycling
        stalled = trace[0] - trace[-1] <= 0.0
        n_stalled = n_stalled + 1 if stalled else 0
        if n_stalled >= 5:
            raise NumericalError(
                "penalized deviance failed to decrease for 5 consecutive passes"
            )

    b0 = float(theta[0])
    b1 = theta[1:n_scalar].copy()
    e = np.zeros((2, k_e))
    for a in (0, 1):
        block = n_scalar + a * k_e
        e[a] = theta[block : block + k_e]
    return ClassifierModel(
        b0=b0,
        b1=b1,
        e=e,
        sigma_e=float(np.sqrt(sigma2)) if n_pen else 0.0,
        deviance_trace=traces,
        converged=converged,
        n_passes=n_passes,
    )


def classify_prob(model: ClassifierModel, scores, scalars) -> float:
    """Class-1 probability for one subject's scores and scalar covariates."""
    v = np.atleast_1d(np.asarray(scalars, dtype=float))
    eta = model.b0 + float(v @ model.b1)
    if model.j_mats is not None and scores is not None:
        sc = np.asarray(scores, dtype=float)
        for a in (0, 1):
            eta += float(sc[a] @ model.j_mats[a] @ model.e[a])
    pi = float(_sigmoid(np.array([eta]))[0])
    return float(np.clip(pi, _PROB_FLOOR, 1.0 - _PROB_FLOOR))


def functional_coefficient(model: ClassifierModel, coordinate: int, times) -> np.ndarray:
    """Reconstruct the functional coefficient curve at the given times."""
    if model.coef_basis is None:
        raise DataError("model was fit without a functional part")
    if coordinate not in (0, 1):
        raise DataError(f"coordinate must be 0 or 1, got {coordinate}")
    return model.coef_basis.design(np.asarray(times, dtype=float)) @ model.e[coordinate]


# ---------------------------------------------------------------------------
# Pipeline: registration fit -> classifier.


def _panel_scalar_design(panel: CurvePanel) -> np.ndarray:
    return np.hstack([np.ones((panel.n_subjects, 1)), panel.covariates])


def _score_panel(aligned_values, fpca_pair):
    """Scores for every subject and coordinate: (N, 2, k_x)."""
    s0 = project_scores(aligned_values[:, :, 0], fpca_pair[0])
    s1 = project_scores(aligned_values[:, :, 1], fpca_pair[1])
    return np.stack([s0, s1], axis=1)


def _functional_design(scores, j_mats):
    """Design block [S_1 J_1 | S_2 J_2] of shape (N, 2*k_e)."""
    return np.hstack([scores[:, 0] @ j_mats[0], scores[:, 1] @ j_mats[1]])


def _pooled_times(panel: CurvePanel) -> np.ndarray:
    return np.concatenate([c.times for c in panel.curves])


def fit_classifier(
    reg_fit: RegistrationFit,
    panel: CurvePanel,
    k_x: int,
    k_e: int,
    smoothing_window: int = 11,
    sigma_init: float = 10.0,
) -> ClassifierModel:
    """Full second level on a registered panel.

    Aligns the curves, decomposes each coordinate, projects scores,
    builds the cross-Gram reduction, and fits the penalized logistic
    model.  A scalar-only refit is stored alongside for initializing
    label iteration on new subjects.
    """
    if not panel.has_labels:
        raise DataError("classifier training requires labels for all subjects")
    if k_x < k_e:
        raise DataError(f"identifiability requires k_x >= k_e, got ({k_x}, {k_e})")
    aligned = align_curves(panel, reg_fit)
    fpca_pair = []
    for a in (0, 1):
        vals = aligned.values[:, :, a]
        cov = smooth_covariance(vals, window=smoothing_window)
        fpca_pair.append(fpca_decompose(cov, aligned.grid, k_x, mean=vals.mean(axis=0)))
    fpca_pair = tuple(fpca_pair)

    coef_basis = TruncatedPowerBasis.from_quantiles(_pooled_times(panel), k_e)
    j_mats = np.stack([compute_J(fpca_pair[a], coef_basis) for a in (0, 1)])
    scores = _score_panel(aligned.values, fpca_pair)
    scalar_design = _panel_scalar_design(panel)
    labels = panel.labels

    model = fit_glmm(
        scalar_design, _functional_design(scores, j_mats), labels, sigma_init=sigma_init
    )
    scalar_only = fit_glmm(scalar_design, None, labels)
    model.scalar_b = np.concatenate([[scalar_only.b0], scalar_only.b1])
    model.coef_basis = coef_basis
    model.j_mats = j_mats
    model.fpca = fpca_pair
    return model


def scalar_only_prob(model: ClassifierModel, scalars) -> float:
    """Probability from the stored scalar-only logistic refit."""
    if model.scalar_b is None:
        raise DataError("model carries no scalar-only refit")
    v = np.atleast_1d(np.asarray(scalars, dtype=float))
    eta = float(model.scalar_b[0] + v @ model.scalar_b[1:])
    return float(np.clip(_sigmoid(np.array([eta]))[0], _PROB_FLOOR, 1.0 - _PROB_FLOOR))


# ---------------------------------------------------------------------------
# Cross-validation of the truncation pair.


def cross_validate_K(
    reg_fit: RegistrationFit,
    panel: CurvePanel,
    pairs=DEFAULT_CV_GRID,
    n_folds: int = 5,
    seed: int = 0,
    return_table: bool = False,
):
    """Pick (k_x, k_e) by stratified K-fold validation deviance.

    Registration is not refit per fold: warps do not depend on the
    truncation pair, so only the second level is re-estimated on each
    training fold.  Ties break toward the smaller k_e, then smaller k_x.
    """
    pairs = [(int(kx), int(ke)) for kx, ke in pairs]
    if not pairs:
        raise DataError("empty candidate grid")
    for kx, ke in pairs:
        if kx < ke:
            raise DataError(f"pair ({kx}, {ke}) violates k_x >= k_e")
    if not panel.has_labels:
        raise DataError("cross-validation requires labels")
    labels = panel.labels
    n = panel.n_subjects
    if n_folds < 2 or n_folds > n:
        raise DataError(f"n_folds must be in [2, {n}], got {n_folds}")

    # stratified fold assignment: shuffle within class, deal round-robin
    rng = substream(seed, "cv/folds")
    fold_of = np.empty(n, dtype=int)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        perm = idx[rng.permutation(len(idx))]
        fold_of[perm] = np.arange(len(perm)) % n_folds

    aligned = align_curves(panel, reg_fit)
    values = aligned.values
    grid = aligned.grid
    scalar_design = _panel_scalar_design(panel)
    k_x_max = max(kx for kx, _ in pairs)
    pooled = _pooled_times(panel)

    sums = {pair: 0.0 for pair in pairs}
    used = {pair: 0 for pair in pairs}
    for fold in range(n_folds):
        val_mask = fold_of == fold
        train_mask = ~val_mask
        y_train = labels[train_mask]
        if len(np.unique(y_train)) < 2 or val_mask.sum() == 0:
            warnings.warn(f"fold {fold} skipped: single-class training split")
            continue
        fpca_pair = []
        for a in (0, 1):
            vals = values[train_mask, :, a]
            cov = smooth_covariance(vals)
            fpca_pair.append(fpca_decompose(cov, grid, k_x_max, mean=vals.mean(axis=0)))
        scores_all = _score_panel(values, tuple(fpca_pair))
        y_val = labels[val_mask]
        for kx, ke in pairs:
            coef_basis = TruncatedPowerBasis.from_quantiles(pooled, ke)
            trunc = [
                FpcaModel(
                    grid=f.grid,
                    mean=f.mean,
                    eigenfunctions=f.eigenfunctions[:, :kx],
                    eigenvalues=f.eigenvalues[:kx],
                )
                for f in fpca_pair
            ]
            j_mats = np.stack([compute_J(trunc[a], coef_basis) for a in (0, 1)])
            func_design = _functional_design(scores_all[:, :, :kx], j_mats)
            try:
                model = fit_glmm(
                    scalar_design[train_mask], func_design[train_mask], y_train
                )
            except NumericalError:
                warnings.warn(f"fold {fold} pair ({kx},{ke}) skipped: fit failure")
                continue
            eta = (
                model.b0
                + scalar_design[val_mask, 1:] @ model.b1
                + func_design[val_mask] @ np.concatenate([model.e[0], model.e[1]])
            )
            pi = np.clip(_sigmoid(eta), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
            dev = -2.0 * float(y_val @ np.log(pi) + (1.0 - y_val) @ np.log(1.0 - pi))
            sums[(kx, ke)] += dev / val_mask.sum()
            used[(kx, ke)] += 1

    scored = []
    for pair in pairs:
        if used[pair] == 0:
            continue
        scored.append((sums[pair] / used[pair], pair[1], pair[0], pair))
    if not scored:
        raise DataError("every fold was skipped; cannot cross-validate")
    scored.sort()
    table = [(pair, mean_dev, used[pair]) for mean_dev, _, _, pair in scored]
    best = scored[0][3]
    if return_table:
        return best, table
    return best


# ---------------------------------------------------------------------------
# Prediction for new subjects.


@dataclass(frozen=True)
class PredictionResult:
    subject_id: str
    pi_hat: float
    label: int
    iterations: int
    converged: bool

    def __post_init__(self):
        if not (0.0 <= self.pi_hat <= 1.0):
            raise DataError(f"pi_hat must lie in [0,1], got {self.pi_hat}")


def predict_new(
    reg_fit: RegistrationFit,
    model: ClassifierModel,
    curve: SubjectCurve,
    scalars,
    max_iter: int = 10,
) -> PredictionResult:
    """Iterative label/warp prediction for one held-out subject.

    Starts from the scalar-only fit, then alternates: fit the subject's
    random warp under the currently assumed group, align, score, and
    reclassify.  Stops when the label is stable and the probability moves
    less than 1e-6.  Warp failures fall back to the identity warp and
    mark the result as not converged.
    """
    if model.fpca is None or model.j_mats is None:
        raise DataError("classifier lacks the functional part needed for prediction")
    v = np.atleast_1d(np.asarray(scalars, dtype=float))
    grid = model.fpca[0].grid
    anchors = reg_fit.warps.anchors

    pi = scalar_only_prob(model, v)
    label = int(pi >= 0.5)

    cache: dict = {}
    degraded = False
    converged = False
    iterations = 0
    pi_prev = None
    for _ in range(max_iter):
        iterations += 1
        if label not in cache:
            offsets, ok = fit_subject_warp(curve, reg_fit, label)
            ords = anchors + reg_fit.warps.group_offsets[label] + offsets
            if not ok and np.any(np.diff(ords) <= 0):
                ords = anchors.copy()
                degraded = True
            elif not ok:
                degraded = True
            aligned = align_single(curve, anchors, ords, grid)
            scores = np.stack(
                [project_scores(aligned[:, a], model.fpca[a]) for a in (0, 1)]
            )
            cache[label] = scores
        pi = classify_prob(model, cache[label], v)
        new_label = int(pi >= 0.5)
        if new_label == label and pi_prev is not None and abs(pi - pi_prev) < 1e-6:
            converged = True
            break
        pi_prev = pi
        label = new_label
    if degraded:
        converged = False
    return PredictionResult(
        subject_id=curve.subject_id,
        pi_hat=pi,
        label=label,
        iterations=iterations,
        converged=converged,
    )


def predict_panel(
    reg_fit: RegistrationFit,
    model: ClassifierModel,
    panel: CurvePanel,
    max_iter: int = 10,
) -> list:
    """predict_new over a panel, in subject-id order."""
    out = []
    for i, sid in enumerate(panel.subject_ids):
        out.append(
            predict_new(reg_fit, model, panel.curve(sid), panel.covariates[i], max_iter)
        )
    return out
