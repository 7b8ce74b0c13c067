"""Second level: FPCA, penalized logistic GLMM, prediction."""

import json

import numpy as np
import pytest

import warpclass.classify as classify
from warpclass.basis import TruncatedPowerBasis, quad_weights
from warpclass.classify import (
    ClassifierModel,
    FpcaModel,
    PredictionResult,
    classify_prob,
    compute_J,
    cross_validate_K,
    fit_classifier,
    fit_glmm,
    fpca_decompose,
    functional_coefficient,
    predict_new,
    predict_panel,
    project_scores,
    scalar_only_prob,
    smooth_covariance,
)
from warpclass.curves import SubjectCurve
from warpclass.errors import DataError, NumericalError
from warpclass.gp import MaternParams, matern_cov
from warpclass.registration import RegistrationConfig, align_curves, fit_registration
from warpclass.simeval import Study2Config, metric_ca, simulate_study2


def _orthonormal_family(grid, k):
    """Quadrature-orthonormal functions via a smooth auxiliary covariance."""
    cov = matern_cov(MaternParams(1.0, 0.2, 2.5), grid)
    return fpca_decompose(cov, grid, k).eigenfunctions


# ---------------------------------------------------------------------------
# Covariance smoothing and FPCA.


def test_smooth_covariance_window_one_is_raw_covariance():
    rng = np.random.default_rng(5)
    vals = rng.standard_normal((7, 20))
    centered = vals - vals.mean(axis=0)
    raw = centered.T @ centered / 7
    got = smooth_covariance(vals, window=1)
    assert np.max(np.abs(got - raw)) < 1e-12


def test_smooth_covariance_preserves_flat_diagonals():
    # per-subject constant curves give a constant covariance matrix, which
    # diagonal averaging must leave untouched
    rng = np.random.default_rng(7)
    vals = np.outer(rng.standard_normal(9), np.ones(15))
    raw = smooth_covariance(vals, window=1)
    smoothed = smooth_covariance(vals, window=5)
    assert np.max(np.abs(smoothed - raw)) < 1e-12


def test_smooth_covariance_validates_input():
    with pytest.raises(DataError, match="window"):
        smooth_covariance(np.zeros((5, 8)), window=4)
    with pytest.raises(DataError, match="at least 2"):
        smooth_covariance(np.zeros((1, 8)))


def test_fpca_recovers_a_rank_one_covariance():
    grid = np.linspace(0, 1, 51)
    w = quad_weights(grid)
    f = np.sin(2 * np.pi * grid) + 0.3
    phi = f / np.sqrt(w @ f**2)
    lam = 2.7
    cov = lam * np.outer(phi, phi)
    out = fpca_decompose(cov, grid, k_x=3)
    assert abs(out.eigenvalues[0] - lam) < 1e-6
    assert np.max(np.abs(out.eigenfunctions[:, 0] - phi)) < 1e-6
    assert np.all(out.eigenvalues[1:] < 1e-8)


def test_fpca_eigenfunctions_are_quadrature_orthonormal():
    grid = np.linspace(0, 1, 41)
    cov = matern_cov(MaternParams(1.5, 0.15, 1.5), grid)
    out = fpca_decompose(cov, grid, k_x=6)
    w = quad_weights(grid)
    gram = out.eigenfunctions.T @ (w[:, None] * out.eigenfunctions)
    assert np.max(np.abs(gram - np.eye(6))) < 1e-6
    assert np.all(np.diff(out.eigenvalues) <= 1e-12)
    assert np.all(out.eigenvalues >= 0)


def test_fpca_sign_convention_is_reproducible():
    grid = np.linspace(0, 1, 31)
    w = quad_weights(grid)
    f = np.cos(np.pi * grid) + 0.2
    phi = f / np.sqrt(w @ f**2)
    a = fpca_decompose(np.outer(phi, phi), grid, k_x=1)
    b = fpca_decompose(np.outer(-phi, -phi), grid, k_x=1)
    assert np.array_equal(a.eigenfunctions, b.eigenfunctions)
    assert w @ a.eigenfunctions[:, 0] >= 0


def test_fpca_validates_input():
    grid = np.linspace(0, 1, 10)
    with pytest.raises(DataError, match="square"):
        fpca_decompose(np.zeros((10, 9)), grid, 2)
    bad = np.eye(10)
    bad[0, 1] = 0.5
    with pytest.raises(DataError, match="symmetric"):
        fpca_decompose(bad, grid, 2)
    with pytest.raises(DataError, match="k_x"):
        fpca_decompose(np.eye(10), grid, 11)


def test_project_scores_recovers_coordinates():
    grid = np.linspace(0, 1, 41)
    funcs = _orthonormal_family(grid, 4)
    mean = np.exp(grid)
    fpca = FpcaModel(grid=grid, mean=mean, eigenfunctions=funcs, eigenvalues=np.ones(4))
    rng = np.random.default_rng(11)
    c = rng.standard_normal((3, 4))
    curves = mean + c @ funcs.T
    got = project_scores(curves, fpca)
    assert np.max(np.abs(got - c)) < 1e-8
    single = project_scores(curves[0], fpca)
    assert single.shape == (4,)
    assert np.max(np.abs(single - c[0])) < 1e-8
    with pytest.raises(DataError, match="grid"):
        project_scores(curves[:, :-1], fpca)


def test_compute_J_matches_manual_quadrature():
    grid = np.linspace(0, 1, 37)
    funcs = _orthonormal_family(grid, 3)
    fpca = FpcaModel(
        grid=grid, mean=np.zeros(37), eigenfunctions=funcs, eigenvalues=np.ones(3)
    )
    tp = TruncatedPowerBasis.from_quantiles(grid, 5)
    got = compute_J(fpca, tp)
    cols = tp.design(grid)
    w = quad_weights(grid)
    want = np.array(
        [[float(np.sum(w * funcs[:, l] * cols[:, m])) for m in range(5)] for l in range(3)]
    )
    assert got.shape == (3, 5)
    assert np.max(np.abs(got - want)) < 1e-12


# ---------------------------------------------------------------------------
# Penalized logistic fits.


def _newton_logistic(design, y, iters=80):
    """Plain logistic MLE by full Newton; independent of the implementation."""
    beta = np.zeros(design.shape[1])
    for _ in range(iters):
        eta = design @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        step = np.linalg.solve((design.T * (p * (1 - p))) @ design, design.T @ (y - p))
        beta = beta + step
        if np.max(np.abs(step)) < 1e-12:
            break
    return beta


def _logistic_data(seed=13, n=40):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 2))
    eta = 0.3 - 0.8 * v[:, 0] + 0.5 * v[:, 1]
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    design = np.hstack([np.ones((n, 1)), v])
    return design, y


def test_unpenalized_fit_matches_newton_oracle():
    design, y = _logistic_data()
    model = fit_glmm(design, None, y)
    want = _newton_logistic(design, y)
    got = np.concatenate([[model.b0], model.b1])
    assert np.max(np.abs(got - want)) < 1e-6
    assert model.converged
    assert model.sigma_e == 0.0


def test_null_model_intercept_is_the_logit_of_the_class_fraction():
    y = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0], dtype=float)
    model = fit_glmm(np.ones((10, 1)), None, y)
    assert abs(model.b0 - np.log(0.3 / 0.7)) < 1e-8
    assert model.b1.size == 0


def test_separable_scalar_direction_grows_with_zero_functional_scores():
    # labels perfectly aligned with a +-1 covariate; the functional block is
    # identically zero, so its unpenalized columns make the system singular
    n = 20
    v = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    y = (v > 0).astype(float)
    scalar = np.column_stack([np.ones(n), v])
    func = np.zeros((n, 6))
    model = fit_glmm(scalar, func, y, sigma_init=100.0)
    assert model.b1[0] > 5.0
    # the intercept is tiny relative to the diverging slope
    assert abs(model.b0) < 1e-4 * model.b1[0]
    assert np.max(np.abs(model.e)) < 1e-6


def test_penalty_off_limit_matches_newton_on_the_full_design():
    rng = np.random.default_rng(31)
    n = 60
    scalar, _ = _logistic_data(seed=31, n=n)
    func = 0.5 * rng.standard_normal((n, 4))
    eta = 0.2 + scalar[:, 1] - 0.6 * func[:, 0] + 0.4 * func[:, 3]
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    model = fit_glmm(scalar, func, y, sigma_init=1e6, max_passes=1)
    want = _newton_logistic(np.hstack([scalar, func]), y)
    got = np.concatenate([[model.b0], model.b1, model.e[0], model.e[1]])
    assert np.max(np.abs(got - want)) < 1e-6


def test_glmm_deviance_is_monotone_within_every_pass():
    rng = np.random.default_rng(17)
    design, y = _logistic_data(seed=17)
    func = 0.5 * rng.standard_normal((len(y), 8))
    model = fit_glmm(design, func, y, sigma_init=1.0)
    assert model.deviance_trace
    for trace in model.deviance_trace:
        for prev, cur in zip(trace, trace[1:]):
            assert cur <= prev + 1e-8


def test_glmm_validates_inputs():
    design, y = _logistic_data()
    with pytest.raises(DataError, match="0/1"):
        fit_glmm(design, None, y + 1)
    with pytest.raises(DataError, match="both classes"):
        fit_glmm(design, None, np.zeros(len(y)))
    with pytest.raises(DataError, match="number of subjects"):
        fit_glmm(design[:-1], None, y)
    with pytest.raises(DataError, match=r"2\*k_e"):
        fit_glmm(design, np.zeros((len(y), 5)), y)


def test_variance_fixed_point_stall_raises(monkeypatch):
    calls = {"n": 0}

    def fake_pass(design, labels, penalty_vec, theta, max_newton=25):
        calls["n"] += 1
        out = np.zeros(design.shape[1])
        out[-1] = 1.0 + (calls["n"] % 2)  # keeps the variance target moving
        return out, [5.0, 5.0], np.full(len(labels), 0.25)

    monkeypatch.setattr(classify, "_irls_pass", fake_pass)
    rng = np.random.default_rng(19)
    n = 12
    scalar = np.ones((n, 1))
    func = rng.standard_normal((n, 6))
    y = np.arange(n) % 2
    with pytest.raises(NumericalError, match="failed to decrease"):
        fit_glmm(scalar, func, y)


def test_classify_prob_round_trips_the_logit():
    rng = np.random.default_rng(23)
    model = ClassifierModel(
        b0=0.4,
        b1=np.array([-0.7, 0.2]),
        e=rng.standard_normal((2, 3)),
        sigma_e=1.0,
        deviance_trace=[],
        converged=True,
        j_mats=rng.standard_normal((2, 4, 3)),
    )
    scores = rng.standard_normal((2, 4))
    v = np.array([0.3, -1.1])
    pi = classify_prob(model, scores, v)
    eta = model.b0 + v @ model.b1
    eta += scores[0] @ model.j_mats[0] @ model.e[0]
    eta += scores[1] @ model.j_mats[1] @ model.e[1]
    assert abs(np.log(pi / (1 - pi)) - eta) < 1e-10


def test_functional_coefficient_evaluates_the_spline():
    tp = TruncatedPowerBasis(4, knots=(0.4, 0.7))
    e = np.array([[0.5, -1.0, 2.0, 3.0], [0.0, 1.0, 0.0, -2.0]])
    model = ClassifierModel(
        b0=0.0,
        b1=np.zeros(1),
        e=e,
        sigma_e=1.0,
        deviance_trace=[],
        converged=True,
        coef_basis=tp,
    )
    t = np.linspace(0, 1, 9)
    want = tp.design(t) @ e[1]
    assert np.max(np.abs(functional_coefficient(model, 1, t) - want)) < 1e-12
    with pytest.raises(DataError, match="coordinate"):
        functional_coefficient(model, 2, t)
    bare = ClassifierModel(
        b0=0.0, b1=np.zeros(1), e=e, sigma_e=1.0, deviance_trace=[], converged=True
    )
    with pytest.raises(DataError, match="functional part"):
        functional_coefficient(bare, 0, t)


def test_prediction_result_validates_probability():
    with pytest.raises(DataError, match="pi_hat"):
        PredictionResult("s1", 1.2, 1, 1, True)


def test_scalar_only_prob_requires_refit():
    model = ClassifierModel(
        b0=0.0, b1=np.zeros(1), e=np.zeros((2, 2)), sigma_e=1.0,
        deviance_trace=[], converged=True,
    )
    with pytest.raises(DataError, match="scalar-only"):
        scalar_only_prob(model, np.array([1.0]))


# ---------------------------------------------------------------------------
# Pipeline on a small simulated panel.


@pytest.fixture(scope="module")
def small_pipeline():
    panel, truth = simulate_study2(
        Study2Config(scenario="A", seed=9, n_subjects=16, n_obs=30)
    )
    cfg = RegistrationConfig(n_interior_knots=4, variance_maxiter=40, max_outer=4)
    reg = fit_registration(panel, cfg)
    model = fit_classifier(reg, panel, k_x=5, k_e=3, sigma_init=1.0)
    return panel, truth, reg, model


def test_fit_classifier_validates_arguments(small_pipeline):
    panel, _, reg, _ = small_pipeline
    with pytest.raises(DataError, match="k_x >= k_e"):
        fit_classifier(reg, panel, k_x=3, k_e=5)


def test_classifier_model_round_trips_through_json(small_pipeline):
    panel, _, reg, model = small_pipeline
    back = ClassifierModel.from_dict(json.loads(json.dumps(model.to_dict())))
    rng = np.random.default_rng(29)
    for _ in range(5):
        scores = rng.standard_normal((2, model.j_mats.shape[1]))
        v = rng.standard_normal(1)
        assert classify_prob(back, scores, v) == classify_prob(model, scores, v)
        assert scalar_only_prob(back, v) == scalar_only_prob(model, v)
    t = np.linspace(0, 1, 17)
    for a in (0, 1):
        assert np.array_equal(
            functional_coefficient(back, a, t), functional_coefficient(model, a, t)
        )


def test_classifier_refit_is_bit_identical(small_pipeline):
    panel, _, reg, model = small_pipeline
    again = fit_classifier(reg, panel, k_x=5, k_e=3, sigma_init=1.0)
    assert again.b0 == model.b0
    assert np.array_equal(again.b1, model.b1)
    assert np.array_equal(again.e, model.e)
    assert again.sigma_e == model.sigma_e


def test_predict_matches_panel_wrapper(small_pipeline):
    panel, _, reg, model = small_pipeline
    sids = panel.subject_ids[:2]
    sub = panel.subset(sids)
    from_panel = predict_panel(reg, model, sub)
    for i, sid in enumerate(sids):
        one = predict_new(reg, model, panel.curve(sid), panel.covariates[i])
        assert one.subject_id == from_panel[i].subject_id == sid
        assert one.pi_hat == from_panel[i].pi_hat
        assert one.label == from_panel[i].label


def test_predict_with_zero_functional_part_reduces_to_scalars(small_pipeline):
    panel, _, reg, model = small_pipeline
    stripped = ClassifierModel.from_dict(json.loads(json.dumps(model.to_dict())))
    stripped.e = np.zeros_like(stripped.e)
    res = predict_new(reg, stripped, panel.curves[0], panel.covariates[0])
    v = panel.covariates[0]
    eta = stripped.b0 + float(v @ stripped.b1)
    want = 1.0 / (1.0 + np.exp(-eta))
    assert abs(res.pi_hat - want) < 1e-12
    assert res.label == int(want >= 0.5)
    assert res.iterations <= 3


def test_predict_requires_functional_model(small_pipeline):
    panel, _, reg, model = small_pipeline
    bare = ClassifierModel(
        b0=model.b0, b1=model.b1, e=model.e, sigma_e=model.sigma_e,
        deviance_trace=[], converged=True, scalar_b=model.scalar_b,
    )
    with pytest.raises(DataError, match="functional part"):
        predict_new(reg, bare, panel.curves[0], panel.covariates[0])


def test_cross_validation_contract_on_small_panel(small_pipeline):
    panel, _, reg, _ = small_pipeline
    pairs = ((4, 3), (5, 3), (4, 4))
    best, table = cross_validate_K(reg, panel, pairs=pairs, n_folds=4, return_table=True)
    assert best in pairs
    assert best == table[0][0]
    devs = [row[1] for row in table]
    assert devs == sorted(devs)
    again = cross_validate_K(reg, panel, pairs=pairs, n_folds=4)
    assert again == best
    with pytest.raises(DataError, match="k_x >= k_e"):
        cross_validate_K(reg, panel, pairs=((3, 4),))
    with pytest.raises(DataError, match="empty"):
        cross_validate_K(reg, panel, pairs=())
    with pytest.raises(DataError, match="n_folds"):
        cross_validate_K(reg, panel, pairs=pairs, n_folds=1)


# ---------------------------------------------------------------------------
# One realistic scenario-A split: selection and held-out accuracy.


@pytest.fixture(scope="module")
def scenario_a_fit():
    panel, truth = simulate_study2(Study2Config(scenario="A", seed=0))
    train_ids = [
        sid for sid, m in zip(panel.subject_ids, truth.train_mask) if m
    ]
    test_ids = [
        sid for sid, m in zip(panel.subject_ids, truth.train_mask) if not m
    ]
    train = panel.subset(train_ids)
    reg = fit_registration(train)
    model = fit_classifier(reg, train, k_x=18, k_e=10)
    return panel, truth, test_ids, reg, model


def test_default_truncation_ranks_well_by_cross_validation(scenario_a_fit):
    panel, truth, _, reg, _ = scenario_a_fit
    train_ids = [sid for sid, m in zip(panel.subject_ids, truth.train_mask) if m]
    best, table = cross_validate_K(
        reg, panel.subset(train_ids), n_folds=5, return_table=True
    )
    top3 = [row[0] for row in table[:3]]
    assert (18, 10) in top3


def test_training_half_is_classified_accurately_in_sample(scenario_a_fit):
    panel, truth, _, reg, model = scenario_a_fit
    train_ids = [sid for sid, m in zip(panel.subject_ids, truth.train_mask) if m]
    train = panel.subset(train_ids)
    aligned = align_curves(train, reg)
    scores = np.stack(
        [project_scores(aligned.values[:, :, a], model.fpca[a]) for a in (0, 1)],
        axis=1,
    )
    pis = np.array(
        [
            classify_prob(model, scores[i], train.covariates[i])
            for i in range(train.n_subjects)
        ]
    )
    assert metric_ca(train.labels, (pis > 0.5).astype(int)) >= 0.85


def test_held_out_subjects_classify_accurately(scenario_a_fit):
    panel, truth, test_ids, reg, model = scenario_a_fit
    label_of = dict(zip(panel.subject_ids, truth.labels))
    subset = panel.subset(test_ids[:10] + test_ids[-10:])
    preds = predict_panel(reg, model, subset)
    y = np.array([label_of[p.subject_id] for p in preds])
    yhat = np.array([p.label for p in preds])
    assert metric_ca(y, yhat) >= 0.75
    assert all(1 <= p.iterations <= 10 for p in preds)
    assert np.mean([p.converged for p in preds]) >= 0.8
