"""First-level registration: GLS steps, warp fitting, variance, outer loop."""

import json

import numpy as np
import pytest

from warpclass.basis import BSplineBasis, hyman_interp
from warpclass.curves import CurvePanel, ScalarRecord, SubjectCurve
from warpclass.errors import DataError, NumericalError
from warpclass.gp import MaternParams, matern_cov
from warpclass.registration import (
    MeanWeights,
    RegistrationConfig,
    RegistrationFit,
    VarianceParams,
    WarpState,
    align_curves,
    align_single,
    build_context,
    build_linearization,
    estimate_c,
    estimate_d,
    eval_warp,
    fit_registration,
    fit_subject_warp,
    fit_variance,
    fit_warps,
    invert_warp,
    penalized_objective,
    warp_design,
    warp_inverse_values,
    warp_values,
)
from warpclass.simeval import Study2Config, simulate_study2

ANCHORS = np.array([0.0, 0.33, 0.67, 1.0])


def _coef_for(basis, fn):
    """Least-squares spline coefficients for a smooth function."""
    grid = np.linspace(0.0, 1.0, 400)
    psi = basis.design(grid)
    return np.linalg.lstsq(psi, fn(grid), rcond=None)[0]


def _panel_from(curves_by_sid, labels_by_sid):
    curves, scalars = [], []
    for sid in sorted(curves_by_sid):
        t, v = curves_by_sid[sid]
        curves.append(SubjectCurve(sid, t, v))
        scalars.append(ScalarRecord(sid, np.array([1.0]), labels_by_sid[sid]))
    return CurvePanel(tuple(curves), tuple(scalars))


def _var(curve_amp=1.0, warp_amp=1.0, noise=0.05):
    return VarianceParams(
        noise,
        MaternParams(curve_amp, 0.3, 3.0),
        MaternParams(warp_amp, 0.3, 1.5),
    )


# ---------------------------------------------------------------------------
# Warp primitives.


def test_variance_params_reject_nonpositive_noise():
    with pytest.raises(DataError, match="noise_sd"):
        VarianceParams(0.0, MaternParams(1, 0.3, 3), MaternParams(1, 0.3, 3))


def test_identity_warp_state_is_identity():
    warps = WarpState.identity(ANCHORS, {"s1": 0, "s2": 1})
    t = np.linspace(0, 1, 50)
    assert np.allclose(eval_warp(warps, 0, "s1", t), t, atol=1e-14)
    assert np.allclose(invert_warp(warps, 1, "s2", t), t, atol=1e-9)


def test_eval_warp_checks_group_membership():
    warps = WarpState.identity(ANCHORS, {"s1": 0})
    with pytest.raises(DataError, match="not in group"):
        eval_warp(warps, 1, "s1", np.array([0.5]))


def test_eval_warp_rejects_nonmonotone_ordinates():
    warps = WarpState.identity(ANCHORS, {"s1": 0})
    warps.subject_offsets["s1"][1] = 0.5  # pushes ordinate past the next anchor
    with pytest.raises(NumericalError, match="non-monotone"):
        eval_warp(warps, 0, "s1", np.array([0.5]))


def test_invert_warp_round_trip():
    rng = np.random.default_rng(3)
    t = np.linspace(0.0, 1.0, 200)
    for _ in range(10):
        ords = ANCHORS + np.concatenate([[0.0], rng.uniform(-0.1, 0.1, 2), [0.0]])
        ginv = warp_inverse_values(ANCHORS, ords, t)
        back = warp_values(ANCHORS, ords, ginv)
        assert np.max(np.abs(back - t)) < 1e-8


def test_warp_design_at_identity_matches_plain_design():
    basis = BSplineBasis.uniform(3, 4)
    t = np.linspace(0, 1, 20)
    vals = np.column_stack([np.sin(t), np.cos(t)])
    panel = _panel_from({"s1": (t, vals)}, {"s1": 0})
    warps = WarpState.identity(ANCHORS, {"s1": 0})
    designs = warp_design(panel, warps, basis)
    assert np.allclose(designs["s1"], basis.design(t), atol=1e-13)


# ---------------------------------------------------------------------------
# Basis-weight GLS steps against a dense stacked oracle.


def _dense_gls_oracle(panel, basis, curve_cov):
    """Stack all subjects and solve the weighted normal equations densely."""
    q = basis.size
    out = np.empty((2, q))
    for a in (0, 1):
        normal = np.zeros((q, q))
        rhs = np.zeros(q)
        for c in panel.curves:
            psi = basis.design(c.times)
            w = np.linalg.inv(np.eye(len(c.times)) + matern_cov(curve_cov, c.times))
            normal += psi.T @ w @ psi
            rhs += psi.T @ w @ c.values[:, a]
        out[a] = np.linalg.solve(normal, rhs)
    return out


def test_estimate_c_matches_dense_gls_oracle():
    rng = np.random.default_rng(17)
    basis = BSplineBasis.uniform(2, 4)
    curves = {}
    for i, n in enumerate((12, 14, 16)):
        t = np.sort(rng.uniform(0, 1, n))
        t[0], t[-1] = 0.0, 1.0
        curves[f"s{i}"] = (t, rng.standard_normal((n, 2)))
    panel = _panel_from(curves, {sid: 0 for sid in curves})
    warps = WarpState.identity(ANCHORS, {sid: 0 for sid in curves})
    var = _var(curve_amp=0.8)
    ctx = build_context(panel, basis, ANCHORS, var)
    got = estimate_c(panel, warps, ctx, basis)
    want = _dense_gls_oracle(panel, basis, var.curve_cov)
    assert np.max(np.abs(got - want)) < 1e-8


def test_estimate_c_recovers_noiseless_truth():
    rng = np.random.default_rng(19)
    basis = BSplineBasis.uniform(2, 4)
    c_true = rng.standard_normal((2, basis.size))
    t = np.linspace(0, 1, 25)
    psi = basis.design(t)
    curves = {f"s{i}": (t, psi @ c_true.T) for i in range(2)}
    panel = _panel_from(curves, {sid: 0 for sid in curves})
    warps = WarpState.identity(ANCHORS, {sid: 0 for sid in curves})
    ctx = build_context(panel, basis, ANCHORS, _var(curve_amp=1e-8))
    got = estimate_c(panel, warps, ctx, basis)
    assert np.max(np.abs(got - c_true)) < 1e-10


def test_estimate_c_rejects_rank_deficient_design():
    basis = BSplineBasis.uniform(2, 4)  # six weights, four observations
    t = np.linspace(0, 1, 4)
    panel = _panel_from({"s1": (t, np.zeros((4, 2)))}, {"s1": 0})
    warps = WarpState.identity(ANCHORS, {"s1": 0})
    ctx = build_context(panel, basis, ANCHORS, _var())
    with pytest.raises(DataError, match="rank deficient"):
        estimate_c(panel, warps, ctx, basis)


def _two_group_panel(rng, basis, n=14):
    t = np.linspace(0, 1, n)
    psi = basis.design(t)
    c_true = rng.standard_normal((2, basis.size))
    curves, labels = {}, {}
    for i in range(4):
        k = i // 2
        bump = (k - 0.5) * rng.standard_normal((2, basis.size))
        vals = psi @ (c_true + bump).T + 0.01 * rng.standard_normal((n, 2))
        curves[f"s{i}"] = (t, vals)
        labels[f"s{i}"] = k
    return _panel_from(curves, labels), c_true


def test_estimate_d_matches_ols_oracle_without_penalty():
    rng = np.random.default_rng(23)
    basis = BSplineBasis.uniform(2, 4)
    panel, _ = _two_group_panel(rng, basis)
    group_of = panel.group_of
    warps = WarpState.identity(ANCHORS, group_of)
    ctx = build_context(panel, basis, ANCHORS, _var(curve_amp=1e-8))
    c_hat = estimate_c(panel, warps, ctx, basis)
    d, c_out = estimate_d(panel, warps, ctx, basis, c_hat, ridge_lambda=0.0)

    # oracle: per-group OLS of the residual, then the same centering
    raw = {}
    for k in (0, 1):
        raw[k] = np.empty_like(c_hat)
        for a in (0, 1):
            rows, ys = [], []
            for c in panel.curves:
                if group_of[c.subject_id] != k:
                    continue
                psi = basis.design(c.times)
                rows.append(psi)
                ys.append(c.values[:, a] - psi @ c_hat[a])
            raw[k][a] = np.linalg.lstsq(np.vstack(rows), np.concatenate(ys), rcond=None)[0]
    shift = 0.5 * (raw[0] + raw[1])
    for k in (0, 1):
        assert np.max(np.abs(d[k] - (raw[k] - shift))) < 1e-8
    assert np.max(np.abs(c_out - (c_hat + shift))) < 1e-8


def test_estimate_d_huge_penalty_kills_deviations():
    rng = np.random.default_rng(29)
    basis = BSplineBasis.uniform(2, 4)
    panel, _ = _two_group_panel(rng, basis)
    warps = WarpState.identity(ANCHORS, panel.group_of)
    ctx = build_context(panel, basis, ANCHORS, _var())
    c_hat = estimate_c(panel, warps, ctx, basis)
    d, _ = estimate_d(panel, warps, ctx, basis, c_hat, ridge_lambda=1e12)
    assert max(np.max(np.abs(d[k])) for k in (0, 1)) < 1e-6


def test_estimate_d_zero_for_identical_groups():
    rng = np.random.default_rng(31)
    basis = BSplineBasis.uniform(2, 4)
    t = np.linspace(0, 1, 15)
    vals = rng.standard_normal((15, 2))
    curves = {f"s{i}": (t, vals.copy()) for i in range(4)}
    labels = {f"s{i}": i // 2 for i in range(4)}
    panel = _panel_from(curves, labels)
    warps = WarpState.identity(ANCHORS, labels)
    ctx = build_context(panel, basis, ANCHORS, _var())
    c_hat = estimate_c(panel, warps, ctx, basis)
    d, _ = estimate_d(panel, warps, ctx, basis, c_hat, ridge_lambda=1e-4)
    assert max(np.max(np.abs(d[k])) for k in (0, 1)) < 1e-10


def test_estimate_d_centers_deviations():
    rng = np.random.default_rng(37)
    basis = BSplineBasis.uniform(2, 4)
    panel, _ = _two_group_panel(rng, basis)
    warps = WarpState.identity(ANCHORS, panel.group_of)
    ctx = build_context(panel, basis, ANCHORS, _var())
    c_hat = estimate_c(panel, warps, ctx, basis)
    d, _ = estimate_d(panel, warps, ctx, basis, c_hat, ridge_lambda=0.5)
    assert np.max(np.abs(d[0] + d[1])) < 1e-12
    with pytest.raises(DataError, match=">= 0"):
        estimate_d(panel, warps, ctx, basis, c_hat, ridge_lambda=-1.0)


def test_mean_steps_never_increase_the_objective():
    rng = np.random.default_rng(41)
    basis = BSplineBasis.uniform(2, 4)
    panel, c_true = _two_group_panel(rng, basis)
    warps = WarpState.identity(ANCHORS, panel.group_of)
    for sid in warps.subject_offsets:
        warps.subject_offsets[sid][1:-1] = rng.uniform(-0.05, 0.05, 2)
    ctx = build_context(panel, basis, ANCHORS, _var())
    lam = 0.3
    means = MeanWeights(
        c_true + 0.5, {k: 0.1 * rng.standard_normal(c_true.shape) - 0.0 for k in (0, 1)}
    )
    dev_sum = sum(means.group.values())
    means = MeanWeights(c_true + 0.5, {k: means.group[k] - dev_sum / 2 for k in (0, 1)})
    before = penalized_objective(panel, means, warps, ctx, lam)
    c_hat = estimate_c(panel, warps, ctx, basis, group_weights=means.group)
    d_hat, c_hat = estimate_d(panel, warps, ctx, basis, c_hat, lam)
    after = penalized_objective(panel, MeanWeights(c_hat, d_hat), warps, ctx, lam)
    assert after <= before + 1e-9 * max(1.0, abs(before))


# ---------------------------------------------------------------------------
# Warp fitting.


def _warp_fixture(rng, offsets_by_sid, warp_amp=100.0, n=60):
    basis = BSplineBasis.uniform(4, 4)
    coef = np.vstack(
        [
            _coef_for(basis, lambda t: np.sin(2 * np.pi * t) + 2 * t),
            _coef_for(basis, lambda t: np.cos(2 * np.pi * t) - 2 * t),
        ]
    )
    spl = [basis.spline(coef[a]) for a in (0, 1)]
    t = np.linspace(0, 1, n)
    curves, labels = {}, {}
    for sid, off in offsets_by_sid.items():
        ords = ANCHORS + off
        g = hyman_interp(ANCHORS, ords)(t)
        curves[sid] = (t, np.column_stack([spl[0](g), spl[1](g)]))
        labels[sid] = 0
    panel = _panel_from(curves, labels)
    means = MeanWeights(coef, {0: np.zeros_like(coef)})
    ctx = build_context(panel, basis, ANCHORS, _var(curve_amp=1e-8, warp_amp=warp_amp))
    return panel, means, ctx


def test_fit_warps_stays_at_identity_for_unwarped_data():
    rng = np.random.default_rng(43)
    zero = np.zeros(4)
    panel, means, ctx = _warp_fixture(rng, {"s1": zero, "s2": zero})
    warps0 = WarpState.identity(ANCHORS, {"s1": 0, "s2": 0})
    warps, stats = fit_warps(panel, means, ctx, warps0)
    assert stats["n_opt"] == 3  # two subjects plus one group pass
    for sid in ("s1", "s2"):
        assert np.max(np.abs(warps.ordinates(sid) - ANCHORS)) < 1e-3


def test_fit_warps_recovers_opposing_subject_warps():
    rng = np.random.default_rng(47)
    off = np.array([0.0, 0.05, -0.03, 0.0])
    panel, means, ctx = _warp_fixture(rng, {"s1": off, "s2": -off})
    warps0 = WarpState.identity(ANCHORS, {"s1": 0, "s2": 0})
    warps, _ = fit_warps(panel, means, ctx, warps0)
    assert np.max(np.abs(warps.ordinates("s1") - (ANCHORS + off))) < 5e-3
    assert np.max(np.abs(warps.ordinates("s2") - (ANCHORS - off))) < 5e-3
    # opposing offsets: the recentering leaves no group-level warp behind
    assert np.max(np.abs(warps.group_offsets[0])) < 5e-3


def test_fit_warps_never_increases_the_objective():
    rng = np.random.default_rng(53)
    off = np.array([0.0, 0.04, 0.02, 0.0])
    panel, means, ctx = _warp_fixture(rng, {"s1": off, "s2": -0.5 * off}, warp_amp=1.0)
    lam = 1e-4
    warps0 = WarpState.identity(ANCHORS, {"s1": 0, "s2": 0})
    before = penalized_objective(panel, means, warps0, ctx, lam)
    warps, _ = fit_warps(panel, means, ctx, warps0)
    after = penalized_objective(panel, means, warps, ctx, lam)
    assert after <= before + 1e-9 * max(1.0, abs(before))


# ---------------------------------------------------------------------------
# Linearization of the fitted curves in the warp offsets.


def test_linearization_is_zero_for_zero_means():
    basis = BSplineBasis.uniform(3, 4)
    t = np.linspace(0, 1, 12)
    panel = _panel_from({"s1": (t, np.ones((12, 2)))}, {"s1": 0})
    warps = WarpState.identity(ANCHORS, {"s1": 0})
    means = MeanWeights(np.zeros((2, basis.size)), {0: np.zeros((2, basis.size))})
    fitted, jac, w0 = build_linearization(panel, means, warps, basis)
    assert np.max(np.abs(fitted["s1"])) == 0.0
    assert np.max(np.abs(jac["s1"])) == 0.0
    assert jac["s1"].shape == (2, 12, 2)
    assert np.array_equal(w0["s1"], np.zeros(2))


def test_linearization_jacobian_matches_composed_fd_oracle():
    rng = np.random.default_rng(59)
    basis = BSplineBasis.uniform(4, 4)
    coef = np.vstack(
        [
            _coef_for(basis, lambda t: np.exp(np.cos(2 * np.pi * t))),
            _coef_for(basis, lambda t: np.exp(np.sin(2 * np.pi * t))),
        ]
    )
    t = np.linspace(0, 1, 30)
    panel = _panel_from({"s1": (t, np.zeros((30, 2)))}, {"s1": 0})
    warps = WarpState.identity(ANCHORS, {"s1": 0})
    warps.subject_offsets["s1"][1:-1] = np.array([0.04, -0.03])
    means = MeanWeights(coef, {0: np.zeros_like(coef)})
    fitted, jac, w0 = build_linearization(panel, means, warps, basis)
    assert np.array_equal(w0["s1"], [0.04, -0.03])

    # oracle: central difference of the whole map offset -> fitted curve
    spl = [basis.spline(coef[a]) for a in (0, 1)]
    ords = warps.ordinates("s1")
    delta = 1e-5
    want = np.empty_like(jac["s1"])
    for m in range(2):
        up, dn = ords.copy(), ords.copy()
        up[1 + m] += delta
        dn[1 + m] -= delta
        gu = warp_values(ANCHORS, up, t)
        gd = warp_values(ANCHORS, dn, t)
        for a in (0, 1):
            want[a, :, m] = (spl[a](gu) - spl[a](gd)) / (2 * delta)
    g0 = warp_values(ANCHORS, ords, t)
    assert np.allclose(fitted["s1"][:, 0], spl[0](g0), atol=1e-13)
    scale = max(1.0, np.max(np.abs(want)))
    assert np.max(np.abs(jac["s1"] - want)) < 1e-4 * scale


# ---------------------------------------------------------------------------
# Variance step.


def _variance_fixture(seed, noise=0.02, n=40, n_subj=4):
    rng = np.random.default_rng(seed)
    basis = BSplineBasis.uniform(4, 4)
    coef = np.vstack(
        [
            _coef_for(basis, lambda t: np.exp(np.cos(2 * np.pi * t))),
            _coef_for(basis, lambda t: np.exp(np.sin(2 * np.pi * t))),
        ]
    )
    spl = [basis.spline(coef[a]) for a in (0, 1)]
    t = np.linspace(0, 1, n)
    smooth = np.column_stack([spl[0](t), spl[1](t)])
    curves = {
        f"s{i}": (t, smooth + noise * rng.standard_normal((n, 2))) for i in range(n_subj)
    }
    panel = _panel_from(curves, {sid: 0 for sid in curves})
    warps = WarpState.identity(ANCHORS, {sid: 0 for sid in curves})
    means = MeanWeights(coef, {0: np.zeros_like(coef)})
    return panel, means, warps, basis


def test_fit_variance_recovers_noise_scale():
    estimates = []
    for seed in (61, 67, 71):
        panel, means, warps, basis = _variance_fixture(seed)
        fitted, jac, w0 = build_linearization(panel, means, warps, basis)
        var, (ll0, ll1) = fit_variance(panel, fitted, jac, w0, _var(), ANCHORS, maxiter=80)
        assert ll1 >= ll0 - 1e-9
        estimates.append(var.noise_sd)
    assert 0.01 <= float(np.median(estimates)) <= 0.04


# ---------------------------------------------------------------------------
# Outer loop on a small simulated panel.


@pytest.fixture(scope="module")
def small_fit():
    panel, _ = simulate_study2(Study2Config(scenario="A", seed=5, n_subjects=10, n_obs=24))
    cfg = RegistrationConfig(n_interior_knots=4, variance_maxiter=40, max_outer=6)
    return panel, fit_registration(panel, cfg)


def test_outer_trace_is_monotone_within_phases(small_fit):
    _, fit = small_fit
    assert fit.trace_phases
    for phase in fit.trace_phases:
        for prev, cur in zip(phase, phase[1:]):
            assert cur <= prev + 1e-6 * max(1.0, abs(prev))
    assert fit.trace == fit.trace_phases[-1]
    assert 0.0 <= fit.warp_opt_converged_fraction <= 1.0


def test_fitted_warps_satisfy_identifiability(small_fit):
    panel, fit = small_fit
    groups = sorted(fit.warps.group_offsets)
    # random warp offsets average to zero within each group
    for k in groups:
        members = [
            fit.warps.subject_offsets[sid]
            for sid in panel.subject_ids
            if fit.warps.group_of[sid] == k
        ]
        assert np.max(np.abs(np.mean(members, axis=0))) < 1e-8
    # group deviations of the mean weights sum to zero
    assert np.max(np.abs(sum(fit.means.group[k] for k in groups))) < 1e-8
    # every fitted warp is strictly increasing over a dense scan
    t = np.linspace(0.0, 1.0, 10_001)
    for sid in panel.subject_ids:
        g = eval_warp(fit.warps, fit.warps.group_of[sid], sid, t)
        assert np.all(np.diff(g) >= -1e-12)
        assert np.all(np.diff(fit.warps.ordinates(sid)) > 0)


def test_fit_round_trips_through_dict(small_fit):
    panel, fit = small_fit
    payload = json.loads(json.dumps(fit.to_dict()))
    back = RegistrationFit.from_dict(payload)
    assert np.array_equal(back.means.shared, fit.means.shared)
    for k in fit.means.group:
        assert np.array_equal(back.means.group[k], fit.means.group[k])
    for sid in panel.subject_ids:
        assert np.array_equal(back.warps.subject_offsets[sid], fit.warps.subject_offsets[sid])
    assert back.var.noise_sd == fit.var.noise_sd
    assert back.var.curve_cov == fit.var.curve_cov
    assert back.converged == fit.converged
    a = align_curves(panel, fit)
    b = align_curves(panel, back)
    assert np.array_equal(a.values, b.values)


def test_registration_requires_labels_and_two_groups():
    t = np.linspace(0, 1, 12)
    curves = (SubjectCurve("s1", t, np.zeros((12, 2))),)
    unlabeled = CurvePanel(curves, (ScalarRecord("s1", np.array([1.0])),))
    with pytest.raises(DataError, match="label"):
        fit_registration(unlabeled)
    one_group = CurvePanel(curves, (ScalarRecord("s1", np.array([1.0]), 0),))
    with pytest.raises(DataError, match="two groups"):
        fit_registration(one_group)


def test_noiseless_panel_is_reproduced_by_the_fit():
    # truth generated inside the default spline space, so zero error is
    # attainable and any residual is the fit's own
    basis = BSplineBasis.uniform(8, 4)
    t = np.linspace(0, 1, 40)
    psi = basis.design(t)
    coef = {}
    for k, shift in ((0, 0.0), (1, 0.18)):
        coef[k] = np.vstack(
            [
                _coef_for(basis, lambda s, sh=shift: np.exp(np.cos(2 * np.pi * s - sh))),
                _coef_for(basis, lambda s, sh=shift: np.exp(np.sin(2 * np.pi * s + sh))),
            ]
        )
    curves = {f"s{i}": (t, psi @ coef[i // 4].T) for i in range(8)}
    labels = {f"s{i}": i // 4 for i in range(8)}
    panel = _panel_from(curves, labels)
    cfg = RegistrationConfig(max_outer=4, n_variance_updates=1, variance_maxiter=40)
    fit = fit_registration(panel, cfg)
    for c in panel.curves:
        k = fit.warps.group_of[c.subject_id]
        g = eval_warp(fit.warps, k, c.subject_id, c.times)
        pred = np.column_stack(
            [fit.basis.spline(fit.means.coef(a, k))(g) for a in (0, 1)]
        )
        rmse = float(np.sqrt(np.mean((pred - c.values) ** 2)))
        assert rmse < 1e-3
        assert np.max(np.abs(fit.warps.subject_offsets[c.subject_id])) < 5e-3


# ---------------------------------------------------------------------------
# Alignment and held-out warp estimation.


def test_align_single_identity_reproduces_linear_curves():
    t = np.linspace(0, 1, 50)
    curve = SubjectCurve("s1", t, np.column_stack([t, 1 - t]))
    grid = np.linspace(0, 1, 21)
    vals = align_single(curve, ANCHORS, ANCHORS.copy(), grid)
    assert np.max(np.abs(vals[:, 0] - grid)) < 1e-8
    assert np.max(np.abs(vals[:, 1] - (1 - grid))) < 1e-8


def test_align_single_undoes_a_known_warp():
    t = np.linspace(0, 1, 200)
    ords = ANCHORS + np.array([0.0, 0.06, -0.04, 0.0])
    g = hyman_interp(ANCHORS, ords)(t)
    mean = lambda s: np.exp(np.cos(2 * np.pi * s))
    curve = SubjectCurve("s1", t, np.column_stack([mean(g), mean(g)]))
    grid = np.linspace(0, 1, 31)
    vals = align_single(curve, ANCHORS, ords, grid)
    assert np.max(np.abs(vals[:, 0] - mean(grid))) < 5e-3


def _handmade_fit(warp_amp=50.0):
    basis = BSplineBasis.uniform(4, 4)
    coef = np.vstack(
        [
            _coef_for(basis, lambda t: np.sin(2 * np.pi * t) + 2 * t),
            _coef_for(basis, lambda t: np.cos(2 * np.pi * t) - 2 * t),
        ]
    )
    means = MeanWeights(coef, {0: np.zeros_like(coef), 1: np.zeros_like(coef)})
    warps = WarpState.identity(ANCHORS, {"tr0": 0, "tr1": 1})
    return RegistrationFit(
        basis=basis,
        means=means,
        warps=warps,
        var=_var(curve_amp=1e-6, warp_amp=warp_amp, noise=0.02),
        config=RegistrationConfig(n_interior_knots=4),
        trace_phases=[[1.0]],
        converged=True,
        n_outer=1,
        warp_opt_total=0,
        warp_opt_converged=0,
    )


def test_fit_subject_warp_recovers_known_offsets():
    fit = _handmade_fit()
    off = np.array([0.0, 0.05, -0.04, 0.0])
    t = np.linspace(0, 1, 60)
    g = hyman_interp(ANCHORS, ANCHORS + off)(t)
    spl = [fit.basis.spline(fit.means.coef(a, 0)) for a in (0, 1)]
    curve = SubjectCurve("new", t, np.column_stack([spl[0](g), spl[1](g)]))
    got, ok = fit_subject_warp(curve, fit, label=0)
    assert ok
    assert np.max(np.abs(got - off)) < 5e-3


def test_fit_subject_warp_identity_for_unwarped_curve():
    fit = _handmade_fit()
    t = np.linspace(0, 1, 60)
    spl = [fit.basis.spline(fit.means.coef(a, 1)) for a in (0, 1)]
    curve = SubjectCurve("new", t, np.column_stack([spl[0](t), spl[1](t)]))
    got, ok = fit_subject_warp(curve, fit, label=1)
    assert ok
    assert np.max(np.abs(got)) < 1e-3


def test_fit_subject_warp_rejects_unknown_label():
    fit = _handmade_fit()
    t = np.linspace(0, 1, 20)
    curve = SubjectCurve("new", t, np.zeros((20, 2)))
    with pytest.raises(DataError, match="unknown group"):
        fit_subject_warp(curve, fit, label=7)
