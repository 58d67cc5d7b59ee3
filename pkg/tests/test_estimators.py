import numpy as np
import pytest

from illposed.core import FunctionHandle, SieveOperator, cosine, indicator, picard_solve, population_tikhonov_iterate
from illposed.dgp import (
    Dataset,
    Roles,
    default_proximal_dgp,
    make_series_dgp,
    npiv_population,
    proximal_population,
    sample_npiv,
    true_operator_npiv,
    true_proximal_nuisances,
    true_r_npiv,
    true_sieve_operator_npiv,
)
from illposed.errors import NonConvexError
from illposed.estimators import (
    FitConfig,
    QuadraticObjective,
    build_objective,
    debiased_risk,
    fit,
    fit_objective,
    influence_value,
    influence_values,
    projected_risk_plugin,
)
from illposed.functionals import bind, h_equation, proximal_functional
from illposed.nuisance import NuisanceFit, fit_nuisances
from illposed.selection import split

from oracles import tikhonov_stacked


def proximal_h_population(dgp=None):
    dgp = dgp or default_proximal_dgp()
    pop = bind(proximal_population(dgp), h_equation(proximal_functional(dgp.a)))
    T, r = true_proximal_nuisances(dgp, "h")
    return pop, T, r


def toy_dataset():
    """4 rows on indicator bases: V_h in {0, 1}, V_q in {0, 1}."""
    vals = np.array([
        # W  Z  g0   g1
        [0, 0, 1.0, 1.0],
        [1, 0, 2.0, 1.0],
        [0, 1, -1.0, 2.0],
        [1, 1, 0.5, 1.0],
    ])
    return Dataset(("W", "Z", "g0", "g1"), vals, Roles(("W",), ("Z",), "g0", "g1"))


# ---------------------------------------------------------------- plug-in risk


def test_plugin_zero_when_g0_is_fitted_value():
    d = toy_dataset()
    b = indicator(2)
    T = SieveOperator([[0.5, -1.0], [2.0, 0.3]], b, b)
    h = FunctionHandle(b, [0.7, -0.2])
    th = b.design(d.vq()) @ (T.matrix @ h.coeffs)
    assert projected_risk_plugin(h, d.with_columns({"g0": th}), T) == pytest.approx(0.0, abs=1e-15)


def test_plugin_at_zero_function():
    d = toy_dataset()
    b = indicator(2)
    T = SieveOperator(np.eye(2), b, b)
    assert projected_risk_plugin(FunctionHandle(b, [0, 0]), d, T) == pytest.approx(np.mean(d.g0() ** 2))


def test_plugin_hand_enumeration():
    d = toy_dataset()
    b = indicator(2)  # elements sqrt(2) * 1{x = k}
    T = SieveOperator([[1.0, 0.0], [0.5, 0.5]], b, b)
    h = FunctionHandle(b, [1.0, 2.0])
    # T h coefficients (1, 1.5); evaluated: z=0 -> sqrt2, z=1 -> 1.5 sqrt2
    s2 = np.sqrt(2)
    th = [s2, s2, 1.5 * s2, 1.5 * s2]
    want = sum((t - g) ** 2 for t, g in zip(th, [1.0, 2.0, -1.0, 0.5])) / 4
    assert projected_risk_plugin(h, d, T) == pytest.approx(want, abs=1e-14)


# ---------------------------------------------------------------- debiased risk


def test_debiased_equals_population_risk_at_exact_nuisances():
    pop, T, r = proximal_h_population()
    rng = np.random.default_rng(0)
    for _ in range(10):
        h = FunctionHandle(T.input_basis, rng.standard_normal(T.input_basis.dimension))
        psi = projected_risk_plugin(h, pop, T)
        assert debiased_risk(h, pop, T, r) == pytest.approx(psi, abs=1e-12)


def test_debiased_correction_vanishes_when_targets_match():
    d = toy_dataset()
    b = indicator(2)
    T = SieveOperator([[1.0, 0.2], [0.4, 0.9]], b, b)
    h = FunctionHandle(b, [0.3, -0.6])
    th = b.design(d.vq()) @ (T.matrix @ h.coeffs)
    hv = h(d.vh())
    r = FunctionHandle(b, [0.1, -0.4])
    d2 = d.with_columns({"g1": th / hv, "g0": b.design(d.vq()) @ r.coeffs})
    assert debiased_risk(h, d2, T, r) == pytest.approx(projected_risk_plugin(h, d2, T), abs=1e-14)


def test_exact_operator_removes_any_r_error():
    pop, T, r = proximal_h_population()
    rng = np.random.default_rng(1)
    h = FunctionHandle(T.input_basis, rng.standard_normal(T.input_basis.dimension))
    psi = projected_risk_plugin(h, pop, T)
    for _ in range(5):
        r_bad = FunctionHandle(r.basis, r.coeffs + rng.standard_normal(r.basis.dimension))
        assert abs(psi - debiased_risk(h, pop, T, r_bad)) <= 1e-10


# ---------------------------------------------------------------- influence function


def test_influence_mean_zero_at_truth():
    pop, T, r = proximal_h_population()
    rng = np.random.default_rng(2)
    nf = NuisanceFit(T, r)
    for _ in range(20):
        h = FunctionHandle(T.input_basis, rng.standard_normal(T.input_basis.dimension))
        psi = projected_risk_plugin(h, pop, T)
        assert abs(pop.mean(influence_values(pop, h, nf, psi))) < 1e-10


def test_influence_point_mass():
    assert influence_value(1.0, 2.0, 1.5, 1.5, 0.25) == pytest.approx(0.0)


def test_influence_three_row_toy():
    g0 = np.array([1.0, 0.0, 2.0])
    g1h = np.array([0.5, 1.0, 1.5])
    th = np.array([1.0, 1.0, 1.0])
    r = np.array([0.5, 0.5, 0.5])
    psi = 0.7
    want = [(1 - 1) ** 2 + 2 * 0.5 * (0.5 - 1) - 0.7,
            (1 - 0) ** 2 + 2 * 0.5 * (1.0 - 1) - 0.7,
            (1 - 2) ** 2 + 2 * 0.5 * (1.5 - 1) - 0.7]
    np.testing.assert_allclose(influence_value(g0, g1h, th, r, psi), want, atol=1e-15)


# ---------------------------------------------------------------- fitting


def fitted_setup(n=2000, seed=0, J=5):
    dgp = make_series_dgp(m=6, noise_sd=0.3)
    d = sample_npiv(dgp, n, seed)
    plan = split(n, (0.5, 0.5), seed)
    return d.take(plan[0]), fit_nuisances(d.take(plan[1]), cosine(J), cosine(J))


def test_objective_is_exact_quadratic():
    est, nf = fitted_setup()
    res = fit(est, nf, FitConfig(0.05, 2))
    obj = build_objective(est, nf)
    h = res.h_hat
    assert obj.risk(h.coeffs) == pytest.approx(debiased_risk(h, est, nf.t_hat, nf.r_hat), abs=1e-10)
    anchor = res.trajectory[-2]
    d = h.coeffs - anchor
    pen = est.mean((cosine(5).design(est.vh()) @ d) ** 2)
    assert res.objective_value == pytest.approx(debiased_risk(h, est, nf.t_hat, nf.r_hat) + 0.05 * pen, abs=1e-10)
    base = build_objective(est, nf, "baseline")
    assert base.risk(h.coeffs) == pytest.approx(projected_risk_plugin(h, est, nf.t_hat), abs=1e-10)


@pytest.mark.parametrize("method", ["baseline", "debiased"])
def test_argmin_property(method):
    est, nf = fitted_setup(seed=3)
    res = fit(est, nf, FitConfig(0.05, 3, method=method))
    obj = build_objective(est, nf, method)
    anchor = res.trajectory[-2]
    best = obj.penalized(res.h_hat.coeffs, anchor, 0.05)
    rng = np.random.default_rng(5)
    for _ in range(100):
        c = res.h_hat.coeffs + rng.normal(scale=10 ** rng.uniform(-4, 0), size=5)
        assert obj.penalized(c, anchor, 0.05) >= best - 1e-9


def test_baseline_matches_stacked_least_squares():
    est, nf = fitted_setup(seed=4)
    Phi = cosine(5).design(est.vh())
    P = cosine(5).design(est.vq()) @ nf.t_hat.matrix
    # E_n[(P c - g0)^2] + lam E_n[(Phi (c - c_prev))^2] with Phi = Q R on the sample
    n = est.n
    Q, R = np.linalg.qr(Phi / np.sqrt(n))
    A = (P / np.sqrt(n)) @ np.linalg.inv(R)
    b = est.g0() / np.sqrt(n)
    u = tikhonov_stacked(A, b, 0.1, 2)
    res = fit(est, nf, FitConfig(0.1, 2, method="baseline"))
    np.testing.assert_allclose(res.h_hat.coeffs, np.linalg.solve(R, u), atol=1e-8)


@pytest.mark.parametrize("t", [1, 2, 3])
def test_population_fit_matches_filter_factors(t):
    dgp = make_series_dgp(m=6, noise_sd=0.3)
    pop = npiv_population(dgp)
    b = dgp.basis
    nf = NuisanceFit(true_sieve_operator_npiv(dgp, b, b), true_r_npiv(dgp, b))
    sys = true_operator_npiv(dgp)
    for lam in (1e-3, 0.02, 0.3):
        got = fit(pop, nf, FitConfig(lam, t)).h_hat.coeffs
        want = population_tikhonov_iterate(sys, dgp.h0, lam, t).coeffs
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_small_lambda_noiseless_approaches_picard():
    dgp = make_series_dgp(m=3, scale=0.3, rate=1.0, noise_sd=0.0, endogeneity=0.0)
    b = dgp.basis
    d = sample_npiv(dgp, 100_000, 1)
    nf = NuisanceFit(true_sieve_operator_npiv(dgp, b, b), true_r_npiv(dgp, b))
    h = fit(d, nf, FitConfig(1e-6, 2)).h_hat
    sys = true_operator_npiv(dgp)
    target = picard_solve(sys, true_r_npiv(dgp, b))
    assert np.linalg.norm(h.coeffs - target.coeffs) < 0.02


def test_huge_lambda_stays_at_zero():
    est, nf = fitted_setup()
    assert fit(est, nf, FitConfig(1e10, 2)).h_hat.norm() < 1e-6


def test_nonconvex_objective_is_refused():
    b = cosine(2)
    obj = QuadraticObjective(-np.eye(2), np.zeros(2), 0.0, np.eye(2), b, "debiased")
    with pytest.raises(NonConvexError) as exc:
        fit_objective(obj, FitConfig(0.5))
    assert exc.value.min_eig == pytest.approx(-0.5)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(0.0)
    with pytest.raises(ValueError):
        FitConfig(0.1, 0)
    with pytest.raises(ValueError):
        FitConfig(0.1, method="ridge")


def test_fit_deterministic_and_serializable():
    est, nf = fitted_setup()
    a, b = fit(est, nf, FitConfig(0.1)), fit(est, nf, FitConfig(0.1))
    assert a.to_dict() == b.to_dict()
    assert len(a.to_dict()["trajectory"]) == 2
