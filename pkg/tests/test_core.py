import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from illposed.core import (
    BasisSpec,
    FunctionHandle,
    SieveOperator,
    SingularSystem,
    adjoint_apply,
    apply,
    cosine,
    critical_radius,
    filter_factors,
    gram,
    indicator,
    legendre,
    local_rademacher,
    operator_norm_diff,
    parse_basis,
    picard_solve,
    population_tikhonov_iterate,
    source_condition_norm,
    tensor,
    zero,
)
from illposed.errors import (
    BasisMismatchError,
    DegenerateDesignError,
    DomainError,
    SourceConditionError,
)

from oracles import (
    legendre_value,
    power_iteration_norm,
    rademacher_abs_mean,
    scalar_tikhonov_bruteforce,
    tikhonov_stacked,
)

finite = st.floats(-5, 5, allow_nan=False)


def vec(n):
    return hnp.arrays(float, n, elements=finite)


# ---------------------------------------------------------------- bases


def test_cosine_constant_element():
    h = FunctionHandle(cosine(3), [1, 0, 0])
    assert h([0.37])[0] == 1.0


def test_cosine_second_element_at_zero():
    h = FunctionHandle(cosine(3), [0, 1, 0])
    assert h([0.0])[0] == pytest.approx(math.sqrt(2), abs=1e-15)


def test_legendre_matches_gram_schmidt():
    h = FunctionHandle(legendre(3), [0, 0, 1])
    assert h([0.5])[0] == pytest.approx(legendre_value(2, 0.5), abs=1e-12)
    xs = np.linspace(0, 1, 11)
    for k in range(5):
        c = np.zeros(5)
        c[k] = 1.0
        got = FunctionHandle(legendre(5), c)(xs)
        want = [legendre_value(k, x) for x in xs]
        np.testing.assert_allclose(got, want, atol=1e-10)


@pytest.mark.parametrize("basis", [cosine(6), legendre(6)])
def test_interval_bases_orthonormal_by_quadrature(basis):
    x, w = np.polynomial.legendre.leggauss(64)
    x, w = 0.5 * (x + 1), 0.5 * w
    np.testing.assert_allclose(gram(basis, x, w), np.eye(6), atol=1e-12)


def test_indicator_and_tensor_orthonormal_under_declared_weights():
    a = indicator(3, [0.2, 0.3, 0.5])
    b = indicator(2, [0.6, 0.4])
    pts = np.array([(i, j) for i in range(3) for j in range(2)], dtype=float)
    wts = np.array([a.weights[i] * b.weights[j] for i in range(3) for j in range(2)])
    np.testing.assert_allclose(gram(tensor(a, b), pts, wts), np.eye(6), atol=1e-12)


def test_domain_errors():
    with pytest.raises(DomainError):
        cosine(3).design([1.5])
    with pytest.raises(DomainError):
        indicator(3).design([0.5])
    with pytest.raises(DomainError):
        indicator(3).design([3])
    with pytest.raises(DomainError):
        cosine(3).design([np.nan])


def test_parse_basis_and_roundtrip():
    b = parse_basis("indicator:4*indicator:2")
    assert b.dimension == 8 and b.n_inputs == 2
    assert BasisSpec.from_dict(b.to_dict()) == b
    assert BasisSpec.from_dict(legendre(4).to_dict()) == legendre(4)
    with pytest.raises(ValueError):
        parse_basis("spline:3")
    with pytest.raises(ValueError):
        parse_basis("cosine")


def test_basis_mismatch_on_arithmetic():
    with pytest.raises(BasisMismatchError):
        zero(cosine(3)) + zero(legendre(3))


# ---------------------------------------------------------------- gram


def test_gram_single_point():
    np.testing.assert_allclose(gram(cosine(2), [0.0]), [[1, math.sqrt(2)], [math.sqrt(2), 2]], atol=1e-15)


def test_gram_monte_carlo_identity():
    x = np.random.default_rng(0).random(100_000)
    assert np.abs(gram(cosine(4), x) - np.eye(4)).max() < 0.02


@given(hnp.arrays(float, st.integers(1, 30), elements=st.floats(0, 1)))
def test_gram_psd(x):
    assert np.linalg.eigvalsh(gram(legendre(4), x)).min() >= -1e-10


# ---------------------------------------------------------------- operators


def test_apply_singular_system():
    sys = SingularSystem([1, 0.5], cosine(2), cosine(2))
    assert list(apply(sys, FunctionHandle(cosine(2), [2, 2])).coeffs) == [2, 1]
    assert list(adjoint_apply(sys, FunctionHandle(cosine(2), [1, 1])).coeffs) == [1, 0.5]


def test_apply_identity_and_random_matrix():
    b = cosine(3)
    h = FunctionHandle(b, [0.1, -2, 3])
    assert np.array_equal(apply(SieveOperator(np.eye(3), b, b), h).coeffs, h.coeffs)
    A = np.random.default_rng(3).standard_normal((3, 2))
    op = SieveOperator(A, cosine(2), b)
    want = [sum(A[i, j] for j in range(2)) for i in range(3)]
    np.testing.assert_allclose(apply(op, FunctionHandle(cosine(2), [1, 1])).coeffs, want, atol=1e-14)
    d = [0.5, -1.0, 2.0]
    want_adj = [sum(A[i, j] * d[i] for i in range(3)) for j in range(2)]
    np.testing.assert_allclose(adjoint_apply(op, FunctionHandle(b, d)).coeffs, want_adj, atol=1e-14)


def test_apply_basis_mismatch():
    op = SieveOperator(np.eye(3), cosine(3), cosine(3))
    with pytest.raises(BasisMismatchError):
        apply(op, zero(legendre(3)))
    with pytest.raises(BasisMismatchError):
        adjoint_apply(op, zero(cosine(2)))


@given(vec(4), vec(3), hnp.arrays(float, (3, 4), elements=finite))
def test_adjoint_identity(c, d, A):
    op = SieveOperator(A, legendre(4), cosine(3))
    h, g = FunctionHandle(legendre(4), c), FunctionHandle(cosine(3), d)
    lhs, rhs = apply(op, h).inner(g), h.inner(adjoint_apply(op, g))
    assert abs(lhs - rhs) <= 1e-10 * (1 + abs(lhs))


# ---------------------------------------------------------------- Picard


def test_picard_examples():
    b = cosine(3)
    sys = SingularSystem([1, 0.5, 0.25], b, b)
    assert not picard_solve(sys, zero(b)).coeffs.any()
    h = picard_solve(sys, FunctionHandle(b, [0.5, 0.25, 0.0625]), 3)
    np.testing.assert_allclose(h.coeffs, [0.5, 0.5, 0.25], atol=1e-15)
    with pytest.raises(ValueError):
        picard_solve(sys, zero(b), 4)


@given(vec(6), st.lists(st.floats(0.01, 1.0), min_size=6, max_size=6))
def test_picard_left_inverse(c, s):
    s = sorted(s, reverse=True)
    b = legendre(6)
    sys = SingularSystem(s, b, b)
    h = FunctionHandle(b, c)
    back = picard_solve(sys, apply(sys, h))
    assert np.linalg.norm(back.coeffs - c) <= 1e-10 * (1 + np.linalg.norm(c))


# ---------------------------------------------------------------- source condition


def test_source_condition_norm_examples():
    b = cosine(3)
    sys = SingularSystem([1, 0.5, 0.25], b, b)
    h = FunctionHandle(b, [0.6, 0.2, 0.0])
    assert source_condition_norm(sys, h, 2) == pytest.approx(1.0, abs=1e-14)
    assert source_condition_norm(sys, zero(b), 2) == 0.0
    g = FunctionHandle(b, [3.0, -4.0, 0.0])
    assert source_condition_norm(sys, g, 0) == 5.0


def test_source_condition_violations():
    b = cosine(3)
    sys = SingularSystem([1, 0.5], b, b)
    with pytest.raises(SourceConditionError) as exc:
        source_condition_norm(sys, FunctionHandle(b, [1, 1, 1]), 1)
    assert exc.value.component == 2
    tiny = SingularSystem([1, 1e-200], cosine(2), cosine(2))
    with pytest.raises(SourceConditionError):
        source_condition_norm(tiny, FunctionHandle(cosine(2), [1, 1]), 4)


# ---------------------------------------------------------------- Tikhonov filter


def test_filter_factor_scalar_example():
    sys = SingularSystem([1.0], cosine(1), cosine(1))
    h = population_tikhonov_iterate(sys, FunctionHandle(cosine(1), [1.0]), 1.0, 2)
    assert h.coeffs[0] == pytest.approx(0.75, abs=1e-15)
    assert scalar_tikhonov_bruteforce(1.0, 1.0, 1.0, 2) == pytest.approx(0.75, abs=1e-8)


@pytest.mark.parametrize("t", [1, 2, 3])
def test_filter_factors_match_bruteforce_minimization(t):
    s = np.array([1.0, 0.6, 0.2, 0.05])
    h0 = np.array([0.3, -1.0, 0.7, 2.0])
    b = cosine(4)
    sys = SingularSystem(s, b, b)
    for lam in (1e-3, 0.05, 0.7):
        got = population_tikhonov_iterate(sys, FunctionHandle(b, h0), lam, t).coeffs
        want = [scalar_tikhonov_bruteforce(si, hi, lam, t) for si, hi in zip(s, h0)]
        np.testing.assert_allclose(got, want, atol=1e-6)
        stacked = tikhonov_stacked(np.diag(s), s * h0, lam, t)
        np.testing.assert_allclose(got, stacked, atol=1e-10)


def test_filter_small_lambda_limit():
    assert np.allclose(filter_factors([1, 0.5, 0.1], 1e-14, 2), 1.0)


def test_tikhonov_rejects_bad_inputs():
    sys = SingularSystem([1.0], cosine(1), cosine(1))
    with pytest.raises(ValueError):
        population_tikhonov_iterate(sys, zero(cosine(1)), 0.0, 1)
    with pytest.raises(ValueError):
        population_tikhonov_iterate(sys, zero(cosine(1)), 0.1, 0)


# ---------------------------------------------------------------- operator norm


def test_operator_norm_diff_examples():
    b = cosine(2)
    a = SieveOperator(np.diag([1.3, 0.6]), b, b)
    c = SieveOperator(np.diag([1.0, 0.5]), b, b)
    assert operator_norm_diff(a, a) == 0.0
    assert operator_norm_diff(a, c) == pytest.approx(0.3, abs=1e-14)
    assert operator_norm_diff(a, c, np.eye(2), np.eye(2)) == pytest.approx(0.3, abs=1e-14)


def test_operator_norm_power_iteration_oracle():
    rng = np.random.default_rng(11)
    b = cosine(4)
    A, B = rng.standard_normal((2, 4, 4))
    got = operator_norm_diff(SieveOperator(A, b, b), SieveOperator(B, b, b))
    assert got == pytest.approx(power_iteration_norm(A - B), abs=1e-8)


def test_operator_norm_singular_gram():
    b = cosine(2)
    a = SieveOperator(np.eye(2), b, b)
    with pytest.raises(DegenerateDesignError):
        operator_norm_diff(a, SieveOperator(np.zeros((2, 2)), b, b), input_gram=np.zeros((2, 2)))


# ---------------------------------------------------------------- Rademacher


def test_rademacher_zero_and_linear():
    x = np.linspace(0, 1, 50)
    assert local_rademacher(cosine(3), x, 0.0, 100, 0) == 0.0
    r1 = local_rademacher(cosine(3), x, 0.3, 500, 4)
    r2 = local_rademacher(cosine(3), x, 0.6, 500, 4)
    assert r2 == 2 * r1
    assert critical_radius(cosine(3), x, 500, 4) == pytest.approx(r1 / 0.3, rel=1e-15)


def test_rademacher_constant_basis_matches_binomial_oracle():
    n, draws = 25, 200_000
    x = np.linspace(0, 1, n)
    got = local_rademacher(cosine(1), x, 1.0, draws, 9)
    want = rademacher_abs_mean(n)
    # per-draw |mean| has sd below 1/sqrt(n)
    assert abs(got - want) <= 3 / math.sqrt(n * draws)
    assert want == pytest.approx(math.sqrt(2 / (math.pi * n)), rel=0.05)


def test_critical_radius_monotone_in_dimension():
    x = np.random.default_rng(2).random(400)
    k = [critical_radius(cosine(J), x, 2000, 5) for J in (2, 4, 8)]
    assert k[0] <= k[1] <= k[2]


def test_critical_radius_scales_as_inverse_root_n():
    rng = np.random.default_rng(3)
    k1 = critical_radius(cosine(4), rng.random(2000), 2000, 1)
    k4 = critical_radius(cosine(4), rng.random(8000), 2000, 1)
    assert k4 / k1 == pytest.approx(0.5, rel=0.2)


def test_rademacher_degenerate_design():
    with pytest.raises(DegenerateDesignError):
        critical_radius(cosine(3), np.zeros(10), 10, 0)


# ---------------------------------------------------------------- Picard speed (criterion 1 proxy)


def test_picard_inversion_fast_and_exact():
    b = cosine(20)
    sys = SingularSystem(2.0 ** -np.arange(1, 21), b, b)
    h0 = FunctionHandle(b, np.random.default_rng(0).standard_normal(20))
    r = apply(sys, h0)
    t0 = time.perf_counter()
    h = picard_solve(sys, r)
    dt = time.perf_counter() - t0
    assert np.linalg.norm(h.coeffs - h0.coeffs) / np.linalg.norm(h0.coeffs) <= 1e-10
    assert dt < 1e-3
