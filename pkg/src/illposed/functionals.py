"""Linear functionals of two ill-posed nuisances, and the proximal adapter.

The target has the form

    psi0 = E[s1(V) q0(V_q) h0(V_h) + s2(V) q0(V_q) + s3(V) h0(V_h) + s4(V)]

where h0 solves E[s1 h + s2 | V_q] = 0 and q0 solves E[s1 q + s3 | V_h] = 0.
Both nuisances are fit with the debiased cross-validated pipeline from
:mod:`illposed.selection`, and psi is estimated by the sample mean of the
integrand on held-out rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from typing import Callable, Optional

import numpy as np

from .core import BasisSpec, FunctionHandle, indicator, tensor
from .dgp import Dataset, Roles
from .errors import ConfigError, NumericalError
from .selection import CvConfig, fit_cv_pipeline, split

Evaluator = Callable[[Dataset], np.ndarray]


@dataclass(frozen=True, eq=False)
class MomentFunctional:
    """Evaluators s1..s4 (Dataset -> per-row values) and the V_h / V_q columns."""

    s1: Evaluator
    s2: Evaluator
    s3: Evaluator
    s4: Evaluator
    v_h: tuple
    v_q: tuple
    name: str = "functional"

    def evaluate(self, data: Dataset) -> tuple:
        out = []
        for s in (self.s1, self.s2, self.s3, self.s4):
            v = np.broadcast_to(np.asarray(s(data), dtype=float), (data.n,))
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{self.name}: evaluator returned non-finite values")
            out.append(np.array(v))
        return tuple(out)

    def integrand(self, data: Dataset, h: FunctionHandle, q: FunctionHandle) -> np.ndarray:
        """s1 q h + s2 q + s3 h + s4 at every row."""
        s1, s2, s3, s4 = self.evaluate(data)
        hv = h(data.points(self.v_h))
        qv = q(data.points(self.v_q))
        return s1 * qv * hv + s2 * qv + s3 * hv + s4


@dataclass(frozen=True, eq=False)
class Equation:
    """One restriction E[g1 f - g0 | conditioning] = 0 derived from a functional."""

    name: str
    g0: Evaluator
    g1: Evaluator
    roles: Roles


def h_equation(functional: MomentFunctional) -> Equation:
    """g1 = s1, g0 = -s2, conditioning on V_q."""
    return Equation(
        "h",
        lambda d: -np.asarray(functional.s2(d), dtype=float),
        functional.s1,
        Roles(functional.v_h, functional.v_q, "g0_h", "g1_h"),
    )


def q_equation(functional: MomentFunctional) -> Equation:
    """g1 = s1, g0 = -s3, conditioning on V_h (roles swapped)."""
    return Equation(
        "q",
        lambda d: -np.asarray(functional.s3(d), dtype=float),
        functional.s1,
        Roles(functional.v_q, functional.v_h, "g0_q", "g1_q"),
    )


def bind(data: Dataset, eq: Equation) -> Dataset:
    """Attach the equation's g0/g1 columns and role map to ``data``."""
    d = data.with_columns({eq.roles.g0: eq.g0(data), eq.roles.g1: eq.g1(data)})
    return d.with_roles(eq.roles)


def proximal_functional(a: int = 1) -> MomentFunctional:
    """Counterfactual mean E[Y^(a)]: s1 = -I(A=a), s2 = I(A=a) Y, s3 = 1, s4 = 0."""
    if a not in (0, 1):
        raise ValueError("treatment level must be 0 or 1")

    def treated(d: Dataset) -> np.ndarray:
        return (d.column("A") == a).astype(float)

    return MomentFunctional(
        s1=lambda d: -treated(d),
        s2=lambda d: treated(d) * d.column("Y"),
        s3=lambda d: np.ones(d.n),
        s4=lambda d: np.zeros(d.n),
        v_h=("W",),
        v_q=("Z", "A"),
        name=f"proximal(a={a})",
    )


def npiv_functional(weight: Optional[Evaluator] = None) -> MomentFunctional:
    """NPIV member: s1 = 1, s2 = -Y, so the h-equation is E[h(W) - Y | Z] = 0.

    ``weight`` is s3 (defaults to 1, i.e. the target E[h0(W)]).
    """
    s3 = weight or (lambda d: np.ones(d.n))
    return MomentFunctional(
        s1=lambda d: np.ones(d.n),
        s2=lambda d: -d.column("Y"),
        s3=s3,
        s4=lambda d: np.zeros(d.n),
        v_h=("W",),
        v_q=("Z",),
        name="npiv",
    )


@dataclass(frozen=True)
class FunctionalEstimate:
    psi_hat: float
    standard_error: float
    ci95: tuple
    n: int

    def __post_init__(self):
        if not self.standard_error >= 0:
            raise ValueError("standard error must be nonnegative")

    def to_dict(self) -> dict:
        return {"psi_hat": self.psi_hat, "se": self.standard_error,
                "ci95": list(self.ci95), "n": self.n}


def _estimate(values: np.ndarray, weights: Optional[np.ndarray] = None) -> FunctionalEstimate:
    n = values.size
    if weights is None:
        psi = float(values.mean())
        sd = float(values.std(ddof=1)) if n > 1 else 0.0
    else:
        psi = float(weights @ values)
        sd = float(np.sqrt(weights @ (values - psi) ** 2))
    se = sd / np.sqrt(n)
    return FunctionalEstimate(psi, se, (psi - 1.96 * se, psi + 1.96 * se), n)


def if_estimate(data: Dataset, h_hat: FunctionHandle, q_hat: FunctionHandle,
                functional: MomentFunctional) -> FunctionalEstimate:
    """Sample mean of the integrand, with SE = sd / sqrt(n).

    Weighted (population) datasets use weighted moments; their SE is
    not a sampling error and is reported only for completeness.
    """
    vals = functional.integrand(data, h_hat, q_hat)
    return _estimate(vals, data.weights)


def mixed_bias(population: Dataset, h_hat: FunctionHandle, q_hat: FunctionHandle,
               h0: FunctionHandle, q0: FunctionHandle, functional: MomentFunctional,
               psi0: Optional[float] = None, tol: float = 1e-9) -> float:
    """E[psi-hat] - psi0, computed twice and cross-checked.

    The left side averages the integrand at (h_hat, q_hat) over the
    population dataset and subtracts ``psi0`` (the integrand mean at the
    truth when not given). The right side is E[s1 (q_hat - q0)(h_hat - h0)].
    """
    left = population.mean(functional.integrand(population, h_hat, q_hat))
    if psi0 is None:
        psi0 = population.mean(functional.integrand(population, h0, q0))
    left -= psi0
    s1 = functional.evaluate(population)[0]
    dh = (h_hat - h0)(population.points(functional.v_h))
    dq = (q_hat - q0)(population.points(functional.v_q))
    right = population.mean(s1 * dq * dh)
    if abs(left - right) > tol * max(1.0, abs(left), abs(right)):
        raise NumericalError(f"mixed-bias identity failed: {left!r} vs {right!r}")
    return float(right)


# --------------------------------------------------------------------------
# Rate requirement
# --------------------------------------------------------------------------

REGIMES = ("corollary2", "corollary3", "no-debias")


def as_fraction(x, max_denominator: int = 64) -> Fraction:
    """Exact rationals pass through; floats snap to the nearest p/q, q <= max_denominator."""
    if isinstance(x, Rational):
        return Fraction(x)
    if isinstance(x, str):
        f = Fraction(x)
        return f if "." not in x and "e" not in x.lower() else f.limit_denominator(max_denominator)
    return Fraction(float(x)).limit_denominator(max_denominator)


@dataclass(frozen=True)
class RateRequirement:
    """rho_n = o(n^{-exponent}) suffices; ``branches`` are the two exponents of the min."""

    exponent: Fraction
    branches: tuple
    feasible: bool
    regime: str
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "exponent": str(self.exponent),
            "exponent_decimal": float(self.exponent),
            "branches": [str(b) for b in self.branches],
            "feasible": self.feasible,
            "regime": self.regime,
            "message": self.message,
        }


def _error_exponent(beta: Fraction) -> Fraction:
    """Exponent a with nuisance errors of order rho^a in the equal-rate regime."""
    return Fraction(min(4, beta + 1)) / min(5, beta + 2)


def rate_requirement(beta_h, beta_q, alpha_h, alpha_q, regime: str = "corollary2") -> RateRequirement:
    """Exponent e such that rho_n = o(n^{-e}) makes the product condition hold.

    Nuisance errors (operator, regression and critical radius) are tied to
    a common rho_n with ||T - T_hat|| of order rho^{a}, a =
    min{4, beta+1} / min{5, beta+2}, separately for each nuisance. All
    arithmetic is exact.
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    bh, bq, ah, aq = (as_fraction(v) for v in (beta_h, beta_q, alpha_h, alpha_q))
    if min(bh, bq, ah, aq) <= 0:
        raise ValueError("beta and alpha must be positive")

    def delta_exp(beta: Fraction, debias: bool) -> Fraction:
        a = _error_exponent(beta)
        # Delta = max{||T-T_hat||^4 (or ^2 without debiasing), ||T-T_hat||^2 ||r-r_hat||^2, delta^2}
        return min((4 if debias else 2) * a, Fraction(2))

    def theta_exp(beta: Fraction, debias: bool) -> Fraction:
        a = _error_exponent(beta)
        op_term = 2 * a if debias else a
        return min(op_term, 2 * a, delta_exp(beta, debias) * a)

    if regime == "corollary2":
        def branch(b_src, b_proj):
            d_src, d_proj = delta_exp(b_src, True), delta_exp(b_proj, True)
            return (d_src * Fraction(min(3, b_src)) / (2 * min(5, b_src + 2))
                    + d_proj * Fraction(min(4, b_proj + 1)) / (2 * min(5, b_proj + 2)))
        branches = (branch(bq, bh), branch(bh, bq))
    else:
        debias = regime == "corollary3"
        th_h, th_q = theta_exp(bh, debias), theta_exp(bq, debias)
        branches = (th_q / (2 + 2 * aq) + th_h / 2, th_h / (2 + 2 * ah) + th_q / 2)
    exps = tuple(1 / (2 * b) for b in branches)
    e = min(exps)
    feasible = e < Fraction(1, 2)
    msg = "" if feasible else "exceeds parametric rate: infeasible"
    return RateRequirement(e, exps, feasible, regime, msg)


# --------------------------------------------------------------------------
# Cross-fitted pipeline
# --------------------------------------------------------------------------


def infer_proximal_bases(data: Dataset, n_z: Optional[int] = None, n_w: Optional[int] = None) -> tuple:
    """Indicator bases for W and (Z, A) weighted by observed category frequencies."""
    def freq(col, k):
        x = data.column(col).astype(int)
        k = int(x.max()) + 1 if k is None else k
        f = np.bincount(x, minlength=k).astype(float)
        if np.any(f == 0):
            raise ConfigError(f"column {col!r} has an unobserved category")
        return f / f.sum()

    return indicator(n_w or int(data.column("W").max()) + 1, freq("W", n_w)), tensor(
        indicator(n_z or int(data.column("Z").max()) + 1, freq("Z", n_z)), indicator(2, freq("A", 2))
    )


@dataclass(frozen=True, eq=False)
class FunctionalConfig:
    functional: MomentFunctional
    basis_h: BasisSpec
    basis_q: BasisSpec
    folds: int = 2
    seed: int = 0
    lambdas: Optional[tuple] = None
    delta_proxy: Optional[float] = None
    grid_size: Optional[int] = 64
    iterations: int = 2
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("cross-fitting needs at least 2 folds")


def full_pipeline_functional(data: Dataset, config: FunctionalConfig) -> tuple:
    """Cross-fitted, doubly debiased estimate of the functional.

    For each fold the bridges are fit (debiased CV pipeline) on the other
    rows and the integrand is averaged on the fold. Fold estimates are
    averaged with fold-size weights; fold variances are pooled.
    Returns ``(FunctionalEstimate, report)``.
    """
    f = config.functional
    plan = split(data.n, (1.0 / config.folds,) * config.folds, config.seed)
    per_fold, lam_h, lam_q = [], [], []
    psi_sum, var_sum = 0.0, 0.0
    for k in range(config.folds):
        held = data.take(plan[k])
        train = data.take(np.concatenate([plan[j] for j in range(config.folds) if j != k]))
        sub_seed = [config.seed, k]
        cv = dict(lambdas=config.lambdas, delta_proxy=config.delta_proxy,
                  grid_size=config.grid_size, iterations=config.iterations)
        seed_h, seed_q = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(sub_seed).spawn(2))
        h_hat, rep_h = fit_cv_pipeline(bind(train, h_equation(f)),
                                       CvConfig(config.basis_h, config.basis_q, seed=seed_h, **cv))
        q_hat, rep_q = fit_cv_pipeline(bind(train, q_equation(f)),
                                       CvConfig(config.basis_q, config.basis_h, seed=seed_q, **cv))
        est = if_estimate(held, h_hat, q_hat, f)
        per_fold.append({
            **est.to_dict(),
            "lambda_h": rep_h["selected_lambda"],
            "lambda_q": rep_q["selected_lambda"],
            "h_coeffs": [float(v) for v in h_hat.coeffs],
            "q_coeffs": [float(v) for v in q_hat.coeffs],
        })
        lam_h.append(rep_h["selected_lambda"])
        lam_q.append(rep_q["selected_lambda"])
        psi_sum += est.n * est.psi_hat
        var_sum += est.n * (est.standard_error ** 2 * est.n)
    n = data.n
    psi = psi_sum / n
    se = float(np.sqrt(var_sum) / n)
    estimate = FunctionalEstimate(float(psi), se, (psi - 1.96 * se, psi + 1.96 * se), n)
    report = {
        "psi_hat": estimate.psi_hat,
        "se": estimate.standard_error,
        "ci95": list(estimate.ci95),
        "n": n,
        "per_fold": per_fold,
        "lambda_h": lam_h,
        "lambda_q": lam_q,
        "seed": config.seed,
    }
    return estimate, report
