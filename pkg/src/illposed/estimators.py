"""Baseline and debiased iterated-Tikhonov estimators over a linear sieve.

With sieve nuisances both empirical risks are exact quadratics in the
coefficient vector c of h:

    risk(c) = c^T H c + l^T c + const

so every Tikhonov step is one linear solve. For the debiased risk H is
``P^T M + M^T P - P^T P`` (row-weighted), where ``P = Psi A`` evaluates
``T-hat phi_j`` at the V_q rows and ``M = g1 * Phi``. H can be indefinite in
finite samples; :func:`fit` refuses to proceed rather than convexify.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import FunctionHandle, SieveOperator
from .dgp import Dataset
from .errors import BasisMismatchError, NonConvexError, NumericalError
from .nuisance import NuisanceFit

METHODS = ("baseline", "debiased")


@dataclass(frozen=True)
class FitConfig:
    lam: float
    iterations: int = 2
    initial: Optional[FunctionHandle] = None
    hessian_floor: float = 0.0
    method: str = "debiased"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.hessian_floor < 0:
            raise ValueError("hessian_floor must be nonnegative")


@dataclass(frozen=True, eq=False)
class FitResult:
    h_hat: FunctionHandle
    objective_value: float
    hessian_min_eig: float
    trajectory: tuple = field(repr=False)
    lam: float = 0.0
    method: str = "debiased"
    gradient_norm: float = 0.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lambda": self.lam,
            "iterations": len(self.trajectory),
            "coeffs": [float(v) for v in self.h_hat.coeffs],
            "basis": self.h_hat.basis.to_dict(),
            "objective_value": self.objective_value,
            "hessian_min_eig": self.hessian_min_eig,
            "gradient_norm": self.gradient_norm,
            "trajectory": [[float(v) for v in c] for c in self.trajectory],
        }


def _check(h: FunctionHandle, t_hat: SieveOperator):
    if h.basis != t_hat.input_basis:
        raise BasisMismatchError("h must live on the operator's input basis")


def projected_risk_plugin(h: FunctionHandle, data: Dataset, t_hat: SieveOperator) -> float:
    """E_n[{(T-hat h)(V_q) - g0}^2]."""
    _check(h, t_hat)
    th = t_hat.output_basis.design(data.vq()) @ (t_hat.matrix @ h.coeffs)
    return data.mean((th - data.g0()) ** 2)


def debiased_risk(h: FunctionHandle, data: Dataset, t_hat: SieveOperator, r_hat: FunctionHandle) -> float:
    """E_n[(T-hat h - g0)^2 + 2 (T-hat h - r-hat)(g1 h - T-hat h)].

    Not clamped: the value may be negative in finite samples.
    """
    _check(h, t_hat)
    Psi = t_hat.output_basis.design(data.vq())
    th = Psi @ (t_hat.matrix @ h.coeffs)
    r = Psi @ r_hat.coeffs
    g1h = data.g1() * h(data.vh())
    g0 = data.g0()
    return data.mean((th - g0) ** 2 + 2.0 * (th - r) * (g1h - th))


def influence_value(g0, g1h, th, r, psi_h):
    """Influence function of the projected risk at one or more rows.

    ``th`` and ``r`` are E[g1 h | V_q] and E[g0 | V_q] at the rows (true or
    estimated), ``g1h`` is g1(V) h(V_h) and ``psi_h`` the risk value.
    """
    g0, g1h, th, r = (np.asarray(v, dtype=float) for v in (g0, g1h, th, r))
    return (th - g0) ** 2 + 2.0 * (th - r) * (g1h - th) - psi_h


def influence_values(data: Dataset, h: FunctionHandle, nuisances: NuisanceFit, psi_h: float) -> np.ndarray:
    """Vectorized :func:`influence_value` with conditional means from ``nuisances``."""
    _check(h, nuisances.t_hat)
    Psi = nuisances.basis_q.design(data.vq())
    th = Psi @ (nuisances.t_hat.matrix @ h.coeffs)
    r = Psi @ nuisances.r_hat.coeffs
    return influence_value(data.g0(), data.g1() * h(data.vh()), th, r, psi_h)


@dataclass(frozen=True, eq=False)
class QuadraticObjective:
    """risk(c) = c^T H c + l^T c + const, with empirical Gram S of the h-sieve."""

    H: np.ndarray
    ell: np.ndarray
    const: float
    S: np.ndarray
    basis: object
    method: str

    def risk(self, c) -> float:
        c = np.asarray(c, dtype=float)
        return float(c @ self.H @ c + self.ell @ c + self.const)

    def penalized(self, c, anchor, lam: float) -> float:
        d = np.asarray(c, dtype=float) - anchor
        return self.risk(c) + lam * float(d @ self.S @ d)


def build_objective(data: Dataset, nuisances: NuisanceFit, method: str = "debiased") -> QuadraticObjective:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    basis_h, basis_q = nuisances.basis_h, nuisances.basis_q
    w = data.w
    Phi = basis_h.design(data.vh())
    Psi = basis_q.design(data.vq())
    P = Psi @ nuisances.t_hat.matrix
    g0 = data.g0()
    Pw = P * w[:, None]
    S = (Phi * w[:, None]).T @ Phi
    const = float(w @ g0 ** 2)
    if method == "baseline":
        H = Pw.T @ P
        ell = -2.0 * Pw.T @ g0
    else:
        M = data.g1()[:, None] * Phi
        r = Psi @ nuisances.r_hat.coeffs
        PM = Pw.T @ M
        H = PM + PM.T - Pw.T @ P
        ell = 2.0 * (-Pw.T @ g0 - M.T @ (w * r) + Pw.T @ r)
    return QuadraticObjective(0.5 * (H + H.T), ell, const, 0.5 * (S + S.T), basis_h, method)


def fit_objective(obj: QuadraticObjective, config: FitConfig) -> FitResult:
    """Iterated Tikhonov on a prebuilt quadratic."""
    if config.method != obj.method:
        raise ValueError("config.method does not match the objective")
    J = obj.basis.dimension
    if config.initial is None:
        c_prev = np.zeros(J)
    else:
        if config.initial.basis != obj.basis:
            raise BasisMismatchError("initial function must live on the h-sieve")
        c_prev = np.array(config.initial.coeffs)
    K = obj.H + config.lam * obj.S
    min_eig = float(np.linalg.eigvalsh(K)[0])
    if min_eig <= config.hessian_floor:
        raise NonConvexError(
            f"non-convex empirical objective (min eigenvalue {min_eig:.3g}); increase lambda or sieve ridge",
            min_eig,
        )
    trajectory = []
    c = c_prev
    for _ in range(config.iterations):
        anchor = c
        c = np.linalg.solve(K, -0.5 * obj.ell + config.lam * obj.S @ anchor)
        trajectory.append(c)
    grad = 2.0 * K @ c + obj.ell - 2.0 * config.lam * obj.S @ anchor
    gnorm = float(np.linalg.norm(grad))
    if gnorm > 1e-8 * (1.0 + np.linalg.norm(c)) * max(1.0, np.abs(K).max()):
        raise NumericalError(f"optimality certificate failed (gradient norm {gnorm:.3g})")
    return FitResult(
        FunctionHandle(obj.basis, c),
        obj.penalized(c, anchor, config.lam),
        min_eig,
        tuple(trajectory),
        config.lam,
        config.method,
        gnorm,
    )


def fit(data: Dataset, nuisances: NuisanceFit, config: FitConfig) -> FitResult:
    """Minimize the (debiased or plug-in) risk plus ``lam * E_n[(h - h_prev)^2]``, ``t`` times."""
    return fit_objective(build_objective(data, nuisances, config.method), config)
