"""Sieve least-squares estimates of the operator T and the regression r0."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import BasisSpec, FunctionHandle, SieveOperator, operator_norm_diff
from .dgp import Dataset
from .errors import RankDeficientError


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    t_hat: SieveOperator
    r_hat: FunctionHandle
    ridge: float = 0.0
    n_used: int = 0
    condition_number: float = 1.0

    def __post_init__(self):
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.r_hat.basis != self.t_hat.output_basis:
            raise ValueError("r_hat must live on the operator's output basis")

    @property
    def basis_h(self) -> BasisSpec:
        return self.t_hat.input_basis

    @property
    def basis_q(self) -> BasisSpec:
        return self.t_hat.output_basis

    def to_dict(self) -> dict:
        return {
            "t_hat": self.t_hat.to_dict(),
            "r_hat": self.r_hat.to_dict(),
            "ridge": self.ridge,
            "n_used": self.n_used,
            "condition_number": self.condition_number,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NuisanceFit":
        return cls(SieveOperator.from_dict(d["t_hat"]), FunctionHandle.from_dict(d["r_hat"]),
                   float(d["ridge"]), int(d["n_used"]), float(d["condition_number"]))


def default_ridge(data: Dataset, basis_q: BasisSpec) -> float:
    """Numerical stabilizer ``1e-8 * trace(Psi^T Psi / n) / K``."""
    Psi = basis_q.design(data.vq())
    return 1e-8 * float(np.einsum("i,ij,ij->", data.w, Psi, Psi)) / basis_q.dimension


def _normal_solve(data: Dataset, basis_q: BasisSpec, rhs: np.ndarray, ridge: Optional[float]):
    """Solve ``(Psi^T W Psi + ridge I) X = Psi^T W rhs``; returns (X, ridge, cond)."""
    Psi = basis_q.design(data.vq())
    Pw = Psi * data.w[:, None]
    G = Pw.T @ Psi
    if ridge is None:
        ridge = 1e-8 * np.trace(G) / basis_q.dimension
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    M = G + ridge * np.eye(basis_q.dimension)
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
        raise RankDeficientError("rank-deficient design; increase ridge")
    X = np.linalg.solve(M, Pw.T @ rhs)
    return X, float(ridge), float(eig[-1] / eig[0])


def fit_operator(data: Dataset, basis_h: BasisSpec, basis_q: BasisSpec,
                 ridge: Optional[float] = None) -> SieveOperator:
    """Column j regresses ``g1 * phi_j(V_h)`` on the V_q sieve.

    ``ridge=None`` uses the default stabilizer.
    """
    target = data.g1()[:, None] * basis_h.design(data.vh())
    A, _, _ = _normal_solve(data, basis_q, target, ridge)
    return SieveOperator(A, basis_h, basis_q)


def fit_r(data: Dataset, basis_q: BasisSpec, ridge: Optional[float] = None) -> FunctionHandle:
    d, _, _ = _normal_solve(data, basis_q, data.g0(), ridge)
    return FunctionHandle(basis_q, d)


def fit_nuisances(data: Dataset, basis_h: BasisSpec, basis_q: BasisSpec,
                  ridge: Optional[float] = None) -> NuisanceFit:
    """Fit T-hat and r-hat together on one fold."""
    target = np.column_stack([data.g1()[:, None] * basis_h.design(data.vh()), data.g0()])
    X, used, cond = _normal_solve(data, basis_q, target, ridge)
    return NuisanceFit(SieveOperator(X[:, :-1], basis_h, basis_q),
                       FunctionHandle(basis_q, X[:, -1]), used, data.n, cond)


CORRUPTION_MODES = ("spectral", "random", "rank-one")


def corrupt_operator(t: SieveOperator, epsilon: float, mode: str = "random", seed=0) -> SieveOperator:
    """Perturb ``t`` so that the (identity-Gram) operator norm difference is ``epsilon``.

    ``spectral`` shifts the singular values of ``t`` along its own singular
    vectors; ``random`` adds a Gaussian matrix; ``rank-one`` adds ``u v^T``.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"mode must be one of {CORRUPTION_MODES}")
    if epsilon == 0:
        return SieveOperator(t.matrix.copy(), t.input_basis, t.output_basis)
    rng = np.random.default_rng(seed)
    K, J = t.matrix.shape
    if mode == "spectral":
        U, _, Vt = np.linalg.svd(t.matrix, full_matrices=False)
        delta = rng.uniform(-1.0, 1.0, size=len(Vt))
        D = (U * delta) @ Vt
    elif mode == "random":
        D = rng.standard_normal((K, J))
    else:
        D = np.outer(rng.standard_normal(K), rng.standard_normal(J))
    D = D * (epsilon / np.linalg.norm(D, 2))
    return SieveOperator(t.matrix + D, t.input_basis, t.output_basis)


def operator_error(t_hat: SieveOperator, t_true: SieveOperator) -> float:
    """Population operator-norm error for orthonormal bases."""
    return operator_norm_diff(t_hat, t_true)
