"""Lambda grids, three-way sample splits and cross-validated selection.

The selector fits one debiased candidate per grid value on a training fold,
with nuisances from a second fold, and keeps the candidate whose debiased
risk is smallest on a third (validation) fold.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import BasisSpec, FunctionHandle, SieveOperator
from .dgp import Dataset, Truth
from .errors import ConfigError, NonConvexError
from .estimators import FitConfig, build_objective, debiased_risk, fit_objective
from .nuisance import NuisanceFit, fit_nuisances

FOLD_NAMES = ("candidate", "nuisance", "validation")


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Disjoint, exhaustive row index sets. Folds are kept in sorted order."""

    folds: tuple
    seed: int
    n: int

    def __post_init__(self):
        folds = tuple(np.sort(np.asarray(f, dtype=int)) for f in self.folds)
        if any(f.size == 0 for f in folds):
            raise ValueError("every fold must be nonempty")
        joined = np.concatenate(folds)
        if joined.size != self.n or not np.array_equal(np.sort(joined), np.arange(self.n)):
            raise ValueError("folds must be disjoint and cover all rows")
        for f in folds:
            f.setflags(write=False)
        object.__setattr__(self, "folds", folds)

    @property
    def sizes(self) -> tuple:
        return tuple(int(f.size) for f in self.folds)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.folds[i]


@dataclass(frozen=True, eq=False)
class LambdaGrid:
    """``lam_i = b + (i / M) * B`` for ``i = 1..M``."""

    b: float
    B: float
    M: int

    def __post_init__(self):
        if not (self.b > 0 and self.B >= 0):
            raise ValueError("grid needs b > 0 and B >= 0")
        if self.M < 1:
            raise ValueError("grid size must be >= 1")
        if self.M > 1 and self.B == 0:
            raise ValueError("B must be positive for a grid of more than one value")

    @property
    def values(self) -> np.ndarray:
        i = np.arange(1, self.M + 1)
        return self.b + (i / self.M) * self.B

    def to_dict(self) -> dict:
        return {"b": self.b, "B": self.B, "M": self.M}


def make_grid(n: int, delta_n_proxy: float, epsilon: float = 0.01,
              m_override: Optional[int] = None) -> LambdaGrid:
    """Grid spanning ``(proxy^{1-eps}, proxy^{1-eps} + proxy^{1/3}]`` with M = n unless overridden."""
    if not 0 < delta_n_proxy < 1:
        raise ValueError("delta_n proxy must lie in (0, 1)")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    M = int(n) if m_override is None else int(m_override)
    return LambdaGrid(delta_n_proxy ** (1.0 - epsilon), delta_n_proxy ** (1.0 / 3.0), M)


def default_proxy(n: int, dimension: int) -> float:
    """sqrt(J / n), capped below 1."""
    return min(np.sqrt(dimension / n), 0.999)


def split(n: int, fractions: Sequence[float] = (1 / 3, 1 / 3, 1 / 3), seed: int = 0) -> FoldPlan:
    """Seeded shuffled partition; fold sizes by the largest-remainder rule."""
    fr = np.asarray(fractions, dtype=float)
    if fr.ndim != 1 or fr.size < 1 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    if np.any(sizes == 0):
        raise ValueError(f"n={n} too small: a fold would be empty")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum(sizes)[:-1]
    return FoldPlan(tuple(np.split(perm, cuts)), int(seed), int(n))


def cv_select(candidates: Sequence[FunctionHandle], validation: Dataset,
              t_hat: SieveOperator, r_hat: FunctionHandle) -> tuple:
    """Index of the smallest validation debiased risk, and all risks.

    Ties go to the smallest index.
    """
    if len(candidates) == 0:
        raise ValueError("candidate set is empty")
    risks = np.array([debiased_risk(h, validation, t_hat, r_hat) for h in candidates])
    return int(np.argmin(risks)), risks


@dataclass(frozen=True, eq=False)
class CvConfig:
    basis_h: BasisSpec
    basis_q: BasisSpec
    lambdas: Optional[tuple] = None
    delta_proxy: Optional[float] = None
    epsilon: float = 0.01
    grid_size: Optional[int] = 64
    fractions: tuple = (1 / 3, 1 / 3, 1 / 3)
    iterations: int = 2
    ridge: Optional[float] = None
    seed: int = 0
    truth: Optional[Truth] = field(default=None, repr=False)

    def __post_init__(self):
        if self.lambdas is not None:
            lam = np.asarray(self.lambdas, dtype=float)
            if lam.size == 0 or np.any(~(lam > 0)):
                raise ConfigError("lambdas must be a nonempty list of positive values")
        if len(self.fractions) != 3:
            raise ConfigError("fractions must have three entries")

    def grid(self, n_candidate: int) -> np.ndarray:
        if self.lambdas is not None:
            return np.asarray(self.lambdas, dtype=float)
        proxy = self.delta_proxy if self.delta_proxy is not None else default_proxy(n_candidate, self.basis_h.dimension)
        M = n_candidate if self.grid_size is None else min(n_candidate, self.grid_size)
        return make_grid(n_candidate, proxy, self.epsilon, M).values


def fit_candidates(train: Dataset, nuisances: NuisanceFit, lambdas, iterations: int = 2) -> list:
    """One debiased fit per lambda; the quadratic is built once and reused.

    Entries are None where the penalized objective is not convex.
    """
    obj = build_objective(train, nuisances, "debiased")
    out = []
    for lam in lambdas:
        try:
            out.append(fit_objective(obj, FitConfig(float(lam), iterations)))
        except NonConvexError:
            out.append(None)
    return out


def fit_cv_pipeline(data: Dataset, config: CvConfig) -> tuple:
    """Split, fit nuisances and candidates, select on the validation fold.

    Returns ``(h_selected, report)``.
    """
    plan = split(data.n, config.fractions, config.seed)
    train, nui, valid = (data.take(plan[i]) for i in range(3))
    nuisances = fit_nuisances(nui, config.basis_h, config.basis_q, config.ridge)
    lambdas = config.grid(train.n)
    fits = fit_candidates(train, nuisances, lambdas, config.iterations)
    ok = [i for i, f in enumerate(fits) if f is not None]
    if not ok:
        raise NonConvexError("non-convex empirical objective at every grid value; increase lambda",
                             float("nan"))
    hs = [fits[i].h_hat for i in ok]
    j, risks = cv_select(hs, valid, nuisances.t_hat, nuisances.r_hat)
    idx = ok[j]
    full = [None] * len(fits)
    for i, v in zip(ok, risks):
        full[i] = float(v)
    report = {
        "grid": [float(v) for v in lambdas],
        "risks": full,
        "nonconvex": [i for i, f in enumerate(fits) if f is None],
        "selected_index": idx,
        "selected_lambda": float(lambdas[idx]),
        "fold_sizes": list(plan.sizes),
        "seed": plan.seed,
        "coeffs": [float(v) for v in fits[idx].h_hat.coeffs],
        "basis": fits[idx].h_hat.basis.to_dict(),
    }
    if config.truth is not None:
        report["oracle_errors"] = {
            "projected": [None if f is None else config.truth.projected_error(f.h_hat) for f in fits],
            "source": [None if f is None else config.truth.source_error(f.h_hat) for f in fits],
        }
    return fits[idx].h_hat, report
