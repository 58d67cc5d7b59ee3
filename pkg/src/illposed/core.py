"""Sieve bases, operators between them, and spectral tools.

Functions are represented by coefficient vectors on an orthonormal basis, so
L2 norms and inner products reduce to Euclidean arithmetic on coefficients.
Operators are either dense matrices between two sieve bases
(:class:`SieveOperator`) or diagonal singular systems
(:class:`SingularSystem`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.polynomial import legendre as npleg

from .errors import BasisMismatchError, DegenerateDesignError, DomainError, SourceConditionError

FAMILIES = ("cosine", "legendre", "indicator", "tensor")

# Draws per counter-based substream in the Rademacher Monte Carlo.
_RADEMACHER_CHUNK = 2048


@dataclass(frozen=True)
class BasisSpec:
    """Orthonormal basis description.

    ``cosine`` and ``legendre`` are orthonormal under the uniform law on
    ``[lower, upper]``; ``indicator`` under the declared category weights;
    ``tensor`` under the product of its factors' measures.
    """

    family: str
    dimension: int
    lower: float = 0.0
    upper: float = 1.0
    weights: tuple = ()
    factors: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.dimension < 1:
            raise ValueError("basis dimension must be >= 1")
        if self.family in ("cosine", "legendre") and not self.upper > self.lower:
            raise ValueError("interval basis needs upper > lower")
        if self.family == "indicator":
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.dimension,):
                raise ValueError("indicator basis needs one weight per category")
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("indicator weights must be positive and sum to 1")
        if self.family == "tensor":
            if len(self.factors) != 2:
                raise ValueError("tensor basis takes exactly two factors")
            a, b = self.factors
            if a.dimension * b.dimension != self.dimension:
                raise ValueError("tensor dimension must equal product of factor dimensions")

    @property
    def n_inputs(self) -> int:
        """Number of point coordinates the basis consumes."""
        if self.family == "tensor":
            return self.factors[0].n_inputs + self.factors[1].n_inputs
        return 1

    def design(self, points) -> np.ndarray:
        """n x J matrix of basis elements evaluated at ``points``."""
        x = np.asarray(points, dtype=float)
        if self.family == "tensor":
            x = x.reshape(len(x), -1) if x.ndim > 1 else x.reshape(-1, 1)
            a, b = self.factors
            if x.shape[1] != a.n_inputs + b.n_inputs:
                raise DomainError(f"tensor basis expects {a.n_inputs + b.n_inputs} columns, got {x.shape[1]}")
            fa = a.design(x[:, : a.n_inputs].squeeze(axis=1) if a.n_inputs == 1 else x[:, : a.n_inputs])
            fb = b.design(x[:, a.n_inputs:].squeeze(axis=1) if b.n_inputs == 1 else x[:, a.n_inputs:])
            return (fa[:, :, None] * fb[:, None, :]).reshape(len(x), self.dimension)

        x = x.reshape(-1) if x.ndim > 1 and x.shape[1] == 1 else x
        if x.ndim != 1:
            raise DomainError(f"{self.family} basis expects scalar points")
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite evaluation point")
        if self.family == "indicator":
            k = np.rint(x)
            if np.any(np.abs(x - k) > 1e-9) or np.any(k < 0) or np.any(k >= self.dimension):
                raise DomainError(f"indicator points must be integers in [0, {self.dimension - 1}]")
            out = np.zeros((len(x), self.dimension))
            w = np.asarray(self.weights)
            idx = k.astype(int)
            out[np.arange(len(x)), idx] = 1.0 / np.sqrt(w[idx])
            return out

        if np.any(x < self.lower) or np.any(x > self.upper):
            raise DomainError(f"points outside [{self.lower}, {self.upper}]")
        u = (x - self.lower) / (self.upper - self.lower)
        j = np.arange(self.dimension)
        if self.family == "cosine":
            out = np.sqrt(2.0) * np.cos(np.pi * np.outer(u, j))
            out[:, 0] = 1.0
            return out
        # shifted Legendre: sqrt(2k+1) P_k(2u - 1)
        return npleg.legvander(2.0 * u - 1.0, self.dimension - 1) * np.sqrt(2.0 * j + 1.0)

    def to_dict(self) -> dict:
        d = {"family": self.family, "dimension": self.dimension}
        if self.family in ("cosine", "legendre"):
            d.update(lower=self.lower, upper=self.upper)
        elif self.family == "indicator":
            d["weights"] = list(self.weights)
        else:
            d["factors"] = [f.to_dict() for f in self.factors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        fam = d["family"]
        if fam == "tensor":
            a, b = (cls.from_dict(f) for f in d["factors"])
            return tensor(a, b)
        if fam == "indicator":
            return indicator(int(d["dimension"]), d.get("weights"))
        return cls(fam, int(d["dimension"]), float(d.get("lower", 0.0)), float(d.get("upper", 1.0)))


def cosine(dimension: int, lower: float = 0.0, upper: float = 1.0) -> BasisSpec:
    return BasisSpec("cosine", dimension, lower, upper)


def legendre(dimension: int, lower: float = 0.0, upper: float = 1.0) -> BasisSpec:
    return BasisSpec("legendre", dimension, lower, upper)


def indicator(k: int, weights: Optional[Sequence[float]] = None) -> BasisSpec:
    if weights is None:
        weights = np.full(k, 1.0 / k)
    w = np.asarray(weights, dtype=float)
    return BasisSpec("indicator", k, weights=tuple(float(v) for v in w / w.sum()))


def tensor(a: BasisSpec, b: BasisSpec) -> BasisSpec:
    return BasisSpec("tensor", a.dimension * b.dimension, factors=(a, b))


def parse_basis(text: str) -> BasisSpec:
    """Parse ``family:dim`` strings; ``*`` joins tensor factors.

    >>> parse_basis("cosine:4").dimension
    4
    >>> parse_basis("indicator:4*indicator:2").dimension
    8
    """
    if "*" in text:
        left, right = text.split("*", 1)
        return tensor(parse_basis(left), parse_basis(right))
    try:
        fam, dim = text.strip().split(":")
        dim = int(dim)
    except ValueError:
        raise ValueError(f"cannot parse basis {text!r}; expected family:dimension") from None
    if fam == "cosine":
        return cosine(dim)
    if fam == "legendre":
        return legendre(dim)
    if fam == "indicator":
        return indicator(dim)
    raise ValueError(f"unknown basis family {fam!r}")


@dataclass(frozen=True, eq=False)
class FunctionHandle:
    """A function in a sieve class: basis plus coefficient vector."""

    basis: BasisSpec
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).reshape(-1)
        if c.shape != (self.basis.dimension,):
            raise ValueError(f"expected {self.basis.dimension} coefficients, got {c.size}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __call__(self, points) -> np.ndarray:
        return evaluate(self, points)

    def _check(self, other: "FunctionHandle"):
        if other.basis != self.basis:
            raise BasisMismatchError("functions live on different bases")

    def __add__(self, other: "FunctionHandle") -> "FunctionHandle":
        self._check(other)
        return FunctionHandle(self.basis, self.coeffs + other.coeffs)

    def __sub__(self, other: "FunctionHandle") -> "FunctionHandle":
        self._check(other)
        return FunctionHandle(self.basis, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "FunctionHandle":
        return FunctionHandle(self.basis, float(scalar) * self.coeffs)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def inner(self, other: "FunctionHandle") -> float:
        self._check(other)
        return float(self.coeffs @ other.coeffs)

    def to_dict(self) -> dict:
        return {"basis": self.basis.to_dict(), "coeffs": [float(v) for v in self.coeffs]}

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionHandle":
        return cls(BasisSpec.from_dict(d["basis"]), np.asarray(d["coeffs"], dtype=float))


def zero(basis: BasisSpec) -> FunctionHandle:
    return FunctionHandle(basis, np.zeros(basis.dimension))


@dataclass(frozen=True, eq=False)
class SingularSystem:
    """Compact operator diagonal in paired bases: ``T phi_i = s_i psi_i``.

    ``sigmas`` are singular values of T (eigenvalues of T*T are their
    squares). Input components beyond the rank map to zero.
    """

    sigmas: np.ndarray
    input_basis: BasisSpec
    output_basis: BasisSpec

    def __post_init__(self):
        s = np.array(self.sigmas, dtype=float).reshape(-1)
        if s.size == 0 or np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("singular values must be finite and strictly positive")
        if np.any(np.diff(s) > 0):
            raise ValueError("singular values must be nonincreasing")
        if s.size > min(self.input_basis.dimension, self.output_basis.dimension):
            raise ValueError("rank exceeds basis dimension")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)

    @property
    def rank(self) -> int:
        return self.sigmas.size

    def as_matrix(self) -> np.ndarray:
        A = np.zeros((self.output_basis.dimension, self.input_basis.dimension))
        A[np.arange(self.rank), np.arange(self.rank)] = self.sigmas
        return A

    def to_sieve(self) -> "SieveOperator":
        return SieveOperator(self.as_matrix(), self.input_basis, self.output_basis)


@dataclass(frozen=True, eq=False)
class SieveOperator:
    """K x J matrix mapping input-basis coefficients to output-basis coefficients."""

    matrix: np.ndarray
    input_basis: BasisSpec
    output_basis: BasisSpec

    def __post_init__(self):
        A = np.array(self.matrix, dtype=float)
        if A.shape != (self.output_basis.dimension, self.input_basis.dimension):
            raise ValueError(
                f"matrix shape {A.shape} does not match bases "
                f"({self.output_basis.dimension}, {self.input_basis.dimension})"
            )
        if not np.all(np.isfinite(A)):
            raise ValueError("operator entries must be finite")
        A.setflags(write=False)
        object.__setattr__(self, "matrix", A)

    def to_dict(self) -> dict:
        return {
            "input_basis": self.input_basis.to_dict(),
            "output_basis": self.output_basis.to_dict(),
            "matrix": [[float(v) for v in row] for row in self.matrix],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SieveOperator":
        return cls(np.asarray(d["matrix"], dtype=float),
                   BasisSpec.from_dict(d["input_basis"]), BasisSpec.from_dict(d["output_basis"]))


Operator = Union[SieveOperator, SingularSystem]


def evaluate(h: FunctionHandle, points) -> np.ndarray:
    return h.basis.design(points) @ h.coeffs


def gram(basis: BasisSpec, points, weights=None) -> np.ndarray:
    """Empirical Gram matrix ``Phi^T W Phi`` (``W = I/n`` by default)."""
    Phi = basis.design(points)
    if len(Phi) == 0:
        raise ValueError("gram needs at least one point")
    if weights is None:
        G = Phi.T @ Phi / len(Phi)
    else:
        w = np.asarray(weights, dtype=float)
        G = (Phi * (w / w.sum())[:, None]).T @ Phi
    return 0.5 * (G + G.T)


def apply(op: Operator, h: FunctionHandle) -> FunctionHandle:
    if h.basis != op.input_basis:
        raise BasisMismatchError("function basis does not match operator input basis")
    if isinstance(op, SingularSystem):
        out = np.zeros(op.output_basis.dimension)
        out[: op.rank] = op.sigmas * h.coeffs[: op.rank]
        return FunctionHandle(op.output_basis, out)
    return FunctionHandle(op.output_basis, op.matrix @ h.coeffs)


def adjoint_apply(op: Operator, g: FunctionHandle) -> FunctionHandle:
    if g.basis != op.output_basis:
        raise BasisMismatchError("function basis does not match operator output basis")
    if isinstance(op, SingularSystem):
        out = np.zeros(op.input_basis.dimension)
        out[: op.rank] = op.sigmas * g.coeffs[: op.rank]
        return FunctionHandle(op.input_basis, out)
    return FunctionHandle(op.input_basis, op.matrix.T @ g.coeffs)


def picard_solve(sys: SingularSystem, r: FunctionHandle, truncation: Optional[int] = None) -> FunctionHandle:
    """Truncated Picard series: coefficient i is ``<r, psi_i> / s_i`` for i < k."""
    if r.basis != sys.output_basis:
        raise BasisMismatchError("right-hand side must live on the output basis")
    k = sys.rank if truncation is None else int(truncation)
    if k > sys.rank:
        raise ValueError(f"truncation {k} exceeds rank {sys.rank}")
    if k < 0:
        raise ValueError("truncation must be nonnegative")
    out = np.zeros(sys.input_basis.dimension)
    out[:k] = r.coeffs[:k] / sys.sigmas[:k]
    return FunctionHandle(sys.input_basis, out)


def source_condition_norm(sys: SingularSystem, h: FunctionHandle, beta: float) -> float:
    """Norm of the source element w with ``h = (T*T)^{beta/2} w``."""
    if h.basis != sys.input_basis:
        raise BasisMismatchError("h must live on the input basis")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    c = h.coeffs
    tail = np.flatnonzero(c[sys.rank:])
    if tail.size:
        raise SourceConditionError(
            f"source condition violated at component {sys.rank + tail[0]}", sys.rank + int(tail[0])
        )
    c = c[: sys.rank]
    if beta == 0:
        return float(np.linalg.norm(c))
    nz = c != 0
    logs = np.full(c.shape, -np.inf)
    logs[nz] = 2.0 * np.log(np.abs(c[nz])) - 2.0 * beta * np.log(sys.sigmas[nz])
    bad = np.flatnonzero(logs > 700.0)
    if bad.size:
        raise SourceConditionError(f"source condition violated at component {bad[0]}", int(bad[0]))
    return float(np.sqrt(np.exp(logs).sum()))


def filter_factors(sigmas, lam: float, t: int) -> np.ndarray:
    """Iterated-Tikhonov filter ``1 - (lam / (s^2 + lam))^t``."""
    s2 = np.asarray(sigmas, dtype=float) ** 2
    return 1.0 - (lam / (s2 + lam)) ** t


def population_tikhonov_iterate(sys: SingularSystem, h0: FunctionHandle, lam: float, t: int) -> FunctionHandle:
    """Noiseless population iterate started from zero, via filter factors."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if t < 1:
        raise ValueError("t must be >= 1")
    if h0.basis != sys.input_basis:
        raise BasisMismatchError("h0 must live on the input basis")
    out = np.zeros(sys.input_basis.dimension)
    out[: sys.rank] = filter_factors(sys.sigmas, lam, t) * h0.coeffs[: sys.rank]
    return FunctionHandle(sys.input_basis, out)


def _inv_sqrt_psd(G: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (G + G.T))
    if vals.min() <= 1e-12 * max(vals.max(), 1.0):
        raise DegenerateDesignError(f"degenerate empirical design ({what} Gram is singular)")
    return (vecs / np.sqrt(vals)) @ vecs.T


def _sqrt_psd(G: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (G + G.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def operator_norm_diff(a: SieveOperator, b: SieveOperator, input_gram=None, output_gram=None) -> float:
    """Operator norm of ``a - b`` between the L2 spaces the Grams describe."""
    if a.input_basis != b.input_basis or a.output_basis != b.output_basis:
        raise BasisMismatchError("operators must share bases")
    D = a.matrix - b.matrix
    if input_gram is not None:
        D = D @ _inv_sqrt_psd(np.asarray(input_gram, dtype=float), "input")
    if output_gram is not None:
        D = _sqrt_psd(np.asarray(output_gram, dtype=float)) @ D
    if not D.any():
        return 0.0
    return float(np.linalg.norm(D, 2))


def _rademacher_slope(basis: BasisSpec, points, draws: int, seed: int) -> float:
    Phi = basis.design(points)
    n = len(Phi)
    if n == 0:
        raise ValueError("need at least one point")
    if draws < 1:
        raise ValueError("draws must be >= 1")
    S = Phi.T @ Phi / n
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise DegenerateDesignError("degenerate empirical design (singular Gram)") from None
    if np.min(np.diag(L)) <= 1e-10 * np.sqrt(np.max(np.diag(S))):
        raise DegenerateDesignError("degenerate empirical design (singular Gram)")
    total = 0.0
    for chunk, start in enumerate(range(0, draws, _RADEMACHER_CHUNK)):
        m = min(_RADEMACHER_CHUNK, draws - start)
        # substream keyed by (seed, chunk) so results do not depend on call order
        rng = np.random.default_rng([int(seed), chunk])
        eps = rng.integers(0, 2, size=(n, m)) * 2.0 - 1.0
        v = np.linalg.solve(L, Phi.T @ eps) / n
        total += np.linalg.norm(v, axis=0).sum()
    return total / draws


def local_rademacher(basis: BasisSpec, points, delta: float, draws: int, seed: int) -> float:
    """Localized Rademacher complexity of the sieve ball ``{h : ||h||_n <= delta}``.

    Uses the empirical-norm ball, for which the supremum is
    ``delta * ||S^{-1/2} Phi^T eps / n||`` with S the empirical Gram.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0:
        return 0.0
    return float(delta * _rademacher_slope(basis, points, draws, seed))


def critical_radius(basis: BasisSpec, points, draws: int, seed: int) -> float:
    """Smallest delta with ``R(delta) <= delta^2``; equals the slope of R for linear sieves."""
    return float(_rademacher_slope(basis, points, draws, seed))
