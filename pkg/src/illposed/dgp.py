"""Synthetic data-generating processes with known operators and solutions.

Two designs are provided:

* :class:`SeriesNpivDgp` -- continuous NPIV on [0, 1]^2 whose joint density
  is a truncated cosine series, so the conditional-expectation operator is
  diagonal on the cosine basis with known singular values.
* :class:`DiscreteProximalDgp` -- finite proximal causal model
  ``U -> (Z, W, A) -> Y`` whose bridge functions solve finite linear systems.

Both can also be turned into *population* datasets: weighted support points
whose weighted means are exact expectations of any integrand that is at most
quadratic in the outcome (the outcome noise is replaced by a two-point law
with the same mean and variance).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    BasisSpec,
    FunctionHandle,
    SieveOperator,
    SingularSystem,
    apply,
    cosine,
    indicator,
    tensor,
)
from .errors import BasisMismatchError, ConfigError, IdentificationError, NumericalError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Roles:
    """Which columns play V_h, V_q, g0 and g1."""

    v_h: tuple
    v_q: tuple
    g0: str
    g1: str

    def to_dict(self) -> dict:
        return {"v_h": list(self.v_h), "v_q": list(self.v_q), "g0": self.g0, "g1": self.g1}

    @classmethod
    def from_dict(cls, d: dict) -> "Roles":
        missing = [k for k in ("v_h", "v_q", "g0", "g1") if k not in d]
        if missing:
            raise ConfigError(f"role map missing key {missing[0]!r}")
        return cls(tuple(d["v_h"]), tuple(d["v_q"]), str(d["g0"]), str(d["g1"]))

    def swapped(self, g0: str, g1: str) -> "Roles":
        return Roles(self.v_q, self.v_h, g0, g1)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of V with named columns, optional role bindings and row weights.

    ``weights`` is None for samples (each row counts 1/n) and a probability
    vector for population (enumerated) datasets.
    """

    columns: tuple
    values: np.ndarray = field(repr=False)
    roles: Optional[Roles] = None
    weights: Optional[np.ndarray] = field(default=None, repr=False)
    hidden: frozenset = frozenset()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != len(self.columns):
            raise ValueError("values must be an n x d matrix matching the column names")
        if v.shape[0] < 1:
            raise ValueError("dataset needs at least one row")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column names")
        v.setflags(write=False)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", v)
        if self.weights is not None:
            w = np.array(self.weights, dtype=float)
            if w.shape != (v.shape[0],) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be nonnegative with positive sum")
            w = w / w.sum()
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)
        if self.roles is not None:
            self._check_roles(self.roles)

    def _check_roles(self, roles: Roles):
        for name in (*roles.v_h, *roles.v_q, roles.g0, roles.g1):
            if name not in self.columns:
                raise ConfigError(f"role column {name!r} not in dataset")
        if not np.all(np.isfinite(self.column(roles.g1))):
            raise ValueError("g1 column must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> np.ndarray:
        """Normalized row weights (uniform for samples)."""
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return self.weights

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise KeyError(f"no column {name!r}") from None

    def points(self, names: Sequence[str]) -> np.ndarray:
        cols = [self.column(c) for c in names]
        return cols[0] if len(cols) == 1 else np.column_stack(cols)

    def _roles(self) -> Roles:
        if self.roles is None:
            raise ConfigError("dataset has no role map")
        return self.roles

    def vh(self) -> np.ndarray:
        return self.points(self._roles().v_h)

    def vq(self) -> np.ndarray:
        return self.points(self._roles().v_q)

    def g0(self) -> np.ndarray:
        return self.column(self._roles().g0)

    def g1(self) -> np.ndarray:
        return self.column(self._roles().g1)

    def mean(self, x) -> float:
        return float(self.w @ np.asarray(x, dtype=float))

    def take(self, idx) -> "Dataset":
        """Row subset (a copy; the subset cannot see other rows)."""
        idx = np.asarray(idx)
        w = None if self.weights is None else self.weights[idx]
        return Dataset(self.columns, self.values[idx].copy(), self.roles, w, self.hidden)

    def with_roles(self, roles: Optional[Roles]) -> "Dataset":
        return replace(self, roles=roles)

    def with_columns(self, new: dict) -> "Dataset":
        cols = list(self.columns)
        vals = [self.values[:, i] for i in range(len(cols))]
        for name, x in new.items():
            x = np.broadcast_to(np.asarray(x, dtype=float), (self.n,))
            if name in cols:
                vals[cols.index(name)] = x
            else:
                cols.append(name)
                vals.append(x)
        return Dataset(tuple(cols), np.column_stack(vals), self.roles, self.weights, self.hidden)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.values:
                writer.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path, roles: Optional[Roles] = None) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ConfigError(f"{path}: empty CSV") from None
            rows = [[float(v) for v in row] for row in reader if row]
        if not rows:
            raise ConfigError(f"{path}: no data rows")
        return cls(tuple(header), np.asarray(rows), roles)


def write_roles(roles: Roles, path) -> None:
    d = {"schema_version": SCHEMA_VERSION, **roles.to_dict()}
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_roles(path) -> Roles:
    return Roles.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# Series NPIV design
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SeriesNpivDgp:
    """NPIV with joint density ``1 + sum_i s_i phi_{i+1}(w) phi_{i+1}(z)``.

    ``sigmas`` act on the non-constant cosine elements; ``h0`` lives on the
    cosine basis of dimension ``len(sigmas) + 1``.
    """

    sigmas: np.ndarray
    h0: FunctionHandle
    noise_sd: float = 0.1
    endogeneity: float = 0.5

    def __post_init__(self):
        s = np.array(self.sigmas, dtype=float).reshape(-1)
        if s.size == 0 or np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("sigmas must be nonnegative and nonincreasing")
        if 2.0 * s.sum() >= 1.0:
            raise ValueError("positivity margin violated: need 2 * sum(sigmas) < 1")
        if self.h0.basis != cosine(s.size + 1):
            raise ValueError("h0 must live on the cosine basis of dimension len(sigmas) + 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if not -1.0 <= self.endogeneity <= 1.0:
            raise ValueError("endogeneity must lie in [-1, 1]")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)

    @property
    def m(self) -> int:
        return self.sigmas.size

    @property
    def basis(self) -> BasisSpec:
        return cosine(self.m + 1)

    def density(self, w, z) -> np.ndarray:
        k = np.arange(1, self.m + 1)
        cw = np.cos(np.pi * np.multiply.outer(np.asarray(w, dtype=float), k))
        cz = np.cos(np.pi * np.multiply.outer(np.asarray(z, dtype=float), k))
        return 1.0 + 2.0 * (cw * cz) @ self.sigmas

    def conditional_cdf(self, w, z) -> np.ndarray:
        """F(w | z) = w + sum_i 2 s_i cos(i pi z) sin(i pi w) / (i pi)."""
        k = np.arange(1, self.m + 1)
        w = np.asarray(w, dtype=float)
        sw = np.sin(np.pi * np.multiply.outer(w, k)) / (np.pi * k)
        cz = np.cos(np.pi * np.multiply.outer(np.asarray(z, dtype=float), k))
        return w + 2.0 * (sw * cz) @ self.sigmas

    def structural_error_mean(self, w, z) -> np.ndarray:
        """E[eps | W=w, Z=z]."""
        return self.endogeneity * np.sqrt(12.0) * (self.conditional_cdf(w, z) - 0.5)

    def to_dict(self) -> dict:
        return {
            "sigmas": [float(v) for v in self.sigmas],
            "h0": [float(v) for v in self.h0.coeffs],
            "noise_sd": self.noise_sd,
            "endogeneity": self.endogeneity,
        }


def true_operator_npiv(dgp: SeriesNpivDgp) -> SingularSystem:
    """Exact operator: identity on the constant element, s_i on the rest."""
    # zero singular values (independent W, Z) drop out of the rank
    s = np.concatenate([[1.0], dgp.sigmas[dgp.sigmas > 0]])
    return SingularSystem(s, dgp.basis, dgp.basis)


def true_solution_npiv(dgp: SeriesNpivDgp) -> FunctionHandle:
    return dgp.h0


def make_source_solution(sys: SingularSystem, beta: float, w: FunctionHandle) -> FunctionHandle:
    """``(T*T)^{beta/2} w``: coefficient i is ``s_i^beta <w, phi_i>``."""
    if w.basis != sys.input_basis:
        raise ValueError("w must live on the input basis")
    if beta == 0:
        return w
    out = np.zeros(sys.input_basis.dimension)
    out[: sys.rank] = sys.sigmas ** beta * w.coeffs[: sys.rank]
    return FunctionHandle(sys.input_basis, out)


def make_series_dgp(
    m: int = 8,
    scale: float = 0.3,
    decay: str = "polynomial",
    rate: float = 2.0,
    beta: float = 2.0,
    w: Optional[Sequence[float]] = None,
    noise_sd: float = 0.1,
    endogeneity: float = 0.5,
) -> SeriesNpivDgp:
    """Series design whose h0 satisfies the beta-source condition.

    Singular values are ``scale * i^{-rate}`` (polynomial) or
    ``scale * rate^{-(i-1)}`` (exponential); they are rescaled if needed to
    keep the density positive. ``w`` defaults to the unit vector with equal
    entries.
    """
    i = np.arange(1, m + 1, dtype=float)
    if decay == "polynomial":
        s = scale * i ** (-rate)
    elif decay == "exponential":
        s = scale * rate ** (-(i - 1))
    else:
        raise ConfigError(f"unknown decay {decay!r}")
    if 2.0 * s.sum() >= 0.99:
        s *= 0.99 / (2.0 * s.sum())
    basis = cosine(m + 1)
    sys = SingularSystem(np.concatenate([[1.0], s[s > 0]]), basis, basis)
    if w is None:
        w = np.full(m + 1, 1.0 / np.sqrt(m + 1))
    w = np.asarray(w, dtype=float)
    if w.shape != (m + 1,):
        raise ConfigError(f"w must have length m + 1 = {m + 1}")
    h0 = make_source_solution(sys, beta, FunctionHandle(basis, w))
    return SeriesNpivDgp(s, h0, noise_sd, endogeneity)


def sample_npiv(dgp: SeriesNpivDgp, n: int, seed) -> Dataset:
    """Draw (W, Z, Y) by rejection sampling from the series density."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 + 2.0 * dgp.sigmas.sum()
    ws, zs = [], []
    have, proposed, accepted = 0, 0, 0
    while have < n:
        k = int(1.2 * bound * (n - have)) + 16
        w = rng.random(k)
        z = rng.random(k)
        keep = rng.random(k) * bound <= dgp.density(w, z)
        proposed += k
        accepted += int(keep.sum())
        if proposed > 10_000 and accepted < 0.01 * proposed:
            raise NumericalError("rejection acceptance rate below 1%; check sigmas")
        ws.append(w[keep])
        zs.append(z[keep])
        have += int(keep.sum())
    W = np.concatenate(ws)[:n]
    Z = np.concatenate(zs)[:n]
    eps = dgp.structural_error_mean(W, Z) + dgp.noise_sd * rng.standard_normal(n)
    Y = dgp.h0(W) + eps
    values = np.column_stack([W, Z, Y, Y, np.ones(n)])
    return Dataset(("W", "Z", "Y", "g0", "g1"), values, NPIV_ROLES)


NPIV_ROLES = Roles(("W",), ("Z",), "g0", "g1")


def npiv_population(dgp: SeriesNpivDgp, nodes: int = 96) -> Dataset:
    """Gauss-Legendre population dataset for the series design.

    Weighted means over it reproduce E[f(W, Z, Y)] for f at most quadratic
    in Y, to quadrature accuracy.
    """
    x, wq = np.polynomial.legendre.leggauss(nodes)
    x = 0.5 * (x + 1.0)
    wq = 0.5 * wq
    W, Z = (a.ravel() for a in np.meshgrid(x, x, indexing="ij"))
    weight = np.outer(wq, wq).ravel() * dgp.density(W, Z)
    mean_y = dgp.h0(W) + dgp.structural_error_mean(W, Z)
    sd = dgp.noise_sd
    Y = np.concatenate([mean_y - sd, mean_y + sd])
    WW = np.concatenate([W, W])
    ZZ = np.concatenate([Z, Z])
    vals = np.column_stack([WW, ZZ, Y, Y, np.ones_like(Y)])
    return Dataset(("W", "Z", "Y", "g0", "g1"), vals, NPIV_ROLES, np.concatenate([weight, weight]))


def true_sieve_operator_npiv(dgp: SeriesNpivDgp, basis_h: BasisSpec, basis_q: BasisSpec) -> SieveOperator:
    """Exact operator restricted to cosine sieves of the given dimensions."""
    if basis_h.family != "cosine" or basis_q.family != "cosine":
        raise ValueError("exact restriction is available for cosine sieves only")
    s = np.concatenate([[1.0], dgp.sigmas])
    A = np.zeros((basis_q.dimension, basis_h.dimension))
    k = min(basis_q.dimension, basis_h.dimension, s.size)
    A[np.arange(k), np.arange(k)] = s[:k]
    return SieveOperator(A, basis_h, basis_q)


def true_r_npiv(dgp: SeriesNpivDgp, basis_q: Optional[BasisSpec] = None) -> FunctionHandle:
    """r0 = T h0 on the cosine basis of Z (truncated or zero-padded to ``basis_q``)."""
    r = np.concatenate([[1.0], dgp.sigmas]) * dgp.h0.coeffs
    basis_q = basis_q or dgp.basis
    out = np.zeros(basis_q.dimension)
    k = min(out.size, r.size)
    out[:k] = r[:k]
    return FunctionHandle(basis_q, out)


@dataclass(frozen=True, eq=False)
class Truth:
    """Known h0 and operator, used to score fitted functions.

    Fits on a nested prefix of the truth's basis (same family, smaller
    dimension) are zero-padded before comparison.
    """

    h0: FunctionHandle
    operator: object

    def lift(self, h: FunctionHandle) -> np.ndarray:
        b = self.h0.basis
        if h.basis == b:
            return np.asarray(h.coeffs)
        nested = (h.basis.family == b.family and h.basis.family in ("cosine", "legendre")
                  and h.basis.lower == b.lower and h.basis.upper == b.upper
                  and h.basis.dimension <= b.dimension)
        if not nested:
            raise BasisMismatchError("fitted function is not on a prefix of the truth basis")
        out = np.zeros(b.dimension)
        out[: h.basis.dimension] = h.coeffs
        return out

    def source_error(self, h: FunctionHandle) -> float:
        return float(np.linalg.norm(self.lift(h) - self.h0.coeffs))

    def projected_error(self, h: FunctionHandle) -> float:
        e = FunctionHandle(self.h0.basis, self.lift(h) - self.h0.coeffs)
        return apply(self.operator, e).norm()


def npiv_truth(dgp: SeriesNpivDgp) -> Truth:
    return Truth(dgp.h0, true_operator_npiv(dgp))


# --------------------------------------------------------------------------
# Discrete proximal design
# --------------------------------------------------------------------------


def _check_rows(name: str, table: np.ndarray):
    if np.any(table <= 0) or np.any(table >= 1):
        raise ValueError(f"{name}: probabilities must lie in (0, 1)")
    if np.any(np.abs(table.sum(axis=-1) - 1.0) > 1e-12):
        raise ValueError(f"{name}: rows must sum to 1")


@dataclass(frozen=True, eq=False)
class DiscreteProximalDgp:
    """Finite proximal model; tables are indexed by U along their first axis.

    ``p_a`` is P(A=1 | U); ``mu_y[a, u]`` is E[Y | A=a, U=u].
    """

    p_u: np.ndarray
    p_z_u: np.ndarray
    p_w_u: np.ndarray
    p_a: np.ndarray
    mu_y: np.ndarray
    noise_sd: float = 1.0
    a: int = 1

    def __post_init__(self):
        for name in ("p_u", "p_z_u", "p_w_u", "p_a", "mu_y"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        k = self.p_u.size
        if self.p_z_u.shape[0] != k or self.p_w_u.shape[0] != k or self.p_a.shape != (k,):
            raise ValueError("tables must be indexed by U along the first axis")
        if self.mu_y.shape != (2, k):
            raise ValueError("mu_y must have shape (2, |U|)")
        if k == 1:
            if abs(self.p_u.sum() - 1.0) > 1e-12:
                raise ValueError("p_u must sum to 1")
        else:
            _check_rows("p_u", self.p_u)
        _check_rows("p_z_u", self.p_z_u)
        _check_rows("p_w_u", self.p_w_u)
        if np.any(self.p_a <= 0) or np.any(self.p_a >= 1):
            raise ValueError("p_a: probabilities must lie in (0, 1)")
        if self.a not in (0, 1):
            raise ValueError("treatment level must be 0 or 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if np.linalg.matrix_rank(self.p_z_u.T) < k or np.linalg.matrix_rank(self.p_w_u.T) < k:
            raise IdentificationError("completeness fails: p(Z|U) and p(W|U) need full column rank")

    @property
    def sizes(self) -> tuple:
        return self.p_u.size, self.p_z_u.shape[1], self.p_w_u.shape[1]

    @property
    def p_a_u(self) -> np.ndarray:
        """(2, |U|) table of P(A=a | U)."""
        return np.vstack([1.0 - self.p_a, self.p_a])

    def marginals(self) -> dict:
        pa1 = float(self.p_u @ self.p_a)
        return {
            "z": self.p_u @ self.p_z_u,
            "w": self.p_u @ self.p_w_u,
            "a": np.array([1.0 - pa1, pa1]),
        }

    def with_treatment(self, a: int) -> "DiscreteProximalDgp":
        return replace(self, a=a)

    def to_dict(self) -> dict:
        return {
            "p_u": self.p_u.tolist(),
            "p_z_u": self.p_z_u.tolist(),
            "p_w_u": self.p_w_u.tolist(),
            "p_a": self.p_a.tolist(),
            "mu_y": self.mu_y.tolist(),
            "noise_sd": self.noise_sd,
            "a": self.a,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteProximalDgp":
        keys = ("p_u", "p_z_u", "p_w_u", "p_a", "mu_y")
        for k in keys:
            if k not in d:
                raise ConfigError(f"proximal DGP config missing key {k!r}")
        return cls(*(np.asarray(d[k], dtype=float) for k in keys),
                   noise_sd=float(d.get("noise_sd", 1.0)), a=int(d.get("a", 1)))


def default_proximal_dgp(a: int = 1, noise_sd: float = 1.0) -> DiscreteProximalDgp:
    """|U|=3, |Z|=4, |W|=4 design with strong, well-conditioned proxies."""
    p_u = np.array([0.3, 0.4, 0.3])
    p_z_u = np.array([
        [0.80, 0.10, 0.05, 0.05],
        [0.05, 0.45, 0.45, 0.05],
        [0.05, 0.05, 0.10, 0.80],
    ])
    p_w_u = p_z_u.copy()
    p_a = np.array([0.4, 0.5, 0.6])
    mu_y = np.array([[0.0, 1.0, 2.0], [1.0, 2.5, 4.0]])
    return DiscreteProximalDgp(p_u, p_z_u, p_w_u, p_a, mu_y, noise_sd, a)


def random_proximal_dgp(rng, n_u: int = 3, n_z: int = 4, n_w: int = 4, a: int = 1,
                        concentration: float = 4.0) -> DiscreteProximalDgp:
    """Random tables; proxies are tilted towards U so completeness holds."""
    rng = np.random.default_rng(rng)

    def proxy(k):
        base = rng.dirichlet(np.ones(k), size=n_u)
        tilt = np.zeros((n_u, k))
        for u in range(n_u):
            tilt[u, (u * k) // n_u] = concentration
        t = base + tilt * rng.uniform(0.5, 1.0)
        t = t / t.sum(axis=1, keepdims=True)
        return 0.98 * t + 0.02 / k

    p_u = rng.dirichlet(np.full(n_u, 3.0)) if n_u > 1 else np.ones(1)
    return DiscreteProximalDgp(
        p_u, proxy(n_z), proxy(n_w), rng.uniform(0.2, 0.8, n_u),
        rng.normal(0.0, 2.0, size=(2, n_u)), float(rng.uniform(0.5, 1.5)), a,
    )


PROXIMAL_COLUMNS = ("U", "Z", "W", "A", "Y")


def sample_proximal(dgp: DiscreteProximalDgp, n: int, seed) -> Dataset:
    """Ancestral sampling U -> (Z, W, A) -> Y. U is flagged hidden."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    U = rng.choice(dgp.p_u.size, size=n, p=dgp.p_u)
    Z = (rng.random(n)[:, None] > np.cumsum(dgp.p_z_u, axis=1)[U]).sum(axis=1)
    W = (rng.random(n)[:, None] > np.cumsum(dgp.p_w_u, axis=1)[U]).sum(axis=1)
    A = (rng.random(n) < dgp.p_a[U]).astype(int)
    Y = dgp.mu_y[A, U] + dgp.noise_sd * rng.standard_normal(n)
    vals = np.column_stack([U, Z, W, A, Y]).astype(float)
    return Dataset(PROXIMAL_COLUMNS, vals, None, None, frozenset({"U"}))


def proximal_population(dgp: DiscreteProximalDgp) -> Dataset:
    """Enumerated support of (U, Z, W, A, Y) with exact probabilities.

    Y takes the two values ``mu +- noise_sd`` with probability 1/2 each,
    which matches the first two conditional moments of the sampling law.
    """
    n_u, n_z, n_w = dgp.sizes
    p_a_u = dgp.p_a_u
    rows, weights = [], []
    for u in range(n_u):
        for z in range(n_z):
            for w in range(n_w):
                for a in (0, 1):
                    p = dgp.p_u[u] * dgp.p_z_u[u, z] * dgp.p_w_u[u, w] * p_a_u[a, u]
                    mu = dgp.mu_y[a, u]
                    for sign in (-1.0, 1.0):
                        rows.append((u, z, w, a, mu + sign * dgp.noise_sd))
                        weights.append(0.5 * p)
    return Dataset(PROXIMAL_COLUMNS, np.asarray(rows, dtype=float), None,
                   np.asarray(weights), frozenset({"U"}))


def proximal_bases(dgp: DiscreteProximalDgp) -> tuple:
    """(basis for W, basis for (Z, A)) with marginal-law category weights."""
    m = dgp.marginals()
    _, n_z, n_w = dgp.sizes
    return indicator(n_w, m["w"]), tensor(indicator(n_z, m["z"]), indicator(2, m["a"]))


def g_formula(dgp: DiscreteProximalDgp) -> float:
    """Counterfactual mean E[Y^(a)] = sum_u p(u) E[Y | A=a, U=u]."""
    return float(dgp.p_u @ dgp.mu_y[dgp.a])


def _posterior_u(dgp: DiscreteProximalDgp):
    """p(u | z, a) with shape (n_z, 2, n_u) and p(u | w) with shape (n_w, n_u)."""
    joint_za = dgp.p_u[None, None, :] * dgp.p_z_u.T[:, None, :] * dgp.p_a_u[None, :, :]
    post_za = joint_za / joint_za.sum(axis=2, keepdims=True)
    joint_w = dgp.p_u[None, :] * dgp.p_w_u.T
    post_w = joint_w / joint_w.sum(axis=1, keepdims=True)
    return post_za, post_w


def _min_norm(K: np.ndarray, b: np.ndarray, measure: np.ndarray, what: str) -> np.ndarray:
    """Minimum L2(measure) solution of K f = b, returned as function values."""
    scale = np.sqrt(measure)
    x, *_ = np.linalg.lstsq(K / scale[None, :], b, rcond=None)
    f = x / scale
    resid = np.abs(K @ f - b).max()
    if resid > 1e-9 * max(1.0, np.abs(b).max()):
        raise IdentificationError(f"identification failure: {what} system inconsistent (residual {resid:.3g})")
    return f


def true_bridges(dgp: DiscreteProximalDgp) -> tuple:
    """L2-minimal outcome bridge h0(W) and treatment bridge q0(Z, A).

    h0 solves E[h(W) | Z, A=a] = E[Y | Z, A=a]; q0 solves
    E[I(A=a) q(Z, A) | W] = 1. Minimum norms are taken under the joint law
    of the respective arguments.
    """
    a = dgp.a
    n_u, n_z, n_w = dgp.sizes
    post_za, post_w = _posterior_u(dgp)
    marg = dgp.marginals()
    basis_w, basis_za = proximal_bases(dgp)

    K_h = post_za[:, a, :] @ dgp.p_w_u                      # (n_z, n_w)
    b_h = post_za[:, a, :] @ dgp.mu_y[a]
    h_vals = _min_norm(K_h, b_h, marg["w"], "outcome-bridge")
    h0 = FunctionHandle(basis_w, h_vals * np.sqrt(marg["w"]))

    # unknowns q(z, a) for the treated level only; other level is zero at min norm
    K_q = (post_w * dgp.p_a_u[a][None, :]) @ dgp.p_z_u      # (n_w, n_z)
    joint_za = (dgp.p_u[:, None] * dgp.p_z_u * dgp.p_a_u[a][:, None]).sum(axis=0)
    q_vals = _min_norm(K_q, np.ones(n_w), joint_za, "treatment-bridge")
    q_full = np.zeros((n_z, 2))
    q_full[:, a] = q_vals
    q_coef = q_full * np.sqrt(np.outer(marg["z"], marg["a"]))
    q0 = FunctionHandle(basis_za, q_coef.ravel())
    return h0, q0


def true_proximal_nuisances(dgp: DiscreteProximalDgp, equation: str) -> tuple:
    """Exact (operator, r) for the proximal h- or q-equation.

    Uses the sign convention g1 = -I(A=a) with g0 = -I(A=a) Y (h-equation)
    or g0 = -1 (q-equation). Returns ``(SieveOperator, FunctionHandle)``.
    """
    a = dgp.a
    n_u, n_z, n_w = dgp.sizes
    post_za, post_w = _posterior_u(dgp)
    marg = dgp.marginals()
    basis_w, basis_za = proximal_bases(dgp)
    sq_za = np.sqrt(np.outer(marg["z"], marg["a"]))         # (n_z, 2)
    if equation == "h":
        A = np.zeros((n_z, 2, n_w))
        # (T phi_w)(z, a') = -I(a'=a) sum_u p(u|z,a') p(w|u) / sqrt(p_w)
        A[:, a, :] = -(post_za[:, a, :] @ dgp.p_w_u) / np.sqrt(marg["w"])[None, :]
        A = A * sq_za[:, :, None]
        r = np.zeros((n_z, 2))
        r[:, a] = -(post_za[:, a, :] @ dgp.mu_y[a])
        r = r * sq_za
        return (SieveOperator(A.reshape(n_z * 2, n_w), basis_w, basis_za),
                FunctionHandle(basis_za, r.ravel()))
    if equation == "q":
        A = np.zeros((n_w, n_z, 2))
        # (T phi_{z,a'})(w) = -I(a'=a) sum_u p(u|w) p(a|u) p(z|u) / sqrt(p_z p_a')
        A[:, :, a] = -((post_w * dgp.p_a_u[a][None, :]) @ dgp.p_z_u) / sq_za[None, :, a]
        A = A * np.sqrt(marg["w"])[:, None, None]
        r = -np.sqrt(marg["w"])
        return (SieveOperator(A.reshape(n_w, n_z * 2), basis_za, basis_w),
                FunctionHandle(basis_w, r))
    raise ValueError("equation must be 'h' or 'q'")
