"""Monte Carlo harness: bias probes, rate sweeps and the alpha-condition probe.

Rate claims are checked as log-log slopes and orderings only; no absolute
constants are asserted anywhere.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import FunctionHandle, SieveOperator, SingularSystem, cosine, operator_norm_diff
from .dgp import Dataset, Truth, make_series_dgp, npiv_truth, sample_npiv, true_r_npiv, true_sieve_operator_npiv
from .errors import ConfigError, NumericalError
from .estimators import METHODS, FitConfig, build_objective, debiased_risk, fit_objective, projected_risk_plugin
from .nuisance import CORRUPTION_MODES, NuisanceFit, corrupt_operator, fit_nuisances
from .selection import cv_select, default_proxy, make_grid, split

SCHEMA_VERSION = 1
ZETA6_SQRT = math.pi ** 3 / math.sqrt(945.0)


def fit_loglog(x, y) -> tuple:
    """OLS slope and intercept of log(y) on log(x)."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    if lx.size < 2:
        raise ValueError("need at least two points for a slope")
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)


# --------------------------------------------------------------------------
# Bias probe
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BiasProbeReport:
    epsilons: tuple
    debiased_bias: tuple
    plugin_bias: tuple
    identity_gap: float
    debiased_slope: float
    debiased_intercept: float
    plugin_slope: float
    plugin_intercept: float
    excluded_debiased: int
    excluded_plugin: int

    def to_dict(self) -> dict:
        return asdict(self)


def aligned_direction(h: FunctionHandle, t_true: SieveOperator, r_true: FunctionHandle) -> np.ndarray:
    """Unit rank-one corruption that moves T h against the residual T h - r0.

    With this direction the plug-in bias is positive for small epsilon and
    its first-order term is as large as possible.
    """
    resid = t_true.matrix @ h.coeffs - r_true.coeffs
    if not np.any(resid) or not np.any(h.coeffs):
        raise ValueError("aligned direction needs h != 0 and T h != r0")
    return -np.outer(resid / np.linalg.norm(resid), h.coeffs / np.linalg.norm(h.coeffs))


def bias_probe(h: FunctionHandle, population: Dataset, t_true: SieveOperator, r_true: FunctionHandle,
               epsilons: Sequence[float] = (0.2, 0.1, 0.05, 0.025), r_mode: str = "exact",
               r_shift: Optional[FunctionHandle] = None, direction: Optional[np.ndarray] = None,
               seed: int = 0) -> BiasProbeReport:
    """Exact bias psi(h) - E[psi_hat(h)] along a corruption path T + eps D.

    ``population`` must be a weighted (enumerated or quadrature) dataset so
    that weighted means are expectations. ``r_mode='misspecified'`` uses
    ``r_true + r_shift`` (a seeded unit-norm shift scaled by 0.5 by default).
    Each bias is also checked against the closed form
    E[{(T - T_hat)h}^2 + 2 (T - T_hat)h (r_hat - r0)]; the largest gap is
    reported. Nonpositive biases are left out of the slope fits.
    """
    if r_mode not in ("exact", "misspecified"):
        raise ValueError("r_mode must be 'exact' or 'misspecified'")
    if r_mode == "misspecified":
        if r_shift is None:
            v = np.random.default_rng(seed).standard_normal(r_true.basis.dimension)
            r_shift = FunctionHandle(r_true.basis, 0.5 * v / np.linalg.norm(v))
        r_hat = r_true + r_shift
    else:
        r_hat = r_true
    D = aligned_direction(h, t_true, r_true) if direction is None else np.asarray(direction, dtype=float)
    D = D / np.linalg.norm(D, 2)
    psi = projected_risk_plugin(h, population, t_true)
    Psi = t_true.output_basis.design(population.vq())
    th = Psi @ (t_true.matrix @ h.coeffs)
    dr = Psi @ (r_hat.coeffs - r_true.coeffs)
    deb, plug, gap = [], [], 0.0
    for eps in epsilons:
        t_hat = SieveOperator(t_true.matrix + eps * D, t_true.input_basis, t_true.output_basis)
        b = psi - debiased_risk(h, population, t_hat, r_hat)
        diff = th - Psi @ (t_hat.matrix @ h.coeffs)
        closed = population.mean(diff ** 2 + 2.0 * diff * dr)
        gap = max(gap, abs(b - closed))
        deb.append(float(b))
        plug.append(float(psi - projected_risk_plugin(h, population, t_hat)))

    def slope(vals):
        keep = [(e, v) for e, v in zip(epsilons, vals) if v > 0 and e > 0]
        excluded = len(vals) - len(keep)
        if len(keep) < 2:
            return float("nan"), float("nan"), excluded
        s, c = fit_loglog([e for e, _ in keep], [v for _, v in keep])
        return s, c, excluded

    ds, dc, dx = slope(deb)
    ps, pc, px = slope(plug)
    return BiasProbeReport(tuple(float(e) for e in epsilons), tuple(deb), tuple(plug), float(gap),
                           ds, dc, ps, pc, dx, px)


# --------------------------------------------------------------------------
# Rate sweeps
# --------------------------------------------------------------------------

LAMBDA_MODES = ("oracle", "cv", "fixed")
RECORD_FIELDS = ("n", "rep", "method", "lambda", "source_err", "proj_err", "op_err", "r_err", "runtime_ms")


@dataclass(frozen=True)
class SweepRecord:
    n: int
    rep: int
    method: str
    lam: float
    source_err: float
    proj_err: float
    op_err: float
    r_err: float
    runtime_ms: float = 0.0

    def row(self) -> list:
        return [str(self.n), str(self.rep), self.method] + [
            repr(float(v)) for v in (self.lam, self.source_err, self.proj_err, self.op_err, self.r_err, self.runtime_ms)
        ]

    def to_dict(self) -> dict:
        return dict(zip(RECORD_FIELDS, (self.n, self.rep, self.method, self.lam, self.source_err,
                                        self.proj_err, self.op_err, self.r_err, self.runtime_ms)))

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "SweepRecord":
        n, rep, method, *vals = row
        return cls(int(n), int(rep), method, *(float(v) for v in vals))


@dataclass(frozen=True)
class SweepConfig:
    """Series-NPIV sweep.

    ``dgp`` holds keyword arguments for :func:`make_series_dgp`.
    Corruption is ``eps(n) = corruption_scale * n^{-corruption_power}``
    added to the fitted operator (0 disables it). In oracle mode
    ``lam = lambda_scale * Delta^{1 / min(5, beta + 2)}`` with Delta built
    from measured nuisance errors and ``J / n_est``.
    """

    n_grid: tuple
    replications: int = 20
    dgp: dict = field(default_factory=dict)
    dimension: int = 5
    methods: tuple = METHODS
    lambda_mode: str = "oracle"
    lambda_value: float = 0.1
    lambda_scale: float = 1.5
    grid_size: int = 32
    corruption_mode: str = "random"
    corruption_scale: float = 0.0
    corruption_power: float = 0.25
    iterations: int = 2
    seed: int = 0
    threads: int = 1
    timing: bool = False

    def __post_init__(self):
        n = tuple(int(v) for v in self.n_grid)
        if not n or any(b <= a for a, b in zip(n, n[1:])) or n[0] < 12:
            raise ConfigError("n_grid must be strictly increasing with n >= 12")
        object.__setattr__(self, "n_grid", n)
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigError(f"lambda_mode must be one of {LAMBDA_MODES}")
        if any(m not in METHODS for m in self.methods):
            raise ConfigError(f"methods must be drawn from {METHODS}")
        if self.corruption_mode not in CORRUPTION_MODES:
            raise ConfigError(f"corruption_mode must be one of {CORRUPTION_MODES}")
        if self.lambda_mode == "fixed" and not self.lambda_value > 0:
            raise ConfigError("lambda_value must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def beta(self) -> float:
        return float(self.dgp.get("beta", 2.0))

    def epsilon(self, n: int) -> float:
        return float(self.corruption_scale * n ** (-self.corruption_power))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_grid"] = list(d["n_grid"])
        d["methods"] = list(d["methods"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known - {"schema_version"})
        if extra:
            raise ConfigError(f"unknown sweep config key {extra[0]!r}")
        if "n_grid" not in d:
            raise ConfigError("sweep config missing key 'n_grid'")
        d = {k: v for k, v in d.items() if k in known}
        for k in ("n_grid", "methods"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def oracle_lambda(delta: float, beta: float, scale: float = 1.5) -> float:
    return float(scale * delta ** (1.0 / min(5.0, beta + 2.0)))


def measured_delta(dimension: int, n_est: int, op_err: float, r_err: float) -> float:
    """max{J / n, ||T - T_hat||^4, ||T - T_hat||^2 ||r_hat - r0||^2}."""
    return max(dimension / n_est, op_err ** 4, op_err ** 2 * r_err ** 2)


def _replication(config: SweepConfig, dgp, truth: Truth, n: int, rep: int) -> list:
    ss = np.random.default_rng(np.random.SeedSequence([config.seed, n, rep]))
    s_data, s_split, s_corrupt = (int(v) for v in ss.integers(0, 2 ** 63 - 1, size=3))
    basis = cosine(config.dimension)
    data = sample_npiv(dgp, n, s_data)
    t_true = true_sieve_operator_npiv(dgp, basis, basis)
    r_true = true_r_npiv(dgp, basis)
    if config.lambda_mode == "cv":
        plan = split(n, (1 / 3, 1 / 3, 1 / 3), s_split)
        est, nui, valid = (data.take(plan[i]) for i in range(3))
    else:
        plan = split(n, (0.5, 0.5), s_split)
        est, nui, valid = data.take(plan[0]), data.take(plan[1]), None
    nf = fit_nuisances(nui, basis, basis)
    eps = config.epsilon(n)
    if eps > 0:
        nf = NuisanceFit(corrupt_operator(nf.t_hat, eps, config.corruption_mode, s_corrupt),
                         nf.r_hat, nf.ridge, nf.n_used, nf.condition_number)
    op_err = operator_norm_diff(nf.t_hat, t_true)
    r_err = (nf.r_hat - r_true).norm()
    out = []
    for method in config.methods:
        t0 = time.perf_counter()
        obj = build_objective(est, nf, method)
        lam, h = float("nan"), None
        try:
            if config.lambda_mode == "fixed":
                lam = config.lambda_value
                h = fit_objective(obj, FitConfig(lam, config.iterations, method=method)).h_hat
            elif config.lambda_mode == "oracle":
                lam = oracle_lambda(measured_delta(config.dimension, est.n, op_err, r_err),
                                    config.beta, config.lambda_scale)
                h = fit_objective(obj, FitConfig(lam, config.iterations, method=method)).h_hat
            else:
                grid = make_grid(est.n, default_proxy(est.n, config.dimension), 0.01,
                                 min(est.n, config.grid_size)).values
                fits = []
                for g in grid:
                    try:
                        fits.append((g, fit_objective(obj, FitConfig(float(g), config.iterations, method=method)).h_hat))
                    except NumericalError:
                        pass
                if fits:
                    j, _ = cv_select([f for _, f in fits], valid, nf.t_hat, nf.r_hat)
                    lam, h = fits[j]
        except NumericalError:
            h = None
        ms = (time.perf_counter() - t0) * 1e3 if config.timing else 0.0
        if h is None:
            src = prj = float("nan")
        else:
            src, prj = truth.source_error(h), truth.projected_error(h)
        out.append(SweepRecord(n, rep, method, float(lam), src, prj, op_err, r_err, ms))
    return out


@dataclass(frozen=True)
class SweepResult:
    records: tuple
    medians: dict
    slopes: dict
    predicted: dict

    def to_dict(self) -> dict:
        return {"medians": self.medians, "slopes": self.slopes, "predicted": self.predicted}


def _median(values) -> float:
    """Median with failures (NaN) counted as +inf."""
    v = np.asarray(values, dtype=float)
    return float(np.median(np.where(np.isnan(v), np.inf, v)))


def rate_sweep(config: SweepConfig) -> SweepResult:
    """Run every (n, replication) cell; summarize medians and log-log slopes.

    Failed fits are recorded with NaN errors. Replications are independent
    (per-cell seeds from (seed, n, rep)), so thread scheduling cannot change
    the output.
    """
    dgp = make_series_dgp(**config.dgp)
    truth = npiv_truth(dgp)
    cells = [(n, rep) for n in config.n_grid for rep in range(config.replications)]
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            chunks = list(pool.map(lambda c: _replication(config, dgp, truth, *c), cells))
    else:
        chunks = [_replication(config, dgp, truth, *c) for c in cells]
    order = {m: i for i, m in enumerate(config.methods)}
    records = tuple(sorted((r for ch in chunks for r in ch), key=lambda r: (r.n, r.rep, order[r.method])))

    medians, slopes = {}, {}
    for m in config.methods:
        rows = [r for r in records if r.method == m]
        medians[m] = {
            str(n): {
                "source_err": _median([r.source_err for r in rows if r.n == n]),
                "proj_err": _median([r.proj_err for r in rows if r.n == n]),
            }
            for n in config.n_grid
        }
        if len(config.n_grid) >= 2:
            src = [medians[m][str(n)]["source_err"] for n in config.n_grid]
            prj = [medians[m][str(n)]["proj_err"] for n in config.n_grid]
            ok = np.all(np.isfinite(src)) and np.all(np.isfinite(prj))
            slopes[m] = {
                "source": fit_loglog(config.n_grid, src)[0] if ok else float("nan"),
                "proj": fit_loglog(config.n_grid, prj)[0] if ok else float("nan"),
            }
    predicted = {}
    if len(config.n_grid) >= 2:
        deltas = []
        for n in config.n_grid:
            rows = [r for r in records if r.n == n and r.method == config.methods[0]]
            n_est = n // 3 if config.lambda_mode == "cv" else n - n // 2
            deltas.append(np.median([measured_delta(config.dimension, n_est, r.op_err, r.r_err) for r in rows]))
        d_slope = fit_loglog(config.n_grid, deltas)[0]
        b = config.beta
        predicted = {
            "delta": d_slope,
            "proj": d_slope * min(4.0, b + 1.0) / (2.0 * min(5.0, b + 2.0)),
            "source": d_slope * min(3.0, b) / (2.0 * min(5.0, b + 2.0)),
        }
    return SweepResult(records, medians, slopes, predicted)


def write_records(records: Sequence[SweepRecord], path=None, fmt: str = "csv") -> str:
    """Serialize records (CSV with a fixed header, or JSON). Returns the text."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow(r.row())
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps({"schema_version": SCHEMA_VERSION, "records": [r.to_dict() for r in records]},
                          indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError("format must be 'csv' or 'json'")
    if path is not None:
        Path(path).write_text(text)
    return text


def read_records(path, fmt: Optional[str] = None) -> list:
    text = Path(path).read_text()
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    if fmt == "json":
        out = []
        for d in json.loads(text)["records"]:
            out.append(SweepRecord(int(d["n"]), int(d["rep"]), d["method"], *(
                float(d[k]) for k in RECORD_FIELDS[3:])))
        return out
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != RECORD_FIELDS:
        raise ValueError("unexpected record header")
    return [SweepRecord.from_row(r) for r in rows[1:] if r]


def report(records: Sequence[SweepRecord], fmt: str = "csv", path=None) -> str:
    return write_records(records, path, fmt)


# --------------------------------------------------------------------------
# Alpha-error condition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AlphaProbeResult:
    alpha: Optional[float]
    feasible: bool
    margins: tuple
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _coeffs(e, dim: Optional[int] = None) -> np.ndarray:
    c = np.asarray(e.coeffs if isinstance(e, FunctionHandle) else e, dtype=float)
    if dim is not None and c.size < dim:
        c = np.concatenate([c, np.zeros(dim - c.size)])
    return c


def alpha_margins(errors, mu, projected_sq, alpha: float) -> np.ndarray:
    """||T e||^2 - sum_i mu_i^alpha <e, phi_i>^2 for each error (>= 0 means satisfied)."""
    out = []
    for e, m, p in zip(errors, mu, projected_sq):
        c = _coeffs(e)
        m = np.asarray(m, dtype=float)[: c.size]
        out.append(float(p - np.sum(m ** alpha * c[: m.size] ** 2)))
    return np.asarray(out)


def smallest_feasible_alpha(errors, mu, projected_sq, grid, tol: float = 1e-12) -> AlphaProbeResult:
    """General form: first alpha on ``grid`` (sorted) where every margin is >= -tol."""
    grid = np.sort(np.asarray(grid, dtype=float))
    for a in grid:
        m = alpha_margins(errors, mu, projected_sq, a)
        if np.all(m >= -tol * np.maximum(1.0, np.abs(projected_sq))):
            return AlphaProbeResult(float(a), True, tuple(float(v) for v in m))
    return AlphaProbeResult(None, False, (), "alpha-condition not satisfied on tested grid")


def alpha_probe(errors, sys: SingularSystem, beta: float, grid=None) -> AlphaProbeResult:
    """Smallest alpha >= 2/beta with sum_i s~_i^{alpha beta} <e, phi_i>^2 <= ||T~ e||^2 for all errors.

    ``s~`` are the singular values divided by the largest and ``T~`` is T
    with the same normalization, which fixes the constant of the ``<~``
    comparison with ||T e||^2 at 1 / s_max^2. Errors are FunctionHandles or
    coefficient vectors in the phi-basis (zero-padded).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    lo = 2.0 / beta
    grid = lo + np.linspace(0.0, 20.0, 801) if grid is None else np.asarray(grid, dtype=float)
    grid = grid[grid >= lo - 1e-15]
    dim = sys.input_basis.dimension
    s = np.zeros(dim)
    s[: sys.rank] = sys.sigmas
    st = s / s.max()
    cs = [_coeffs(e, dim) for e in errors]
    mu = [st ** beta] * len(cs)
    proj = [float(np.sum((st * c) ** 2)) for c in cs]
    return smallest_feasible_alpha(cs, mu, proj, grid)


def example_mu(n: int, m: int) -> np.ndarray:
    """mu_i = 1 / (n^{0.1} i^3), i = 1..m."""
    i = np.arange(1, m + 1, dtype=float)
    return 1.0 / (n ** 0.1 * i ** 3)


def example_bound(n: int, alpha: float, e) -> float:
    """Cauchy-Schwarz bound ``n^{-alpha/10} (pi^3 / sqrt(945)) ||e||^2``.

    Valid for alpha >= 1, where sum_i i^{-6 alpha} <= zeta(6) = pi^6 / 945.
    """
    if alpha < 1:
        raise ValueError("the zeta(6) bound needs alpha >= 1")
    c = _coeffs(e)
    return float(n ** (-alpha / 10.0) * ZETA6_SQRT * np.sum(c ** 2))
