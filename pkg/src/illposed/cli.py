"""Batch command-line interface.

Every subcommand is seed-deterministic. Logs go to stderr; stdout carries
only the path of the written result (``rates`` prints the exponent).
Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .core import BasisSpec, cosine, parse_basis
from .dgp import (
    DiscreteProximalDgp,
    Dataset,
    default_proximal_dgp,
    g_formula,
    make_series_dgp,
    read_roles,
    sample_npiv,
    sample_proximal,
    true_bridges,
    write_roles,
)
from .errors import ConfigError, NumericalError
from .estimators import FitConfig, debiased_risk, fit, projected_risk_plugin
from .experiments import SweepConfig, rate_sweep, write_records
from .functionals import (
    REGIMES,
    FunctionalConfig,
    as_fraction,
    bind,
    full_pipeline_functional,
    h_equation,
    infer_proximal_bases,
    proximal_functional,
    q_equation,
    rate_requirement,
)
from .nuisance import fit_nuisances
from .selection import CvConfig, fit_cv_pipeline, split

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("illposed")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _dump(obj: dict, path) -> None:
    Path(path).write_text(json.dumps({"schema_version": SCHEMA_VERSION, **obj}, indent=2, sort_keys=True) + "\n")


def _load_json(path) -> dict:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


def _seed(value: str) -> int:
    s = int(value)
    if not 0 <= s < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return s


def _basis(text: Optional[str], default: BasisSpec) -> BasisSpec:
    if text is None:
        return default
    try:
        return parse_basis(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

SERIES_KEYS = ("m", "scale", "decay", "rate", "beta", "w", "noise_sd", "endogeneity")


def cmd_simulate(args) -> str:
    cfg = _load_json(args.config) if args.config else {}
    truth_path = args.truth or str(args.out) + ".truth.json"
    if args.dgp == "series-npiv":
        bad = sorted(set(cfg) - set(SERIES_KEYS))
        if bad:
            raise ConfigError(f"unknown series-npiv config key {bad[0]!r}")
        try:
            dgp = make_series_dgp(**cfg)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        data = sample_npiv(dgp, args.n, args.seed)
        truth = {"design": "series-npiv", "config": cfg, "sigmas": [float(v) for v in dgp.sigmas],
                 "h0": [float(v) for v in dgp.h0.coeffs], "basis": dgp.basis.to_dict(),
                 "noise_sd": dgp.noise_sd, "endogeneity": dgp.endogeneity}
    else:
        dgp = DiscreteProximalDgp.from_dict(cfg) if cfg else default_proximal_dgp(args.a)
        if not cfg:
            cfg = dgp.to_dict()
        raw = sample_proximal(dgp, args.n, args.seed)
        f = proximal_functional(dgp.a)
        data = bind(bind(raw, q_equation(f)), h_equation(f))
        h0, q0 = true_bridges(dgp)
        truth = {"design": "discrete-proximal", "config": dgp.to_dict(), "psi0": g_formula(dgp),
                 "h0": [float(v) for v in h0.coeffs], "q0": [float(v) for v in q0.coeffs],
                 "basis_h": h0.basis.to_dict(), "basis_q": q0.basis.to_dict()}
    data.to_csv(args.out)
    write_roles(data.roles, args.roles)
    _dump(truth, truth_path)
    log.info("wrote %d rows to %s", data.n, args.out)
    return str(args.out)


def _read_data(args) -> Dataset:
    roles = read_roles(args.roles)
    return Dataset.from_csv(args.data, roles)


def cmd_fit(args) -> str:
    if not args.lam > 0:
        raise ConfigError("λ must be positive (--lambda)")
    if args.iters < 1:
        raise ConfigError("--iters must be >= 1")
    if args.folds not in (2, 3):
        raise ConfigError("--folds must be 2 or 3")
    data = _read_data(args)
    bh = _basis(args.basis_h, cosine(5))
    bq = _basis(args.basis_q, bh)
    plan = split(data.n, (1.0 / args.folds,) * args.folds, args.seed)
    est, nui = data.take(plan[0]), data.take(plan[1])
    nf = fit_nuisances(nui, bh, bq)
    res = fit(est, nf, FitConfig(args.lam, args.iters, method=args.method))
    out = res.to_dict()
    out.update({
        "projected_risk_plugin": projected_risk_plugin(res.h_hat, est, nf.t_hat),
        "debiased_risk": debiased_risk(res.h_hat, est, nf.t_hat, nf.r_hat),
        "fold_sizes": list(plan.sizes),
        "seed": args.seed,
        "nuisance": nf.to_dict(),
    })
    _dump(out, args.out)
    return str(args.out)


def cmd_cv(args) -> str:
    data = _read_data(args)
    g = _load_json(args.grid_config) if args.grid_config else {}
    known = {"lambdas", "delta_proxy", "epsilon", "grid_size", "fractions", "iterations", "basis_h", "basis_q"}
    bad = sorted(set(g) - known - {"schema_version"})
    if bad:
        raise ConfigError(f"unknown grid config key {bad[0]!r}")
    bh = _basis(g.get("basis_h", args.basis_h), cosine(5))
    bq = _basis(g.get("basis_q", args.basis_q), bh)
    cfg = CvConfig(
        bh, bq,
        lambdas=tuple(g["lambdas"]) if "lambdas" in g else None,
        delta_proxy=g.get("delta_proxy"),
        epsilon=float(g.get("epsilon", 0.01)),
        grid_size=g.get("grid_size", 64),
        fractions=tuple(g.get("fractions", (1 / 3, 1 / 3, 1 / 3))),
        iterations=int(g.get("iterations", 2)),
        seed=args.seed,
    )
    _, report = fit_cv_pipeline(data, cfg)
    _dump(report, args.out)
    return str(args.out)


def cmd_functional(args) -> str:
    if args.design != "proximal":
        raise ConfigError("only --design proximal is supported")
    if args.a not in (0, 1):
        raise ConfigError("--a must be 0 or 1")
    data = Dataset.from_csv(args.data)
    for col in ("Z", "W", "A", "Y"):
        if col not in data.columns:
            raise ConfigError(f"data is missing column {col!r}")
    bw, bza = infer_proximal_bases(data, args.n_z, args.n_w)
    cfg = FunctionalConfig(proximal_functional(args.a), bw, bza, folds=args.folds, seed=args.seed)
    _, report = full_pipeline_functional(data, cfg)
    report["a"] = args.a
    _dump(report, args.out)
    return str(args.out)


def cmd_sweep(args) -> str:
    d = _load_json(args.config)
    if args.threads is not None:
        d["threads"] = args.threads
    if args.timing:
        d["timing"] = True
    d.setdefault("seed", args.seed)
    cfg = SweepConfig.from_dict(d)
    res = rate_sweep(cfg)
    write_records(res.records, args.out, "json" if str(args.out).endswith(".json") else "csv")
    if args.summary:
        _dump({"config": cfg.to_dict(), **res.to_dict()}, args.summary)
    return str(args.out)


def cmd_rates(args) -> str:
    vals = [as_fraction(v) for v in (args.beta_h, args.beta_q, args.alpha_h, args.alpha_q)]
    log.info("using beta_h=%s beta_q=%s alpha_h=%s alpha_q=%s", *vals)
    req = rate_requirement(*vals, regime=args.regime)
    if not req.feasible:
        log.warning("%s", req.message)
    return f"{req.exponent} {float(req.exponent):.6g}"


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="illposed", description="Debiased estimation for ill-posed conditional moment restrictions.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="sample a synthetic dataset")
    s.add_argument("--dgp", choices=("series-npiv", "discrete-proximal"), required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--roles", required=True)
    s.add_argument("--truth", help="truth sidecar path (default: OUT.truth.json)")
    s.add_argument("--config", help="JSON design parameters")
    s.add_argument("--a", type=int, default=1, help="treatment level (discrete-proximal)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit one estimator")
    s.add_argument("--data", required=True)
    s.add_argument("--roles", required=True)
    s.add_argument("--method", choices=("baseline", "debiased"), default="debiased")
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--iters", type=int, default=2)
    s.add_argument("--folds", type=int, default=2, help="equal folds; fold 1 estimates, fold 2 fits nuisances")
    s.add_argument("--basis-h")
    s.add_argument("--basis-q")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("cv", help="cross-validated lambda selection")
    s.add_argument("--data", required=True)
    s.add_argument("--roles", required=True)
    s.add_argument("--grid-config")
    s.add_argument("--basis-h")
    s.add_argument("--basis-q")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("functional", help="cross-fitted functional estimate")
    s.add_argument("--data", required=True)
    s.add_argument("--design", default="proximal")
    s.add_argument("--a", type=int, default=1)
    s.add_argument("--folds", type=int, default=2)
    s.add_argument("--n-z", type=int)
    s.add_argument("--n-w", type=int)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_functional)

    s = sub.add_parser("sweep", help="Monte Carlo rate sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--summary")
    s.add_argument("--threads", type=int)
    s.add_argument("--timing", action="store_true", help="record wall-clock runtimes (breaks byte-identity)")
    s.add_argument("--seed", type=_seed, default=0)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("rates", help="root-n rate requirement")
    s.add_argument("beta_h")
    s.add_argument("beta_q")
    s.add_argument("alpha_h")
    s.add_argument("alpha_q")
    s.add_argument("--regime", choices=REGIMES, default="corollary2")
    s.set_defaults(func=cmd_rates)
    return p


def _configure_logging() -> None:
    # bind to the current stderr on every call so repeated in-process runs log correctly
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.WARNING)
    log.propagate = False


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        print(args.func(args))
        return EXIT_OK
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError) as exc:
        log.error("%s", exc.args[0] if exc.args else exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
