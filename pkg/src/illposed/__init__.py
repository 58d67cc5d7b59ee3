"""Debiased estimation of ill-posed conditional moment restrictions.

Modules
-------
core        sieve bases, operators, Picard inversion, filter factors, complexity
dgp         synthetic designs with known truth
nuisance    sieve least-squares estimates of T and r
estimators  baseline and debiased iterated Tikhonov
selection   lambda grids, sample splits, cross-validated selection
functionals linear functionals, mixed bias, rate calculator, proximal adapter
experiments Monte Carlo probes and rate sweeps
cli         batch command-line entry point
"""

__version__ = "0.1.0"
