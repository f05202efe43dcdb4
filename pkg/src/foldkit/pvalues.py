"""Toy Monte Carlo p-values and confidence scans.

All p-values use the add-one estimator ``(k + 1) / (N + 1)`` where ``k``
counts replicas whose statistic is lower than or equal to the observed one.
Every replica draws from its own generator seeded with ``(seed, index)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .likelihood import (
    CompositeHypothesis,
    FitConfig,
    FitResult,
    LikelihoodMachine,
    _poisson_rows,
    max_log_likelihood,
)
from .response import ResponseMatrixSet, check_testable

__all__ = [
    "UntestableError",
    "FitError",
    "PValue",
    "ScanRow",
    "ToyDataGenerator",
    "generate_toy_data",
    "likelihood_p_value",
    "max_likelihood_p_value",
    "max_likelihood_ratio_p_value",
    "confidence_scan",
    "MIN_REPLICAS",
]

MIN_REPLICAS = 100
# relative slack when comparing statistics, so that replicas reproducing the
# observed data count as ties despite optimiser round-off
TIE_TOLERANCE = 1e-9


class UntestableError(ValueError):
    """The hypothesis predicts events outside the simulated phase space."""


class FitError(RuntimeError):
    """No start of a likelihood fit reached a finite value."""


class PValue(NamedTuple):
    p: float
    n_replicas: int
    statistic_obs: float
    seed: int

    def to_dict(self) -> dict:
        return {"p": self.p, "n_replicas": self.n_replicas, "statistic_obs": self.statistic_obs, "seed": self.seed}


class ScanRow(NamedTuple):
    value: float
    p_value: float
    fit_logl: float
    status: str


def _require_testable(matrices: ResponseMatrixSet, mu):
    report = check_testable(matrices, mu)
    if not report.ok:
        raise UntestableError(f"hypothesis is not testable in truth bins {report.violations}")


def _replica_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_toy_data(matrices: ResponseMatrixSet, mu, count: int, seed: int, start: int = 0) -> np.ndarray:
    """Replica data sets, shape ``(count, n_reco)``.

    Each replica picks a toy matrix uniformly and draws Poisson counts from
    its folded expectation. Replica ``k`` only depends on ``(seed, start + k)``.
    """
    mu = np.asarray(mu, dtype=float)
    _require_testable(matrices, mu)
    nu = matrices.fold(mu)
    out = np.empty((count, matrices.n_reco), dtype=np.int64)
    for k in range(count):
        rng = _replica_rng(seed, start + k)
        t = rng.integers(matrices.n_toys)
        out[k] = rng.poisson(nu[t])
    return out


@dataclass
class ToyDataGenerator:
    """Stateful wrapper around :func:`generate_toy_data` that keeps counting."""

    matrices: ResponseMatrixSet
    seed: int
    counter: int = 0

    def generate(self, mu, count: int) -> np.ndarray:
        out = generate_toy_data(self.matrices, mu, count, self.seed, self.counter)
        self.counter += count
        return out


def _add_one(stats, observed: float) -> float:
    stats = np.asarray(stats, dtype=float)
    slack = TIE_TOLERANCE * max(1.0, abs(observed)) if np.isfinite(observed) else 0.0
    k = int(np.count_nonzero(stats <= observed + slack))
    return (k + 1) / (stats.size + 1)


def _check_replicas(n_replicas: int):
    if n_replicas < MIN_REPLICAS:
        raise ValueError(f"need at least {MIN_REPLICAS} replicas, got {n_replicas}")


def likelihood_p_value(lm: LikelihoodMachine, mu, n_replicas: int, seed: int) -> PValue:
    """Probability of replica data with a likelihood at most the observed one,
    assuming ``mu`` is true."""
    _check_replicas(n_replicas)
    mu = np.asarray(mu, dtype=float)
    observed = lm.log_likelihood(mu)
    data = generate_toy_data(lm.matrices, mu, n_replicas, seed)
    nu = lm.matrices.fold(mu)
    stats = lm.combine(_poisson_rows(data.astype(float), nu))
    return PValue(_add_one(stats, observed), n_replicas, observed, seed)


class _CachedFitter:
    """Replica fits keyed by the replica data; identical data -> identical fit."""

    def __init__(self, lm, hyp, warm, seed, config: FitConfig):
        self.lm = lm
        self.hyp = hyp
        self.warm = [np.asarray(warm, dtype=float)]
        self.seed = seed
        self.config = config
        self.cache = {}

    def __call__(self, data) -> float:
        key = data.tobytes()
        hit = self.cache.get(key)
        if hit is None:
            fit = max_log_likelihood(
                self.lm.with_data(data),
                self.hyp,
                starts=self.config.replica_starts,
                seed=self.seed,
                config=self.config,
                warm_starts=self.warm,
            )
            hit = self.cache[key] = fit.log_likelihood
        return hit


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _fit(lm, hyp, seed, config) -> FitResult:
    fit = max_log_likelihood(lm, hyp, seed=seed, config=config)
    if not np.isfinite(fit.log_likelihood):
        raise FitError("likelihood fit did not reach a finite value")
    return fit


def max_likelihood_p_value(
    lm: LikelihoodMachine,
    hyp: CompositeHypothesis,
    n_replicas: int,
    seed: int,
    fit_config: FitConfig = FitConfig(),
    threads: int = 1,
) -> PValue:
    """Plug-in p-value of the maximised likelihood of ``hyp``.

    Replicas are generated from the best fit point and fitted again.
    """
    _check_replicas(n_replicas)
    fit = _fit(lm, hyp, seed, fit_config)
    mu_hat = hyp.translate(fit.theta)
    data = generate_toy_data(lm.matrices, mu_hat, n_replicas, seed)
    fitter = _CachedFitter(lm, hyp, fit.theta, seed + 1, fit_config)
    stats = _map(fitter, list(data.astype(float)), threads)
    return PValue(_add_one(stats, fit.log_likelihood), n_replicas, fit.log_likelihood, seed)


def max_likelihood_ratio_p_value(
    lm: LikelihoodMachine,
    hyp0: CompositeHypothesis,
    hyp1: CompositeHypothesis,
    n_replicas: int,
    seed: int,
    fit_config: FitConfig = FitConfig(),
    threads: int = 1,
    generating_theta=None,
    fit0: Optional[FitResult] = None,
    fit1: Optional[FitResult] = None,
) -> PValue:
    """p-value of the ratio of maximised likelihoods of nested ``hyp0`` and
    enveloping ``hyp1``.

    Replicas are generated from the best fit of ``hyp0`` unless
    ``generating_theta`` (parameters of ``hyp0``) is given. Pre-computed fits
    to the observed data may be passed in.
    """
    _check_replicas(n_replicas)
    fit0 = fit0 or _fit(lm, hyp0, seed, fit_config)
    same = hyp0 is hyp1
    fit1 = fit0 if same else (fit1 or _fit(lm, hyp1, seed, fit_config))
    observed = fit0.log_likelihood - fit1.log_likelihood
    theta_gen = fit0.theta if generating_theta is None else np.asarray(generating_theta, dtype=float)
    data = generate_toy_data(lm.matrices, hyp0.translate(theta_gen), n_replicas, seed)
    if same:
        return PValue(_add_one(np.zeros(n_replicas), 0.0), n_replicas, 0.0, seed)
    fitter0 = _CachedFitter(lm, hyp0, theta_gen, seed + 1, fit_config)
    fitter1 = _CachedFitter(lm, hyp1, fit1.theta, seed + 2, fit_config)

    def statistic(d):
        return fitter0(d) - fitter1(d)

    stats = _map(statistic, list(data.astype(float)), threads)
    return PValue(_add_one(stats, observed), n_replicas, observed, seed)


def confidence_scan(
    lm: LikelihoodMachine,
    hyp: CompositeHypothesis,
    param_index: int,
    grid: Sequence[float],
    n_replicas: int,
    seed: int,
    fit_config: FitConfig = FitConfig(),
    threads: int = 1,
    nuisance_grid: Optional[Sequence] = None,
) -> List[ScanRow]:
    """Likelihood-ratio p-value of each fixed value of one parameter.

    For every grid value the parameter is fixed and the resulting nested
    hypothesis is compared with the free one (profile plug-in). With
    ``nuisance_grid`` (points in the remaining parameters), replicas are
    generated at every nuisance point instead and the largest p-value is
    kept (supremum over the grid).
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    lo, hi = hyp.bounds[param_index]
    for v in grid:
        if not lo <= v <= hi:
            raise ValueError(f"grid value {v} outside bounds ({lo}, {hi})")
    fit1 = _fit(lm, hyp, seed, fit_config)
    rows = []
    for value in grid:
        nested = hyp.fix(param_index, float(value))
        fit0 = max_log_likelihood(lm, nested, seed=seed, config=fit_config)
        points = [fit0.theta] if nuisance_grid is None else [np.asarray(p, dtype=float) for p in nuisance_grid]
        p_best = None
        for theta in points:
            mu = nested.translate(theta)
            if not check_testable(lm.matrices, mu).ok:
                continue
            p = max_likelihood_ratio_p_value(
                lm, nested, hyp, n_replicas, seed, fit_config, threads,
                generating_theta=theta, fit0=fit0, fit1=fit1,
            ).p
            p_best = p if p_best is None else max(p_best, p)
        if p_best is None:
            rows.append(ScanRow(float(value), float("nan"), fit0.log_likelihood, "untestable"))
        else:
            rows.append(ScanRow(float(value), p_best, fit0.log_likelihood, "ok"))
    return rows


def interval_from_scan(rows: Sequence[ScanRow], alpha: float):
    """Smallest and largest accepted grid value (p >= alpha), or ``None``."""
    accepted = [r.value for r in rows if r.status == "ok" and r.p_value >= alpha]
    if not accepted:
        return None
    return min(accepted), max(accepted)
