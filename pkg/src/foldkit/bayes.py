"""Posterior sampling with the toy matrix index as a discrete nuisance
parameter, Bayes factors, posterior Bayes factors and the posterior
distribution of the likelihood ratio (PLR)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .likelihood import CompositeHypothesis, LikelihoodMachine, _poisson_rows, log_mean_exp

__all__ = [
    "PosteriorChain",
    "BayesFactor",
    "sample_posterior",
    "bayes_factor",
    "posterior_bayes_factor",
    "plr",
    "flat_log_prior",
]

MAX_START_ATTEMPTS = 1000


def flat_log_prior(hyp: CompositeHypothesis) -> Callable:
    """Improper flat prior over the parameter box of ``hyp``."""

    def log_prior(theta):
        return 0.0 if hyp.contains(theta) else -math.inf

    return log_prior


@dataclass
class PosteriorChain:
    thetas: np.ndarray
    toys: np.ndarray
    log_post: np.ndarray
    acceptance_rate: float
    seed: int
    toy_acceptance_rate: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.toys.size

    def thinned(self, step: int) -> "PosteriorChain":
        return PosteriorChain(
            self.thetas[::step], self.toys[::step], self.log_post[::step],
            self.acceptance_rate, self.seed, self.toy_acceptance_rate, dict(self.meta),
        )

    def split_half_means(self):
        """Parameter means of the first and second half of the chain."""
        half = len(self) // 2
        return self.thetas[:half].mean(axis=0), self.thetas[half:].mean(axis=0)


def _reflect(x, lo, hi):
    """Fold a proposal back into ``[lo, hi]`` by mirroring at the bounds."""
    for _ in range(64):
        below, above = x < lo, x > hi
        if not (below.any() or above.any()):
            return x
        x = np.where(below, 2 * lo - x, x)
        x = np.where(above, 2 * hi - x, x)
    return np.clip(x, lo, hi)


def sample_posterior(
    lm: LikelihoodMachine,
    hyp: CompositeHypothesis,
    log_prior: Callable,
    n_samples: int,
    n_burn: int,
    step_scales,
    seed: int,
    start=None,
    tune: bool = False,
) -> PosteriorChain:
    """Random-walk Metropolis-within-Gibbs sampler.

    Each iteration proposes a Gaussian step in the parameters (mirrored at
    the bounds) and then a uniformly drawn toy index. The target is
    ``log L^t(mu(theta)) + log_prior(theta)``. With ``tune=True`` the step
    scales are first adjusted towards 20-40% acceptance.
    """
    step = np.broadcast_to(np.asarray(step_scales, dtype=float), (hyp.dim,)).copy()
    if np.any(step <= 0):
        raise ValueError("step scales must be positive")
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in hyp.bounds])
    hi = np.array([b[1] for b in hyp.bounds])
    fold = lm.folder(hyp)
    data = lm.data
    n_toys = lm.matrices.n_toys

    def toy_ll(theta):
        return _poisson_rows(data, fold(theta))

    theta = _initial_point(hyp, lm, log_prior, rng, start)
    lp = float(log_prior(theta))
    ll = toy_ll(theta)
    t = int(rng.integers(n_toys))

    if tune:
        step = _tune(rng, theta, lp, ll, t, step, lo, hi, toy_ll, log_prior, n_toys)

    total = n_burn + n_samples
    thetas = np.empty((n_samples, hyp.dim))
    toys = np.empty(n_samples, dtype=np.int64)
    log_post = np.empty(n_samples)
    accepted = toy_accepted = 0
    kicks = rng.normal(size=(total, hyp.dim)) * step
    uniforms = rng.random((total, 2))
    toy_proposals = rng.integers(n_toys, size=total)
    for k in range(total):
        proposal = _reflect(theta + kicks[k], lo, hi)
        lp_new = float(log_prior(proposal))
        if lp_new > -math.inf:
            ll_new = toy_ll(proposal)
            delta = ll_new[t] + lp_new - ll[t] - lp
            if math.log(uniforms[k, 0] or 1e-300) < delta:
                theta, lp, ll = proposal, lp_new, ll_new
                accepted += k >= n_burn
        t_new = int(toy_proposals[k])
        if math.log(uniforms[k, 1] or 1e-300) < ll[t_new] - ll[t]:
            toy_accepted += (k >= n_burn) and t_new != t
            t = t_new
        if k >= n_burn:
            s = k - n_burn
            thetas[s] = theta
            toys[s] = t
            log_post[s] = ll[t] + lp
    return PosteriorChain(
        thetas, toys, log_post,
        accepted / max(n_samples, 1), seed, toy_accepted / max(n_samples, 1),
        {"step_scales": step.tolist(), "toy_index": "sampled independently per chain"},
    )


def _initial_point(hyp, lm, log_prior, rng, start):
    candidates = [] if start is None else [np.asarray(start, dtype=float)]
    candidates.append(hyp.guess(lm))
    for theta in candidates:
        if math.isfinite(float(log_prior(theta))):
            return theta
    lo = np.array([b[0] for b in hyp.bounds])
    hi = np.array([b[1] for b in hyp.bounds])
    guess = hyp.guess(lm)
    for _ in range(MAX_START_ATTEMPTS):
        width = np.maximum(np.abs(guess), 1.0)
        theta = _reflect(guess + width * rng.normal(size=hyp.dim), lo, hi)
        if math.isfinite(float(log_prior(theta))):
            return theta
    raise ValueError("prior has no mass at any tried starting point")


def _tune(rng, theta, lp, ll, t, step, lo, hi, toy_ll, log_prior, n_toys, batch=200, rounds=30):
    for _ in range(rounds):
        acc = 0
        for _ in range(batch):
            proposal = _reflect(theta + step * rng.normal(size=theta.size), lo, hi)
            lp_new = float(log_prior(proposal))
            if lp_new > -math.inf:
                ll_new = toy_ll(proposal)
                if math.log(rng.random() or 1e-300) < ll_new[t] + lp_new - ll[t] - lp:
                    theta, lp, ll = proposal, lp_new, ll_new
                    acc += 1
        rate = acc / batch
        if 0.2 <= rate <= 0.4:
            break
        step = step * (1.5 if rate > 0.4 else 0.6)
    return step


class BayesFactor(NamedTuple):
    bayes_factor: float
    posterior_odds: float
    log_bayes_factor: float


def _log_mean_likelihood(lm, hyp, thetas) -> float:
    fold = lm.folder(hyp)
    values = np.array([float(log_mean_exp(_poisson_rows(lm.data, fold(th)))) for th in thetas])
    if not np.any(np.isfinite(values)):
        raise ValueError("all draws have zero likelihood")
    return float(log_mean_exp(values))


def bayes_factor(
    lm: LikelihoodMachine,
    hyp0: CompositeHypothesis,
    prior_sampler0: Callable,
    hyp1: CompositeHypothesis,
    prior_sampler1: Callable,
    n_draws: int,
    seed: int,
    prior_odds: float = 1.0,
) -> BayesFactor:
    """Ratio of prior-averaged marginal likelihoods.

    ``prior_sampler(rng, n)`` must return ``n`` parameter vectors. Both
    samplers get generators with the same seed, so identical hypotheses and
    priors give exactly ``B = 1``.
    """
    if n_draws < 1000:
        raise ValueError("need at least 1000 prior draws")
    draws0 = np.asarray(prior_sampler0(np.random.default_rng(seed), n_draws), dtype=float).reshape(n_draws, -1)
    draws1 = np.asarray(prior_sampler1(np.random.default_rng(seed), n_draws), dtype=float).reshape(n_draws, -1)
    log_b = _log_mean_likelihood(lm, hyp0, draws0) - _log_mean_likelihood(lm, hyp1, draws1)
    b = math.exp(log_b) if log_b < 709 else math.inf
    return BayesFactor(b, b * prior_odds, log_b)


def _chain_log_likelihoods(lm, chain: PosteriorChain, hyp) -> np.ndarray:
    if len(chain) == 0:
        raise ValueError("empty chain")
    fold = lm.folder(hyp)
    out = np.empty(len(chain))
    for k, (theta, t) in enumerate(zip(chain.thetas, chain.toys)):
        nu = fold(theta)[t]
        out[k] = _poisson_rows(lm.data, nu[None, :])[0]
    return out


def posterior_bayes_factor(
    lm: LikelihoodMachine,
    chain0: PosteriorChain,
    hyp0: CompositeHypothesis,
    chain1: PosteriorChain,
    hyp1: CompositeHypothesis,
) -> float:
    """Ratio of posterior-averaged likelihoods, each sample at its own toy."""
    l0 = _chain_log_likelihoods(lm, chain0, hyp0)
    l1 = _chain_log_likelihoods(lm, chain1, hyp1)
    return math.exp(float(log_mean_exp(l0)) - float(log_mean_exp(l1)))


def plr(
    lm: LikelihoodMachine,
    chain0: PosteriorChain,
    hyp0: CompositeHypothesis,
    chain1: PosteriorChain,
    hyp1: CompositeHypothesis,
    zeta: float,
) -> float:
    """Posterior probability that ``L0 / L1 <= zeta``, pairing samples by index."""
    n = min(len(chain0), len(chain1))
    if n == 0:
        raise ValueError("empty chain")
    l0 = _chain_log_likelihoods(lm, _head(chain0, n), hyp0)
    l1 = _chain_log_likelihoods(lm, _head(chain1, n), hyp1)
    with np.errstate(invalid="ignore"):
        diff = l0 - l1
    diff = np.where(np.isnan(diff), 0.0, diff)
    if zeta <= 0:
        return float(np.mean(np.isneginf(diff)))
    return float(np.mean(diff <= math.log(zeta)))


def _head(chain: PosteriorChain, n: int) -> PosteriorChain:
    return PosteriorChain(chain.thetas[:n], chain.toys[:n], chain.log_post[:n], chain.acceptance_rate, chain.seed)
