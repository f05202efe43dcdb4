"""Poisson likelihoods of truth-space hypotheses folded through toy matrices.

The marginal likelihood averages the multi-bin Poisson probability over all
toy matrices, the profile likelihood takes the best toy.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .response import ResponseMatrixSet

__all__ = [
    "HypothesisError",
    "LikelihoodMachine",
    "CompositeHypothesis",
    "TemplateHypothesis",
    "FitConfig",
    "FitResult",
    "poisson_log_likelihood",
    "log_mean_exp",
    "max_log_likelihood",
    "saturated_log_likelihood",
    "saturation_reachable",
    "likelihood_ratio",
]

MODES = ("marginal", "profile")


class HypothesisError(ValueError):
    """A hypothesis broke its contract (e.g. negative truth expectations)."""


def poisson_log_likelihood(n, nu) -> float:
    """``sum_i n_i ln(nu_i) - nu_i - ln(n_i!)`` with ``0 ln 0 = 0``."""
    n = np.asarray(n, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if n.shape != nu.shape:
        raise ValueError(f"length mismatch: {n.shape} vs {nu.shape}")
    if np.any(nu < 0):
        raise ValueError("expectation values must be non-negative")
    return float(_poisson_rows(n, nu[None, :])[0])


def _poisson_rows(n: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Log-likelihood of data ``n`` (..., r) for each row of ``nu`` (T, r)."""
    zero = nu == 0
    with np.errstate(divide="ignore"):
        lognu = np.where(zero, 0.0, np.log(np.where(zero, 1.0, nu)))
    ll = n @ lognu.T - nu.sum(axis=1) - gammaln(n + 1.0).sum(axis=-1)[..., None]
    if zero.any():
        impossible = (n > 0).astype(float) @ zero.T.astype(float) > 0
        ll = np.where(impossible, -np.inf, ll)
    return ll


def log_mean_exp(values, axis=-1) -> np.ndarray:
    """``log(mean(exp(values)))`` without under- or overflow."""
    values = np.asarray(values, dtype=float)
    top = np.max(values, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.mean(np.exp(values - safe), axis=axis, keepdims=True)) + safe
    out = np.where(np.isneginf(top), -np.inf, out)
    return np.squeeze(out, axis=axis)


class LikelihoodMachine:
    """Observed reco counts paired with a set of toy response matrices."""

    def __init__(self, data, matrices, mode: str = "marginal"):
        if not isinstance(matrices, ResponseMatrixSet):
            matrices = ResponseMatrixSet(np.asarray(matrices, dtype=float))
        data = np.asarray(data)
        if data.shape != (matrices.n_reco,):
            raise ValueError(f"data must have length {matrices.n_reco}, got {data.shape}")
        if np.any(data < 0) or np.any(data != np.round(data)):
            raise ValueError("data must be non-negative integer counts")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.data = data.astype(float)
        self.data.setflags(write=False)
        self.matrices = matrices
        self.mode = mode
        self._folders = {}

    def with_data(self, data) -> "LikelihoodMachine":
        """Same matrices and mode, different data (shares folding caches)."""
        lm = LikelihoodMachine.__new__(LikelihoodMachine)
        data = np.asarray(data, dtype=float)
        if data.shape != self.data.shape:
            raise ValueError("data length changed")
        lm.data = data
        lm.matrices = self.matrices
        lm.mode = self.mode
        lm._folders = self._folders
        return lm

    def combine(self, toy_log_likelihoods) -> np.ndarray:
        """Reduce per-toy log-likelihoods (last axis) according to the mode."""
        if self.mode == "profile":
            return np.max(toy_log_likelihoods, axis=-1)
        return log_mean_exp(toy_log_likelihoods, axis=-1)

    def toy_log_likelihoods(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if np.any(mu < 0):
            raise HypothesisError("truth expectations must be non-negative")
        return _poisson_rows(self.data, self.matrices.fold(mu))

    def log_likelihood(self, mu) -> float:
        return float(self.combine(self.toy_log_likelihoods(mu)))

    def folder(self, hyp: "CompositeHypothesis") -> Callable:
        """Function ``theta -> nu`` of shape (T, r), cached per hypothesis."""
        entry = self._folders.get(id(hyp))
        if entry is None or entry[0] is not hyp:
            entry = (hyp, hyp.make_folder(self.matrices))
            self._folders[id(hyp)] = entry
        return entry[1]

    def log_likelihood_theta(self, hyp: "CompositeHypothesis", theta) -> float:
        nu = self.folder(hyp)(np.asarray(theta, dtype=float))
        return float(self.combine(_poisson_rows(self.data, nu)))


class CompositeHypothesis:
    """Truth expectations ``mu(theta)`` over a box of allowed parameters.

    Parameters
    ----------
    translate:
        Maps a parameter vector to a truth vector over the retained truth bins.
    bounds:
        One ``(low, high)`` pair per parameter; either may be infinite.
    start:
        Optional default starting point for fits.
    """

    def __init__(self, translate: Callable, bounds: Sequence, start=None):
        self._translate = translate
        self.bounds = [(float(lo), float(hi)) for lo, hi in bounds]
        for lo, hi in self.bounds:
            if not lo <= hi:
                raise ValueError(f"invalid bounds ({lo}, {hi})")
        self.start = None if start is None else np.asarray(start, dtype=float)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def __call__(self, theta) -> np.ndarray:
        return self.translate(theta)

    def translate(self, theta) -> np.ndarray:
        mu = np.asarray(self._translate(np.asarray(theta, dtype=float)), dtype=float)
        if np.any(mu < 0):
            raise HypothesisError(f"hypothesis produced negative expectations at theta={theta}")
        return mu

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return all(lo <= v <= hi for v, (lo, hi) in zip(theta, self.bounds))

    def make_folder(self, matrices: ResponseMatrixSet) -> Callable:
        return lambda theta: matrices.fold(self.translate(theta))

    def guess(self, lm: LikelihoodMachine) -> np.ndarray:
        """A reasonable starting point inside the bounds."""
        if self.start is not None:
            return self.start.copy()
        out = []
        for lo, hi in self.bounds:
            if np.isfinite(lo) and np.isfinite(hi):
                out.append(0.5 * (lo + hi))
            elif np.isfinite(lo):
                out.append(lo + 1.0)
            elif np.isfinite(hi):
                out.append(hi - 1.0)
            else:
                out.append(0.0)
        return np.array(out)

    def fix(self, index: int, value: float) -> "CompositeHypothesis":
        """Nested hypothesis with parameter ``index`` held at ``value``."""
        lo, hi = self.bounds[index]
        if not lo <= value <= hi:
            raise ValueError(f"value {value} outside bounds ({lo}, {hi})")
        parent = self

        def translate(theta):
            return parent.translate(np.insert(theta, index, value))

        start = None if self.start is None else np.delete(self.start, index)
        return CompositeHypothesis(translate, self.bounds[:index] + self.bounds[index + 1 :], start)


class TemplateHypothesis(CompositeHypothesis):
    """``mu = fixed + sum_k theta_k * template_k`` with ``theta_k >= 0``.

    Templates and the fixed part are non-negative truth vectors over the
    retained truth bins. The fixed part can hold e.g. background templates.
    """

    def __init__(self, templates, fixed=None, bounds=None):
        templates = np.atleast_2d(np.asarray(templates, dtype=float))
        if np.any(templates < 0):
            raise HypothesisError("templates must be non-negative")
        self.templates = templates
        self.fixed = np.zeros(templates.shape[1]) if fixed is None else np.asarray(fixed, dtype=float)
        if self.fixed.shape != (templates.shape[1],) or np.any(self.fixed < 0):
            raise HypothesisError("fixed part must be a non-negative truth vector")
        if bounds is None:
            bounds = [(0.0, np.inf)] * templates.shape[0]
        super().__init__(self._template_translate, bounds)
        for lo, _ in self.bounds:
            if lo < 0:
                raise HypothesisError("template weights must be bounded below by 0")

    def _template_translate(self, theta):
        return self.fixed + theta @ self.templates

    def make_folder(self, matrices: ResponseMatrixSet) -> Callable:
        folded = np.einsum("trd,kd->trk", matrices.matrices, self.templates)
        base = matrices.matrices @ self.fixed

        def fold(theta):
            if np.any(theta < 0):
                raise HypothesisError("template weights must be non-negative")
            return folded @ theta + base

        return fold

    def guess(self, lm: LikelihoodMachine) -> np.ndarray:
        """Weights sharing the observed excess over the fixed part equally."""
        excess = max(lm.data.sum() - lm.matrices.fold(self.fixed).mean(axis=0).sum(), 1.0)
        folded_sums = np.array([lm.matrices.fold(t).mean(axis=0).sum() for t in self.templates])
        with np.errstate(divide="ignore"):
            theta = np.where(folded_sums > 0, excess / (self.dim * folded_sums), 1.0)
        lows = np.array([lo for lo, _ in self.bounds])
        highs = np.array([hi for _, hi in self.bounds])
        return np.clip(theta, lows, highs)

    def fix(self, index: int, value: float) -> "TemplateHypothesis":
        lo, hi = self.bounds[index]
        if not lo <= value <= hi:
            raise ValueError(f"value {value} outside bounds ({lo}, {hi})")
        fixed = self.fixed + value * self.templates[index]
        templates = np.delete(self.templates, index, axis=0)
        bounds = self.bounds[:index] + self.bounds[index + 1 :]
        if not bounds:
            return FixedHypothesis(fixed)
        return TemplateHypothesis(templates, fixed, bounds)


class FixedHypothesis(TemplateHypothesis):
    """A simple hypothesis wrapped as a template hypothesis without parameters."""

    def __init__(self, mu):
        mu = np.asarray(mu, dtype=float)
        CompositeHypothesis.__init__(self, lambda theta: mu, [])
        self.templates = np.zeros((0, mu.size))
        self.fixed = mu
        if np.any(mu < 0):
            raise HypothesisError("truth expectations must be non-negative")

    def guess(self, lm):
        return np.zeros(0)


@dataclass(frozen=True)
class FitConfig:
    """Settings of the bounded simplex maximiser.

    ``starts`` counts the starting points of a fit to observed data,
    ``replica_starts`` the fresh starts of fits to toy data (which in
    addition always start from the observed best fit).
    """

    starts: int = 3
    replica_starts: int = 1
    xatol: float = 1e-6
    fatol: float = 1e-9
    maxiter: int = 4000


class FitResult(NamedTuple):
    log_likelihood: float
    theta: np.ndarray


class _Transform:
    """Maps unconstrained simplex coordinates into the parameter box."""

    def __init__(self, bounds):
        self.lo = np.array([b[0] for b in bounds])
        self.hi = np.array([b[1] for b in bounds])
        flo, fhi = np.isfinite(self.lo), np.isfinite(self.hi)
        self.box = flo & fhi
        self.lower = flo & ~fhi
        self.upper = ~flo & fhi
        self.all_lower = bool(self.lower.all())

    def to_theta(self, u):
        if self.all_lower:
            return self.lo + u * u
        theta = np.array(u, dtype=float)
        span = self.hi - self.lo
        theta = np.where(self.box, self.lo + np.where(self.box, span, 0.0) * np.sin(u) ** 2, theta)
        theta = np.where(self.lower, self.lo + u**2, theta)
        theta = np.where(self.upper, self.hi - u**2, theta)
        return theta

    def to_u(self, theta):
        theta = np.asarray(theta, dtype=float)
        span = np.where(self.box & (self.hi > self.lo), self.hi - self.lo, 1.0)
        u = theta.copy()
        frac = np.clip((theta - self.lo) / span, 0.0, 1.0)
        u = np.where(self.box, np.arcsin(np.sqrt(np.where(self.box, frac, 0.0))), u)
        u = np.where(self.lower, np.sqrt(np.maximum(theta - self.lo, 0.0)), u)
        u = np.where(self.upper, np.sqrt(np.maximum(self.hi - theta, 0.0)), u)
        return u


def _random_starts(hyp, guess, count, rng):
    points = []
    for _ in range(count):
        p = []
        for g, (lo, hi) in zip(guess, hyp.bounds):
            if np.isfinite(lo) and np.isfinite(hi):
                p.append(rng.uniform(lo, hi))
            elif np.isfinite(lo):
                p.append(lo + (g - lo + 1e-3) * rng.uniform(0.1, 2.0))
            elif np.isfinite(hi):
                p.append(hi - (hi - g + 1e-3) * rng.uniform(0.1, 2.0))
            else:
                p.append(g + max(1.0, abs(g)) * rng.normal())
        points.append(np.array(p))
    return points


def max_log_likelihood(
    lm: LikelihoodMachine,
    hyp: CompositeHypothesis,
    starts: Optional[int] = None,
    seed=0,
    config: FitConfig = FitConfig(),
    warm_starts: Sequence = (),
) -> FitResult:
    """Maximise the likelihood over the parameters of ``hyp``.

    The first start is a data-driven guess, further ones are drawn from a
    generator seeded with ``seed``. ``warm_starts`` are tried in addition.
    """
    n_starts = config.starts if starts is None else starts
    if n_starts < 1 and not warm_starts:
        raise ValueError("need at least one start")
    if hyp.dim == 0:
        return FitResult(lm.log_likelihood_theta(hyp, np.zeros(0)), np.zeros(0))
    rng = np.random.default_rng(seed)
    guess = hyp.guess(lm)
    points = [np.asarray(w, dtype=float) for w in warm_starts]
    if n_starts >= 1:
        points.append(guess)
        points.extend(_random_starts(hyp, guess, n_starts - 1, rng))

    tf = _Transform(hyp.bounds)
    objective = _negative_log_likelihood(lm, lm.folder(hyp), tf.to_theta)

    best = None
    for point in points:
        u0 = tf.to_u(point)
        f0 = objective(u0)
        res = _simplex(objective, u0, tf.to_u(guess), config)
        for u, f in ((u0, f0), (res.x, res.fun)):
            if best is None or f < best[1]:
                best = (np.array(u), f)
    theta, value = _snap_to_bounds(hyp, tf.to_theta(best[0]), -best[1], lm)
    return FitResult(value, theta)


def _snap_to_bounds(hyp, theta, value, lm):
    """Move parameters sitting numerically on a bound exactly onto it."""
    theta = theta.copy()
    for k, (lo, hi) in enumerate(hyp.bounds):
        for bound in (lo, hi):
            if not np.isfinite(bound) or theta[k] == bound:
                continue
            if abs(theta[k] - bound) <= 1e-6 * max(1.0, abs(bound)):
                trial = theta.copy()
                trial[k] = bound
                trial_value = lm.log_likelihood_theta(hyp, trial)
                if trial_value >= value:
                    theta, value = trial, trial_value
    return theta, value


def _negative_log_likelihood(lm: LikelihoodMachine, fold, to_theta):
    """Lean objective for the simplex; falls back to the general path when
    an expectation hits zero."""
    data = lm.data
    positive = data > 0
    n_pos = data[positive]
    const = float(gammaln(data + 1.0).sum())
    n_toys = lm.matrices.n_toys
    log_toys = math.log(n_toys)
    profile = lm.mode == "profile"

    def objective(u):
        nu = fold(to_theta(u))
        nu_pos = nu[:, positive]
        if nu_pos.size and nu_pos.min() <= 0.0:
            value = float(lm.combine(_poisson_rows(data, nu)))
            return -value if np.isfinite(value) else np.inf
        ll = np.log(nu_pos) @ n_pos - nu.sum(axis=1) - const
        if n_toys == 1:
            value = ll[0]
        elif profile:
            value = ll.max()
        else:
            top = ll.max()
            value = top + math.log(np.exp(ll - top).sum()) - log_toys
        return -float(value) if math.isfinite(value) else math.inf

    return objective


def _simplex(objective, u0, u_scale, config: FitConfig):
    n = u0.size
    step = 0.1 * np.maximum(np.maximum(np.abs(u0), np.abs(u_scale)), 1e-2)
    simplex = np.vstack([u0] + [u0 + step[k] * np.eye(n)[k] for k in range(n)])
    scale = max(1.0, float(np.max(np.abs(u0))))
    return optimize.minimize(
        objective,
        u0,
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "xatol": config.xatol * scale,
            "fatol": config.fatol,
            "maxiter": config.maxiter,
            "maxfev": 2 * config.maxiter,
            "adaptive": n > 2,
        },
    )


def saturated_log_likelihood(lm: LikelihoodMachine) -> float:
    """Log-likelihood at ``nu = n``, an upper bound of any achievable value.

    Every toy gives the same value, so the mode does not matter.
    """
    n = lm.data
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n > 0, n * np.log(np.where(n > 0, n, 1.0)), 0.0)
    return float(np.sum(terms - n - gammaln(n + 1.0)))


def saturation_reachable(lm: LikelihoodMachine, toy: int = 0, tol: float = 1e-6) -> bool:
    """Whether some ``mu >= 0`` folds exactly onto the data for toy ``toy``."""
    r = lm.matrices.matrices[toy]
    _, residual = optimize.nnls(r, lm.data)
    return residual <= tol * max(1.0, float(np.linalg.norm(lm.data)))


def likelihood_ratio(lm: LikelihoodMachine, mu, reference_logl: float, tol: float = 1e-9) -> float:
    """``L(mu) / L_ref`` clamped to [0, 1].

    Raises if the reference is below the hypothesis likelihood by more than
    ``tol``, which means an upstream maximisation failed.
    """
    logl = lm.log_likelihood(mu)
    if reference_logl < logl - tol:
        raise ValueError(
            f"reference log-likelihood {reference_logl} is below the hypothesis value {logl}"
        )
    if reference_logl == saturated_log_likelihood(lm) and not saturation_reachable(lm):
        warnings.warn("saturated reference is not reachable by the folded hypotheses", stacklevel=2)
    return float(np.clip(np.exp(min(0.0, logl - reference_logl)), 0.0, 1.0))
