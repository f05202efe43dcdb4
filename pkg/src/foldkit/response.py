"""Response matrix accumulation and statistically fluctuated toy matrices.

A :class:`ResponseBuilder` collects simulated events per truth bin ``j`` and
(reco bin ``i``, systematic toy ``t``). The efficiency of each truth bin gets a
Beta posterior, the migration probabilities a Dirichlet posterior, and the
mean-weight correction a normal approximation. Toy matrices drawn from these
are collected in a :class:`ResponseMatrixSet`, the object that gets published
together with the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .binning import Binning, BinningError, EventRecord

__all__ = [
    "ResponseBuilder",
    "ResponseMatrixSet",
    "Testability",
    "coverage_truth",
    "coverage_reco",
    "check_testable",
]

_MAX_REDRAWS = 100


class ResponseBuilder:
    """Accumulates simulated events into response statistics.

    Parameters
    ----------
    reco_binning, truth_binning:
        Binnings of reconstructed and generator-level variables.
    n_sys_toys:
        Number of systematic toys; toy 0 is the nominal detector.
    beta_prior:
        Beta prior pseudo-counts ``(selected, lost)`` of the efficiency.
    alpha_prior:
        Dirichlet prior concentration per reco bin. Defaults to
        ``min(1, 3**n_reco_variables / n_reco_bins)``.
    """

    def __init__(
        self,
        reco_binning: Binning,
        truth_binning: Binning,
        n_sys_toys: int = 1,
        beta_prior: tuple = (1.0, 1.0),
        alpha_prior: Optional[float] = None,
    ):
        if n_sys_toys < 1:
            raise ValueError("need at least the nominal toy")
        self.reco_binning = reco_binning
        self.truth_binning = truth_binning
        self.n_sys_toys = int(n_sys_toys)
        self.beta_prior = (float(beta_prior[0]), float(beta_prior[1]))
        r = reco_binning.n_bins
        if alpha_prior is None:
            alpha_prior = min(1.0, 3.0 ** len(reco_binning.variables) / r)
        self.alpha_prior = float(alpha_prior)
        d = truth_binning.n_bins
        shape = (self.n_sys_toys, r, d)
        self.truth_counts = np.zeros(d, dtype=np.int64)
        self.truth_weights = np.zeros(d)
        self.truth_sq_weights = np.zeros(d)
        self.counts = np.zeros(shape, dtype=np.int64)
        self.weights = np.zeros(shape)
        self.sq_weights = np.zeros(shape)
        self.truth_spill = 0

    @property
    def n_reco(self) -> int:
        return self.reco_binning.n_bins

    @property
    def n_truth(self) -> int:
        return self.truth_binning.n_bins

    # -- filling ---------------------------------------------------------

    def fill_arrays(
        self,
        truth: Mapping[str, np.ndarray],
        reco: Optional[Mapping[str, np.ndarray]] = None,
        weight: Optional[np.ndarray] = None,
        toy_weights: Optional[np.ndarray] = None,
    ) -> "ResponseBuilder":
        """Fill columnar event data.

        Missing reco values must be NaN. ``toy_weights`` has shape
        ``(n_events, n_sys_toys)`` and multiplies ``weight`` per toy. An event
        counts as reconstructed in toy ``t`` only if its toy weight is
        non-zero, so a weight of zero encodes "not selected in this toy".
        """
        j = self.truth_binning.bin_indices(truth)
        n = j.size
        w = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
        if toy_weights is None:
            tw = np.ones((n, self.n_sys_toys))
        else:
            tw = np.asarray(toy_weights, dtype=float)
            if tw.ndim != 2 or tw.shape[1] != self.n_sys_toys:
                raise ValueError(
                    f"toy weights must have {self.n_sys_toys} columns, got shape {tw.shape}"
                )
        ok = j >= 0
        self.truth_spill += int(np.count_nonzero(~ok))
        d = self.n_truth
        self.truth_counts += np.bincount(j[ok], minlength=d)
        self.truth_weights += np.bincount(j[ok], weights=w[ok], minlength=d)
        self.truth_sq_weights += np.bincount(j[ok], weights=w[ok] ** 2, minlength=d)
        if reco is None:
            return self
        i = self.reco_binning.bin_indices(reco)
        rec = ok & (i >= 0)
        flat = i[rec] * d + j[rec]
        size = self.n_reco * d
        for t in range(self.n_sys_toys):
            wt = w[rec] * tw[rec, t]
            sel = tw[rec, t] != 0
            self.counts[t] += np.bincount(flat[sel], minlength=size).reshape(self.n_reco, d)
            self.weights[t] += np.bincount(flat, weights=wt, minlength=size).reshape(self.n_reco, d)
            self.sq_weights[t] += np.bincount(flat, weights=wt**2, minlength=size).reshape(self.n_reco, d)
        return self

    def fill_events(self, events: Iterable[tuple]) -> "ResponseBuilder":
        """Fill ``(truth, reco, toy_weights)`` triples of :class:`EventRecord`.

        ``reco`` may be ``None`` for events that were not reconstructed and
        ``toy_weights`` may be ``None`` (all ones); the event weight is taken
        from the truth record.
        """
        truth_vars = self.truth_binning.variables
        reco_vars = self.reco_binning.variables
        tcols = {v: [] for v in truth_vars}
        rcols = {v: [] for v in reco_vars}
        weights, toys = [], []
        for item in events:
            truth, reco, toy = (tuple(item) + (None, None))[:3]
            if toy is None and truth.toy_weights is not None:
                toy = truth.toy_weights
            for v in truth_vars:
                tcols[v].append(_as_float(truth.values.get(v)))
            for v in reco_vars:
                rcols[v].append(np.nan if reco is None else _as_float(reco.values.get(v)))
            weights.append(float(truth.weight))
            if toy is None:
                toys.append([1.0] * self.n_sys_toys)
            else:
                if len(toy) != self.n_sys_toys:
                    raise ValueError(f"expected {self.n_sys_toys} toy weights, got {len(toy)}")
                toys.append([float(x) for x in toy])
        if not weights:
            return self
        return self.fill_arrays(
            {v: np.array(c) for v, c in tcols.items()},
            {v: np.array(c) for v, c in rcols.items()},
            np.array(weights),
            np.array(toys).reshape(len(weights), self.n_sys_toys),
        )

    def _check_compatible(self, other: "ResponseBuilder"):
        if (
            other.reco_binning != self.reco_binning
            or other.truth_binning != self.truth_binning
            or other.n_sys_toys != self.n_sys_toys
        ):
            raise BinningError("builders have different binnings or toy counts")

    def __iadd__(self, other: "ResponseBuilder") -> "ResponseBuilder":
        self._check_compatible(other)
        for name in ("truth_counts", "truth_weights", "truth_sq_weights", "counts", "weights", "sq_weights"):
            getattr(self, name).__iadd__(getattr(other, name))
        self.truth_spill += other.truth_spill
        return self

    def merge(self, other: "ResponseBuilder") -> "ResponseBuilder":
        """Return a new builder holding the events of both."""
        out = self.copy()
        out += other
        return out

    def copy(self) -> "ResponseBuilder":
        out = ResponseBuilder(
            self.reco_binning, self.truth_binning, self.n_sys_toys, self.beta_prior, self.alpha_prior
        )
        out += self
        return out

    def rebinned_truth(self, coarse: Binning) -> "ResponseBuilder":
        """Aggregate into a coarser truth binning (accumulators are additive)."""
        mapping = coarse.edge_fine_map(self.truth_binning)
        out = ResponseBuilder(self.reco_binning, coarse, self.n_sys_toys, self.beta_prior, self.alpha_prior)
        dc = coarse.n_bins
        out.truth_counts = np.bincount(mapping, weights=self.truth_counts, minlength=dc).astype(np.int64)
        out.truth_weights = np.bincount(mapping, weights=self.truth_weights, minlength=dc)
        out.truth_sq_weights = np.bincount(mapping, weights=self.truth_sq_weights, minlength=dc)
        for name in ("counts", "weights", "sq_weights"):
            src = getattr(self, name)
            dst = np.zeros(src.shape[:2] + (dc,), dtype=src.dtype)
            np.add.at(dst, (slice(None), slice(None), mapping), src)
            setattr(out, name, dst)
        out.truth_spill = self.truth_spill
        return out

    # -- posterior model -------------------------------------------------

    @property
    def filled_truth_bins(self) -> np.ndarray:
        return np.flatnonzero(self.truth_counts > 0)

    def reco_counts(self) -> np.ndarray:
        """Simulated reconstructed events per (toy, reco bin)."""
        return self.counts.sum(axis=2)

    def posterior_params(self, t: int, j: int):
        """Posterior ``(beta_selected, beta_lost, alpha)`` of truth bin ``j``."""
        if not 0 <= j < self.n_truth:
            raise IndexError(f"truth bin {j} out of range")
        selected = int(self.counts[t, :, j].sum())
        beta_star = self.beta_prior[0] + selected
        beta_dag = self.beta_prior[1] + (int(self.truth_counts[j]) - selected)
        alpha = self.alpha_prior + self.counts[t, :, j]
        return beta_star, beta_dag, alpha

    def _posterior_arrays(self, t: int):
        selected = self.counts[t].sum(axis=0)
        beta_star = self.beta_prior[0] + selected
        beta_dag = self.beta_prior[1] + (self.truth_counts - selected)
        alpha = self.alpha_prior + self.counts[t]
        return beta_star.astype(float), beta_dag.astype(float), alpha.astype(float)

    def _weight_stats(self, t: int):
        """Mean weights and their variances (with one pseudo-event of weight 1)."""
        nj = self.truth_counts.astype(float)
        w_j = np.divide(self.truth_weights, nj, out=np.ones_like(nj), where=nj > 0)
        var_w_j = _mean_weight_variance(nj, self.truth_weights, self.truth_sq_weights)
        nij = self.counts[t].astype(float)
        w_ij = np.divide(self.weights[t], nij, out=np.broadcast_to(w_j, nij.shape).copy(), where=nij > 0)
        var_w_ij = _mean_weight_variance(nij, self.weights[t], self.sq_weights[t])
        return w_j, var_w_j, w_ij, var_w_ij

    def _components(self, t: int):
        bs, bd, alpha = self._posterior_arrays(t)
        eff = bs / (bs + bd)
        var_eff = bs * bd / ((bs + bd) ** 2 * (bs + bd + 1))
        a0 = alpha.sum(axis=0)
        p = alpha / a0
        var_p = alpha * (a0 - alpha) / (a0**2 * (a0 + 1))
        w_j, var_w_j, w_ij, var_w_ij = self._weight_stats(t)
        m = w_ij / w_j
        var_m = var_w_ij / w_j**2 + (w_ij / w_j**2) ** 2 * var_w_j
        return eff, var_eff, p, var_p, m, var_m

    def nominal_matrix(self, t: int = 0, filled_only: bool = True) -> np.ndarray:
        """Posterior-mean response ``eff * p * m`` of toy ``t`` (reco x truth)."""
        eff, _, p, _, m, _ = self._components(t)
        r = eff * p * m
        return r[:, self.filled_truth_bins] if filled_only else r

    def mc_stat_variance(self, t: int = 0, filled_only: bool = True) -> np.ndarray:
        """Statistical variance of each nominal matrix element of toy ``t``."""
        eff, var_eff, p, var_p, m, var_m = self._components(t)
        var = (eff * m) ** 2 * var_p + (eff * p) ** 2 * var_m + (p * m) ** 2 * var_eff
        return var[:, self.filled_truth_bins] if filled_only else var

    def sample_toy_matrices(
        self,
        n_stat_per_sys: int,
        seed,
        mc_stat: bool = True,
        sys_toys: Optional[Sequence[int]] = None,
    ) -> "ResponseMatrixSet":
        """Draw statistically fluctuated toy matrices.

        For every systematic toy, ``n_stat_per_sys`` matrices are drawn from the
        Beta (efficiency), Dirichlet (migration) and truncated normal (mean
        weight) posteriors. With ``mc_stat=False`` the posterior-mean matrix of
        each systematic toy is used once instead.
        """
        if n_stat_per_sys < 1:
            raise ValueError("n_stat_per_sys must be at least 1")
        toys = range(self.n_sys_toys) if sys_toys is None else list(sys_toys)
        filled = self.filled_truth_bins
        rng = np.random.default_rng(seed)
        blocks = []
        for t in toys:
            if not mc_stat:
                blocks.append(self.nominal_matrix(t)[None])
                continue
            blocks.append(self._draw(t, n_stat_per_sys, rng, filled))
        if blocks:
            mats = np.concatenate(blocks, axis=0)
        else:  # pragma: no cover
            mats = np.zeros((0, self.n_reco, filled.size))
        return ResponseMatrixSet(
            matrices=mats,
            sim_truth_counts=self.truth_counts[filled].astype(float),
            truth_bins_filled=filled,
            n_truth_total=self.n_truth,
            meta={"n_sys_toys": len(toys), "n_stat_per_sys": n_stat_per_sys if mc_stat else 1},
        )

    def _draw(self, t: int, n: int, rng: np.random.Generator, filled: np.ndarray) -> np.ndarray:
        bs, bd, alpha = self._posterior_arrays(t)
        bs, bd, alpha = bs[filled], bd[filled], alpha[:, filled]
        w_j, var_w_j, w_ij, var_w_ij = self._weight_stats(t)
        w_j, var_w_j = w_j[filled], var_w_j[filled]
        w_ij, var_w_ij = w_ij[:, filled], var_w_ij[:, filled]
        reco_filled = self.counts[t][:, filled] > 0
        d = filled.size
        r = self.n_reco

        eff = rng.beta(np.broadcast_to(bs, (n, d)), np.broadcast_to(bd, (n, d)))
        g = rng.standard_gamma(np.broadcast_to(alpha, (n, r, d)))
        norm = g.sum(axis=1, keepdims=True)
        # all-underflow columns (tiny alphas) fall back to the posterior mean
        p = np.where(norm > 0, g / np.where(norm > 0, norm, 1.0), alpha / alpha.sum(axis=0))
        wij = _truncated_normal(rng, w_ij, var_w_ij, (n, r, d), 0.0)
        floor = 1e-9 * np.abs(w_j) + np.finfo(float).tiny
        wj = _truncated_normal(rng, w_j, var_w_j, (n, d), floor)
        m = np.where(reco_filled, wij / wj[:, None, :], 1.0)
        return eff[:, None, :] * p * m


def _as_float(value) -> float:
    if value is None or value == "":
        return np.nan
    return float(value)


def _mean_weight_variance(n, w, w2) -> np.ndarray:
    n1 = n + 1.0
    var = ((w2 + 1.0) / n1 - ((w + 1.0) / n1) ** 2) / n1
    return np.maximum(var, 0.0)


def _truncated_normal(rng, mean, var, shape, lower):
    """Normal draws redrawn while below ``lower`` (clipped after many tries)."""
    mean = np.broadcast_to(mean, shape)
    sd = np.sqrt(np.broadcast_to(var, shape))
    lower = np.broadcast_to(lower, shape)
    x = rng.normal(mean, sd)
    bad = x < lower
    for _ in range(_MAX_REDRAWS):
        if not bad.any():
            break
        x[bad] = rng.normal(mean[bad], sd[bad])
        bad = x < lower
    return np.where(bad, np.maximum(lower, mean), x)


@dataclass
class ResponseMatrixSet:
    """A set of toy response matrices of shape ``(T, n_reco, n_filled)``.

    Only truth bins that were filled during the simulation are kept; their
    original indices are ``truth_bins_filled``.
    """

    matrices: np.ndarray
    sim_truth_counts: Optional[np.ndarray] = None
    truth_bins_filled: Optional[np.ndarray] = None
    n_truth_total: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=float)
        if m.ndim == 2:
            m = m[None]
        if m.ndim != 3 or m.shape[0] < 1:
            raise ValueError("matrices must have shape (T, n_reco, n_truth) with T >= 1")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("matrix elements must be finite and non-negative")
        self.matrices = m
        d = m.shape[2]
        if self.truth_bins_filled is None:
            self.truth_bins_filled = np.arange(d)
        self.truth_bins_filled = np.asarray(self.truth_bins_filled, dtype=np.int64)
        if self.truth_bins_filled.size != d:
            raise ValueError("truth_bins_filled must list one index per matrix column")
        if self.n_truth_total is None:
            self.n_truth_total = int(self.truth_bins_filled.max()) + 1 if d else 0
        if self.sim_truth_counts is None:
            self.sim_truth_counts = np.full(d, np.inf)
        self.sim_truth_counts = np.asarray(self.sim_truth_counts, dtype=float)
        if self.sim_truth_counts.shape != (d,):
            raise ValueError("sim_truth_counts must have one entry per filled truth bin")

    @property
    def n_toys(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_reco(self) -> int:
        return self.matrices.shape[1]

    @property
    def n_truth(self) -> int:
        """Number of retained (filled) truth bins."""
        return self.matrices.shape[2]

    def fold(self, mu) -> np.ndarray:
        """Reco expectations ``R^t mu`` for every toy, shape ``(T, n_reco)``."""
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.n_truth,):
            raise ValueError(f"truth vector must have length {self.n_truth}, got {mu.shape}")
        return self.matrices @ mu

    def reduce(self, mu_full) -> np.ndarray:
        """Drop removed truth bins from a full-length truth vector.

        Raises if any removed bin carries a non-zero expectation.
        """
        mu_full = np.asarray(mu_full, dtype=float)
        if mu_full.shape != (self.n_truth_total,):
            raise ValueError(f"expected {self.n_truth_total} truth bins, got {mu_full.shape}")
        removed = np.setdiff1d(np.arange(self.n_truth_total), self.truth_bins_filled)
        bad = removed[mu_full[removed] != 0]
        if bad.size:
            raise ValueError(f"hypothesis predicts events in unsimulated truth bins {bad.tolist()}")
        return mu_full[self.truth_bins_filled]

    def expand(self, mu) -> np.ndarray:
        out = np.zeros(self.n_truth_total)
        out[self.truth_bins_filled] = mu
        return out

    def permuted(self, order) -> "ResponseMatrixSet":
        return ResponseMatrixSet(
            self.matrices[np.asarray(order)],
            self.sim_truth_counts,
            self.truth_bins_filled,
            self.n_truth_total,
            dict(self.meta),
        )


def coverage_truth(matrix_set: ResponseMatrixSet, mu) -> np.ndarray:
    """Predicted over simulated events per retained truth bin."""
    mu = np.asarray(mu, dtype=float)
    n = matrix_set.sim_truth_counts
    if mu.shape != n.shape:
        raise ValueError("truth vector does not match the retained truth bins")
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = mu / n
    return np.where(n > 0, xi, np.where(mu > 0, np.inf, 0.0))


def coverage_reco(reco_counts, data) -> np.ndarray:
    """Largest ratio of observed to simulated reconstructed events over toys.

    ``reco_counts`` has shape ``(T_sys, n_reco)`` (see
    :meth:`ResponseBuilder.reco_counts`).
    """
    counts = np.atleast_2d(np.asarray(reco_counts, dtype=float))
    data = np.asarray(data, dtype=float)
    if counts.shape[1] != data.size:
        raise ValueError("data length does not match reco bins")
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.where(counts > 0, data / counts, np.where(data > 0, np.inf, 0.0))
    return xi.max(axis=0)


class Testability(NamedTuple):
    ok: bool
    violations: list


def check_testable(matrix_set: ResponseMatrixSet, mu) -> Testability:
    """Check ``mu_j < N_j`` for all retained truth bins.

    ``mu`` may be given over the retained bins or over all truth bins; in the
    latter case any expectation in a removed bin is a violation. Violations
    are reported as original (full) truth bin indices.
    """
    mu = np.asarray(mu, dtype=float)
    filled = matrix_set.truth_bins_filled
    violations = []
    if mu.size == matrix_set.n_truth_total and mu.size != matrix_set.n_truth:
        removed = np.setdiff1d(np.arange(matrix_set.n_truth_total), filled)
        violations.extend(int(j) for j in removed[mu[removed] > 0])
        mu = mu[filled]
    elif mu.size != matrix_set.n_truth:
        raise ValueError("truth vector length matches neither retained nor total truth bins")
    bad = np.flatnonzero(~(mu < matrix_set.sim_truth_counts))
    violations.extend(int(filled[k]) for k in bad)
    return Testability(not violations, sorted(violations))
