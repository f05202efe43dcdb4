"""Compatibility of two response matrices via the Mahalanobis distance.

The difference ``X = R_a - R_b`` of two independently drawn toy matrices is a
random vector. If both builders describe the same detector, ``X = 0`` should
be an unremarkable point of its distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .binning import BinningError
from .response import ResponseBuilder

__all__ = [
    "CompatibilityReport",
    "chi2_sf",
    "mahalanobis_sq",
    "matrix_compatibility",
    "MIN_SAMPLES",
]

MIN_SAMPLES = 100
EIGEN_CUTOFF = 1e-12


def chi2_sf(x: float, k: int) -> float:
    """Upper tail probability of the chi-squared distribution with ``k`` dof."""
    if x < 0:
        raise ValueError("chi-squared argument must be non-negative")
    if k < 1:
        raise ValueError("need at least one degree of freedom")
    if x == 0:
        return 1.0
    return float(special.gammaincc(0.5 * k, 0.5 * x))


def _whitening(cov: np.ndarray, cutoff: float = EIGEN_CUTOFF):
    """Rows span the retained principal subspace, scaled by 1/sqrt(eigenvalue)."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals.size == 0 or vals[-1] <= 0:
        return np.zeros((0, cov.shape[0]))
    keep = vals > cutoff * vals[-1]
    return (vecs[:, keep] / np.sqrt(vals[keep])).T


def mahalanobis_sq(x, mean, covariance):
    """Squared Mahalanobis distance using a pseudo-inverse.

    Eigenvalues below ``1e-12`` times the largest are dropped.

    Returns
    -------
    (d_sq, rank)
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    if x.shape != mean.shape or cov.shape != (x.size, x.size):
        raise ValueError(f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov {cov.shape}")
    w = _whitening(cov)
    z = w @ (x - mean)
    return float(z @ z), w.shape[0]


@dataclass
class CompatibilityReport:
    d_sq: float
    dof: int
    c_chi2: float
    c_numeric: float
    sample_d_sq: np.ndarray = field(repr=False)
    compared_truth_bins: list = field(default_factory=list)
    only_a: list = field(default_factory=list)
    only_b: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "d_sq": self.d_sq,
            "dof": self.dof,
            "c_chi2": self.c_chi2,
            "c_numeric": self.c_numeric,
            "samples": [float(s) for s in self.sample_d_sq],
            "compared_truth_bins": list(self.compared_truth_bins),
            "only_a": list(self.only_a),
            "only_b": list(self.only_b),
        }


def matrix_compatibility(
    a: ResponseBuilder, b: ResponseBuilder, n_samples: int, seed
) -> CompatibilityReport:
    """Compare the nominal-toy response of two builders.

    Only truth bins filled in both builders are compared; the others are
    listed in ``only_a`` / ``only_b``.
    """
    if a.reco_binning != b.reco_binning or a.truth_binning != b.truth_binning:
        raise BinningError("builders must share reco and truth binnings")
    if n_samples < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {n_samples}")
    fa, fb = set(a.filled_truth_bins.tolist()), set(b.filled_truth_bins.tolist())
    common = sorted(fa & fb)
    only_a, only_b = sorted(fa - fb), sorted(fb - fa)
    if not common:
        return CompatibilityReport(0.0, 0, 1.0, 1.0, np.zeros(n_samples), [], only_a, only_b)

    seed_a, seed_b = np.random.SeedSequence(seed).spawn(2)
    ra = a.sample_toy_matrices(n_samples, seed_a, sys_toys=[0])
    rb = b.sample_toy_matrices(n_samples, seed_b, sys_toys=[0])
    cols_a = np.searchsorted(ra.truth_bins_filled, common)
    cols_b = np.searchsorted(rb.truth_bins_filled, common)
    x = (ra.matrices[:, :, cols_a] - rb.matrices[:, :, cols_b]).reshape(n_samples, -1)

    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    w = _whitening(np.atleast_2d(cov))
    k = w.shape[0]
    z0 = w @ (0.0 - mean)
    d0 = float(z0 @ z0)
    z = (x - mean) @ w.T
    samples = np.einsum("ij,ij->i", z, z)
    c_chi2 = chi2_sf(d0, k) if k > 0 else 1.0
    c_numeric = float(np.mean(samples > d0)) if k > 0 else 1.0
    return CompatibilityReport(d0, k, c_chi2, c_numeric, samples, common, only_a, only_b)


def histogram_table(report: CompatibilityReport, n_bins: int = 50):
    """Rows ``(low, high, sampled fraction, chi2 expectation)`` of the sampled
    squared distances, for plotting the compatibility distribution."""
    s = np.asarray(report.sample_d_sq)
    hi = max(float(s.max()) if s.size else 1.0, report.d_sq) * 1.05 or 1.0
    edges = np.linspace(0.0, hi, n_bins + 1)
    counts, _ = np.histogram(s, edges)
    frac = counts / max(s.size, 1)
    if report.dof > 0:
        cdf = special.gammainc(0.5 * report.dof, 0.5 * edges)
        expect = np.diff(cdf)
    else:
        expect = np.zeros(n_bins)
    return [(float(edges[k]), float(edges[k + 1]), float(frac[k]), float(expect[k])) for k in range(n_bins)]
