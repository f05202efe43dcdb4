"""Toy two-variable experiment used for examples and end-to-end checks.

Events have true properties ``x`` and ``y`` drawn from a bivariate normal.
The detector keeps an event with probability ``0.9 * Phi(y)`` and smears
``x`` with a unit Gaussian; ``y`` is not measured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .binning import Binning

__all__ = ["MockModel", "MODEL_A", "MODEL_B", "MODELS", "generate_truth", "apply_detector", "default_binnings"]

MAX_EFFICIENCY = 0.9
SMEAR_SIGMA = 1.0


@dataclass(frozen=True)
class MockModel:
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float

    def __post_init__(self):
        if self.var_x <= 0 or self.var_y <= 0:
            raise ValueError("variances must be positive")
        if abs(self.cov_xy) >= np.sqrt(self.var_x * self.var_y):
            raise ValueError("covariance matrix is not positive definite")

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mean_x, self.mean_y])

    @property
    def covariance(self) -> np.ndarray:
        return np.array([[self.var_x, self.cov_xy], [self.cov_xy, self.var_y]])

    def selection_fraction(self) -> float:
        """Expected fraction of detected events, ``0.9 * Phi(m / sqrt(1 + s^2))``."""
        return MAX_EFFICIENCY * float(ndtr(self.mean_y / np.sqrt(1.0 + self.var_y)))


MODEL_A = MockModel(0.1, 0.2, 1.0, 1.0, 0.0)
MODEL_B = MockModel(0.0, 0.0, 1.0, 1.0, 0.5)
MODELS = {"A": MODEL_A, "B": MODEL_B}


def generate_truth(model: MockModel, n: int, seed) -> dict:
    """Draw ``n`` events; returns columns ``true_x`` and ``true_y``."""
    if n < 1:
        raise ValueError("need at least one event")
    rng = np.random.default_rng(seed)
    xy = rng.multivariate_normal(model.mean, model.covariance, size=n, method="cholesky")
    return {"true_x": xy[:, 0], "true_y": xy[:, 1]}


def efficiency(y) -> np.ndarray:
    return MAX_EFFICIENCY * ndtr(np.asarray(y, dtype=float))


def apply_detector(events: dict, seed) -> dict:
    """Add ``reco_x`` (NaN where the event was not selected)."""
    rng = np.random.default_rng(seed)
    x = np.asarray(events["true_x"], dtype=float)
    y = np.asarray(events["true_y"], dtype=float)
    selected = rng.random(x.size) < efficiency(y)
    smeared = x + rng.normal(0.0, SMEAR_SIGMA, size=x.size)
    out = dict(events)
    out["reco_x"] = np.where(selected, smeared, np.nan)
    return out


def default_binnings():
    """Reco binning in ``reco_x`` and truth binning in ``true_x`` x ``true_y``.

    reco: open-ended bins around unit steps from -4 to 4 (10 bins);
    truth: x in unit steps from -3 to 3, y in unit steps from -2 to 2, both
    with open outer bins (8 x 6 = 48 bins).
    """
    inf = np.inf
    reco = Binning(("reco_x",), ((-inf,) + tuple(float(v) for v in range(-4, 5)) + (inf,),))
    truth = Binning(
        ("true_x", "true_y"),
        (
            (-inf,) + tuple(float(v) for v in range(-3, 4)) + (inf,),
            (-inf,) + tuple(float(v) for v in range(-2, 3)) + (inf,),
        ),
    )
    return reco, truth


def truth_x_only_binning() -> Binning:
    """The default truth binning without the ``true_y`` axis."""
    _, truth = default_binnings()
    return Binning(("true_x",), (truth.edges[0],))
