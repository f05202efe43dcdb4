"""Rectangular multidimensional binnings with a linear bin index.

Bins are products of per-variable intervals. Intervals are left-closed and
right-open, except that an infinite outer edge swallows everything beyond the
neighbouring finite edge (the open "overflow" style bin).

    >>> b = Binning(("x",), ((0.0, 1.0, 2.0),))
    >>> b.n_bins
    2
    >>> b.bin_index(EventRecord({"x": 0.5}))
    0
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

import numpy as np
import yaml

if TYPE_CHECKING:  # pragma: no cover
    from .response import ResponseBuilder

__all__ = [
    "Binning",
    "BinningError",
    "EventRecord",
    "parse_binning",
    "serialize_binning",
    "bin_index",
    "fill_histogram",
    "normalized_variation",
    "in_bin_variation",
    "optimize_truth_binning",
]


class BinningError(ValueError):
    """Raised for malformed binning documents or impossible binning requests."""


@dataclass
class EventRecord:
    """A single (simulated or measured) event.

    ``values`` maps variable names to reals; ``None`` or NaN means the value is
    missing (for reco variables: the event was not reconstructed).
    """

    values: Mapping[str, Optional[float]]
    weight: float = 1.0
    toy_weights: Optional[Sequence[float]] = None


@dataclass(frozen=True)
class Binning:
    variables: tuple
    edges: tuple
    _shape: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        variables = tuple(str(v) for v in self.variables)
        edges = tuple(tuple(float(e) for e in col) for col in self.edges)
        if not variables:
            raise BinningError("a binning needs at least one variable")
        if len(set(variables)) != len(variables):
            raise BinningError(f"duplicate variable names in {list(variables)}")
        if len(edges) != len(variables):
            raise BinningError("need exactly one edge list per variable")
        for var, col in zip(variables, edges):
            if len(col) < 2:
                raise BinningError(f"variable {var!r}: need at least 2 edges, got {len(col)}")
            if any(math.isnan(e) for e in col):
                raise BinningError(f"variable {var!r}: NaN edge")
            if any(b <= a for a, b in zip(col, col[1:])):
                raise BinningError(f"variable {var!r}: edges must be strictly increasing")
            if math.isinf(col[0]) and col[0] > 0 or math.isinf(col[-1]) and col[-1] < 0:
                raise BinningError(f"variable {var!r}: misplaced infinite edge")
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_shape", tuple(len(col) - 1 for col in edges))

    @property
    def shape(self) -> tuple:
        return self._shape

    @property
    def n_bins(self) -> int:
        return int(np.prod(self._shape))

    def index_of(self, bin_tuple: Sequence[int]) -> int:
        """Row-major linear index of a per-variable bin tuple."""
        return int(np.ravel_multi_index(tuple(bin_tuple), self._shape))

    def tuple_of(self, index: int) -> tuple:
        return tuple(int(k) for k in np.unravel_index(index, self._shape))

    def bin_indices(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Vectorised :func:`bin_index` over columnar event data.

        Returns an integer array with ``-1`` for events that fall outside the
        binning or miss one of the variables.
        """
        per_var = []
        n = None
        for var, col in zip(self.variables, self.edges):
            if var not in columns:
                raise KeyError(var)
            x = np.asarray(columns[var], dtype=float)
            n = x.shape[0]
            per_var.append(_axis_index(x, np.asarray(col)))
        if n is None:  # pragma: no cover - guarded by __post_init__
            return np.empty(0, dtype=np.int64)
        idx = np.zeros(n, dtype=np.int64)
        valid = np.ones(n, dtype=bool)
        for k, nb in zip(per_var, self._shape):
            valid &= k >= 0
            idx = idx * nb + np.where(k >= 0, k, 0)
        return np.where(valid, idx, -1)

    def neighbours(self, index: int) -> list:
        """Linear indices of bins differing by one step along exactly one axis."""
        tup = self.tuple_of(index)
        out = []
        for axis, nb in enumerate(self._shape):
            for step in (-1, 1):
                k = tup[axis] + step
                if 0 <= k < nb:
                    other = list(tup)
                    other[axis] = k
                    out.append(self.index_of(other))
        return out

    def edge_fine_map(self, fine: "Binning") -> np.ndarray:
        """Map each bin of ``fine`` to the bin of ``self`` containing it.

        ``self`` must be a coarsening of ``fine`` (same variables, edge subset).
        """
        if fine.variables != self.variables:
            raise BinningError("variables differ")
        axis_maps = []
        for coarse_col, fine_col in zip(self.edges, fine.edges):
            if not set(coarse_col) <= set(fine_col):
                raise BinningError("not a coarsening: edges are not a subset")
            lower = np.asarray(fine_col[:-1])
            axis_maps.append(np.searchsorted(np.asarray(coarse_col), lower, side="right") - 1)
        grids = np.meshgrid(*axis_maps, indexing="ij")
        return np.ravel_multi_index(tuple(g.ravel() for g in grids), self._shape)


def _axis_index(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    nb = edges.size - 1
    k = np.searchsorted(edges, x, side="right") - 1
    # +inf belongs to an open final bin; searchsorted puts it past the end
    if np.isposinf(edges[-1]):
        k = np.where(np.isposinf(x), nb - 1, k)
    k = np.where((k < 0) | (k >= nb) | np.isnan(x), -1, k)
    return k


def bin_index(binning: Binning, event: EventRecord) -> Optional[int]:
    """Linear bin index of ``event`` or ``None`` if it is not binnable."""
    cols = {}
    for var in binning.variables:
        value = event.values.get(var)
        if value is None or value == "":
            return None
        cols[var] = np.array([float(value)])
    k = int(binning.bin_indices(cols)[0])
    return None if k < 0 else k


def fill_histogram(binning: Binning, events: Sequence[EventRecord]):
    """Sum event weights per bin.

    Returns ``(histogram, spill)`` where ``spill`` is the summed weight of
    events that could not be binned.
    """
    hist = np.zeros(binning.n_bins)
    spill = 0.0
    for ev in events:
        k = bin_index(binning, ev)
        if k is None:
            spill += ev.weight
        else:
            hist[k] += ev.weight
    return hist, spill


_ALLOWED_KEYS = {"variables", "edges"}


def parse_binning(text: str) -> Binning:
    """Parse a binning document (YAML subset, see README)."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise BinningError(f"not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise BinningError("binning document must be a mapping")
    unknown = set(doc) - _ALLOWED_KEYS
    if unknown:
        raise BinningError(f"unknown keys: {sorted(unknown)}")
    missing = _ALLOWED_KEYS - set(doc)
    if missing:
        raise BinningError(f"missing keys: {sorted(missing)}")
    variables = doc["variables"]
    edges = doc["edges"]
    if not isinstance(variables, list) or not isinstance(edges, dict):
        raise BinningError("'variables' must be a list and 'edges' a mapping")
    variables = [str(v) for v in variables]
    if len(set(variables)) != len(variables):
        raise BinningError(f"duplicate variable names in {variables}")
    extra = set(map(str, edges)) - set(variables)
    if extra:
        raise BinningError(f"edges given for undeclared variables: {sorted(extra)}")
    cols = []
    for var in variables:
        if var not in edges:
            raise BinningError(f"no edges for variable {var!r}")
        col = edges[var]
        if not isinstance(col, list):
            raise BinningError(f"edges of {var!r} must be a list")
        try:
            cols.append([float(e) for e in col])
        except (TypeError, ValueError) as exc:
            raise BinningError(f"non-numeric edge for {var!r}") from exc
    return Binning(tuple(variables), tuple(cols))


def _fmt_edge(e: float) -> str:
    if math.isinf(e):
        return ".inf" if e > 0 else "-.inf"
    return repr(float(e))


def serialize_binning(binning: Binning) -> str:
    lines = ["variables: [" + ", ".join(binning.variables) + "]", "edges:"]
    for var, col in zip(binning.variables, binning.edges):
        lines.append(f"  {var}: [" + ", ".join(_fmt_edge(e) for e in col) + "]")
    return "\n".join(lines) + "\n"


# -- bin width optimisation ---------------------------------------------------


def normalized_variation(response: np.ndarray, variance: np.ndarray, truth_binning: Binning) -> np.ndarray:
    """Normalised in-bin variation of a response matrix.

    For each element, the largest absolute difference to the same reco row of
    an axis-adjacent truth bin, in units of the combined standard deviation.
    """
    response = np.asarray(response, dtype=float)
    variance = np.asarray(variance, dtype=float)
    d = truth_binning.n_bins
    if d == 0 or response.shape[1] != d:
        raise BinningError("response columns must match the truth binning")
    out = np.zeros_like(response)
    for j in range(d):
        for jn in truth_binning.neighbours(j):
            out[:, j] = np.maximum(out[:, j], _pair_variation(response, variance, j, jn))
    return out


def _pair_variation(response, variance, j, jn):
    diff = np.abs(response[:, j] - response[:, jn])
    sigma = np.sqrt(variance[:, j] + variance[:, jn])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = diff / sigma
    return np.where(diff == 0, 0.0, np.where(sigma == 0, np.inf, ratio))


def in_bin_variation(builder: "ResponseBuilder") -> np.ndarray:
    """Normalised in-bin variation on the nominal toy of a filled builder."""
    if builder.truth_binning.n_bins == 0:  # pragma: no cover - Binning forbids it
        raise BinningError("builder has no truth bins")
    r = builder.nominal_matrix(0, filled_only=False)
    v = builder.mc_stat_variance(0, filled_only=False)
    return normalized_variation(r, v, builder.truth_binning)


def _edge_merge_candidates(binning: Binning):
    """All removable interior edges as ``(axis, edge_position)``."""
    return [(axis, k) for axis, col in enumerate(binning.edges) for k in range(1, len(col) - 1)]


def _remove_edge(binning: Binning, axis: int, k: int) -> Binning:
    edges = list(binning.edges)
    col = list(edges[axis])
    del col[k]
    edges[axis] = tuple(col)
    return Binning(binning.variables, tuple(edges))


def _edge_pairs(binning: Binning, axis: int, k: int):
    """Bin pairs ``(low, high)`` straddling edge ``k`` of ``axis``."""
    ranges = [range(n) for n in binning.shape]
    ranges[axis] = [k - 1]
    pairs = []
    for tup in itertools.product(*ranges):
        hi = list(tup)
        hi[axis] = k
        pairs.append((binning.index_of(tup), binning.index_of(hi)))
    return pairs


def optimize_truth_binning(
    builder: "ResponseBuilder",
    target_mean_events: float,
    variation_limit: float,
    escalation: float = 1.5,
) -> Binning:
    """Merge truth bins until the mean number of simulated events per bin
    reaches ``target_mean_events``.

    Each round first tries to merge the least populated bin with one of its
    neighbours, then the globally most similar neighbour pair; a merge is only
    allowed if the normalised variation across the removed edge is at most the
    current limit. If nothing can be merged the limit is multiplied by
    ``escalation``. Merges always remove a whole edge of one variable, so the
    result is a coarsening of the input binning.
    """
    if target_mean_events <= 0 or variation_limit <= 0:
        raise BinningError("target and variation limit must be positive")
    if escalation <= 1:
        raise BinningError("escalation factor must exceed 1")
    fine = builder.truth_binning
    total = float(builder.truth_counts.sum())
    if total < target_mean_events:
        raise BinningError(
            f"impossible target: {total:g} simulated events < target mean {target_mean_events:g}"
        )
    current = fine
    limit = float(variation_limit)
    while True:
        coarse = builder.rebinned_truth(current)
        counts = coarse.truth_counts.astype(float)
        if counts.mean() >= target_mean_events:
            return current
        candidates = _edge_merge_candidates(current)
        if not candidates:  # pragma: no cover - total >= target makes one bin enough
            return current
        r = coarse.nominal_matrix(0, filled_only=False)
        v = coarse.mc_stat_variance(0, filled_only=False)
        pairs = {c: _edge_pairs(current, *c) for c in candidates}
        variation = {
            c: max(float(np.max(_pair_variation(r, v, j, jn))) for j, jn in pairs[c]) for c in candidates
        }
        chosen = None
        # least populated bin; ties go to the lowest linear index
        j = int(np.argmin(counts))
        options = []
        for c in candidates:
            for lo, hi in pairs[c]:
                if j in (lo, hi) and variation[c] <= limit:
                    other = hi if j == lo else lo
                    options.append((counts[other], variation[c], c))
        if options:
            chosen = min(options)[2]
        else:
            best = min(candidates, key=lambda c: (variation[c], c))
            if variation[best] <= limit:
                chosen = best
        if chosen is None:
            limit *= escalation
            continue
        current = _remove_edge(current, *chosen)
