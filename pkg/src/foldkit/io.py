"""File formats: event CSV, histogram and matrix-set JSON, publication bundles.

Writers are deterministic: fixed key order and shortest round-trip float
representation, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .binning import Binning, EventRecord, parse_binning, serialize_binning
from .response import ResponseMatrixSet

__all__ = [
    "FormatError",
    "read_event_columns",
    "read_events_csv",
    "write_events_csv",
    "read_histogram",
    "write_histogram",
    "read_matrix_set",
    "write_matrix_set",
    "matrix_set_to_json",
    "matrix_set_from_json",
    "read_binning",
    "write_binning",
    "PublicationBundle",
    "load_bundle",
    "save_bundle",
    "validate_bundle",
]

TOY_PREFIX = "toyweight_"


class FormatError(ValueError):
    """Malformed input file; the message names the offending location."""


# -- events -------------------------------------------------------------------


def _cell(text: str) -> float:
    text = text.strip()
    return math.nan if text == "" else float(text)


def read_event_columns(path, required: Sequence[str] = ()) -> Dict[str, np.ndarray]:
    """Read an event CSV into float columns, blank cells become NaN.

    Data rows are numbered from 1 in error messages.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: missing header row") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise FormatError(f"{path}: missing column(s) {missing}")
        rows = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            values = []
            for name, text in zip(header, row):
                try:
                    values.append(_cell(text))
                except ValueError:
                    raise FormatError(
                        f"{path}: row {row_no}, column {name}: not a number: {text!r}"
                    ) from None
            rows.append(values)
    table = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: table[:, k].copy() for k, name in enumerate(header)}


def toy_weight_matrix(columns: Dict[str, np.ndarray]) -> Optional[np.ndarray]:
    """Stack ``toyweight_0..toyweight_{T-1}`` columns, or ``None`` if absent."""
    names = sorted(
        (c for c in columns if c.startswith(TOY_PREFIX)), key=lambda c: int(c[len(TOY_PREFIX):])
    )
    if not names:
        return None
    expected = [f"{TOY_PREFIX}{k}" for k in range(len(names))]
    if names != expected:
        raise FormatError(f"toy weight columns must be {expected[0]}..{expected[-1]}, got {names}")
    return np.column_stack([columns[c] for c in names])


def read_events_csv(path, schema: Sequence[str]) -> List[EventRecord]:
    """One :class:`EventRecord` per row, carrying the ``schema`` variables."""
    cols = read_event_columns(path, schema)
    n = next(iter(cols.values())).size if cols else 0
    weight = cols.get("weight", np.ones(n))
    toys = toy_weight_matrix(cols)
    records = []
    for k in range(n):
        values = {v: (None if math.isnan(cols[v][k]) else float(cols[v][k])) for v in schema}
        tw = None if toys is None else [float(x) for x in toys[k]]
        records.append(EventRecord(values, float(weight[k]), tw))
    return records


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_events_csv(path, columns: Dict[str, np.ndarray], order: Optional[Sequence[str]] = None):
    """Write columns (NaN as a blank cell) in the given or insertion order."""
    order = list(order or columns)
    n = len(columns[order[0]]) if order else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(order)
        arrays = [np.asarray(columns[c], dtype=float) for c in order]
        for k in range(n):
            writer.writerow([_fmt(a[k]) for a in arrays])


# -- histograms -----------------------------------------------------------------


def read_histogram(path) -> np.ndarray:
    """JSON array of reals, or a single-column CSV."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".csv"):
        try:
            return np.array([float(line) for line in text.split() if line.strip()])
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(values, list) or not all(isinstance(v, (int, float)) for v in values):
        raise FormatError(f"{path}: expected a JSON array of numbers")
    return np.asarray(values, dtype=float)


def _num(x):
    x = float(x)
    return int(x) if x.is_integer() and abs(x) < 2**53 else x


def write_histogram(path, values):
    Path(path).write_text(json.dumps([_num(v) for v in np.asarray(values).ravel()]) + "\n", encoding="utf-8")


# -- binnings -------------------------------------------------------------------


def read_binning(path) -> Binning:
    return parse_binning(Path(path).read_text(encoding="utf-8"))


def write_binning(path, binning: Binning):
    Path(path).write_text(serialize_binning(binning), encoding="utf-8")


# -- matrix sets ----------------------------------------------------------------


def matrix_set_to_json(ms: ResponseMatrixSet) -> str:
    doc = {
        "n_reco": ms.n_reco,
        "n_truth_total": int(ms.n_truth_total),
        "truth_bins_filled": [int(j) for j in ms.truth_bins_filled],
        "sim_truth_counts": [None if math.isinf(c) else _num(c) for c in ms.sim_truth_counts],
        "matrices": [[float(v) for v in m.ravel()] for m in ms.matrices],
        "meta": {**ms.meta, "n_toys": ms.n_toys},
    }
    return json.dumps(doc, sort_keys=False) + "\n"


def _expect_list(value, key):
    if not isinstance(value, list):
        raise FormatError(f"{key}: expected an array")
    return value


def _expect_number(value, key, allow_null=False):
    if value is None and allow_null:
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{key}: expected a number, got {value!r}")
    return float(value)


def matrix_set_from_json(text: str, n_toys: Optional[int] = None) -> ResponseMatrixSet:
    """Parse a matrix-set document. ``n_toys`` optionally declares ``T``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("matrix set must be a JSON object")
    for key in ("n_reco", "n_truth_total", "truth_bins_filled", "sim_truth_counts", "matrices"):
        if key not in doc:
            raise FormatError(f"{key}: missing")
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise FormatError("meta: expected an object")
    n_toys = n_toys if n_toys is not None else meta.get("n_toys")
    r = doc["n_reco"]
    if not isinstance(r, int) or r < 0:
        raise FormatError("n_reco: expected a non-negative integer")
    total = doc["n_truth_total"]
    if not isinstance(total, int) or total < 0:
        raise FormatError("n_truth_total: expected a non-negative integer")
    filled = _expect_list(doc["truth_bins_filled"], "truth_bins_filled")
    for k, j in enumerate(filled):
        if not isinstance(j, int) or not 0 <= j < total:
            raise FormatError(f"truth_bins_filled[{k}]: expected an index in [0, {total})")
        if k and j <= filled[k - 1]:
            raise FormatError(f"truth_bins_filled[{k}]: indices must be strictly increasing")
    d = len(filled)
    counts = _expect_list(doc["sim_truth_counts"], "sim_truth_counts")
    if len(counts) != d:
        raise FormatError(f"sim_truth_counts: expected {d} entries, got {len(counts)}")
    counts = [_expect_number(c, f"sim_truth_counts[{k}]", allow_null=True) for k, c in enumerate(counts)]
    mats = _expect_list(doc["matrices"], "matrices")
    if n_toys is not None and len(mats) != n_toys:
        raise FormatError(f"matrices[{min(len(mats), n_toys)}]: expected {n_toys} toy matrices, got {len(mats)}")
    if not mats:
        raise FormatError("matrices: need at least one toy matrix")
    arrays = []
    for t, m in enumerate(mats):
        key = f"matrices[{t}]"
        m = _expect_list(m, key)
        if len(m) != r * d:
            raise FormatError(f"{key}: expected {r * d} entries, got {len(m)}")
        vals = [_expect_number(v, f"{key}[{k}]") for k, v in enumerate(m)]
        bad = [k for k, v in enumerate(vals) if not (v >= 0 and math.isfinite(v))]
        if bad:
            raise FormatError(f"{key}[{bad[0]}]: matrix elements must be finite and non-negative")
        arrays.append(np.asarray(vals, dtype=float).reshape(r, d))
    matrices = np.stack(arrays) if arrays else np.zeros((0, r, d))
    return ResponseMatrixSet(matrices, np.asarray(counts), np.asarray(filled, dtype=np.int64), total, meta)


def write_matrix_set(path, ms: ResponseMatrixSet):
    Path(path).write_text(matrix_set_to_json(ms), encoding="utf-8")


def read_matrix_set(path, n_toys: Optional[int] = None) -> ResponseMatrixSet:
    try:
        return matrix_set_from_json(Path(path).read_text(encoding="utf-8"), n_toys)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# -- publication bundle -----------------------------------------------------------

RECO_FILE = "reco-binning.yml"
TRUTH_FILE = "truth-binning.yml"
RESPONSE_FILE = "response.json"
DATA_JSON = "data.json"
DATA_CSV = "data.csv"
BACKGROUND_FILE = "background.json"


@dataclass
class PublicationBundle:
    reco_binning: Binning
    truth_binning: Binning
    matrix_set: ResponseMatrixSet
    data: np.ndarray
    background_templates: Optional[np.ndarray] = None


def load_bundle(directory) -> PublicationBundle:
    """Load a bundle directory.

    Expected files: ``reco-binning.yml``, ``truth-binning.yml``,
    ``response.json``, ``data.json`` (histogram) or ``data.csv`` (events), and
    optionally ``background.json`` (array of truth histograms aligned to the
    filled truth bins).
    """
    d = Path(directory)
    reco = read_binning(d / RECO_FILE)
    truth = read_binning(d / TRUTH_FILE)
    ms = read_matrix_set(d / RESPONSE_FILE)
    if (d / DATA_JSON).exists():
        data = read_histogram(d / DATA_JSON)
    elif (d / DATA_CSV).exists():
        cols = read_event_columns(d / DATA_CSV, reco.variables)
        idx = reco.bin_indices(cols)
        data = np.bincount(idx[idx >= 0], minlength=reco.n_bins).astype(float)
    else:
        raise FormatError(f"{d}: no {DATA_JSON} or {DATA_CSV}")
    background = None
    if (d / BACKGROUND_FILE).exists():
        raw = json.loads((d / BACKGROUND_FILE).read_text(encoding="utf-8"))
        try:
            background = np.asarray(raw, dtype=float)
        except (TypeError, ValueError):
            raise FormatError(f"{d / BACKGROUND_FILE}: expected an array of truth histograms") from None
        if background.ndim == 1:
            background = background[None]
    return PublicationBundle(reco, truth, ms, data, background)


def save_bundle(directory, bundle: PublicationBundle):
    d = Path(directory)
    os.makedirs(d, exist_ok=True)
    write_binning(d / RECO_FILE, bundle.reco_binning)
    write_binning(d / TRUTH_FILE, bundle.truth_binning)
    write_matrix_set(d / RESPONSE_FILE, bundle.matrix_set)
    write_histogram(d / DATA_JSON, bundle.data)
    if bundle.background_templates is not None:
        rows = [[_num(v) for v in row] for row in np.atleast_2d(bundle.background_templates)]
        (d / BACKGROUND_FILE).write_text(json.dumps(rows) + "\n", encoding="utf-8")


def validate_bundle(bundle: PublicationBundle) -> List[str]:
    """List every dimension or value inconsistency; empty means consistent."""
    out = []
    ms = bundle.matrix_set
    r = bundle.reco_binning.n_bins
    if ms.n_reco != r:
        out.append(f"matrix set has {ms.n_reco} reco rows, reco binning has {r} bins")
    if ms.n_truth_total != bundle.truth_binning.n_bins:
        out.append(
            f"matrix set declares {ms.n_truth_total} truth bins, truth binning has {bundle.truth_binning.n_bins}"
        )
    filled = ms.truth_bins_filled
    if filled.size and (filled.min() < 0 or filled.max() >= bundle.truth_binning.n_bins):
        out.append("truth_bins_filled contains indices outside the truth binning")
    if np.any(np.diff(filled) <= 0):
        out.append("truth_bins_filled is not strictly increasing")
    data = np.asarray(bundle.data)
    if data.ndim != 1 or data.size != r:
        out.append(f"data length: expected {r}, got {data.size}")
    elif np.any(data < 0) or np.any(data != np.round(data)):
        out.append("data must be non-negative integer counts")
    if bundle.background_templates is not None:
        bg = np.atleast_2d(bundle.background_templates)
        for k, row in enumerate(bg):
            if row.size != filled.size:
                out.append(f"background template {k}: expected {filled.size} entries, got {row.size}")
            if np.any(row < 0):
                out.append(f"background template {k} has negative entries")
            if not np.all(np.isfinite(row)):
                out.append(f"background template {k} has non-finite entries")
    return out
