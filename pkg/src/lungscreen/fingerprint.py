"""HU-histogram scan fingerprints and cross-cohort overlap search.

Each scan is summarised by 20-bin HU histograms of its first and last ten
slices (400 raw counts). Two cohorts are compared by the mean squared error
of every cross pair; copies of the same scan land at (near) zero while
distinct scans sit hundreds of units apart.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import LengthMismatch, TooFewSlices
from .volume import CtVolume

DEFAULT_EDGES = (
    -1024, -500, -300, -150, -125, -100, -80, -40, -2, 0,
    20, 40, 60, 80, 100, 125, 150, 300, 500, 1024, 2048,
)
SLICES_PER_END = 10
NUM_BINS = len(DEFAULT_EDGES) - 1
FINGERPRINT_LENGTH = 2 * SLICES_PER_END * NUM_BINS


def _check_edges(edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2:
        raise ValueError("bin edges must be a 1-D sequence of at least two values")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    return edges


def slice_histogram(hu_slice, edges=DEFAULT_EDGES) -> np.ndarray:
    """Count pixels per half-open bin ``[edges[i], edges[i+1])``.

    Pixels below the first edge are counted in bin 0 and pixels at or above
    the last edge in the last bin, so the counts always sum to the pixel count.
    """
    edges = _check_edges(edges)
    values = np.asarray(hu_slice).ravel()
    idx = np.searchsorted(edges, values, side="right") - 1
    np.clip(idx, 0, edges.size - 2, out=idx)
    return np.bincount(idx, minlength=edges.size - 1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class FingerprintVector:
    values: np.ndarray
    volume_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        if values.ndim != 1:
            raise ValueError("fingerprint values must be 1-D")
        if np.any(values < 0):
            raise ValueError("fingerprint counts must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, FingerprintVector):
            return NotImplemented
        return self.volume_id == other.volume_id and np.array_equal(self.values, other.values)

    __hash__ = None

    def to_record(self) -> list[str]:
        return [self.volume_id, *(str(int(v)) for v in self.values)]

    @classmethod
    def from_record(cls, record: Sequence[str]) -> "FingerprintVector":
        return cls(np.array([int(v) for v in record[1:]], dtype=np.int64), record[0])


def fingerprint(volume: CtVolume, edges=DEFAULT_EDGES, volume_id: str = "") -> FingerprintVector:
    """Concatenate histograms of the first ten and last ten slices, in order."""
    if volume.num_slices < 2 * SLICES_PER_END:
        raise TooFewSlices(
            f"fingerprint needs at least {2 * SLICES_PER_END} slices, got {volume.num_slices}"
        )
    picks = list(range(SLICES_PER_END)) + list(range(volume.num_slices - SLICES_PER_END, volume.num_slices))
    hists = [slice_histogram(volume.slices[k], edges) for k in picks]
    return FingerprintVector(np.concatenate(hists), volume_id)


def fingerprint_mse(a: FingerprintVector, b: FingerprintVector) -> float:
    va = a.values if isinstance(a, FingerprintVector) else np.asarray(a)
    vb = b.values if isinstance(b, FingerprintVector) else np.asarray(b)
    if va.shape != vb.shape:
        raise LengthMismatch(f"fingerprint lengths differ: {va.size} vs {vb.size}")
    diff = va.astype(np.int64) - vb.astype(np.int64)
    # integer sum of squares is exact and independent of summation order
    return float(np.dot(diff, diff)) / diff.size


@dataclass(frozen=True)
class OverlapReport:
    pairs: tuple[tuple[str, str, float], ...]
    min_nonmatch_mse: float  # inf when every compared pair matched (or nothing was compared)
    self_comparison: bool = False

    def to_lines(self) -> list[str]:
        return [f"{a},{b},{mse!r}" for a, b, mse in self.pairs]


def find_overlaps(
    set_a: Iterable[FingerprintVector],
    set_b: Iterable[FingerprintVector],
    match_mse: float = 0.001,
    self_comparison: bool = False,
) -> OverlapReport:
    """All cross pairs with MSE below ``match_mse``, plus the smallest non-match MSE.

    Pairs are sorted by MSE, then by ``(id_a, id_b)``. With ``self_comparison``
    the same cohort is passed twice and each volume is reported against itself.
    """
    set_a, set_b = list(set_a), list(set_b)
    if not set_a or not set_b:
        return OverlapReport((), math.inf, self_comparison)
    a = np.stack([f.values for f in set_a]).astype(np.int64)
    b = np.stack([f.values for f in set_b]).astype(np.int64)
    if a.shape[1] != b.shape[1]:
        raise LengthMismatch(f"fingerprint lengths differ: {a.shape[1]} vs {b.shape[1]}")
    # |a|^2 + |b|^2 - 2ab in exact int64 arithmetic
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * (a @ b.T)
    mse = sq / a.shape[1]
    hits = mse < match_mse
    pairs = [
        (set_a[i].volume_id, set_b[j].volume_id, float(mse[i, j]))
        for i, j in zip(*np.nonzero(hits))
    ]
    pairs.sort(key=lambda p: (p[2], p[0], p[1]))
    rest = mse[~hits]
    min_nonmatch = float(rest.min()) if rest.size else math.inf
    return OverlapReport(tuple(pairs), min_nonmatch, self_comparison)


def write_fingerprints(path, fingerprints: Iterable[FingerprintVector]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for fp in fingerprints:
            writer.writerow(fp.to_record())


def read_fingerprints(path) -> list[FingerprintVector]:
    with open(path, newline="") as fh:
        return [FingerprintVector.from_record(row) for row in csv.reader(fh) if row]


class Fingerprinter(TransformerMixin, BaseEstimator):
    """Transform a sequence of volumes into an ``(n_volumes, 400)`` count matrix.

    Stateless; ``fit`` only validates the bin edges.
    """

    def __init__(self, edges=DEFAULT_EDGES):
        self.edges = edges

    def fit(self, X=None, y=None):
        self.edges_ = _check_edges(self.edges)
        self.n_features_out_ = 2 * SLICES_PER_END * (self.edges_.size - 1)
        return self

    def transform(self, X):
        edges = self.edges_ if hasattr(self, "edges_") else _check_edges(self.edges)
        rows = [fingerprint(v, edges).values for v in X]
        if not rows:
            return np.zeros((0, 2 * SLICES_PER_END * (edges.size - 1)), dtype=np.int64)
        return np.stack(rows)
