"""Spatial-pyramid pooling of a variable-length nodule list into a fixed-length vector."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .encode import FEATURE_NAMES, NoduleRecord
from .errors import IndexOutOfRange, NoduleOutsideExtent
from .volume import Extent

SUBVECTOR_NAMES = ("diameter_mm", "confidence", *FEATURE_NAMES)
LOCATION_NAMES = ("x_norm", "y_norm", "z_norm")


@dataclass(frozen=True)
class RegionScheme:
    """Ordered list of boxes ``(x0, y0, z0, x1, y1, z1)`` in normalised [0, 1] coordinates."""

    regions: tuple[tuple[float, ...], ...]
    name: str = "custom"

    def __post_init__(self):
        boxes = tuple(tuple(float(v) for v in box) for box in self.regions)
        if not boxes:
            raise ValueError("a scheme needs at least one region")
        for box in boxes:
            if len(box) != 6:
                raise ValueError(f"region {box} needs six coordinates")
            lo, hi = np.array(box[:3]), np.array(box[3:])
            if np.any(hi <= lo):
                raise ValueError(f"region {box} has non-positive extent")
        object.__setattr__(self, "regions", boxes)

    def __len__(self):
        return len(self.regions)

    def contains(self, region: int, point) -> bool:
        box = self.regions[region]
        return all(box[a] <= point[a] <= box[a + 3] for a in range(3))

    def to_text(self) -> str:
        lines = [f"# {self.name}"]
        lines += [" ".join(repr(v) for v in box) for box in self.regions]
        return "\n".join(lines) + "\n"


def default_scheme() -> RegionScheme:
    """Whole volume, the 2x2x2 octants, and the octants shifted by a quarter (17 regions)."""
    regions = [(0.0, 0.0, 0.0, 1.0, 1.0, 1.0)]
    for shift in (0.0, 0.25):
        for iz, iy, ix in itertools.product((0, 1), repeat=3):
            lo = [shift + 0.5 * i for i in (ix, iy, iz)]
            hi = [min(v + 0.5, 1.0) for v in lo]
            regions.append((*lo, *hi))
    return RegionScheme(tuple(regions), name="default-17")


def parse_scheme(text: str, name: str = "custom") -> RegionScheme:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"line {lineno}: expected 'x0 y0 z0 x1 y1 z1', got {line!r}")
        boxes.append(tuple(float(p) for p in parts))
    return RegionScheme(tuple(boxes), name=name)


def load_scheme(path) -> RegionScheme:
    path = Path(path)
    return parse_scheme(path.read_text(), name=path.stem)


def _rank_key(n: NoduleRecord):
    # largest diameter, then higher confidence, then smallest (x, y, z), then features
    return (-n.diameter_mm, -n.confidence, *n.location, *n.features)


def subvector_length(include_location: bool = False) -> int:
    return len(SUBVECTOR_NAMES) + (3 if include_location else 0)


def feature_names(scheme: RegionScheme, include_location: bool = False) -> list[str]:
    names = SUBVECTOR_NAMES + (LOCATION_NAMES if include_location else ())
    return [f"r{r:02d}_{n}" for r in range(len(scheme)) for n in names]


def pool(
    nodules: Sequence[NoduleRecord],
    scheme: RegionScheme,
    extent: Extent,
    include_location: bool = False,
) -> np.ndarray:
    """Per region, the sub-vector of the largest contained nodule, or zeros; concatenated.

    Membership uses the nodule centre normalised by ``extent``; boxes are
    closed so a centre on a shared face belongs to every touching region.
    """
    width = subvector_length(include_location)
    out = np.zeros(len(scheme) * width)
    placed = []
    for n in nodules:
        if not extent.contains(n.location):
            raise NoduleOutsideExtent(f"nodule at {n.location} outside extent {extent.lo}..{extent.hi}")
        placed.append((_rank_key(n), n, np.clip(extent.normalize(n.location), 0.0, 1.0)))
    placed.sort(key=lambda t: t[0])
    for r in range(len(scheme)):
        for _, n, p in placed:
            if scheme.contains(r, p):
                values = [n.diameter_mm, n.confidence, *n.features]
                if include_location:
                    values.extend(p)
                out[r * width : (r + 1) * width] = values
                break
    return out


def mask_single(nodules: Sequence[NoduleRecord], keep_index: int) -> list[NoduleRecord]:
    if not 0 <= keep_index < len(nodules):
        raise IndexOutOfRange(f"keep_index {keep_index} outside [0, {len(nodules)})")
    return [nodules[keep_index]]


class NoduleSet(NamedTuple):
    """The detections of one volume together with the volume's physical extent."""

    nodules: Sequence[NoduleRecord]
    extent: Extent


class PyramidPooler(TransformerMixin, BaseEstimator):
    """Transform a sequence of :class:`NoduleSet` into a fixed-width feature matrix.

    Parameters
    ----------
    scheme : RegionScheme or None
        Region layout; ``None`` uses :func:`default_scheme`.
    include_location : bool
        Append the normalised nodule centre to each region sub-vector.
    """

    def __init__(self, scheme=None, include_location=False):
        self.scheme = scheme
        self.include_location = include_location

    def fit(self, X=None, y=None):
        self.scheme_ = self.scheme if self.scheme is not None else default_scheme()
        self.n_features_out_ = len(self.scheme_) * subvector_length(self.include_location)
        return self

    def transform(self, X: Iterable[NoduleSet]) -> np.ndarray:
        if not hasattr(self, "scheme_"):
            self.fit()
        rows = [pool(nodules, self.scheme_, extent, self.include_location) for nodules, extent in X]
        if not rows:
            return np.zeros((0, self.n_features_out_))
        return np.vstack(rows)

    def get_feature_names_out(self, input_features=None):
        if not hasattr(self, "scheme_"):
            self.fit()
        return np.asarray(feature_names(self.scheme_, self.include_location), dtype=object)


def write_feature_csv(path, ids: Sequence[str], X: np.ndarray, names: Sequence[str] | None = None) -> None:
    """Header ``volume_id,<names...>`` then one row per volume, floats in shortest repr."""
    X = np.asarray(X, dtype=float)
    names = list(names) if names is not None else [f"f{i}" for i in range(X.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["volume_id", *names])
        for vid, row in zip(ids, X):
            writer.writerow([vid, *(repr(float(v)) for v in row)])


def read_feature_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "volume_id":
            raise ValueError(f"{path}: expected a header starting with volume_id")
        ids, rows = [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    X = np.asarray(rows, dtype=float).reshape(len(rows), len(header) - 1)
    return ids, X
