"""Pseudo-3-D slice encoding, the nodule-detector contract, and a synthetic oracle detector."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import DetectionFailed, IndexOutOfRange, OverlapNotAllowed, SphereOutOfBounds
from .volume import CtVolume, SphereSpec

FEATURE_NAMES = (
    "subtlety",
    "sphericity",
    "margin",
    "lobulation",
    "spiculation",
    "texture",
    "malignancy",
    "calcification_1",
    "calcification_2",
)
BINARY_FEATURES = ("calcification_1", "calcification_2")
DEFAULT_FEATURES = tuple(0.0 if name in BINARY_FEATURES else 0.5 for name in FEATURE_NAMES)

AIR_HU = -1000
SOFT_TISSUE_HU = 40
_TIE_TOL = 1e-9


@dataclass(frozen=True)
class Pseudo3dImage:
    red: np.ndarray
    green: np.ndarray
    blue: np.ndarray
    center_index: int
    red_index: int
    blue_index: int
    offset_mm: float = 4.0

    def to_rgb(self) -> np.ndarray:
        """Stack channels as a ``(rows, cols, 3)`` array in R, G, B order."""
        return np.stack([self.red, self.green, self.blue], axis=-1)


def nearest_slice_index(positions: Sequence[float], target: float, center_index: int) -> int:
    """Index of the slice nearest ``target`` mm; equidistant ties go toward ``center_index``."""
    pos = np.asarray(positions, dtype=float)
    dist = np.abs(pos - target)
    best = dist.min()
    candidates = np.flatnonzero(dist <= best + _TIE_TOL)
    return int(candidates[np.argmin(np.abs(candidates - center_index))])


def pseudo3d_slice(volume: CtVolume, center_index: int, offset_mm: float = 4.0) -> Pseudo3dImage:
    """Pack the slices at ``-offset``, ``0`` and ``+offset`` mm into red, green, blue.

    Offsets past either end of the volume clamp to the first/last slice.
    """
    n = volume.num_slices
    if not 0 <= center_index < n:
        raise IndexOutOfRange(f"center_index {center_index} outside [0, {n})")
    z = volume.slice_positions_mm[center_index]
    below = nearest_slice_index(volume.slice_positions_mm, z - offset_mm, center_index)
    above = nearest_slice_index(volume.slice_positions_mm, z + offset_mm, center_index)
    return Pseudo3dImage(
        red=volume.slices[below],
        green=volume.slices[center_index],
        blue=volume.slices[above],
        center_index=center_index,
        red_index=below,
        blue_index=above,
        offset_mm=offset_mm,
    )


@dataclass(frozen=True)
class NoduleRecord:
    location: tuple[float, float, float]  # (x, y, z) mm
    diameter_mm: float
    confidence: float = 1.0
    features: tuple[float, ...] = DEFAULT_FEATURES

    def __post_init__(self):
        loc = tuple(float(v) for v in self.location)
        feats = tuple(float(v) for v in self.features)
        if len(loc) != 3:
            raise ValueError("location needs (x, y, z)")
        if not self.diameter_mm > 0:
            raise ValueError(f"diameter must be positive, got {self.diameter_mm}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        if len(feats) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} features, got {len(feats)}")
        for name in BINARY_FEATURES:
            if feats[FEATURE_NAMES.index(name)] not in (0.0, 1.0):
                raise ValueError(f"{name} must be 0 or 1")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "diameter_mm", float(self.diameter_mm))
        object.__setattr__(self, "confidence", float(self.confidence))

    def feature_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.features))

    def to_record(self) -> list[str]:
        values = (*self.location, self.diameter_mm, self.confidence, *self.features)
        return [repr(float(v)) for v in values]

    @classmethod
    def from_record(cls, record: Sequence[str]) -> "NoduleRecord":
        v = [float(x) for x in record]
        if len(v) != 5 + len(FEATURE_NAMES):
            raise ValueError(f"nodule record needs {5 + len(FEATURE_NAMES)} values, got {len(v)}")
        return cls(tuple(v[:3]), v[3], v[4], tuple(v[5:]))


class NoduleDetector(Protocol):
    def __call__(self, volume: CtVolume) -> list[NoduleRecord]: ...


def detect_nodules(volume: CtVolume, detector: Callable[[CtVolume], Iterable[NoduleRecord]] | None = None) -> list[NoduleRecord]:
    """Run ``detector`` (the synthetic oracle by default) and enforce the output contract."""
    detector = detector or synthetic_detector
    try:
        nodules = list(detector(volume))
    except DetectionFailed:
        raise
    except Exception as exc:
        raise DetectionFailed(f"{type(exc).__name__}: {exc}") from exc
    extent = volume.extent()
    for n in nodules:
        if not isinstance(n, NoduleRecord):
            raise DetectionFailed(f"detector returned {type(n).__name__}, expected NoduleRecord")
        if not extent.contains(n.location):
            raise DetectionFailed(f"nodule at {n.location} lies outside the volume extent")
    return nodules


def _slice_spacing(volume: CtVolume) -> float:
    if volume.num_slices < 2:
        return 1.0
    return float(np.median(np.diff(volume.slice_positions_mm)))


def synthetic_detector(volume: CtVolume, hu_threshold: float = -400) -> list[NoduleRecord]:
    """Connected components of dense voxels that do not touch the volume boundary.

    Each component becomes one record: centroid location, equivalent-sphere
    diameter, confidence 1.0, and features copied from the planted annotation
    whose sphere contains the centroid (defaults otherwise).
    """
    mask = volume.slices >= hu_threshold
    if not mask.any():
        return []
    labels, count = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if count == 0:
        return []
    border = np.zeros(mask.shape, dtype=bool)
    border[[0, -1], :, :] = True
    border[:, [0, -1], :] = True
    border[:, :, [0, -1]] = True
    touching = set(np.unique(labels[border & mask]).tolist())

    row_mm, col_mm = volume.pixel_spacing_mm
    voxel_volume = row_mm * col_mm * _slice_spacing(volume)
    index = np.arange(1, count + 1)
    sizes = ndimage.sum_labels(mask, labels, index)
    centroids = ndimage.center_of_mass(mask, labels, index)

    records = []
    for lab, size, (k, i, j) in zip(index, sizes, centroids):
        if int(lab) in touching:
            continue
        location = volume.voxel_to_mm(k, i, j)
        diameter = (6.0 * size * voxel_volume / math.pi) ** (1.0 / 3.0)
        records.append(
            NoduleRecord(
                location=location,
                diameter_mm=diameter,
                confidence=1.0,
                features=_planted_features(volume.annotations, location),
            )
        )
    records.sort(key=lambda r: (r.location[2], r.location[1], r.location[0]))
    return records


def _planted_features(annotations: Sequence[SphereSpec], location) -> tuple[float, ...]:
    best, best_dist = None, math.inf
    for a in annotations:
        d = math.dist(a.center_mm, location)
        if d <= a.diameter_mm / 2 and d < best_dist:
            best, best_dist = a, d
    if best is None or len(best.features) != len(FEATURE_NAMES):
        return DEFAULT_FEATURES
    return tuple(best.features)


def sphere_mask(shape, spacing, center_mm, diameter_mm) -> np.ndarray:
    """Voxels of a ``(slices, rows, cols)`` grid whose centre lies within the sphere."""
    slice_mm, row_mm, col_mm = spacing
    z = np.arange(shape[0])[:, None, None] * slice_mm
    y = np.arange(shape[1])[None, :, None] * row_mm
    x = np.arange(shape[2])[None, None, :] * col_mm
    cx, cy, cz = center_mm
    r = diameter_mm / 2.0
    return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= r * r


def validate_spheres(spheres: Sequence[SphereSpec], shape, spacing) -> None:
    """Raise unless every sphere sits strictly inside the grid and no two can touch.

    Spheres must keep a gap of more than one voxel diagonal so their
    voxelisations never merge into one connected component.
    """
    slice_mm, row_mm, col_mm = spacing
    limits = ((shape[2] - 1) * col_mm, (shape[1] - 1) * row_mm, (shape[0] - 1) * slice_mm)
    margin = math.sqrt(slice_mm**2 + row_mm**2 + col_mm**2)
    for s in spheres:
        if not s.diameter_mm > 0:
            raise SphereOutOfBounds(f"diameter must be positive, got {s.diameter_mm}")
        r = s.diameter_mm / 2.0
        for c, hi in zip(s.center_mm, limits):
            if not (c - r > 0 and c + r < hi):
                raise SphereOutOfBounds(f"sphere at {s.center_mm} (d={s.diameter_mm}) leaves the volume")
    for a_idx, a in enumerate(spheres):
        for b in spheres[a_idx + 1 :]:
            if math.dist(a.center_mm, b.center_mm) <= (a.diameter_mm + b.diameter_mm) / 2.0 + margin:
                raise OverlapNotAllowed(f"spheres at {a.center_mm} and {b.center_mm} overlap or touch")


def make_phantom(
    spheres: Iterable[SphereSpec],
    shape: tuple[int, int, int] = (40, 64, 64),
    spacing: tuple[float, float, float] = (2.0, 1.0, 1.0),
    background_hu: int = AIR_HU,
    sphere_hu: int = SOFT_TISSUE_HU,
) -> CtVolume:
    """Air-filled volume with soft-tissue spheres.

    ``shape`` is ``(slices, rows, cols)`` and ``spacing`` is
    ``(slice_mm, row_mm, col_mm)``; slice ``k`` sits at ``k * slice_mm``.
    Sphere features are kept as annotations so the synthetic detector can
    report them.
    """
    spheres = tuple(spheres)
    validate_spheres(spheres, shape, spacing)
    data = np.full(shape, background_hu, dtype=np.int16)
    for s in spheres:
        m = sphere_mask(shape, spacing, s.center_mm, s.diameter_mm)
        if not m.any():
            raise SphereOutOfBounds(f"sphere at {s.center_mm} (d={s.diameter_mm}) covers no voxel centre")
        data[m] = sphere_hu
    return CtVolume(
        slices=data,
        pixel_spacing_mm=(spacing[1], spacing[2]),
        slice_positions_mm=tuple(k * spacing[0] for k in range(shape[0])),
        source_ids=tuple(range(1, shape[0] + 1)),
        annotations=spheres,
    )


def write_nodules(path, nodules_by_volume: Iterable[tuple[str, Sequence[NoduleRecord]]]) -> None:
    """One line per nodule: volume_id, x, y, z, diameter, confidence, nine features."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["volume_id", "x_mm", "y_mm", "z_mm", "diameter_mm", "confidence", *FEATURE_NAMES])
        for volume_id, nodules in nodules_by_volume:
            for n in nodules:
                writer.writerow([volume_id, *n.to_record()])


def read_nodules(path) -> dict[str, list[NoduleRecord]]:
    out: dict[str, list[NoduleRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if row:
                out.setdefault(row[0], []).append(NoduleRecord.from_record(row[1:]))
    return out
