"""Core CT volume container and its physical geometry."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InconsistentSeries

HU_DTYPE = np.int16


@dataclass(frozen=True)
class SphereSpec:
    """A planted sphere: centre (x, y, z) in mm, diameter in mm, nine feature values."""

    center_mm: tuple[float, float, float]
    diameter_mm: float
    features: tuple[float, ...] = ()


@dataclass(frozen=True)
class Extent:
    """Axis-aligned physical box (mm) spanned by the voxel centres of a volume."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def normalize(self, point: Sequence[float]) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=float)
        span = np.asarray(self.hi, dtype=float) - lo
        p = np.asarray(point, dtype=float) - lo
        out = np.zeros(3)
        ok = span > 0
        out[ok] = p[ok] / span[ok]
        return out

    def contains(self, point: Sequence[float], tol: float = 1e-9) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= np.asarray(self.lo) - tol) and np.all(p <= np.asarray(self.hi) + tol))


@dataclass(frozen=True, eq=False)
class CtVolume:
    """Ordered stack of axial HU slices.

    ``slices`` has shape ``(num_slices, rows, cols)`` and is stored as int16 HU.
    Positions are strictly increasing; the array is made read-only on
    construction so a volume can be shared freely.
    """

    slices: np.ndarray
    pixel_spacing_mm: tuple[float, float]
    slice_positions_mm: tuple[float, ...]
    source_ids: tuple[int, ...]
    annotations: tuple[SphereSpec, ...] = field(default=())

    def __post_init__(self):
        arr = np.asarray(self.slices)
        if arr.ndim != 3:
            raise InconsistentSeries(f"slices must be 3-D (num_slices, rows, cols), got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer) or arr.dtype != HU_DTYPE:
            if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
                raise InconsistentSeries("non-finite HU values")
            arr = np.clip(np.rint(arr), -32768, 32767).astype(HU_DTYPE)
        else:
            arr = arr.copy()
        arr.setflags(write=False)
        positions = tuple(float(p) for p in self.slice_positions_mm)
        ids = tuple(int(i) for i in self.source_ids)
        if not (len(positions) == arr.shape[0] == len(ids)):
            raise InconsistentSeries(
                f"{arr.shape[0]} slices, {len(positions)} positions, {len(ids)} source ids"
            )
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise InconsistentSeries("slice positions must be strictly increasing")
        spacing = tuple(float(s) for s in self.pixel_spacing_mm)
        if len(spacing) != 2 or min(spacing) <= 0:
            raise InconsistentSeries(f"invalid pixel spacing {self.pixel_spacing_mm!r}")
        object.__setattr__(self, "slices", arr)
        object.__setattr__(self, "slice_positions_mm", positions)
        object.__setattr__(self, "source_ids", ids)
        object.__setattr__(self, "pixel_spacing_mm", spacing)
        object.__setattr__(self, "annotations", tuple(self.annotations))

    @property
    def num_slices(self) -> int:
        return self.slices.shape[0]

    @property
    def rows(self) -> int:
        return self.slices.shape[1]

    @property
    def cols(self) -> int:
        return self.slices.shape[2]

    def voxel_to_mm(self, k, i, j):
        """Map (slice, row, col) indices, possibly fractional, to (x, y, z) mm."""
        row_mm, col_mm = self.pixel_spacing_mm
        z = np.interp(k, np.arange(self.num_slices), self.slice_positions_mm)
        return (float(j) * col_mm, float(i) * row_mm, float(z))

    def extent(self) -> Extent:
        row_mm, col_mm = self.pixel_spacing_mm
        return Extent(
            lo=(0.0, 0.0, self.slice_positions_mm[0]),
            hi=((self.cols - 1) * col_mm, (self.rows - 1) * row_mm, self.slice_positions_mm[-1]),
        )

    def subset(self, keep: Sequence[int]) -> "CtVolume":
        keep = list(keep)
        return CtVolume(
            slices=self.slices[keep],
            pixel_spacing_mm=self.pixel_spacing_mm,
            slice_positions_mm=tuple(self.slice_positions_mm[k] for k in keep),
            source_ids=tuple(self.source_ids[k] for k in keep),
            annotations=self.annotations,
        )

    def __eq__(self, other):
        if not isinstance(other, CtVolume):
            return NotImplemented
        return (
            self.slices.shape == other.slices.shape
            and np.array_equal(self.slices, other.slices)
            and self.pixel_spacing_mm == other.pixel_spacing_mm
            and self.slice_positions_mm == other.slice_positions_mm
            and self.source_ids == other.source_ids
            and self.annotations == other.annotations
        )

    __hash__ = None
