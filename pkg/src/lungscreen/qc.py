"""Scan quality control: slice-gap detection and duplicate-slice removal."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import TooFewSlices
from .volume import CtVolume

ACCEPT = "Accept"
REJECT = "Reject"

GAP_DETECTED = "GapDetected"
UNEVEN_SPACING = "UnevenSpacing"
TOO_FEW_SLICES = "TooFewSlices"

# reasons that force rejection; UnevenSpacing is a warning only
_REJECTING = {GAP_DETECTED, TOO_FEW_SLICES}


@dataclass(frozen=True)
class QcPolicy:
    gap_factor: float = 1.5
    jitter_tol: float = 0.05
    min_slices: int = 20

    def __post_init__(self):
        if self.gap_factor <= 1:
            raise ValueError("gap_factor must exceed 1")
        if not 0 <= self.jitter_tol:
            raise ValueError("jitter_tol must be non-negative")
        if self.min_slices < 2:
            raise ValueError("min_slices must be at least 2")


@dataclass(frozen=True)
class QcReport:
    verdict: str
    reasons: tuple[str, ...] = ()
    duplicates_removed: int = 0
    median_spacing_mm: float = math.nan
    volume_id: str = ""

    def __post_init__(self):
        if self.verdict not in (ACCEPT, REJECT):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.verdict == REJECT and not self.reasons:
            raise ValueError("a rejection needs at least one reason")

    @property
    def accepted(self) -> bool:
        return self.verdict == ACCEPT

    def to_record(self) -> list[str]:
        return [
            self.volume_id,
            self.verdict,
            ",".join(self.reasons),
            str(self.duplicates_removed),
            repr(float(self.median_spacing_mm)),
        ]

    def to_line(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(self.to_record())
        return buf.getvalue()

    @classmethod
    def from_record(cls, record):
        volume_id, verdict, reasons, removed, spacing = record
        return cls(
            verdict=verdict,
            reasons=tuple(r for r in reasons.split(",") if r),
            duplicates_removed=int(removed),
            median_spacing_mm=float(spacing),
            volume_id=volume_id,
        )


def check_spacing(volume: CtVolume, gap_factor: float = 1.5, jitter_tol: float = 0.05) -> QcReport:
    """Flag gaps and jitter in the axial slice spacing.

    A consecutive spacing above ``gap_factor * median`` is a gap (rejecting).
    A spacing that deviates from the median by more than ``jitter_tol * median``
    without being a gap is reported as uneven spacing but still accepted.
    """
    if volume.num_slices < 2:
        raise TooFewSlices(f"spacing needs at least 2 slices, got {volume.num_slices}")
    diffs = np.diff(np.asarray(volume.slice_positions_mm, dtype=float))
    median = float(np.median(diffs))
    reasons = []
    if np.any(diffs > gap_factor * median):
        reasons.append(GAP_DETECTED)
    jitter = np.abs(diffs - median) > jitter_tol * median
    if np.any(jitter & (diffs <= gap_factor * median)):
        reasons.append(UNEVEN_SPACING)
    verdict = REJECT if GAP_DETECTED in reasons else ACCEPT
    return QcReport(verdict=verdict, reasons=tuple(reasons), median_spacing_mm=median)


def remove_duplicate_slices(volume: CtVolume) -> tuple[CtVolume, int]:
    """Drop slices whose HU arrays exactly equal an earlier slice.

    The first occurrence by position is kept and retained slices keep their order.
    """
    seen: set[bytes] = set()
    keep = []
    for k in range(volume.num_slices):
        # raw bytes of an int16 slice: equal keys iff element-wise equal
        data = volume.slices[k].tobytes()
        if data in seen:
            continue
        seen.add(data)
        keep.append(k)
    removed = volume.num_slices - len(keep)
    if removed == 0:
        return volume, 0
    return volume.subset(keep), removed


def qc_gate(volume: CtVolume, policy: QcPolicy = QcPolicy(), volume_id: str = "") -> tuple[QcReport, CtVolume | None]:
    """Deduplicate, then check spacing and slice count.

    Returns the report and the cleaned volume, or ``None`` on rejection.
    """
    cleaned, removed = remove_duplicate_slices(volume)
    reasons: list[str] = []
    median = math.nan
    if cleaned.num_slices >= 2:
        spacing = check_spacing(cleaned, policy.gap_factor, policy.jitter_tol)
        reasons.extend(spacing.reasons)
        median = spacing.median_spacing_mm
    if cleaned.num_slices < policy.min_slices:
        reasons.append(TOO_FEW_SLICES)
    verdict = REJECT if _REJECTING.intersection(reasons) else ACCEPT
    report = QcReport(
        verdict=verdict,
        reasons=tuple(reasons),
        duplicates_removed=removed,
        median_spacing_mm=median,
        volume_id=volume_id,
    )
    return report, (cleaned if verdict == ACCEPT else None)
