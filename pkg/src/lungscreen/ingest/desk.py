"""The "desk" volume format: a key=value text header plus a raw int16 blob.

Header example::

    rows=2
    cols=2
    num_slices=1
    pixel_spacing_mm=[0.7, 0.7]
    slice_positions_mm=[0.0]
    source_ids=[1]

Values are JSON literals. The blob is little-endian signed 16-bit HU,
slice-major, row-major within each slice. An optional ``annotations`` key
carries planted-sphere metadata for synthetic volumes.
"""
from __future__ import annotations

import io
import json
import os
from pathlib import Path
from typing import TextIO, Union

import numpy as np

from ..errors import InconsistentSeries, MalformedHeader, SizeMismatch
from ..volume import CtVolume, SphereSpec

REQUIRED_KEYS = ("rows", "cols", "num_slices", "pixel_spacing_mm", "slice_positions_mm", "source_ids")


def _read_header(header: Union[str, TextIO]) -> dict:
    text = header if isinstance(header, str) else header.read()
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedHeader(f"line {lineno}: expected key=value, got {line!r}")
        try:
            fields[key.strip()] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise MalformedHeader(f"line {lineno}: bad value for {key.strip()!r}: {exc}") from None
    missing = [k for k in REQUIRED_KEYS if k not in fields]
    if missing:
        raise MalformedHeader(f"missing header fields: {', '.join(missing)}")
    for key in ("rows", "cols", "num_slices"):
        if not isinstance(fields[key], int) or isinstance(fields[key], bool) or fields[key] < 0:
            raise MalformedHeader(f"{key} must be a non-negative integer")
    for key in ("pixel_spacing_mm", "slice_positions_mm", "source_ids"):
        if not isinstance(fields[key], list):
            raise MalformedHeader(f"{key} must be an array")
    if len(fields["pixel_spacing_mm"]) != 2:
        raise MalformedHeader("pixel_spacing_mm must hold two values")
    n = fields["num_slices"]
    if len(fields["slice_positions_mm"]) != n or len(fields["source_ids"]) != n:
        raise MalformedHeader("slice_positions_mm and source_ids must have num_slices entries")
    return fields


def parse_desk_volume(header: Union[str, TextIO], blob: bytes) -> CtVolume:
    fields = _read_header(header)
    rows, cols, n = fields["rows"], fields["cols"], fields["num_slices"]
    expected = rows * cols * n * 2
    if len(blob) != expected:
        raise SizeMismatch(f"blob has {len(blob)} bytes, header implies {expected}")
    slices = np.frombuffer(blob, dtype="<i2").reshape(n, rows, cols).astype(np.int16)
    annotations = tuple(
        SphereSpec(tuple(a["center_mm"]), float(a["diameter_mm"]), tuple(a.get("features", ())))
        for a in fields.get("annotations", [])
    )
    try:
        return CtVolume(
            slices=slices,
            pixel_spacing_mm=tuple(fields["pixel_spacing_mm"]),
            slice_positions_mm=tuple(fields["slice_positions_mm"]),
            source_ids=tuple(fields["source_ids"]),
            annotations=annotations,
        )
    except InconsistentSeries as exc:
        raise MalformedHeader(str(exc)) from None


def write_desk_volume(volume: CtVolume) -> tuple[str, bytes]:
    lines = [
        f"rows={volume.rows}",
        f"cols={volume.cols}",
        f"num_slices={volume.num_slices}",
        f"pixel_spacing_mm={json.dumps(list(volume.pixel_spacing_mm))}",
        f"slice_positions_mm={json.dumps(list(volume.slice_positions_mm))}",
        f"source_ids={json.dumps(list(volume.source_ids))}",
    ]
    if volume.annotations:
        ann = [
            {"center_mm": list(a.center_mm), "diameter_mm": a.diameter_mm, "features": list(a.features)}
            for a in volume.annotations
        ]
        lines.append(f"annotations={json.dumps(ann)}")
    blob = volume.slices.astype("<i2").tobytes()
    return "\n".join(lines) + "\n", blob


def blob_path(header_path: Union[str, os.PathLike]) -> Path:
    return Path(header_path).with_suffix(".raw")


def save_desk_volume(volume: CtVolume, header_path: Union[str, os.PathLike]) -> Path:
    """Write ``<name>.hdr`` and its ``<name>.raw`` blob; returns the header path."""
    header_path = Path(header_path)
    header, blob = write_desk_volume(volume)
    header_path.write_text(header)
    blob_path(header_path).write_bytes(blob)
    return header_path


def load_desk_volume(header_path: Union[str, os.PathLike]) -> CtVolume:
    header_path = Path(header_path)
    text = header_path.read_text()
    _read_header(io.StringIO(text))  # a bad header is the more useful error than a missing blob
    return parse_desk_volume(io.StringIO(text), blob_path(header_path).read_bytes())
