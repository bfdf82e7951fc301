"""Volume ingestion from DICOM series and desk-format files."""
from __future__ import annotations

from pathlib import Path

from .desk import load_desk_volume, parse_desk_volume, save_desk_volume, write_desk_volume
from .dicom import (
    RescaleParams,
    parse_dicom_series,
    read_dicom_slice,
    to_hounsfield,
    write_dicom_series,
    write_dicom_slice,
)

__all__ = [
    "RescaleParams",
    "load_volume",
    "load_desk_volume",
    "parse_desk_volume",
    "parse_dicom_series",
    "read_dicom_slice",
    "save_desk_volume",
    "to_hounsfield",
    "write_desk_volume",
    "write_dicom_series",
    "write_dicom_slice",
]


def load_volume(path):
    """Load a volume from a DICOM directory or a desk ``.hdr`` file."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file() and not p.name.startswith("."))
        return parse_dicom_series(files)
    return load_desk_volume(path)
