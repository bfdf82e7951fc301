"""Minimal DICOM reader/writer for single-frame CT slices.

Only Explicit VR Little Endian, uncompressed, MONOCHROME2, 16 bits allocated
is accepted. Everything else raises :class:`UnsupportedEncoding`.
"""
from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from ..errors import (
    DuplicateInstanceNumber,
    InconsistentSeries,
    MissingAttribute,
    UnsupportedEncoding,
)
from ..volume import CtVolume

EXPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2.1"
CT_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.2"

# VRs whose length field is 4 bytes preceded by 2 reserved bytes
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
_UNDEFINED = 0xFFFFFFFF

TRANSFER_SYNTAX = (0x0002, 0x0010)
INSTANCE_NUMBER = (0x0020, 0x0013)
IMAGE_POSITION = (0x0020, 0x0032)
SAMPLES_PER_PIXEL = (0x0028, 0x0002)
PHOTOMETRIC = (0x0028, 0x0004)
NUMBER_OF_FRAMES = (0x0028, 0x0008)
ROWS = (0x0028, 0x0010)
COLUMNS = (0x0028, 0x0011)
PIXEL_SPACING = (0x0028, 0x0030)
BITS_ALLOCATED = (0x0028, 0x0100)
PIXEL_REPRESENTATION = (0x0028, 0x0103)
RESCALE_INTERCEPT = (0x0028, 0x1052)
RESCALE_SLOPE = (0x0028, 0x1053)
PIXEL_DATA = (0x7FE0, 0x0010)

_REQUIRED = {
    INSTANCE_NUMBER: "Instance Number",
    ROWS: "Rows",
    COLUMNS: "Columns",
    PIXEL_SPACING: "Pixel Spacing",
    IMAGE_POSITION: "Image Position Patient",
    RESCALE_INTERCEPT: "Rescale Intercept",
    RESCALE_SLOPE: "Rescale Slope",
    PIXEL_DATA: "Pixel Data",
}


@dataclass(frozen=True)
class RescaleParams:
    slope: float = 1.0
    intercept: float = -1024.0

    def __post_init__(self):
        if self.slope == 0:
            raise ValueError("rescale slope must be non-zero")


def to_hounsfield(raw, rescale: RescaleParams):
    """Apply the modality LUT: ``raw * slope + intercept``.

    Works on scalars and arrays; no clamping is applied.
    """
    if isinstance(raw, np.ndarray):
        return raw.astype(np.float64) * rescale.slope + rescale.intercept
    return raw * rescale.slope + rescale.intercept


@dataclass
class DicomSlice:
    instance_number: int
    position: tuple[float, float, float]
    pixel_spacing: tuple[float, float]
    rescale: RescaleParams
    pixels: np.ndarray  # raw stored values, (rows, cols)

    @property
    def shape(self):
        return self.pixels.shape


def _read_elements(buf: bytes, pos: int, end: int, stop_at_pixels: bool = True):
    """Yield ``(tag, vr, value_bytes)`` for an explicit-VR little-endian dataset."""
    while pos < end:
        if pos + 8 > end:
            raise UnsupportedEncoding(f"truncated element header at byte {pos}")
        group, elem = struct.unpack_from("<HH", buf, pos)
        vr = buf[pos + 4 : pos + 6]
        if not (vr.isalpha() and vr.isupper()):
            raise UnsupportedEncoding(
                f"element ({group:04X},{elem:04X}) has no explicit VR; only Explicit VR Little Endian is supported"
            )
        if vr in _LONG_VRS:
            if pos + 12 > end:
                raise UnsupportedEncoding(f"truncated element header at byte {pos}")
            (length,) = struct.unpack_from("<I", buf, pos + 8)
            pos += 12
        else:
            (length,) = struct.unpack_from("<H", buf, pos + 6)
            pos += 8
        tag = (group, elem)
        if length == _UNDEFINED:
            if tag == PIXEL_DATA:
                raise UnsupportedEncoding("encapsulated (compressed) pixel data is not supported")
            if vr != b"SQ":
                raise UnsupportedEncoding(f"undefined length on non-sequence element ({group:04X},{elem:04X})")
            pos = _skip_undefined_sequence(buf, pos, end)
            continue
        if pos + length > end:
            raise UnsupportedEncoding(f"element ({group:04X},{elem:04X}) runs past end of data")
        yield tag, vr, buf[pos : pos + length]
        pos += length
        if stop_at_pixels and tag == PIXEL_DATA:
            return


def _skip_undefined_sequence(buf: bytes, pos: int, end: int) -> int:
    while pos + 8 <= end:
        group, elem, length = struct.unpack_from("<HHI", buf, pos)
        pos += 8
        if (group, elem) == (0xFFFE, 0xE0DD):
            return pos
        if (group, elem) != (0xFFFE, 0xE000):
            raise UnsupportedEncoding("malformed sequence item")
        if length != _UNDEFINED:
            pos += length
            continue
        # item of undefined length: walk nested elements until the item delimiter
        while pos + 8 <= end:
            g, e = struct.unpack_from("<HH", buf, pos)
            if (g, e) == (0xFFFE, 0xE00D):
                pos += 8
                break
            nested_end = _next_element_end(buf, pos, end)
            pos = nested_end
    raise UnsupportedEncoding("unterminated sequence")


def _next_element_end(buf: bytes, pos: int, end: int) -> int:
    vr = buf[pos + 4 : pos + 6]
    if vr in _LONG_VRS:
        (length,) = struct.unpack_from("<I", buf, pos + 8)
        start = pos + 12
    else:
        (length,) = struct.unpack_from("<H", buf, pos + 6)
        start = pos + 8
    if length == _UNDEFINED:
        return _skip_undefined_sequence(buf, start, end)
    return start + length


def _text(value: bytes) -> str:
    return value.decode("ascii", errors="replace").strip("\x00 ").strip()


def _numbers(value: bytes) -> list[float]:
    text = _text(value)
    try:
        return [float(p) for p in text.split("\\")]
    except ValueError:
        raise UnsupportedEncoding(f"cannot parse numeric string {text!r}") from None


def _us(value: bytes) -> int:
    if len(value) < 2:
        raise UnsupportedEncoding("short US value")
    return struct.unpack_from("<H", value)[0]


def read_dicom_slice(data: bytes) -> DicomSlice:
    """Parse one single-frame DICOM file from raw bytes."""
    if len(data) < 132 or data[128:132] != b"DICM":
        raise UnsupportedEncoding("missing DICM preamble; raw datasets are not supported")
    elements = {}
    for tag, vr, value in _read_elements(data, 132, len(data)):
        elements[tag] = (vr, value)
    if TRANSFER_SYNTAX not in elements:
        raise MissingAttribute("Transfer Syntax UID (0002,0010)")
    syntax = _text(elements[TRANSFER_SYNTAX][1])
    if syntax != EXPLICIT_VR_LITTLE_ENDIAN:
        raise UnsupportedEncoding(f"transfer syntax {syntax} (only {EXPLICIT_VR_LITTLE_ENDIAN} is supported)")

    for tag, name in _REQUIRED.items():
        if tag not in elements:
            raise MissingAttribute(f"{name} ({tag[0]:04X},{tag[1]:04X})")

    if PHOTOMETRIC in elements:
        photometric = _text(elements[PHOTOMETRIC][1])
        if photometric != "MONOCHROME2":
            raise UnsupportedEncoding(f"photometric interpretation {photometric}")
    if SAMPLES_PER_PIXEL in elements and _us(elements[SAMPLES_PER_PIXEL][1]) != 1:
        raise UnsupportedEncoding("samples per pixel must be 1")
    if NUMBER_OF_FRAMES in elements and int(_numbers(elements[NUMBER_OF_FRAMES][1])[0]) != 1:
        raise UnsupportedEncoding("multi-frame images are not supported")
    if BITS_ALLOCATED in elements and _us(elements[BITS_ALLOCATED][1]) != 16:
        raise UnsupportedEncoding(f"bits allocated {_us(elements[BITS_ALLOCATED][1])} (only 16)")
    signed = PIXEL_REPRESENTATION in elements and _us(elements[PIXEL_REPRESENTATION][1]) == 1

    rows = _us(elements[ROWS][1])
    cols = _us(elements[COLUMNS][1])
    spacing = _numbers(elements[PIXEL_SPACING][1])
    position = _numbers(elements[IMAGE_POSITION][1])
    if len(spacing) != 2 or len(position) != 3:
        raise UnsupportedEncoding("pixel spacing needs 2 values and image position 3")
    pixel_bytes = elements[PIXEL_DATA][1]
    if len(pixel_bytes) != rows * cols * 2:
        raise UnsupportedEncoding(
            f"pixel data has {len(pixel_bytes)} bytes, expected {rows * cols * 2} for {rows}x{cols} 16-bit"
        )
    dtype = "<i2" if signed else "<u2"
    pixels = np.frombuffer(pixel_bytes, dtype=dtype).reshape(rows, cols)
    return DicomSlice(
        instance_number=int(_numbers(elements[INSTANCE_NUMBER][1])[0]),
        position=(position[0], position[1], position[2]),
        pixel_spacing=(spacing[0], spacing[1]),
        rescale=RescaleParams(
            slope=_numbers(elements[RESCALE_SLOPE][1])[0],
            intercept=_numbers(elements[RESCALE_INTERCEPT][1])[0],
        ),
        pixels=pixels,
    )


FileLike = Union[bytes, bytearray, str, os.PathLike]


def _load(item: FileLike) -> bytes:
    if isinstance(item, (bytes, bytearray)):
        return bytes(item)
    with open(item, "rb") as fh:
        return fh.read()


def parse_dicom_series(files: Iterable[FileLike]) -> CtVolume:
    """Assemble a CT volume from the files of one series.

    Slices are ordered by Instance Number. When two slices share an Instance
    Number a :class:`DuplicateInstanceNumber` warning is emitted and the whole
    series is ordered by the z coordinate of Image Position Patient instead.
    Series acquired with z decreasing along Instance Number are flipped so the
    returned positions increase.
    """
    slices = [read_dicom_slice(_load(f)) for f in files]
    if not slices:
        raise InconsistentSeries("empty series")

    first = slices[0]
    for s in slices[1:]:
        if s.shape != first.shape:
            raise InconsistentSeries(f"slice shapes differ: {first.shape} vs {s.shape}")
        if not np.allclose(s.pixel_spacing, first.pixel_spacing, rtol=0, atol=1e-6):
            raise InconsistentSeries(f"pixel spacing differs: {first.pixel_spacing} vs {s.pixel_spacing}")

    numbers = [s.instance_number for s in slices]
    if len(set(numbers)) != len(numbers):
        dupes = sorted({n for n in numbers if numbers.count(n) > 1})
        warnings.warn(
            f"duplicate Instance Numbers {dupes}; ordering by axial position",
            DuplicateInstanceNumber,
            stacklevel=2,
        )
        slices.sort(key=lambda s: s.position[2])
    else:
        slices.sort(key=lambda s: s.instance_number)

    z = np.array([s.position[2] for s in slices])
    if len(z) > 1:
        dz = np.diff(z)
        if np.all(dz < 0):
            slices.reverse()
        elif not np.all(dz > 0):
            raise InconsistentSeries("slice positions are not strictly monotone along the series order")

    hu = np.stack([np.rint(to_hounsfield(s.pixels, s.rescale)) for s in slices])
    if hu.min() < -32768 or hu.max() > 32767:
        raise InconsistentSeries("HU values exceed the signed 16-bit range")
    return CtVolume(
        slices=hu.astype(np.int16),
        pixel_spacing_mm=first.pixel_spacing,
        slice_positions_mm=tuple(s.position[2] for s in slices),
        source_ids=tuple(s.instance_number for s in slices),
    )


def _element(group: int, elem: int, vr: bytes, value: bytes) -> bytes:
    if len(value) % 2:
        value += b"\x00" if vr in (b"UI", b"OB", b"UN") else b" "
    if vr in _LONG_VRS:
        return struct.pack("<HH2sHI", group, elem, vr, 0, len(value)) + value
    return struct.pack("<HH2sH", group, elem, vr, len(value)) + value


def _ds(*values: float) -> bytes:
    return "\\".join(repr(float(v)) for v in values).encode("ascii")


def write_dicom_slice(
    raw: np.ndarray,
    *,
    instance_number: int,
    position_mm: tuple[float, float, float],
    pixel_spacing_mm: tuple[float, float] = (1.0, 1.0),
    rescale: RescaleParams = RescaleParams(),
    transfer_syntax: str = EXPLICIT_VR_LITTLE_ENDIAN,
    photometric: str = "MONOCHROME2",
    omit: Iterable[tuple[int, int]] = (),
) -> bytes:
    """Encode a 2-D array of stored pixel values as a single-frame CT DICOM file.

    Used to build fixtures; ``omit`` drops tags so error paths can be exercised.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError("raw must be 2-D")
    signed = bool(raw.min(initial=0) < 0)
    pixels = raw.astype("<i2" if signed else "<u2").tobytes()
    omit = set(omit)
    rows, cols = raw.shape

    body = [
        ((0x0008, 0x0016), b"UI", CT_IMAGE_STORAGE.encode()),
        ((0x0008, 0x0060), b"CS", b"CT"),
        (INSTANCE_NUMBER, b"IS", str(int(instance_number)).encode()),
        (IMAGE_POSITION, b"DS", _ds(*position_mm)),
        (SAMPLES_PER_PIXEL, b"US", struct.pack("<H", 1)),
        (PHOTOMETRIC, b"CS", photometric.encode()),
        (ROWS, b"US", struct.pack("<H", rows)),
        (COLUMNS, b"US", struct.pack("<H", cols)),
        (PIXEL_SPACING, b"DS", _ds(*pixel_spacing_mm)),
        (BITS_ALLOCATED, b"US", struct.pack("<H", 16)),
        ((0x0028, 0x0101), b"US", struct.pack("<H", 16)),
        ((0x0028, 0x0102), b"US", struct.pack("<H", 15)),
        (PIXEL_REPRESENTATION, b"US", struct.pack("<H", 1 if signed else 0)),
        (RESCALE_INTERCEPT, b"DS", _ds(rescale.intercept)),
        (RESCALE_SLOPE, b"DS", _ds(rescale.slope)),
        (PIXEL_DATA, b"OW", pixels),
    ]
    dataset = b"".join(_element(t[0], t[1], vr, v) for t, vr, v in body if t not in omit)

    meta = b"".join(
        [
            _element(0x0002, 0x0001, b"OB", b"\x00\x01"),
            _element(0x0002, 0x0002, b"UI", CT_IMAGE_STORAGE.encode()),
            _element(0x0002, 0x0003, b"UI", f"1.2.826.0.1.3680043.9.{int(instance_number)}".encode()),
            _element(0x0002, 0x0010, b"UI", transfer_syntax.encode()),
        ]
    )
    meta = _element(0x0002, 0x0000, b"UL", struct.pack("<I", len(meta))) + meta
    return b"\x00" * 128 + b"DICM" + meta + dataset


def write_dicom_series(volume: CtVolume, rescale: RescaleParams = RescaleParams()) -> list[bytes]:
    """Encode every slice of ``volume`` (inverse of :func:`parse_dicom_series`)."""
    out = []
    for k in range(volume.num_slices):
        raw = (volume.slices[k].astype(np.float64) - rescale.intercept) / rescale.slope
        out.append(
            write_dicom_slice(
                np.rint(raw).astype(np.int32),
                instance_number=volume.source_ids[k],
                position_mm=(0.0, 0.0, volume.slice_positions_mm[k]),
                pixel_spacing_mm=volume.pixel_spacing_mm,
                rescale=rescale,
            )
        )
    return out
