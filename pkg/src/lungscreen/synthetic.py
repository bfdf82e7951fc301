"""Synthetic chest phantoms and labelled cohorts for testing the pipeline end to end.

A chest phantom is an air-filled box holding a soft-tissue body cylinder with
two lung cavities and Gaussian noise; nodules are soft-tissue spheres planted
inside the lungs. The body touches the first and last slice, so the synthetic
detector treats it as body wall and only reports the planted spheres.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encode import FEATURE_NAMES, SOFT_TISSUE_HU, sphere_mask, validate_spheres
from .errors import SphereOutOfBounds
from .volume import CtVolume, SphereSpec

LUNG_HU = -850
BODY_HU = SOFT_TISSUE_HU
AIR_HU = -1000
DEFAULT_SHAPE = (30, 64, 64)
DEFAULT_SPACING = (2.5, 2.0, 2.0)


@dataclass(frozen=True)
class ChestGeometry:
    body_center: tuple[float, float]
    body_axes: tuple[float, float]
    lung_centers: tuple[tuple[float, float], tuple[float, float]]
    lung_axes: tuple[float, float]


def chest_geometry(shape, spacing, body_scale: float = 1.0) -> ChestGeometry:
    _, rows, cols = shape
    _, row_mm, col_mm = spacing
    width, height = (cols - 1) * col_mm, (rows - 1) * row_mm
    cx, cy = width / 2, height / 2
    ax, ay = 0.42 * width * body_scale, 0.34 * height * body_scale
    lax, lay = 0.34 * ax, 0.72 * ay
    return ChestGeometry((cx, cy), (ax, ay), ((cx - 0.48 * ax, cy), (cx + 0.48 * ax, cy)), (lax, lay))


def _ellipse(shape, spacing, center, axes) -> np.ndarray:
    _, rows, cols = shape
    _, row_mm, col_mm = spacing
    y = np.arange(rows)[:, None] * row_mm
    x = np.arange(cols)[None, :] * col_mm
    return ((x - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2 <= 1.0


def lung_mask(shape, spacing, body_scale: float = 1.0) -> np.ndarray:
    g = chest_geometry(shape, spacing, body_scale)
    lungs2d = _ellipse(shape, spacing, g.lung_centers[0], g.lung_axes) | _ellipse(
        shape, spacing, g.lung_centers[1], g.lung_axes
    )
    mask = np.broadcast_to(lungs2d, shape).copy()
    mask[[0, -1]] = False
    return mask


def _neighbour_reach(spacing) -> float:
    # a hair over the voxel diagonal so 26-neighbours of the sphere are covered
    return float(np.sqrt(np.sum(np.square(spacing)))) * (1 + 1e-6)


def make_chest_phantom(
    spheres: Sequence[SphereSpec] = (),
    shape=DEFAULT_SHAPE,
    spacing=DEFAULT_SPACING,
    seed: int = 0,
    noise_hu: float = 20.0,
    body_scale: float = 1.0,
) -> CtVolume:
    """Chest-like volume: air, soft-tissue body, two lungs, noise, planted spheres.

    Every sphere, grown by one voxel diagonal, must fall inside the lungs so it forms
    its own connected component.
    """
    spheres = tuple(spheres)
    validate_spheres(spheres, shape, spacing)
    g = chest_geometry(shape, spacing, body_scale)
    body2d = _ellipse(shape, spacing, g.body_center, g.body_axes)
    lungs = lung_mask(shape, spacing, body_scale)
    data = np.full(shape, float(AIR_HU))
    data[:, body2d] = BODY_HU
    data[lungs] = LUNG_HU
    for s in spheres:
        m = sphere_mask(shape, spacing, s.center_mm, s.diameter_mm)
        grown = sphere_mask(shape, spacing, s.center_mm, s.diameter_mm + 2 * _neighbour_reach(spacing))
        if not m.any():
            raise SphereOutOfBounds(f"sphere at {s.center_mm} covers no voxel centre")
        if np.any(grown & ~lungs):
            raise SphereOutOfBounds(f"sphere at {s.center_mm} (d={s.diameter_mm}) is not inside a lung")
        data[m] = BODY_HU
    rng = np.random.default_rng(seed)
    if noise_hu > 0:
        data += rng.normal(0.0, noise_hu, size=shape)
    data = np.clip(np.rint(data), -1024, 3071).astype(np.int16)
    return CtVolume(
        slices=data,
        pixel_spacing_mm=(spacing[1], spacing[2]),
        slice_positions_mm=tuple(round(k * spacing[0], 6) for k in range(shape[0])),
        source_ids=tuple(range(1, shape[0] + 1)),
        annotations=spheres,
    )


# class-conditional rating distributions (mean, sd) on the 1..5 scale
_CANCER_RATINGS = {
    "subtlety": (4.2, 0.6),
    "sphericity": (2.6, 0.8),
    "margin": (2.4, 0.8),
    "lobulation": (3.4, 0.9),
    "spiculation": (3.6, 0.9),
    "texture": (4.4, 0.5),
    "malignancy": (4.2, 0.6),
}
_BENIGN_RATINGS = {
    "subtlety": (2.8, 0.8),
    "sphericity": (4.0, 0.6),
    "margin": (4.1, 0.6),
    "lobulation": (1.5, 0.6),
    "spiculation": (1.4, 0.6),
    "texture": (3.8, 0.9),
    "malignancy": (1.9, 0.7),
}
_CALCIFICATION_P = {True: (0.05, 0.05), False: (0.45, 0.25)}


def draw_features(rng: np.random.Generator, cancer: bool) -> tuple[float, ...]:
    table = _CANCER_RATINGS if cancer else _BENIGN_RATINGS
    values = []
    for name in FEATURE_NAMES[:7]:
        mean, sd = table[name]
        values.append(float(np.clip(round(rng.normal(mean, sd), 3), 1.0, 5.0)))
    p1, p2 = _CALCIFICATION_P[cancer]
    values.append(float(rng.random() < p1))
    values.append(float(rng.random() < p2))
    return tuple(values)


def _place_sphere(rng, shape, spacing, body_scale, diameter, placed, attempts=200):
    lungs = lung_mask(shape, spacing, body_scale)
    idx = np.argwhere(lungs)
    for _ in range(attempts):
        k, i, j = idx[rng.integers(len(idx))]
        center = (float(j * spacing[2]), float(i * spacing[1]), float(k * spacing[0]))
        candidate = SphereSpec(center, diameter)
        try:
            validate_spheres([*placed, candidate], shape, spacing)
        except (SphereOutOfBounds, ValueError):
            continue
        grown = sphere_mask(shape, spacing, center, diameter + 2 * _neighbour_reach(spacing))
        if np.any(grown & ~lungs):
            continue
        return center
    return None


@dataclass(frozen=True)
class CohortMember:
    volume_id: str
    volume: CtVolume
    label: int


def make_cohort(
    n_cancer: int = 100,
    n_benign: int = 100,
    seed: int = 0,
    shape=DEFAULT_SHAPE,
    spacing=DEFAULT_SPACING,
    noise_hu: float = 20.0,
) -> list[CohortMember]:
    """Labelled chest phantoms.

    Cancer cases carry one large sphere (10-16 mm) with malignant-looking
    ratings, sometimes plus small benign-looking spheres. Benign cases carry
    zero to two small spheres (3-7 mm) with benign-looking ratings.
    Members are interleaved by class and fully determined by ``seed``.
    """
    rng = np.random.default_rng(seed)
    labels = [1] * n_cancer + [0] * n_benign
    order = rng.permutation(len(labels))
    members = []
    for rank, pos in enumerate(order):
        label = labels[pos]
        body_scale = float(rng.uniform(0.85, 1.1))
        spheres: list[SphereSpec] = []
        plan = []
        if label:
            plan.append((float(rng.uniform(10.0, 16.0)), True))
            plan += [(float(rng.uniform(3.0, 7.0)), False) for _ in range(int(rng.integers(0, 2)))]
        else:
            plan += [(float(rng.uniform(3.0, 7.0)), False) for _ in range(int(rng.integers(0, 3)))]
        for diameter, malignant in plan:
            center = _place_sphere(rng, shape, spacing, body_scale, diameter, spheres)
            if center is not None:
                spheres.append(SphereSpec(center, diameter, draw_features(rng, malignant)))
        volume = make_chest_phantom(
            spheres, shape, spacing, seed=int(rng.integers(2**31)), noise_hu=noise_hu, body_scale=body_scale
        )
        members.append(CohortMember(f"case{rank:04d}", volume, label))
    return members
