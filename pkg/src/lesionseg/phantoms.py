"""Toy chest-slice phantoms: two elliptical lungs with optional disc lesions.

Intensities roughly follow Hounsfield units (air -1000, soft tissue ~40,
aerated lung ~-850, ground-glass lesions ~-350) plus Gaussian noise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import data_io
from .data_io import CtSlice


def _ellipse(shape, center, radii) -> np.ndarray:
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return (((yy - center[0]) / radii[0]) ** 2 + ((xx - center[1]) / radii[1]) ** 2) <= 1.0


def lung_mask(size: int) -> np.ndarray:
    shape = (size, size)
    left = _ellipse(shape, (size * 0.5, size * 0.3), (size * 0.32, size * 0.15))
    right = _ellipse(shape, (size * 0.5, size * 0.7), (size * 0.32, size * 0.15))
    return (left | right).astype(np.uint8)


def make_slice(rng: np.random.Generator, size: int = 64, lesions: int = 2, patient_id: str = "p0",
               slice_id: str = "0", lesion_radius: tuple[float, float] = (0.06, 0.12)) -> CtSlice:
    shape = (size, size)
    body = _ellipse(shape, (size / 2, size / 2), (size * 0.46, size * 0.48))
    lung = lung_mask(size).astype(bool)
    image = np.full(shape, -1000.0)
    image[body] = 40.0
    image[lung] = -850.0
    inf = np.zeros(shape, dtype=bool)
    lung_px = np.argwhere(lung)
    for _ in range(lesions):
        cy, cx = lung_px[rng.integers(len(lung_px))]
        r = rng.uniform(*lesion_radius) * size
        inf |= _ellipse(shape, (cy, cx), (r, r * rng.uniform(0.7, 1.3)))
    inf &= lung
    image[inf] = -350.0
    image += rng.normal(0.0, 20.0, shape)
    return CtSlice(patient_id, slice_id, image.astype(np.float32), lung.astype(np.uint8),
                   inf.astype(np.uint8), bool(inf.any()))


def make_cohort(n_patients: int, slices_per_patient: int, size: int = 64, seed: int = 0,
                healthy_fraction: float = 0.0) -> list[CtSlice]:
    """Slices for ``n_patients``; roughly ``healthy_fraction`` of slices carry no lesion."""
    rng = np.random.default_rng(seed)
    out = []
    for p in range(n_patients):
        for s in range(slices_per_patient):
            lesions = 0 if rng.random() < healthy_fraction else int(rng.integers(1, 4))
            out.append(make_slice(rng, size, lesions, f"P{p:03d}", f"{s:03d}"))
    return out


def write_cohort(root, slices, source: str = "toy", with_masks: bool = True) -> Path:
    """Write slices as CTT1 files plus a manifest; return the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in slices:
        stem = f"{s.patient_id}_{s.slice_id}"
        data_io.write_tensor(root / f"{stem}_image.ctt", s.image)
        data_io.write_tensor(root / f"{stem}_lung.ctt", s.lung_mask)
        inf_path = None
        if with_masks and s.infection_mask is not None:
            inf_path = root / f"{stem}_mask.ctt"
            data_io.write_tensor(inf_path, s.infection_mask)
        entries.append(data_io.ManifestEntry(s.patient_id, s.slice_id, root / f"{stem}_image.ctt",
                                             root / f"{stem}_lung.ctt", inf_path, s.label))
    path = root / "manifest.tsv"
    data_io.write_manifest(path, data_io.DatasetManifest(entries, source))
    return path
