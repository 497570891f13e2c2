"""Lesion compositing into healthy slices, plus affine training augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import data_io
from .data_io import CtSlice, DataError, DegenerateInputError, standardize

log = logging.getLogger(__name__)

MIN_SYNTHETIC_RATE = 0.01


def normalize(image: np.ndarray) -> np.ndarray:
    return standardize(image)


@dataclass
class CompositeInputs:
    infected_image: np.ndarray
    infection_mask: np.ndarray
    healthy_image: np.ndarray
    healthy_lung_mask: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(a) for a in (self.infected_image, self.infection_mask,
                                        self.healthy_image, self.healthy_lung_mask)}
        if len(shapes) != 1:
            raise DataError(f"composite inputs disagree on shape: {sorted(shapes)}")
        for name in ("infection_mask", "healthy_lung_mask"):
            m = np.asarray(getattr(self, name))
            if not np.all((m == 0) | (m == 1)):
                raise DataError(f"{name} is not binary")


@dataclass
class SyntheticPair:
    image: np.ndarray
    mask: np.ndarray
    lung_mask: np.ndarray
    infection_rate: float
    source_infected: tuple[str, str] | None = None
    source_healthy: tuple[str, str] | None = None
    seed: tuple[int, int] | None = None


def composite(inputs: CompositeInputs) -> SyntheticPair:
    """Insert the masked lesion pixels into the healthy lung field.

    Images are expected to be normalised already. The lesion keeps its pixel
    coordinates; anything outside the healthy lung is trimmed.
    """
    lung = np.asarray(inputs.healthy_lung_mask, dtype=np.float32)
    inf = np.asarray(inputs.infection_mask, dtype=np.float32)
    healthy = np.asarray(inputs.healthy_image, dtype=np.float32)
    infected = np.asarray(inputs.infected_image, dtype=np.float32)
    evacuated = healthy * lung * (1.0 - inf)
    image = (evacuated + infected * inf) * lung
    mask = (lung * inf).astype(np.uint8)
    area = int(lung.sum())
    if area == 0:
        raise DegenerateInputError("healthy lung mask is empty")
    return SyntheticPair(image, mask, lung.astype(np.uint8), int(mask.sum()) / area)


def filter_synthetic(pair: SyntheticPair, min_rate: float = MIN_SYNTHETIC_RATE) -> bool:
    return pair.infection_rate > min_rate


# ---------------------------------------------------------------------------
# corpus generation


def _normalized_cache():
    cache: dict[int, np.ndarray] = {}

    def get(ct: CtSlice) -> np.ndarray:
        key = id(ct)
        if key not in cache:
            cache[key] = normalize(ct.image)
        return cache[key]

    return get


def generate_corpus(infected_set: Sequence[CtSlice], healthy_set: Sequence[CtSlice], count: int,
                    seed: int = 0, min_rate: float = MIN_SYNTHETIC_RATE) -> list[SyntheticPair]:
    """Up to ``count`` filtered composites.

    Sample ``k`` draws from its own generator seeded by ``(seed, k)``: one
    infected source, then healthy partners in random order until a composite
    clears ``min_rate``. Samples with no qualifying partner are skipped and
    counted in a warning.
    """
    if count <= 0:
        return []
    infected = [s for s in infected_set if s.infection_mask is not None and s.infection_mask.any()]
    healthy = [s for s in healthy_set if s.has_lung]
    if not infected or not healthy:
        raise DataError("corpus generation needs non-empty infected and healthy sets")
    norm = _normalized_cache()
    pairs = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        src = infected[int(rng.integers(len(infected)))]
        for j in rng.permutation(len(healthy)):
            dst = healthy[int(j)]
            pair = composite(CompositeInputs(norm(src), src.infection_mask, norm(dst), dst.lung_mask))
            if filter_synthetic(pair, min_rate):
                pair.source_infected = src.key
                pair.source_healthy = dst.key
                pair.seed = (seed, k)
                pairs.append(pair)
                break
    shortfall = count - len(pairs)
    if shortfall:
        log.warning("synthetic corpus short by %d of %d samples (no partner above rate %.4f)",
                    shortfall, count, min_rate)
    return pairs


def corpus_slices(pairs: Sequence[SyntheticPair], prefix: str = "syn") -> list[CtSlice]:
    """Wrap synthetic pairs as slices (images are already normalised)."""
    return [
        CtSlice(f"{prefix}{i:05d}", "0", p.image, p.lung_mask, p.mask, True)
        for i, p in enumerate(pairs)
    ]


def write_corpus(out_dir, pairs: Sequence[SyntheticPair]) -> Path:
    """Write CTT1 files, a dataset manifest, and a provenance table; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    prov = ["index\tsource_patient\tsource_slice\thealthy_patient\thealthy_slice\tseed\tsample\trate\torder"]
    for i, p in enumerate(pairs):
        stem = f"syn{i:05d}"
        data_io.write_tensor(out / f"{stem}_image.ctt", p.image.astype(np.float32))
        data_io.write_tensor(out / f"{stem}_lung.ctt", p.lung_mask.astype(np.uint8))
        data_io.write_tensor(out / f"{stem}_mask.ctt", p.mask.astype(np.uint8))
        entries.append(data_io.ManifestEntry(stem, "0", out / f"{stem}_image.ctt", out / f"{stem}_lung.ctt",
                                             out / f"{stem}_mask.ctt", True))
        si = p.source_infected or ("-", "-")
        sh = p.source_healthy or ("-", "-")
        sd = p.seed or ("-", "-")
        prov.append(f"{i}\t{si[0]}\t{si[1]}\t{sh[0]}\t{sh[1]}\t{sd[0]}\t{sd[1]}\t{p.infection_rate:.10f}"
                    "\tnormalize-then-mask")
    manifest_path = out / "manifest.tsv"
    data_io.write_manifest(manifest_path, data_io.DatasetManifest(entries, source="synthetic"))
    (out / "provenance.tsv").write_text("\n".join(prov) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# affine augmentation


@dataclass(frozen=True)
class AffineParams:
    zoom: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)  # (rows, cols) in pixels
    shear: float = 0.0  # degrees

    @property
    def is_identity(self) -> bool:
        return self.zoom == 1.0 and self.shift == (0.0, 0.0) and self.shear == 0.0


@dataclass(frozen=True)
class AffineRanges:
    zoom: tuple[float, float] = (0.9, 1.1)
    shift_fraction: float = 0.05
    shear_degrees: float = 5.0


def sample_affine(rng: np.random.Generator, shape: tuple[int, int],
                  ranges: AffineRanges = AffineRanges()) -> AffineParams:
    h, w = shape
    f = ranges.shift_fraction
    return AffineParams(
        zoom=float(rng.uniform(*ranges.zoom)),
        shift=(float(rng.uniform(-f, f) * h), float(rng.uniform(-f, f) * w)),
        shear=float(rng.uniform(-ranges.shear_degrees, ranges.shear_degrees)),
    )


def _inverse_map(params: AffineParams, shape: tuple[int, int]):
    forward = params.zoom * np.array([[1.0, 0.0], [math.tan(math.radians(params.shear)), 1.0]])
    inv = np.linalg.inv(forward)
    center = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - inv @ (center + np.asarray(params.shift, dtype=np.float64))
    return inv, offset


def affine_augment(image: np.ndarray, mask: np.ndarray, params: AffineParams) -> tuple[np.ndarray, np.ndarray]:
    """Apply one geometric transform to an image (bilinear) and its mask (nearest)."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise DataError(f"image {image.shape} and mask {mask.shape} differ in shape")
    if params.is_identity:
        return image.copy(), mask.copy()
    matrix, offset = _inverse_map(params, image.shape)
    img = ndimage.affine_transform(image.astype(np.float64), matrix, offset=offset, order=1,
                                   mode="constant", cval=float(image.min()))
    m = ndimage.affine_transform(mask.astype(np.float64), matrix, offset=offset, order=0,
                                 mode="constant", cval=0.0)
    return img.astype(image.dtype), (m > 0.5).astype(mask.dtype)
