"""On-disk formats, manifests, per-slice preprocessing and patient splits.

CTT1 tensor layout (all integers little-endian)::

    offset 0   b"CTT1"
    offset 4   dtype code: 0 = float32, 1 = uint8
    offset 5   rank (0..4)
    offset 6   rank x uint32 dimensions
    then       row-major payload
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MAGIC = b"CTT1"
MAX_RANK = 4
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class FormatError(ValueError):
    """A file does not match its declared format; ``offset`` points at the bad byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(ValueError):
    """Dataset content violates an invariant (duplicates, missing files, ...)."""


class DegenerateInputError(ValueError):
    """Input has no spread or no support where the operation needs one."""


# ---------------------------------------------------------------------------
# CTT1


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds {MAX_RANK}", 5)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(raw: bytes, base_offset: int = 0) -> np.ndarray:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad magic, expected b'CTT1'", base_offset)
    if len(raw) < 6:
        raise FormatError("truncated header", base_offset + len(raw))
    code, rank = raw[4], raw[5]
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", base_offset + 4)
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds {MAX_RANK}", base_offset + 5)
    dims_end = 6 + 4 * rank
    if len(raw) < dims_end:
        raise FormatError("truncated dimension list", base_offset + len(raw))
    shape = struct.unpack_from(f"<{rank}I", raw, 6)
    dtype = _DTYPES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[dims_end:]
    if len(payload) < need:
        raise FormatError(f"truncated payload: need {need} bytes, found {len(payload)}",
                          base_offset + dims_end + len(payload))
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes after payload", base_offset + dims_end + need)
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# slices and manifests


@dataclass
class CtSlice:
    patient_id: str
    slice_id: str
    image: np.ndarray
    lung_mask: np.ndarray
    infection_mask: np.ndarray | None = None
    infected_label: bool | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.lung_mask = _as_binary(self.lung_mask, "lung_mask")
        if self.infection_mask is not None:
            self.infection_mask = _as_binary(self.infection_mask, "infection_mask")
        shapes = {self.image.shape, self.lung_mask.shape}
        if self.infection_mask is not None:
            shapes.add(self.infection_mask.shape)
        if len(shapes) != 1:
            raise DataError(f"{self.key}: tensors disagree on shape {sorted(shapes)}")
        if self.infection_mask is not None and self.infected_label is not None:
            if bool(self.infection_mask.any()) != bool(self.infected_label):
                raise DataError(f"{self.key}: label {self.infected_label} contradicts infection mask")

    @property
    def key(self) -> tuple[str, str]:
        return (self.patient_id, self.slice_id)

    @property
    def has_lung(self) -> bool:
        return bool(self.lung_mask.any())

    @property
    def label(self) -> bool | None:
        if self.infected_label is not None:
            return self.infected_label
        if self.infection_mask is not None:
            return bool(self.infection_mask.any())
        return None


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.all((arr == 0) | (arr == 1)):
        raise DataError(f"{name} is not binary")
    return arr.astype(np.uint8)


@dataclass
class ManifestEntry:
    patient_id: str
    slice_id: str
    image_path: Path
    lung_mask_path: Path
    infection_mask_path: Path | None = None
    label: bool | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    source: str = ""

    @property
    def patients(self) -> list[str]:
        return sorted({e.patient_id for e in self.entries})

    def excluding(self, keys: Iterable[tuple[str, str]]) -> "DatasetManifest":
        drop = set(keys)
        return DatasetManifest([e for e in self.entries if (e.patient_id, e.slice_id) not in drop], self.source)

    def restricted_to(self, patients: Iterable[str]) -> "DatasetManifest":
        keep = set(patients)
        return DatasetManifest([e for e in self.entries if e.patient_id in keep], self.source)


_LABELS = {"1": True, "infected": True, "0": False, "clean": False}


def read_manifest(path) -> DatasetManifest:
    """Parse a tab-separated manifest; relative paths resolve against its directory.

    Columns: patient_id, slice_id, image, lung_mask, infection_mask|-, label|-.
    A ``# source: X`` comment sets the source tag.
    """
    path = Path(path)
    root = path.parent
    manifest = DatasetManifest()
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped[1:].strip()
            if body.lower().startswith("source:"):
                manifest.source = body.split(":", 1)[1].strip()
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) != 6:
            raise DataError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(cols)}")
        pid, sid, img, lung, inf, label = (c.strip() for c in cols)
        if (pid, sid) in seen:
            raise DataError(f"{path}:{lineno}: duplicate slice ({pid}, {sid})")
        seen.add((pid, sid))
        if label not in _LABELS and label != "-":
            raise DataError(f"{path}:{lineno}: label must be 1/0/infected/clean/-, got {label!r}")
        manifest.entries.append(ManifestEntry(
            pid, sid, root / img, root / lung,
            None if inf == "-" else root / inf,
            None if label == "-" else _LABELS[label],
        ))
    manifest.entries.sort(key=lambda e: (e.patient_id, e.slice_id))
    return manifest


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    root = path.parent
    lines = []
    if manifest.source:
        lines.append(f"# source: {manifest.source}")

    def rel(p):
        p = Path(p)
        try:
            return str(p.relative_to(root))
        except ValueError:
            return str(p)

    for e in sorted(manifest.entries, key=lambda e: (e.patient_id, e.slice_id)):
        lines.append("\t".join([
            e.patient_id, e.slice_id, rel(e.image_path), rel(e.lung_mask_path),
            "-" if e.infection_mask_path is None else rel(e.infection_mask_path),
            "-" if e.label is None else ("1" if e.label else "0"),
        ]))
    path.write_text("\n".join(lines) + "\n")


def load_slice(entry: ManifestEntry) -> CtSlice:
    try:
        image = read_tensor(entry.image_path)
        lung = read_tensor(entry.lung_mask_path)
        inf = read_tensor(entry.infection_mask_path) if entry.infection_mask_path else None
    except FileNotFoundError as exc:
        raise DataError(f"({entry.patient_id}, {entry.slice_id}): missing file {exc.filename}") from exc
    return CtSlice(entry.patient_id, entry.slice_id, image, lung, inf, entry.label)


def load_slices(manifest: DatasetManifest) -> list[CtSlice]:
    return [load_slice(e) for e in sorted(manifest.entries, key=lambda e: (e.patient_id, e.slice_id))]


def read_exclusions(path) -> list[tuple[str, str]]:
    """One ``patient_id slice_id`` pair per line (tab or space separated)."""
    keys = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'patient_id slice_id'")
        keys.append((parts[0], parts[1]))
    return keys


# ---------------------------------------------------------------------------
# preprocessing


def standardize(image: np.ndarray) -> np.ndarray:
    """Zero-mean, unit (population) std over all pixels."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    if not std > 0:
        raise DegenerateInputError("image has zero intensity spread")
    return ((x - x.mean()) / std).astype(np.float32)


def preprocess(ct: CtSlice) -> np.ndarray | None:
    """Standardised (1, H, W) image, or ``None`` when the slice has no lung tissue."""
    if not ct.has_lung:
        return None
    return standardize(ct.image)[None]


def resize(image: np.ndarray, target: tuple[int, int] = (512, 512), kind: str = "image") -> np.ndarray:
    """Corner-aligned resize: bilinear for images, nearest for masks."""
    arr = np.asarray(image)
    h, w = arr.shape
    if h < 2 or w < 2:
        raise ValueError(f"resize needs at least 2x2 input, got {arr.shape}")
    if (h, w) == tuple(target):
        return arr.copy()
    th, tw = target
    rows = np.linspace(0.0, h - 1.0, th)
    cols = np.linspace(0.0, w - 1.0, tw)
    grid = np.meshgrid(rows, cols, indexing="ij")
    if kind == "mask":
        r = np.rint(grid[0]).astype(np.intp)
        c = np.rint(grid[1]).astype(np.intp)
        return arr[r, c].copy()
    if kind != "image":
        raise ValueError(f"kind must be image or mask, got {kind!r}")
    out = ndimage.map_coordinates(arr.astype(np.float64), grid, order=1, mode="nearest")
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# patient-independent splits


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[Fold, ...]

    def check(self) -> None:
        for i, f in enumerate(self.folds):
            a, b, c = set(f.train), set(f.val), set(f.test)
            if a & b or a & c or b & c:
                raise DataError(f"fold {i}: a patient appears in two partitions")


def _shuffled_patients(patients: Sequence[str], seed: int) -> list[str]:
    ordered = sorted(set(patients))
    rng = np.random.default_rng(seed)
    return [ordered[i] for i in rng.permutation(len(ordered))]


def split(manifest: DatasetManifest, ratios: tuple[float, float, float] = (0.6, 0.1, 0.3),
          seed: int = 0) -> FoldPlan:
    """Single train/val/test split at patient granularity."""
    patients = _shuffled_patients(manifest.patients, seed)
    n = len(patients)
    if n < 3:
        raise DataError(f"need at least 3 patients to split, got {n}")
    total = float(sum(ratios))
    n_val = max(1, int(round(n * ratios[1] / total)))
    n_test = max(1, int(round(n * ratios[2] / total)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise DataError(f"{n} patients cannot fill train/val/test with ratios {ratios}")
    fold = Fold(tuple(patients[:n_train]), tuple(patients[n_train:n_train + n_val]),
                tuple(patients[n_train + n_val:]))
    return FoldPlan(1, (fold,))


def kfold(manifest: DatasetManifest, k: int = 10, val_fraction: float = 0.1, seed: int = 0) -> FoldPlan:
    """k patient groups; fold i tests on group i and validates on a slice of the rest."""
    patients = _shuffled_patients(manifest.patients, seed)
    if k < 2:
        raise DataError(f"k must be at least 2, got {k}")
    if len(patients) < k:
        raise DataError(f"{len(patients)} patients cannot fill {k} folds")
    groups = [list(g) for g in np.array_split(np.array(patients, dtype=object), k)]
    folds = []
    for i in range(k):
        rest = [p for j, g in enumerate(groups) if j != i for p in g]
        n_val = max(1, int(round(val_fraction * len(rest)))) if len(rest) > 1 else 0
        order = np.random.default_rng([seed, i]).permutation(len(rest))
        val = sorted(rest[j] for j in order[:n_val])
        train = sorted(rest[j] for j in order[n_val:])
        folds.append(Fold(tuple(train), tuple(val), tuple(sorted(groups[i]))))
    return FoldPlan(k, tuple(folds))
