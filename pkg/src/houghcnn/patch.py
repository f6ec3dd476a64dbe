"""Patch extraction (2D, 2.5D, 3D) and balanced training-set sampling."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import LabelVolume, Volume

MODES = ("2d", "2.5d", "3d")
_MODE_CODES = {"2d": 0, "2.5d": 1, "3d": 2}
_TS_MAGIC = b"HCTS"
_TS_VERSION = 1


def normalize_mode(mode: str) -> str:
    m = str(mode).lower()
    if m not in MODES:
        raise ValueError(f"unknown patch mode {mode!r}; expected one of {MODES}")
    return m


def patch_shape(mode: str, size: int) -> tuple[int, ...]:
    mode = normalize_mode(mode)
    if mode == "2d":
        return (size, size)
    if mode == "2.5d":
        return (3, size, size)
    return (size, size, size)


def margin(mode: str, size: int) -> tuple[int, int, int]:
    """Per-axis (x, y, z) half-width a center must keep from the faces for inference.

    Axial 2D patches only need in-plane room; training sampling always uses
    the full cube margin (see :func:`eligible_centers`).
    """
    h = size // 2
    if normalize_mode(mode) == "2d":
        return (h, h, 0)
    return (h, h, h)


@dataclass
class Patch:
    mode: str
    size: int
    values: np.ndarray
    center: tuple[int, int, int]
    label: int | None = None


def _check_center(dims, center, half):
    for c, n, h in zip(center, dims, half):
        if c - h < 0 or c + h >= n:
            raise ValueError(f"center {tuple(center)} is too close to a face of a {dims} volume")


def extract_patch(vol: Volume, center, mode: str = "2d", size: int = 31) -> Patch:
    """Crop a patch centered at voxel ``center = (x, y, z)``.

    2D is the axial (z-constant) plane indexed ``[x, y]``. 2.5D stacks the
    sagittal ``[y, z]``, coronal ``[x, z]`` and transversal ``[x, y]`` planes
    as channels 0, 1, 2. 3D is the cube ``[x, y, z]``.
    """
    mode = normalize_mode(mode)
    if size < 1 or size % 2 == 0:
        raise ValueError("patch size must be a positive odd integer")
    x, y, z = (int(c) for c in center)
    h = size // 2
    data = vol.data
    _check_center(data.shape, (x, y, z), margin(mode, size))
    if mode == "2d":
        values = data[x - h:x + h + 1, y - h:y + h + 1, z].copy()
    elif mode == "3d":
        values = data[x - h:x + h + 1, y - h:y + h + 1, z - h:z + h + 1].copy()
    else:
        values = np.stack([
            data[x, y - h:y + h + 1, z - h:z + h + 1],
            data[x - h:x + h + 1, y, z - h:z + h + 1],
            data[x - h:x + h + 1, y - h:y + h + 1, z],
        ])
    return Patch(mode=mode, size=size, values=values, center=(x, y, z))


def extract_patches(vol: Volume, centers: np.ndarray, mode: str, size: int) -> np.ndarray:
    """Vectorised crop of many patches; returns ``(n, *patch_shape)`` float32."""
    mode = normalize_mode(mode)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    h = size // 2
    half = margin(mode, size)
    dims = vol.data.shape
    for ax in range(3):
        if len(centers) and (centers[:, ax].min() - half[ax] < 0 or centers[:, ax].max() + half[ax] >= dims[ax]):
            raise ValueError("a patch center is too close to a volume face")
    off = np.arange(-h, h + 1)
    x, y, z = centers[:, 0], centers[:, 1], centers[:, 2]
    d = vol.data
    if mode == "2d":
        return d[x[:, None, None] + off[None, :, None], y[:, None, None] + off[None, None, :], z[:, None, None]]
    if mode == "3d":
        return d[
            x[:, None, None, None] + off[None, :, None, None],
            y[:, None, None, None] + off[None, None, :, None],
            z[:, None, None, None] + off[None, None, None, :],
        ]
    sag = d[x[:, None, None], y[:, None, None] + off[None, :, None], z[:, None, None] + off[None, None, :]]
    cor = d[x[:, None, None] + off[None, :, None], y[:, None, None], z[:, None, None] + off[None, None, :]]
    tra = d[x[:, None, None] + off[None, :, None], y[:, None, None] + off[None, None, :], z[:, None, None]]
    return np.stack([sag, cor, tra], axis=1)


def to_network_input(values: np.ndarray, mode: str) -> np.ndarray:
    """Convert ``(n, *patch_shape)`` patch values to channels-last network input."""
    mode = normalize_mode(mode)
    if mode == "2.5d":
        return np.ascontiguousarray(np.moveaxis(values, 1, -1))
    return values[..., None]


@dataclass
class TrainingSet:
    """Labeled patches stored as parallel arrays."""

    mode: str
    size: int
    centers: np.ndarray  # (n, 3) int32
    labels: np.ndarray  # (n,) uint8
    values: np.ndarray  # (n, *patch_shape) float32
    seed: int | None = None
    class_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        self.centers = np.asarray(self.centers, dtype=np.int32).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float32).reshape((-1,) + patch_shape(self.mode, self.size))
        if not (len(self.centers) == len(self.labels) == len(self.values)):
            raise ValueError("centers, labels and values disagree in length")
        labs, counts = np.unique(self.labels, return_counts=True)
        self.class_counts = {int(k): int(c) for k, c in zip(labs, counts)}

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Patch:
        return Patch(self.mode, self.size, self.values[i], tuple(int(c) for c in self.centers[i]), int(self.labels[i]))

    @property
    def patches(self) -> list[Patch]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def concatenate(cls, sets: list["TrainingSet"]) -> "TrainingSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        mode, size = sets[0].mode, sets[0].size
        if any(s.mode != mode or s.size != size for s in sets):
            raise ValueError("training sets differ in mode or size")
        return cls(
            mode=mode,
            size=size,
            centers=np.concatenate([s.centers for s in sets]),
            labels=np.concatenate([s.labels for s in sets]),
            values=np.concatenate([s.values for s in sets]),
            seed=sets[0].seed,
        )


def eligible_centers(labels: LabelVolume, cls: int, size: int) -> np.ndarray:
    """All voxels of class ``cls`` at least ``size // 2`` voxels from every face.

    Returned in ascending linear-index order as an ``(n, 3)`` array of (x, y, z).
    """
    h = size // 2
    inner = np.zeros(labels.data.shape, dtype=bool)
    inner[h:labels.data.shape[0] - h, h:labels.data.shape[1] - h, h:labels.data.shape[2] - h] = True
    sel = (labels.data == cls) & inner
    # Fortran order ravel == linear index order
    flat = np.flatnonzero(sel.ravel(order="F"))
    return np.stack(np.unravel_index(flat, sel.shape, order="F"), axis=1)


def sample_training_set(
    vol: Volume,
    labels: LabelVolume,
    per_class_count: int,
    mode: str = "2d",
    size: int = 31,
    seed: int = 0,
    classes=None,
) -> TrainingSet:
    """Draw ``per_class_count`` centers per class uniformly without replacement.

    Classes default to background plus every region present in ``labels``.
    A class with fewer eligible centers contributes all of them (with a warning).
    """
    mode = normalize_mode(mode)
    if vol.dims != labels.dims:
        raise ValueError("volume and label dims differ")
    if classes is None:
        classes = [0] + labels.regions
    rng = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
    all_centers, all_labels = [], []
    for cls in classes:
        cand = eligible_centers(labels, cls, size)
        if len(cand) == 0:
            raise ValueError(f"class {cls} has no eligible patch centers")
        if len(cand) < per_class_count:
            warnings.warn(f"class {cls}: only {len(cand)} eligible centers, using all of them")
            picked = cand
        else:
            picked = cand[np.sort(rng.choice(len(cand), per_class_count, replace=False))]
        all_centers.append(picked)
        all_labels.append(np.full(len(picked), cls, dtype=np.uint8))
    centers = np.concatenate(all_centers)
    values = extract_patches(vol, centers, mode, size)
    return TrainingSet(mode, size, centers, np.concatenate(all_labels), values, seed=seed)


def save_training_set(ts: TrainingSet, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_TS_MAGIC)
        fh.write(struct.pack("<IBHQ", _TS_VERSION, _MODE_CODES[ts.mode], ts.size, len(ts)))
        rec = np.dtype([
            ("center", "<i4", (3,)),
            ("label", "u1"),
            ("values", "<f4", (int(np.prod(patch_shape(ts.mode, ts.size))),)),
        ])
        arr = np.empty(len(ts), dtype=rec)
        arr["center"] = ts.centers
        arr["label"] = ts.labels
        arr["values"] = ts.values.reshape(len(ts), -1)
        fh.write(arr.tobytes())


def load_training_set(path) -> TrainingSet:
    raw = Path(path).read_bytes()
    if raw[:4] != _TS_MAGIC:
        raise ValueError(f"{path}: not a training-set file")
    version, mode_code, size, count = struct.unpack_from("<IBHQ", raw, 4)
    if version != _TS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    mode = {v: k for k, v in _MODE_CODES.items()}[mode_code]
    rec = np.dtype([
        ("center", "<i4", (3,)),
        ("label", "u1"),
        ("values", "<f4", (int(np.prod(patch_shape(mode, size))),)),
    ])
    offset = 4 + struct.calcsize("<IBHQ")
    if len(raw) - offset != count * rec.itemsize:
        raise ValueError(f"{path}: truncated or oversized payload")
    arr = np.frombuffer(raw, dtype=rec, count=count, offset=offset)
    return TrainingSet(mode, size, arr["center"], arr["label"], arr["values"])
