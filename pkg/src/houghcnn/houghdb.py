"""Per-region database of (feature, vote, segmentation patch) records.

A vote is the displacement from the voxel a record was collected at to the
centroid of its region, so ``position + vote`` lands on the centroid.
Segmentation patches are either stored inline as packed bit masks or fetched
on demand from the training label volumes by (volume id, center).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dense import dense_forward
from .net.network import Network
from .volume import LabelVolume, Volume, load_volume

MAGIC = b"HCDB"
VERSION = 1
STORAGE_REF, STORAGE_INLINE = 0, 1
SEG_PATCH = 9


class HoughDBError(ValueError):
    pass


def region_centroid(labels: LabelVolume | np.ndarray, region: int) -> np.ndarray:
    """Mean (x, y, z) coordinate of the voxels labeled ``region``."""
    data = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    coords = np.argwhere(data == region)
    if len(coords) == 0:
        raise HoughDBError(f"region {region} is empty")
    return coords.mean(axis=0)


def crop_seg_patch(mask: np.ndarray, center, side: int = SEG_PATCH) -> np.ndarray:
    """``side``-cube of a binary mask around ``center``; outside the volume reads as 0."""
    h = side // 2
    out = np.zeros((side,) * 3, dtype=np.uint8)
    src, dst = [], []
    for c, n in zip(center, mask.shape):
        lo, hi = int(c) - h, int(c) + h + 1
        if hi <= 0 or lo >= n:
            return out
        src.append(slice(max(lo, 0), min(hi, n)))
        dst.append(slice(max(lo, 0) - lo, side - (hi - min(hi, n))))
    out[tuple(dst)] = mask[tuple(src)]
    return out


@dataclass
class HoughDatabase:
    region: int
    features: np.ndarray  # (n, d) float32
    votes: np.ndarray  # (n, 3) float32, centroid - position
    positions: np.ndarray  # (n, 3) int32, collection voxel
    volume_ids: np.ndarray  # (n,) int32, index into manifest
    seg_patch: int = SEG_PATCH
    inline_masks: np.ndarray | None = None  # (n, s, s, s) uint8 when stored inline
    manifest: list[str] = field(default_factory=list)
    label_sources: list[np.ndarray] | None = None  # region masks for by-reference storage
    d: int | None = None
    manifest_root: str | None = None  # base for relative manifest paths

    def __post_init__(self):
        if self.region < 1:
            raise HoughDBError("region id must be >= 1")
        if self.seg_patch % 2 == 0:
            raise HoughDBError("segmentation patch side must be odd")
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.d is None:
            self.d = self.features.shape[1] if self.features.ndim == 2 else 0
        self.features = self.features.reshape(-1, self.d)
        self.votes = np.asarray(self.votes, dtype=np.float32).reshape(-1, 3)
        self.positions = np.asarray(self.positions, dtype=np.int32).reshape(-1, 3)
        self.volume_ids = np.asarray(self.volume_ids, dtype=np.int32).reshape(-1)
        if self.inline_masks is not None:
            self.inline_masks = np.asarray(self.inline_masks, dtype=np.uint8).reshape((-1,) + (self.seg_patch,) * 3)
        n = len(self.features)
        if not (len(self.votes) == len(self.positions) == len(self.volume_ids) == n):
            raise HoughDBError("record arrays disagree in length")
        self._index = None
        self._patch_cache = None

    def __len__(self):
        return len(self.features)

    @property
    def storage(self) -> int:
        return STORAGE_INLINE if self.inline_masks is not None else STORAGE_REF

    def resolved_manifest(self) -> list[str]:
        root = Path(self.manifest_root) if self.manifest_root else Path(".")
        return [p if os.path.isabs(p) else str(root / p) for p in self.manifest]

    def seg_patches(self, idx=None) -> np.ndarray:
        """Binary segmentation patches for record indices ``idx`` (all when None)."""
        if self.inline_masks is not None:
            return self.inline_masks if idx is None else self.inline_masks[idx]
        if self._patch_cache is None:
            if self.label_sources is None:
                self.label_sources = [_load_mask(p, self.region) for p in self.resolved_manifest()]
            if len(self):
                self._patch_cache = np.stack([
                    crop_seg_patch(self.label_sources[v], pos, self.seg_patch)
                    for v, pos in zip(self.volume_ids, self.positions)
                ])
            else:
                self._patch_cache = np.zeros((0,) + (self.seg_patch,) * 3, np.uint8)
        return self._patch_cache if idx is None else self._patch_cache[idx]

    def index(self, method: str = "auto") -> "KnnIndex":
        if self._index is None or self._index.method_requested != method:
            self._index = KnnIndex(self.features, method)
        return self._index

    def knn(self, queries, K: int = 20, max_dist: float = np.inf, method: str = "auto"):
        return self.index(method).query(queries, K, max_dist)


def _load_mask(path, region):
    vol = load_volume(path)
    if not isinstance(vol, LabelVolume):
        raise HoughDBError(f"{path} is not a label volume")
    return vol.data == region


# -- exact K-NN ----------------------------------------------------------

KDTREE_MAX_DIM = 16


class KnnIndex:
    """Exact Euclidean K-NN with ties broken by record index.

    ``method`` is ``"kdtree"``, ``"blas"`` (blocked matrix products) or
    ``"auto"`` (kd-tree up to ``KDTREE_MAX_DIM`` dimensions). Either way the
    candidates are re-ranked with directly computed distances, so results
    match a plain brute-force scan exactly.
    """

    def __init__(self, data: np.ndarray, method: str = "auto"):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.method_requested = method
        if method == "auto":
            method = "kdtree" if self.data.shape[1] <= KDTREE_MAX_DIM else "blas"
        if method not in ("kdtree", "blas"):
            raise ValueError(f"unknown knn method {method!r}")
        self.method = method
        self._tree = cKDTree(self.data) if method == "kdtree" and len(self.data) else None
        self._sqnorm = (self.data ** 2).sum(axis=1)

    def _candidates(self, q: np.ndarray, kk: int, max_dist: float) -> np.ndarray:
        n = len(self.data)
        if self.method == "kdtree":
            bound = max_dist * (1 + 1e-9) + 1e-12 if np.isfinite(max_dist) else np.inf
            _, idx = self._tree.query(q, k=kk, distance_upper_bound=bound)
            idx = np.asarray(idx).reshape(len(q), kk)
            return np.where(idx >= n, -1, idx)
        d2 = self._sqnorm[None, :] - 2.0 * (q @ self.data.T) + (q ** 2).sum(axis=1)[:, None]
        if kk < n:
            return np.argpartition(d2, kk - 1, axis=1)[:, :kk]
        return np.broadcast_to(np.arange(n), (len(q), n))

    def _exact(self, q, cand, max_dist):
        safe = np.where(cand < 0, 0, cand)
        diff = self.data[safe] - q[:, None, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
        return np.where((cand < 0) | ~(dist < max_dist), np.inf, dist)

    def query(self, queries, K: int = 20, max_dist: float = np.inf, block: int = 1024):
        """Indices and distances of up to ``K`` records closer than ``max_dist``.

        Returns ``(idx, dist)`` of shape ``(nq, K)``; missing slots hold -1 / inf.
        Rows are sorted by ascending distance, then record index.
        """
        q_all = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        nq, n = len(q_all), len(self.data)
        out_idx = np.full((nq, K), -1, dtype=np.int64)
        out_d = np.full((nq, K), np.inf)
        if n == 0 or nq == 0 or K < 1 or max_dist <= 0:
            return out_idx, out_d
        # slack absorbs floating-point disagreement between the fast and exact distances
        kk = min(n, K + 8)
        for s in range(0, nq, block):
            q = q_all[s:s + block]
            cand = self._candidates(q, kk, max_dist)
            dist = self._exact(q, cand, max_dist)
            i_sorted, d_sorted = _rank(cand, dist, K)
            if kk < n:
                # a record outside the candidate set may still tie or beat the
                # K-th distance when every candidate is about as close as it
                full = (cand >= 0).all(axis=1)
                kth = d_sorted[:, -1] if d_sorted.shape[1] == K else np.full(len(q), np.inf)
                kth = np.where(np.isfinite(kth), kth, max_dist)
                worst = dist.max(axis=1)
                unsure = full & ~(worst > kth + 1e-6 * (1.0 + np.abs(kth)))
                for r in np.flatnonzero(unsure):
                    everything = np.arange(n)[None, :]
                    ri, rd = _rank(everything, self._exact(q[r:r + 1], everything, max_dist), K)
                    i_sorted[r], d_sorted[r] = ri[0], rd[0]
            out_idx[s:s + len(q), : i_sorted.shape[1]] = i_sorted
            out_d[s:s + len(q), : i_sorted.shape[1]] = d_sorted
        return out_idx, out_d


def _rank(cand, dist, K):
    cand = np.broadcast_to(cand, dist.shape)
    key_idx = np.where(np.isinf(dist), np.iinfo(np.int64).max, cand)
    order = np.lexsort((key_idx, dist), axis=1)[:, :K]
    r = np.arange(len(dist))[:, None]
    d_sorted, i_sorted = dist[r, order], cand[r, order]
    return np.where(np.isinf(d_sorted), -1, i_sorted), d_sorted


def knn_query(db: HoughDatabase, feature, K: int = 20, max_dist: float = np.inf, method: str = "auto"):
    """List of ``(record index, distance)`` for one query feature, nearest first."""
    idx, dist = db.knn(np.asarray(feature)[None], K, max_dist, method)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0]) if i >= 0]


# -- construction --------------------------------------------------------


def build_database(
    net: Network,
    volumes: list[tuple[Volume, LabelVolume]],
    region: int,
    mode: str = "2d",
    stride: int = 1,
    inline_masks: bool = False,
    seg_patch: int = SEG_PATCH,
    manifest: list[str] | None = None,
    threads: int = 1,
    dense_outputs=None,
) -> HoughDatabase:
    """Collect one record per sampled foreground voxel of ``region``.

    Foreground voxels whose patch fits in the volume are enumerated in
    linear-index order and every ``stride**3``-th one is kept. Precomputed
    ``dense_outputs`` (one per volume) skip the network pass.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not volumes:
        raise ValueError("no training volumes")
    feats, votes, positions, vids, masks, sources = [], [], [], [], [], []
    for j, (vol, lab) in enumerate(volumes):
        mask = lab.data == region
        if not mask.any():
            raise HoughDBError(f"region {region} is empty in volume {j}")
        centroid = region_centroid(lab, region)
        dense = dense_outputs[j] if dense_outputs is not None else dense_forward(net, vol, mode, threads=threads)
        o = np.array(dense.origin)
        inner = np.zeros_like(mask)
        ix, iy, iz = dense.dims
        inner[o[0]:o[0] + ix, o[1]:o[1] + iy, o[2]:o[2] + iz] = True
        sel = mask & inner
        flat = np.flatnonzero(sel.ravel(order="F"))[:: stride ** 3]
        pos = np.stack(np.unravel_index(flat, sel.shape, order="F"), axis=1)
        rel = pos - o
        feats.append(dense.features[rel[:, 0], rel[:, 1], rel[:, 2]])
        votes.append(centroid[None, :] - pos)
        positions.append(pos)
        vids.append(np.full(len(pos), j))
        sources.append(mask)
        if inline_masks:
            masks.append(
                np.stack([crop_seg_patch(mask, p, seg_patch) for p in pos])
                if len(pos) else np.zeros((0,) + (seg_patch,) * 3, np.uint8)
            )
    return HoughDatabase(
        region=region,
        features=np.concatenate(feats),
        votes=np.concatenate(votes),
        positions=np.concatenate(positions),
        volume_ids=np.concatenate(vids),
        seg_patch=seg_patch,
        inline_masks=np.concatenate(masks) if inline_masks else None,
        manifest=list(manifest) if manifest else [f"volume_{j}" for j in range(len(volumes))],
        label_sources=sources,
        d=feats[0].shape[1],
    )


# -- file format ---------------------------------------------------------


def _record_dtype(d: int, storage: int, side: int):
    fields = [("feature", "<f4", (d,)), ("vote", "<f4", (3,)), ("volume", "<u4"), ("center", "<i4", (3,))]
    if storage == STORAGE_INLINE:
        fields.append(("mask", "u1", ((side ** 3 + 7) // 8,)))
    return np.dtype(fields)


def db_to_bytes(db: HoughDatabase) -> bytes:
    parts = [MAGIC, struct.pack("<IHHBB", VERSION, db.region, db.d, db.seg_patch, db.storage)]
    parts.append(struct.pack("<I", len(db.manifest)))
    for p in db.manifest:
        b = str(p).encode("utf-8")
        parts.append(struct.pack("<I", len(b)) + b)
    parts.append(struct.pack("<Q", len(db)))
    rec = np.zeros(len(db), dtype=_record_dtype(db.d, db.storage, db.seg_patch))
    rec["feature"] = db.features
    rec["vote"] = db.votes
    rec["volume"] = db.volume_ids
    rec["center"] = db.positions
    if db.storage == STORAGE_INLINE:
        rec["mask"] = np.packbits(db.inline_masks.reshape(len(db), -1), axis=1)
    parts.append(rec.tobytes())
    return b"".join(parts)


def save_db(db: HoughDatabase, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(db_to_bytes(db))
    os.replace(tmp, path)


def load_db(path, resolve_relative_to=None) -> HoughDatabase:
    """Read a database file.

    Relative manifest paths are resolved against ``resolve_relative_to``
    (default: the database file's directory) when patches are first needed.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise HoughDBError(f"{path}: bad magic")
    try:
        version, region, d, side, storage = struct.unpack_from("<IHHBB", raw, 4)
        if version != VERSION:
            raise HoughDBError(f"{path}: unsupported version {version}")
        off = 4 + struct.calcsize("<IHHBB")
        (nman,) = struct.unpack_from("<I", raw, off)
        off += 4
        manifest = []
        for _ in range(nman):
            (ln,) = struct.unpack_from("<I", raw, off)
            off += 4
            manifest.append(raw[off:off + ln].decode("utf-8"))
            off += ln
        (count,) = struct.unpack_from("<Q", raw, off)
        off += 8
    except struct.error as exc:
        raise HoughDBError(f"{path}: truncated header ({exc})") from None
    dt = _record_dtype(d, storage, side)
    if len(raw) - off != count * dt.itemsize:
        raise HoughDBError(f"{path}: payload size does not match {count} records")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=off)
    inline = None
    if storage == STORAGE_INLINE:
        inline = np.unpackbits(rec["mask"], axis=1, count=side ** 3).reshape((count,) + (side,) * 3)
    return HoughDatabase(
        region=region,
        features=rec["feature"].copy(),
        votes=rec["vote"].copy(),
        positions=rec["center"].copy(),
        volume_ids=rec["volume"].astype(np.int32),
        seg_patch=side,
        inline_masks=inline,
        manifest=manifest,
        d=d,
        manifest_root=str(resolve_relative_to or path.parent),
    )
