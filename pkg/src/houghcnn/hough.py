"""Vote casting, localisation and patch back-projection.

For every voxel the classifier assigns to a region, the K nearest database
records (in feature space) each cast a vote at ``x + vote`` weighted by the
reciprocal feature distance. The smoothed vote map's argmax is the region
centroid; votes that landed within ``r`` of it paste their stored
segmentation patches back at their origins to form a confidence map, which
is normalised and thresholded.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dense import DenseOutput, dense_forward
from .evaluation import dice
from .houghdb import HoughDatabase
from .net.network import Network
from .volume import LabelVolume, Volume


@dataclass
class HoughConfig:
    r: float = 3.0
    sigma: float = 1.0
    K: int = 20
    max_dist: float = np.inf
    seg_patch: int = 9
    threshold: float = 0.5
    eps_w: float = 1e-6

    def __post_init__(self):
        if self.r < 0 or self.sigma < 0:
            raise ValueError("r and sigma must be non-negative")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.eps_w <= 0:
            raise ValueError("eps_w must be positive")


@dataclass
class CastVote:
    origin: tuple[int, int, int]
    landing: tuple[float, float, float]
    weight: float
    record: int


@dataclass
class Votes:
    """In-bounds votes, one row each, ordered by (origin linear index, neighbor rank)."""

    origins: np.ndarray  # (n, 3) int64
    landing: np.ndarray  # (n, 3) float64, continuous x + vote
    cells: np.ndarray  # (n, 3) int64, landing rounded to the nearest voxel
    weights: np.ndarray  # (n,) float64
    records: np.ndarray  # (n,) int64

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i) -> CastVote:
        return CastVote(tuple(int(v) for v in self.origins[i]), tuple(float(v) for v in self.landing[i]),
                        float(self.weights[i]), int(self.records[i]))

    def subset(self, keep) -> "Votes":
        return Votes(self.origins[keep], self.landing[keep], self.cells[keep], self.weights[keep], self.records[keep])

    @classmethod
    def empty(cls):
        z3 = np.zeros((0, 3))
        return cls(z3.astype(np.int64), z3, z3.astype(np.int64), np.zeros(0), np.zeros(0, np.int64))


@dataclass
class RegionReport:
    region: int
    success: bool
    centroid: tuple[int, int, int] | None
    survivors: int
    mask_voxels: int
    vote_mass: float = 0.0
    seg_map: np.ndarray | None = field(default=None, repr=False)


def _pmap(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _splits(n, threads):
    if threads <= 1:
        return [(0, n)]
    step = max(1, -(-n // (4 * threads)))
    return [(s, min(n, s + step)) for s in range(0, n, step)]


def _flat(cells, dims):
    """x-fastest linear index of integer cells."""
    return cells[:, 0] + dims[0] * (cells[:, 1] + dims[1] * cells[:, 2])


def _accumulate(flat_idx, weights, dims, threads):
    """Sum ``weights`` into a grid; partial grids are reduced in chunk order."""
    n = int(np.prod(dims))

    def part(span):
        s, e = span
        return np.bincount(flat_idx[s:e], weights=weights[s:e], minlength=n)

    parts = _pmap(part, _splits(len(weights), threads), threads)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total.reshape(dims, order="F")


def cast_from_features(positions, features, db: HoughDatabase, cfg: HoughConfig, dims, threads: int = 1):
    """Vote map and votes for query voxels ``positions`` with ``features``.

    ``positions`` must already be in the order votes should be listed in.
    Returns ``(vote_map, votes)``; landings outside ``dims`` are dropped.
    """
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    dims = tuple(int(d) for d in dims)
    if len(positions) == 0 or len(db) == 0:
        return np.zeros(dims), Votes.empty()
    index = db.index()
    feats = np.asarray(features, dtype=np.float64).reshape(len(positions), -1)

    def query(span):
        s, e = span
        return index.query(feats[s:e], cfg.K, cfg.max_dist)

    res = _pmap(query, _splits(len(positions), threads), threads)
    idx = np.concatenate([r[0] for r in res])
    dist = np.concatenate([r[1] for r in res])
    row, col = np.nonzero(idx >= 0)
    rec = idx[row, col]
    origins = positions[row]
    landing = origins + db.votes[rec].astype(np.float64)
    cells = np.floor(landing + 0.5).astype(np.int64)
    inside = np.all((cells >= 0) & (cells < np.array(dims)), axis=1)
    weights = 1.0 / np.maximum(dist[row, col], cfg.eps_w)
    votes = Votes(origins[inside], landing[inside], cells[inside], weights[inside], rec[inside])
    vm = _accumulate(_flat(votes.cells, dims), votes.weights, dims, threads)
    return vm, votes


def foreground_queries(dense: DenseOutput, region: int):
    """Positions (x-fastest order) and features of interior voxels classified as ``region``."""
    if dense.features is None:
        raise ValueError("dense output carries no features")
    rel = np.argwhere(dense.labels().transpose(2, 1, 0) == region)[:, ::-1]
    feats = dense.features[rel[:, 0], rel[:, 1], rel[:, 2]]
    return rel + np.asarray(dense.origin), feats


def cast_votes(vol: Volume, net: Network, db: HoughDatabase, cfg: HoughConfig, mode: str = "2d",
               dense: DenseOutput | None = None, threads: int = 1):
    """Classify ``vol`` and let every voxel labeled ``db.region`` vote."""
    if dense is None:
        dense = dense_forward(net, vol, mode, threads=threads)
    pos, feats = foreground_queries(dense, db.region)
    return cast_from_features(pos, feats, db, cfg, vol.dims, threads)


def smooth(vm: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, truncated at 3 sigma, renormalised; zero outside the grid."""
    if sigma <= 0:
        return np.asarray(vm, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(vm, dtype=np.float64), sigma, mode="constant", cval=0.0, truncate=3.0)


def localize(vm: np.ndarray, sigma: float = 1.0):
    """Centroid estimate at the smoothed vote map's maximum, or None for an empty map.

    Ties go to the lowest x-fastest linear index.
    """
    if not np.any(vm > 0):
        return None
    sm = smooth(vm, sigma)
    k = int(np.argmax(sm.ravel(order="F")))
    return tuple(int(v) for v in np.unravel_index(k, sm.shape, order="F"))


def survivors(votes: Votes, centroid, r: float) -> np.ndarray:
    """Boolean mask of votes whose continuous landing lies strictly within ``r`` of ``centroid``."""
    d = np.sqrt(((votes.landing - np.asarray(centroid, dtype=np.float64)) ** 2).sum(axis=1))
    return d < r


def backproject(votes: Votes, centroid, db: HoughDatabase, cfg: HoughConfig, dims, threads: int = 1):
    """Normalised confidence map from the surviving votes' segmentation patches.

    Returns ``(seg_map, n_survivors)``; the map is all zeros when nothing survives.
    """
    dims = tuple(int(d) for d in dims)
    if centroid is None or len(votes) == 0:
        return np.zeros(dims), 0
    keep = survivors(votes, centroid, cfg.r)
    sv = votes.subset(keep)
    if len(sv) == 0:
        return np.zeros(dims), 0
    patches = db.seg_patches(sv.records)
    side = patches.shape[1]
    h = side // 2
    n = int(np.prod(dims))
    offs = np.argwhere(np.ones((side,) * 3, bool)) - h

    def part(span):
        s, e = span
        acc = np.zeros(n)
        o, w, p = sv.origins[s:e], sv.weights[s:e], patches[s:e].reshape(e - s, -1)
        for j, off in enumerate(offs):
            vals = p[:, j]
            hit = vals != 0
            if not hit.any():
                continue
            tgt = o[hit] + off
            ok = np.all((tgt >= 0) & (tgt < np.array(dims)), axis=1)
            acc += np.bincount(_flat(tgt[ok], dims), weights=(w[hit] * vals[hit])[ok], minlength=n)
        return acc

    parts = _pmap(part, _splits(len(sv), threads), threads)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    S = total.reshape(dims, order="F")
    peak = S.max()
    if peak > 0:
        S = S / peak
    return S, len(sv)


def threshold_segmentation(seg_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(seg_map) >= threshold


CALIBRATION_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


def calibrate_threshold(pairs, grid=CALIBRATION_GRID):
    """Pick the seg-map cut that maximises mean Dice over ``(seg_map, gt_mask)`` pairs.

    Meant for validation volumes kept apart from both the database and the
    test set. Ties go to the lowest threshold. Returns ``(threshold, mean_dice_per_grid_value)``.
    """
    pairs = [(np.asarray(S), np.asarray(g, bool)) for S, g in pairs]
    if not pairs:
        raise ValueError("no validation pairs")
    grid = [float(t) for t in grid]
    if not grid or any(not 0.0 < t < 1.0 for t in grid):
        raise ValueError("calibration thresholds must lie in (0, 1)")
    scores = np.array([np.mean([dice(S >= t, g) for S, g in pairs]) for t in grid])
    return grid[int(np.argmax(scores))], scores


def segment_region(dense: DenseOutput, db: HoughDatabase, cfg: HoughConfig, dims, threads: int = 1) -> RegionReport:
    """Full voting pipeline for one region on a precomputed dense pass."""
    pos, feats = foreground_queries(dense, db.region)
    vm, votes = cast_from_features(pos, feats, db, cfg, dims, threads)
    c = localize(vm, cfg.sigma)
    S, n_surv = backproject(votes, c, db, cfg, dims, threads)
    mask = threshold_segmentation(S, cfg.threshold) if n_surv else np.zeros(dims, bool)
    n_mask = int(mask.sum())
    return RegionReport(db.region, c is not None and n_mask > 0, c, n_surv, n_mask, float(vm.sum()), S)


def segment_all_regions(vol: Volume, net: Network, dbs, cfg: HoughConfig, mode: str = "2d",
                        dense: DenseOutput | None = None, threads: int = 1):
    """Segment every region with its own database after one shared dense pass.

    Where masks overlap the higher confidence wins; equal confidence goes to
    the lower region id. Returns ``(LabelVolume, reports)``.
    """
    if dense is None:
        dense = dense_forward(net, vol, mode, threads=threads)
    dbs = sorted(dbs, key=lambda d: d.region)
    if len({d.region for d in dbs}) != len(dbs):
        raise ValueError("one database per region expected")
    sub = max(1, threads // max(1, len(dbs)))
    reports = _pmap(lambda db: segment_region(dense, db, cfg, vol.dims, sub), dbs, min(threads, len(dbs)))
    best = np.zeros(vol.dims)
    out = np.zeros(vol.dims, dtype=np.uint8)
    for rep in reports:
        if not rep.success:
            continue
        S = rep.seg_map
        take = (S >= cfg.threshold) & ((out == 0) | (S > best))
        out[take] = rep.region
        best[take] = S[take]
    for rep in reports:
        rep.mask_voxels = int((out == rep.region).sum())
    return LabelVolume(data=out, spacing=vol.spacing), reports


REPORT_HEADER = ["region", "success", "cx", "cy", "cz", "survivors", "mask_voxels"]


def write_report(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            c = r.centroid if r.centroid is not None else ("", "", "")
            w.writerow([r.region, int(r.success), *c, r.survivors, r.mask_voxels])
