"""Overlap and surface-distance metrics plus experiment summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_SIX = ndimage.generate_binary_structure(3, 1)


def _check(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as perfect agreement."""
    a, b = _check(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def boundary(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbor (outside counts as background)."""
    m = np.asarray(mask, bool)
    inner = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return m & ~inner


def mean_surface_distance(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Mean distance in mm from each boundary voxel of ``pred`` to the nearest boundary voxel of ``gt``."""
    pred, gt = _check(pred, gt)
    if not pred.any() or not gt.any():
        raise ValueError("surface distance needs two non-empty masks")
    bp, bg = boundary(pred), boundary(gt)
    dt = ndimage.distance_transform_edt(~bg, sampling=spacing)
    return float(dt[bp].mean())


def symmetric_surface_distance(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Mean over the boundary voxels of both masks of the distance to the other boundary."""
    pred, gt = _check(pred, gt)
    if not pred.any() or not gt.any():
        raise ValueError("surface distance needs two non-empty masks")
    bp, bg = boundary(pred), boundary(gt)
    d1 = ndimage.distance_transform_edt(~bg, sampling=spacing)[bp]
    d2 = ndimage.distance_transform_edt(~bp, sampling=spacing)[bg]
    return float((d1.sum() + d2.sum()) / (len(d1) + len(d2)))


@dataclass
class RegionResult:
    region: int
    dice: float
    mean_surface_distance: float | None
    failed: bool
    volume: str = ""

    def __post_init__(self):
        if self.failed:
            self.dice = 0.0
            self.mean_surface_distance = None


def evaluate_region(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0), region: int = 1, volume: str = "") -> RegionResult:
    """Dice and directional distance; an empty prediction of a present region is a failure."""
    pred, gt = _check(pred_mask, gt_mask)
    if not pred.any():
        return RegionResult(region, 0.0, None, failed=gt.any(), volume=volume) if gt.any() else \
            RegionResult(region, 1.0, 0.0, failed=False, volume=volume)
    d = dice(pred, gt)
    msd = mean_surface_distance(pred, gt, spacing) if gt.any() else None
    return RegionResult(region, d, msd, failed=d == 0.0, volume=volume)


def evaluate_labels(pred, gt, spacing=(1.0, 1.0, 1.0), regions=None, volume: str = "") -> list[RegionResult]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    if regions is None:
        regions = sorted(int(r) for r in np.union1d(np.unique(pred), np.unique(gt)) if r > 0)
    return [evaluate_region(pred == r, gt == r, spacing, r, volume) for r in regions]


@dataclass
class Summary:
    n: int
    mean_dice: float  # failures counted as 0
    mean_dice_successful: float | None
    mean_distance: float | None  # failures excluded
    failure_rate: float


def summarize(results) -> Summary:
    results = list(results)
    if not results:
        raise ValueError("no results to summarize")
    dices = np.array([r.dice for r in results], dtype=np.float64)
    failed = np.array([r.failed for r in results])
    ok = dices[~failed]
    dists = [r.mean_surface_distance for r in results if not r.failed and r.mean_surface_distance is not None]
    return Summary(
        n=len(results),
        mean_dice=float(dices.mean()),
        mean_dice_successful=float(ok.mean()) if len(ok) else None,
        mean_distance=float(np.mean(dists)) if dists else None,
        failure_rate=float(failed.mean()),
    )


def dice_histogram(values, bin_width: float = 0.05) -> np.ndarray:
    """Counts per ``bin_width`` bin over [0, 1]; bins are right-exclusive except the last."""
    nbins = int(round(1.0 / bin_width))
    v = np.array([getattr(x, "dice", x) for x in values], dtype=np.float64)
    if np.any((v < 0) | (v > 1)):
        raise ValueError("dice values must lie in [0, 1]")
    idx = np.minimum(np.floor(v / bin_width + 1e-9).astype(np.int64), nbins - 1)
    return np.bincount(idx, minlength=nbins)


def write_results_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["volume", "region", "dice", "mean_surface_distance_mm", "failed"])
        for r in results:
            msd = "" if r.mean_surface_distance is None else f"{r.mean_surface_distance:.6f}"
            w.writerow([r.volume, r.region, f"{r.dice:.6f}", msd, int(r.failed)])


def write_histogram_csv(counts, path, bin_width: float = 0.05) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for i, c in enumerate(counts):
            w.writerow([f"{i * bin_width:.2f}", f"{(i + 1) * bin_width:.2f}", int(c)])
