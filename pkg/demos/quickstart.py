"""Train, vote and segment on small synthetic phantoms in about ten seconds.

Run with ``python demos/quickstart.py``. Everything stays in memory; the CLI
walkthrough in the README does the same with files.
"""

import time

import numpy as np

from houghcnn.dense import dense_forward, semantic_segment
from houghcnn.evaluation import evaluate_labels, summarize
from houghcnn.hough import HoughConfig, calibrate_threshold, segment_all_regions, segment_region
from houghcnn.houghdb import build_database, region_centroid
from houghcnn.net import TrainConfig, init_msra, parse_arch, train
from houghcnn.patch import TrainingSet, sample_training_set
from houghcnn.phantom import PhantomSpec, RegionSpec, cohort_specs, generate_phantom

t0 = time.time()

# Two blobs in a 40^3 volume; the cohort jitters their centers, sizes and brightness.
spec = PhantomSpec(
    dims=(40, 40, 40),
    regions=[
        RegionSpec(1, (20.0, 20.0, 13.0), (6.0, 6.0, 5.0), exponent=2.0, intensity=1.0, gradient=0.03),
        RegionSpec(2, (20.0, 20.0, 27.0), (5.0, 5.0, 5.0), exponent=2.5, intensity=0.65, gradient=-0.03),
    ],
    background=0.3, noise_sigma=0.03, speckle=0.05, texture_scale=2.0, texture_amplitude=0.05, seed=10,
)


def cohort(seed, n):
    base = PhantomSpec(**{**spec.__dict__, "seed": seed})
    return [generate_phantom(s) for s in cohort_specs(base, n, jitter=1.5, seed=seed)]


train_set, val_set, test_set = cohort(100, 4), cohort(200, 2), cohort(300, 4)
print(f"phantoms ready ({time.time() - t0:.0f} s)")

# A small 2D network: 19x19 input, two conv layers, a 16-wide feature layer, 3 classes.
arch = parse_arch("I19.C5x8.P3s2.C3x16.F16.F3", num_classes=3)
patches = TrainingSet.concatenate(
    [sample_training_set(v, lab, 400, "2d", arch.input_size, seed=i) for i, (v, lab) in enumerate(train_set)]
)
net, logs = train(init_msra(arch, seed=0), patches, TrainConfig(epochs=6, batch_size=64))
print(f"trained on {len(patches)} patches, final accuracy {logs[-1].accuracy:.3f} ({time.time() - t0:.0f} s)")

# One database per region, from a single dense pass over each training volume.
dense = [dense_forward(net, v, "2d") for v, _ in train_set]
dbs = [build_database(net, train_set, r, "2d", stride=2, dense_outputs=dense) for r in (1, 2)]
print("database records:", {db.region: len(db) for db in dbs})

# The seg-map threshold is chosen on the validation phantoms only.
pairs = []
for v, lab in val_set:
    d = dense_forward(net, v, "2d")
    for db in dbs:
        rep = segment_region(d, db, HoughConfig(), v.dims)
        pairs.append((rep.seg_map, lab.data == db.region))
threshold, _ = calibrate_threshold(pairs)
cfg = HoughConfig(r=3, sigma=1, K=20, threshold=threshold)
print(f"calibrated threshold {threshold}")

hough, semantic = [], []
for i, (v, lab) in enumerate(test_set):
    d = dense_forward(net, v, "2d")
    seg, reports = segment_all_regions(v, net, dbs, cfg, "2d", dense=d)
    hough += evaluate_labels(seg, lab, v.spacing, regions=[1, 2])
    semantic += evaluate_labels(semantic_segment(net, v, "2d", dense=d), lab, v.spacing, regions=[1, 2])
    errs = [np.linalg.norm(np.subtract(r.centroid, region_centroid(lab, r.region))) if r.success else np.inf
            for r in reports]
    print(f"test {i}: centroid errors {np.round(errs, 2)} voxels")

for name, res in (("hough", hough), ("semantic", semantic)):
    s = summarize(res)
    print(f"{name:9s} mean Dice {s.mean_dice:.3f}  failures {s.failure_rate:.0%}  "
          f"mean surface distance {s.mean_distance:.2f} mm")
print(f"done in {time.time() - t0:.0f} s")
