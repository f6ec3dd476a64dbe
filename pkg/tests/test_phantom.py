import dataclasses

import numpy as np
import pytest

from houghcnn.houghdb import region_centroid
from houghcnn.phantom import (
    Artifact,
    PhantomSpec,
    PhantomSpecError,
    RegionSpec,
    cohort_specs,
    default_spec,
    generate_cohort,
    generate_phantom,
    parse_spec,
    spec_to_text,
)


def _sphere_spec(**kw):
    base = dict(dims=(32, 32, 32), regions=[RegionSpec(1, (15.0, 16.0, 15.5), (8.0, 8.0, 8.0), intensity=1.0)],
                background=0.0, noise_sigma=0.0, speckle=0.0, texture_amplitude=0.0)
    base.update(kw)
    return PhantomSpec(**base)


def test_clean_sphere_labels_match_threshold():
    vol, lab = generate_phantom(_sphere_spec())
    assert np.array_equal(lab.data == 1, vol.data > 0.5)


def test_sphere_volume_within_two_percent():
    _, lab = generate_phantom(_sphere_spec())
    assert abs((lab.data == 1).sum() / (4 / 3 * np.pi * 8 ** 3) - 1) < 0.02


def test_same_seed_bitwise_identical():
    a = generate_phantom(default_spec(seed=5))
    b = generate_phantom(default_spec(seed=5))
    c = generate_phantom(default_spec(seed=6))
    assert a[0].data.tobytes() == b[0].data.tobytes() and a[1].data.tobytes() == b[1].data.tobytes()
    assert a[0].data.tobytes() != c[0].data.tobytes()


def test_centroid_matches_analytic():
    spec = default_spec()
    _, lab = generate_phantom(spec)
    for r in spec.regions:
        assert np.abs(region_centroid(lab, r.id) - np.array(r.center)).max() <= 0.5


def test_dropout_changes_intensity_only():
    spec = default_spec(seed=2)
    clean_v, clean_l = generate_phantom(spec)
    art = dataclasses.replace(spec, artifacts=[Artifact("slab", 0.1, axis=2, lo=15, hi=25)])
    v, l = generate_phantom(art)
    assert np.array_equal(l.data, clean_l.data)
    assert np.allclose(v.data[:, :, 15:25], clean_v.data[:, :, 15:25] * 0.1, atol=1e-6)
    assert np.array_equal(v.data[:, :, :15], clean_v.data[:, :, :15])
    cone = dataclasses.replace(spec, artifacts=[Artifact("cone", 0.0, apex=(32, 32, 0), direction=(0, 0, 1), half_angle=10)])
    v2, l2 = generate_phantom(cone)
    assert np.array_equal(l2.data, clean_l.data)
    assert v2.data[32, 32, 40] == 0 and v2.data[5, 5, 40] == clean_v.data[5, 5, 40]


def test_validation_errors():
    with pytest.raises(PhantomSpecError):
        generate_phantom(_sphere_spec(regions=[RegionSpec(1, (3.0, 16, 16), (8.0, 8, 8))]))
    with pytest.raises(PhantomSpecError):
        generate_phantom(_sphere_spec(regions=[RegionSpec(1, (16, 16, 16), (2, 2, 2))] * 2))
    with pytest.raises(PhantomSpecError):
        generate_phantom(_sphere_spec(regions=[RegionSpec(0, (16, 16, 16), (2, 2, 2))]))


def test_text_roundtrip():
    spec = default_spec(seed=9)
    spec.artifacts = [Artifact("slab", 0.2, axis=1, lo=3, hi=9), Artifact("cone", 0.5, apex=(1, 2, 3))]
    again = parse_spec(spec_to_text(spec))
    assert again == spec
    with pytest.raises(PhantomSpecError):
        parse_spec("dims = 8 8\n")
    with pytest.raises(PhantomSpecError):
        parse_spec("colour = blue\n")
    with pytest.raises(PhantomSpecError):
        parse_spec("region.1.center = 1 1 1\n")


def test_cohort_single_no_jitter_equals_base():
    spec = default_spec(seed=3)
    (v, l), = generate_cohort(spec, 1, jitter=0.0, seed=11)
    v0, l0 = generate_phantom(spec)
    assert v == v0 and l == l0


def test_cohort_centroid_jitter_std():
    spec = default_spec()
    specs = cohort_specs(spec, 50, jitter=1.5, seed=0)
    cx = np.array([s.regions[0].center for s in specs])
    assert np.all(np.abs(cx.std(axis=0) / 1.5 - 1) < 0.3)
    assert len({s.seed for s in specs}) == 50
    # labels always fit the volume
    for v, l in generate_cohort(spec, 3, jitter=1.5, seed=0):
        assert set(np.unique(l.data)) <= {0, 1, 2}


def test_cohort_out_of_bounds():
    spec = _sphere_spec(regions=[RegionSpec(1, (9.0, 16, 16), (8.0, 8, 8))])
    with pytest.raises(PhantomSpecError):
        cohort_specs(spec, 20, jitter=3.0, seed=0)
    with pytest.raises(ValueError):
        cohort_specs(spec, 0)
