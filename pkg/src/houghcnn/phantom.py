"""Synthetic textured phantoms with superellipsoid regions and signal dropout.

Each region has its own mean intensity and a linear intensity ramp along z,
so that even a single axial slice carries information about where inside
the region it was taken. The background gets band-limited texture, then
multiplicative speckle and additive Gaussian noise are applied, and finally
dropout zones attenuate the signal. Labels come straight from the analytic
shapes and are never touched by noise or dropout.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume


class PhantomSpecError(ValueError):
    pass


@dataclass
class RegionSpec:
    id: int
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    exponent: float = 2.0
    intensity: float = 1.0
    gradient: float = 0.0  # intensity change per voxel along z, relative to the center

    def mask(self, dims) -> np.ndarray:
        grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
        acc = np.zeros(dims)
        for g, c, r in zip(grids, self.center, self.radii):
            acc += np.abs((g - c) / r) ** self.exponent
        return acc <= 1.0

    def bounds_ok(self, dims) -> bool:
        return all(c - r >= 0 and c + r <= n - 1 for c, r, n in zip(self.center, self.radii, dims))


@dataclass
class Artifact:
    """Signal dropout. ``slab``: voxels with ``lo <= coord[axis] < hi``; ``cone``:
    voxels within ``half_angle`` degrees of ``direction`` seen from ``apex``."""

    kind: str = "slab"
    attenuation: float = 0.2
    axis: int = 2
    lo: float = 0.0
    hi: float = 0.0
    apex: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    half_angle: float = 15.0

    def mask(self, dims) -> np.ndarray:
        grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
        if self.kind == "slab":
            g = grids[self.axis]
            return (g >= self.lo) & (g < self.hi)
        if self.kind == "cone":
            rel = np.stack([g - a for g, a in zip(grids, self.apex)], axis=-1)
            d = np.asarray(self.direction, dtype=np.float64)
            d = d / np.linalg.norm(d)
            along = rel @ d
            norm = np.linalg.norm(rel, axis=-1)
            with np.errstate(invalid="ignore", divide="ignore"):
                cos = np.where(norm > 0, along / norm, 1.0)
            return (along > 0) & (cos >= np.cos(np.deg2rad(self.half_angle)))
        raise PhantomSpecError(f"unknown artifact kind {self.kind!r}")


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    regions: list[RegionSpec] = field(default_factory=list)
    background: float = 0.3
    noise_sigma: float = 0.03
    speckle: float = 0.05
    texture_scale: float = 2.0
    texture_amplitude: float = 0.05
    artifacts: list[Artifact] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise PhantomSpecError("dims must be three positive integers")
        if any(s <= 0 for s in self.spacing):
            raise PhantomSpecError("spacing must be positive")
        ids = [r.id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise PhantomSpecError("region ids must be unique")
        for r in self.regions:
            if not 1 <= r.id <= 255:
                raise PhantomSpecError(f"region id {r.id} outside 1..255")
            if any(v <= 0 for v in r.radii) or r.exponent <= 0:
                raise PhantomSpecError(f"region {r.id}: radii and exponent must be positive")
            if not r.bounds_ok(self.dims):
                raise PhantomSpecError(f"region {r.id} does not fit inside {tuple(self.dims)}")
        if self.noise_sigma < 0 or self.speckle < 0 or self.texture_amplitude < 0:
            raise PhantomSpecError("noise, speckle and texture amplitude must be non-negative")
        for a in self.artifacts:
            if a.kind not in ("slab", "cone"):
                raise PhantomSpecError(f"unknown artifact kind {a.kind!r}")
            if not 0 <= a.attenuation <= 1:
                raise PhantomSpecError("artifact attenuation must lie in [0, 1]")


def default_spec(seed: int = 0) -> PhantomSpec:
    """Two stacked spheres of different brightness in a 64-cube."""
    return PhantomSpec(
        regions=[
            RegionSpec(1, (32.0, 32.0, 21.0), (8.0, 8.0, 8.0), 2.0, 1.0, 0.03),
            RegionSpec(2, (32.0, 32.0, 43.0), (7.0, 7.0, 7.0), 2.0, 0.65, -0.03),
        ],
        seed=seed,
    )


# -- key/value text format -----------------------------------------------

_SCALARS = ("background", "noise_sigma", "speckle", "texture_scale", "texture_amplitude")


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def spec_to_text(spec: PhantomSpec) -> str:
    lines = [f"dims = {_fmt(tuple(int(n) for n in spec.dims))}", f"spacing = {_fmt(tuple(map(float, spec.spacing)))}"]
    lines += [f"{k} = {_fmt(float(getattr(spec, k)))}" for k in _SCALARS]
    lines.append(f"seed = {int(spec.seed)}")
    for r in spec.regions:
        p = f"region.{r.id}"
        lines += [
            f"{p}.center = {_fmt(tuple(map(float, r.center)))}",
            f"{p}.radii = {_fmt(tuple(map(float, r.radii)))}",
            f"{p}.exponent = {_fmt(float(r.exponent))}",
            f"{p}.intensity = {_fmt(float(r.intensity))}",
            f"{p}.gradient = {_fmt(float(r.gradient))}",
        ]
    for i, a in enumerate(spec.artifacts):
        for f in dataclasses.fields(Artifact):
            v = getattr(a, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and f.name != "axis":
                v = float(v)
            elif isinstance(v, tuple):
                v = tuple(map(float, v))
            lines.append(f"artifact.{i}.{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _floats(s, n=None, key=""):
    try:
        vals = tuple(float(t) for t in s.split())
    except ValueError:
        raise PhantomSpecError(f"{key}: expected numbers, got {s!r}") from None
    if n is not None and len(vals) != n:
        raise PhantomSpecError(f"{key}: expected {n} values, got {len(vals)}")
    return vals


def parse_spec(text: str) -> PhantomSpec:
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PhantomSpecError(f"line {lineno}: expected 'key = value'")
        k, v = (t.strip() for t in line.split("=", 1))
        if k in kv:
            raise PhantomSpecError(f"line {lineno}: duplicate key {k!r}")
        kv[k] = v
    spec = PhantomSpec()
    regions: dict[int, dict] = {}
    artifacts: dict[int, dict] = {}
    for k, v in kv.items():
        parts = k.split(".")
        if k == "dims":
            vals = _floats(v, 3, k)
            if any(x != int(x) for x in vals):
                raise PhantomSpecError("dims must be integers")
            spec.dims = tuple(int(x) for x in vals)
        elif k == "spacing":
            spec.spacing = _floats(v, 3, k)
        elif k in _SCALARS:
            setattr(spec, k, _floats(v, 1, k)[0])
        elif k == "seed":
            try:
                spec.seed = int(v)
            except ValueError:
                raise PhantomSpecError(f"seed: expected an integer, got {v!r}") from None
        elif len(parts) == 3 and parts[0] == "region" and parts[1].isdigit():
            regions.setdefault(int(parts[1]), {})[parts[2]] = (k, v)
        elif len(parts) == 3 and parts[0] == "artifact" and parts[1].isdigit():
            artifacts.setdefault(int(parts[1]), {})[parts[2]] = (k, v)
        else:
            raise PhantomSpecError(f"unknown key {k!r}")
    for rid in sorted(regions):
        fields = regions[rid]
        unknown = set(fields) - {"center", "radii", "exponent", "intensity", "gradient"}
        if unknown:
            raise PhantomSpecError(f"region {rid}: unknown keys {sorted(unknown)}")
        if "center" not in fields or "radii" not in fields:
            raise PhantomSpecError(f"region {rid}: center and radii are required")
        r = RegionSpec(rid, _floats(fields["center"][1], 3, fields["center"][0]), _floats(fields["radii"][1], 3, fields["radii"][0]))
        for name in ("exponent", "intensity", "gradient"):
            if name in fields:
                setattr(r, name, _floats(fields[name][1], 1, fields[name][0])[0])
        spec.regions.append(r)
    names = {f.name for f in dataclasses.fields(Artifact)}
    for i in sorted(artifacts):
        a = Artifact()
        for name, (k, v) in artifacts[i].items():
            if name not in names:
                raise PhantomSpecError(f"unknown key {k!r}")
            if name == "kind":
                a.kind = v
            elif name == "axis":
                a.axis = int(_floats(v, 1, k)[0])
            elif name in ("apex", "direction"):
                setattr(a, name, _floats(v, 3, k))
            else:
                setattr(a, name, _floats(v, 1, k)[0])
        spec.artifacts.append(a)
    spec.validate()
    return spec


def load_spec(path) -> PhantomSpec:
    return parse_spec(Path(path).read_text())


def save_spec(spec: PhantomSpec, path) -> None:
    Path(path).write_text(spec_to_text(spec))


# -- generation ----------------------------------------------------------


def _rng(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def _texture(rng, dims, scale):
    noise = rng.standard_normal(dims)
    if scale > 0:
        noise = ndimage.gaussian_filter(noise, scale, mode="wrap")
    sd = noise.std()
    return noise / sd if sd > 0 else noise


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Image and exact labels for ``spec``; bitwise reproducible from ``spec.seed``."""
    spec.validate()
    dims = tuple(int(n) for n in spec.dims)
    rng = _rng(spec.seed)
    labels = np.zeros(dims, dtype=np.uint8)
    img = np.full(dims, spec.background, dtype=np.float64)
    z = np.arange(dims[2], dtype=np.float64)[None, None, :]
    for r in spec.regions:
        m = r.mask(dims)
        labels[m] = r.id
        field_ = r.intensity + r.gradient * (z - r.center[2])
        img = np.where(m, np.broadcast_to(field_, dims), img)
    if spec.texture_amplitude > 0:
        img = img + spec.texture_amplitude * _texture(rng, dims, spec.texture_scale)
    if spec.speckle > 0:
        img = img * (1.0 + spec.speckle * rng.standard_normal(dims))
    if spec.noise_sigma > 0:
        img = img + spec.noise_sigma * rng.standard_normal(dims)
    for a in spec.artifacts:
        img = np.where(a.mask(dims), img * a.attenuation, img)
    return (Volume(data=img.astype(np.float32), spacing=tuple(spec.spacing)),
            LabelVolume(data=labels, spacing=tuple(spec.spacing)))


def jitter_spec(base: PhantomSpec, rng, jitter: float, radius_jitter: float, intensity_jitter: float, seed: int) -> PhantomSpec:
    regions = []
    for r in base.regions:
        c = tuple(float(v) for v in np.asarray(r.center) + jitter * rng.standard_normal(3))
        rad = tuple(float(v) for v in np.asarray(r.radii) * (1.0 + radius_jitter * rng.standard_normal()))
        inten = float(r.intensity * (1.0 + intensity_jitter * rng.standard_normal()))
        regions.append(dataclasses.replace(r, center=c, radii=rad, intensity=inten))
    return dataclasses.replace(base, regions=regions, artifacts=list(base.artifacts), seed=seed)


def cohort_specs(base: PhantomSpec, n: int, jitter: float = 0.0, seed: int = 0,
                 radius_jitter: float | None = None, intensity_jitter: float | None = None) -> list[PhantomSpec]:
    """Jittered copies of ``base``; phantom ``i`` draws its noise from seed ``base.seed + i``.

    ``jitter`` is the per-axis center standard deviation in voxels. Radii and
    intensities are scaled by ``1 + N(0, s)`` with ``s`` defaulting to
    ``jitter / 20`` and ``jitter / 50``.
    """
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    base.validate()
    rj = jitter / 20.0 if radius_jitter is None else radius_jitter
    ij = jitter / 50.0 if intensity_jitter is None else intensity_jitter
    rng = _rng(seed)
    specs = []
    for i in range(n):
        s = jitter_spec(base, rng, jitter, rj, ij, base.seed + i)
        for r in s.regions:
            if not r.bounds_ok(s.dims):
                raise PhantomSpecError(f"phantom {i}: jitter pushed region {r.id} out of bounds")
        specs.append(s)
    return specs


def generate_cohort(base: PhantomSpec, n: int, jitter: float = 0.0, seed: int = 0, **kw):
    """List of ``(Volume, LabelVolume)`` for :func:`cohort_specs`."""
    return [generate_phantom(s) for s in cohort_specs(base, n, jitter, seed, **kw)]
