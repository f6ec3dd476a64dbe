"""Whole-volume evaluation of a patch classifier.

Conv and stride-1 pool layers run on the full volume at once; dense layers
become convolutions whose kernel spans the last conv map. Pools with stride
``t > 1`` are handled by shift-and-stitch: the rest of the network runs once
per offset in ``range(t) ** rank`` and the outputs are interleaved, so every
interior voxel gets exactly the result of its own centered patch.
"""

from __future__ import annotations

import itertools
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .net import layers as L
from .net.arch import Conv, Dense, Pool
from .net.network import Network
from .patch import margin, normalize_mode
from .volume import LabelVolume, Volume

_FD_MAGIC = b"HCFD"


class VolumeTooSmall(ValueError):
    pass


@dataclass
class DenseOutput:
    """Scores (and optionally features) for the interior voxels.

    ``scores[i, j, k]`` belongs to voxel ``origin + (i, j, k)``.
    """

    origin: tuple[int, int, int]
    scores: np.ndarray  # (ix, iy, iz, num_classes)
    features: np.ndarray | None  # (ix, iy, iz, d)
    volume_dims: tuple[int, int, int]

    @property
    def dims(self):
        return self.scores.shape[:3]

    def labels(self) -> np.ndarray:
        """Per-interior-voxel argmax; ties go to the lower class id."""
        return self.scores.argmax(axis=-1)


def _patch_side_before(arch, i: int) -> int:
    """Side of a single patch's feature map entering layer ``i``."""
    return arch.spatial_trace[sum(1 for l in arch.layers[:i] if not isinstance(l, Dense))]


def _dense_kernel(net: Network, i: int, channels: int) -> np.ndarray:
    """Dense weights of layer ``i`` reshaped into a conv kernel (C, *window, n)."""
    W = net.params[i]["W"]
    rank = net.arch.rank
    if i == net.arch.dense_layers[0]:
        side = net.arch.conv_output_size
        k = W.reshape((side,) * rank + (channels, W.shape[1]))
        return np.moveaxis(k, rank, 0)
    return W.reshape((W.shape[0],) + (1,) * rank + (W.shape[1],))


def _run(net: Network, x: np.ndarray, start: int):
    """Evaluate ``layers[start:]`` densely on ``(N, *spatial, C)``.

    Returns ``(scores, features)`` maps with one entry per valid patch position.
    """
    arch = net.arch
    layers = arch.layers
    last = len(layers) - 1
    feat_layer = arch.dense_layers[-2] if len(arch.dense_layers) > 1 else None
    features = None
    for i in range(start, len(layers)):
        layer, p = layers[i], net.params[i]
        if isinstance(layer, Conv):
            z, _ = L.conv_forward(x, p["W"], p["b"])
            x = L.prelu_forward(z, p["alpha"])
        elif isinstance(layer, Pool):
            single = all(n == _patch_side_before(arch, i) for n in x.shape[1:-1])
            if layer.stride == 1 or single:
                x, _ = L.pool_forward(x, layer.size, layer.stride)
                continue
            return _shift_and_stitch(net, x, i)
        else:
            K = _dense_kernel(net, i, x.shape[-1])
            if K.shape[1] == 1:
                z = x @ K.reshape(K.shape[0], K.shape[-1]) + p["b"]
            else:
                z, _ = L.conv_forward(x, K, p["b"])
            if i == last:
                x = z
            else:
                x = L.prelu_forward(z, p["alpha"])
                if i == feat_layer:
                    features = x
    return x, features


def _shift_and_stitch(net: Network, x: np.ndarray, i: int):
    layer = net.arch.layers[i]
    t = layer.stride
    rank = x.ndim - 2
    r_rest = _patch_side_before(net.arch, i)
    out_len = [n - r_rest + 1 for n in x.shape[1:-1]]
    scores = features = None
    for offs in itertools.product(range(t), repeat=rank):
        sl = (slice(None),) + tuple(slice(o, None) for o in offs) + (slice(None),)
        pooled, _ = L.pool_forward(x[sl], layer.size, t)
        s, f = _run(net, pooled, i + 1)
        counts = [(n - o + t - 1) // t for n, o in zip(out_len, offs)]
        if scores is None:
            scores = np.empty((x.shape[0],) + tuple(out_len) + (s.shape[-1],), dtype=s.dtype)
            if f is not None:
                features = np.empty((x.shape[0],) + tuple(out_len) + (f.shape[-1],), dtype=f.dtype)
        dst = (slice(None),) + tuple(slice(o, None, t) for o in offs) + (slice(None),)
        src = (slice(None),) + tuple(slice(0, c) for c in counts) + (slice(None),)
        scores[dst] = s[src]
        if f is not None:
            features[dst] = f[src]
    return scores, features


def _chunks(n: int, size: int):
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def dense_forward(
    net: Network,
    vol: Volume,
    mode: str = "2d",
    with_features: bool = True,
    chunk: int = 8,
    threads: int = 1,
) -> DenseOutput:
    """Scores and features for every voxel whose patch fits in the volume.

    Work is split into z-chunks of ``chunk`` slices; chunks are independent
    and stitched in order, so the result does not depend on ``threads``.
    """
    mode = normalize_mode(mode)
    arch = net.arch
    p = arch.input_size
    data = np.asarray(vol.data, dtype=net.dtype)
    half = margin(mode, p)
    dims = data.shape
    if any(n < 2 * h + 1 for n, h in zip(dims, half)):
        raise VolumeTooSmall(f"volume {dims} is smaller than the {p}-voxel receptive field")
    expect_rank = 2 if mode in ("2d", "2.5d") else 3
    expect_ch = 3 if mode == "2.5d" else 1
    if arch.rank != expect_rank or arch.in_channels != expect_ch:
        raise ValueError(f"network (rank {arch.rank}, {arch.in_channels} channels) cannot evaluate {mode} patches")
    interior = tuple(n - 2 * h for n, h in zip(dims, half))

    if mode == "2d":
        def work(rng_):
            z0, z1 = rng_
            x = np.moveaxis(data[:, :, z0:z1], 2, 0)[..., None]
            s, f = _run(net, np.ascontiguousarray(x), 0)
            return np.moveaxis(s, 0, 2), (np.moveaxis(f, 0, 2) if (f is not None and with_features) else None)
        parts = _map(work, _chunks(dims[2], chunk), threads)
    elif mode == "3d":
        def work(rng_):
            z0, z1 = rng_
            s, f = _run(net, data[None, :, :, z0:z1 + p - 1, None], 0)
            return s[0], (f[0] if (f is not None and with_features) else None)
        parts = _map(work, _chunks(interior[2], chunk), threads)
    else:
        return _dense_25d(net, data, interior, half, with_features, chunk, threads, vol.dims)

    scores = np.concatenate([s for s, _ in parts], axis=2)
    feats = np.concatenate([f for _, f in parts], axis=2) if with_features and parts[0][1] is not None else None
    return DenseOutput(tuple(half), scores, feats, vol.dims)


def _dense_25d(net, data, interior, half, with_features, chunk, threads, vol_dims):
    """2.5D: the first conv runs densely on each plane orientation; the rest per voxel."""
    arch = net.arch
    first = arch.layers[0]
    if not isinstance(first, Conv):
        raise ValueError("2.5D dense evaluation needs a convolutional first layer")
    W, b, alpha = net.params[0]["W"], net.params[0]["b"], net.params[0]["alpha"]
    zero = np.zeros_like(b)
    # sagittal planes [y, z] per x; coronal [x, z] per y; transversal [x, y] per z
    sag, _ = L.conv_forward(data[..., None], W[0:1], zero)
    cor, _ = L.conv_forward(np.moveaxis(data, 1, 0)[..., None], W[1:2], zero)
    tra, _ = L.conv_forward(np.moveaxis(data, 2, 0)[..., None], W[2:3], zero)
    h = arch.input_size // 2
    p0 = arch.input_size - first.size + 1
    ix, iy, iz = interior
    xs, ys, zs = np.meshgrid(np.arange(ix) + h, np.arange(iy) + h, np.arange(iz) + h, indexing="ij")
    centers = np.stack([xs.ravel(order="F"), ys.ravel(order="F"), zs.ravel(order="F")], axis=1)
    off = np.arange(p0)

    def work(rng_):
        c = centers[rng_[0]:rng_[1]]
        x, y, z = (c[:, k][:, None, None] for k in range(3))
        u, v = off[None, :, None], off[None, None, :]
        grid = sag[x, y - h + u, z - h + v] + cor[y, x - h + u, z - h + v] + tra[z, x - h + u, y - h + v] + b
        s, f = _run(net, L.prelu_forward(grid, alpha), 1)
        return s.reshape(len(c), -1), (f.reshape(len(c), -1) if f is not None and with_features else None)

    step = max(1, chunk) * 64
    parts = _map(work, _chunks(len(centers), step), threads)
    feats = None
    if with_features and parts[0][1] is not None:
        feats = np.concatenate([f for _, f in parts])
        feats = feats.reshape((iz, iy, ix, -1)).transpose(2, 1, 0, 3)
    scores = np.concatenate([s for s, _ in parts]).reshape((iz, iy, ix, -1)).transpose(2, 1, 0, 3)
    return DenseOutput(tuple(half), np.ascontiguousarray(scores), None if feats is None else np.ascontiguousarray(feats), vol_dims)


def semantic_segment(net: Network, vol: Volume, mode: str = "2d", dense: DenseOutput | None = None, **kw) -> LabelVolume:
    """Voxel-wise argmax labels; voxels outside the interior are background."""
    if dense is None:
        dense = dense_forward(net, vol, mode, with_features=False, **kw)
    out = np.zeros(vol.dims, dtype=np.uint8)
    ox, oy, oz = dense.origin
    ix, iy, iz = dense.dims
    out[ox:ox + ix, oy:oy + iy, oz:oz + iz] = dense.labels()
    return LabelVolume(data=out, spacing=vol.spacing)


def save_features(dense: DenseOutput, path) -> None:
    """Dump interior features: magic, version, dims, origin, d, then x-fastest f32 rows."""
    if dense.features is None:
        raise ValueError("dense output carries no features")
    d = dense.features.shape[-1]
    with open(path, "wb") as fh:
        fh.write(_FD_MAGIC)
        fh.write(struct.pack("<I3I3II", 1, *dense.dims, *dense.origin, d))
        fh.write(np.asarray(dense.features, dtype="<f4").transpose(2, 1, 0, 3).tobytes())


def load_features(path) -> tuple[tuple[int, int, int], np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _FD_MAGIC:
        raise ValueError(f"{path}: not a feature dump")
    version, ix, iy, iz, ox, oy, oz, d = struct.unpack_from("<I3I3II", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=4 + struct.calcsize("<I3I3II"))
    feats = body.reshape(iz, iy, ix, d).transpose(2, 1, 0, 3)
    return (ox, oy, oz), np.ascontiguousarray(feats)
