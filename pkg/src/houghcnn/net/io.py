"""Binary weight files (magic ``HCNW``)."""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .arch import Conv, Dense, Pool, parse_arch
from .network import Network, init_msra

MAGIC = b"HCNW"
VERSION = 1
_TAGS = {Conv: 1, Pool: 2, Dense: 3}
_ORDER = ("W", "b", "alpha")


class WeightFileError(ValueError):
    pass


def weights_to_bytes(net: Network) -> bytes:
    arch = net.arch
    buf = io.BytesIO()
    notation = arch.notation.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(notation)))
    buf.write(notation)
    buf.write(struct.pack("<BHH", arch.rank, arch.in_channels, arch.num_classes))
    for layer, p in zip(arch.layers, net.params):
        names = [k for k in _ORDER if k in p]
        buf.write(struct.pack("<BB", _TAGS[type(layer)], len(names)))
        for k in names:
            arr = np.asarray(p[k], dtype="<f4")
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
    return buf.getvalue()


def save_weights(net: Network, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(weights_to_bytes(net))
    os.replace(tmp, path)


def load_weights(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise WeightFileError(f"{path}: bad magic")
    try:
        version, nlen = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise WeightFileError(f"{path}: unsupported version {version}")
        off = 12
        notation = raw[off:off + nlen].decode("utf-8")
        off += nlen
        rank, in_ch, ncls = struct.unpack_from("<BHH", raw, off)
        off += struct.calcsize("<BHH")
        arch = parse_arch(notation, rank=rank, in_channels=in_ch, num_classes=ncls)
        params = []
        for layer in arch.layers:
            tag, count = struct.unpack_from("<BB", raw, off)
            off += 2
            if tag != _TAGS[type(layer)]:
                raise WeightFileError(f"{path}: layer tag {tag} does not match {layer.token()}")
            p = {}
            for k in _ORDER[:count]:
                (ndim,) = struct.unpack_from("<B", raw, off)
                off += 1
                shape = struct.unpack_from(f"<{ndim}I", raw, off)
                off += 4 * ndim
                n = int(np.prod(shape))
                p[k] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
                off += 4 * n
            params.append(p)
    except (struct.error, ValueError) as exc:
        raise WeightFileError(f"{path}: truncated file ({exc})") from None
    if off != len(raw):
        raise WeightFileError(f"{path}: {len(raw) - off} trailing bytes")
    net = Network(arch, params)
    ref = init_msra(arch, seed=0)
    for got, want in zip(net.params, ref.params):
        if set(got) != set(want) or any(got[k].shape != want[k].shape for k in got):
            raise WeightFileError(f"{path}: parameter shapes do not match {notation}")
    return net
