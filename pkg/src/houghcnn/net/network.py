"""Feed-forward patch classifier with PReLU activations and backpropagation."""

from __future__ import annotations

import copy

import numpy as np

from . import layers as L
from .arch import ArchSpec, Conv, Dense, Pool

ALPHA_INIT = 0.25


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=int(seed)))


class Network:
    """Parameters of an :class:`ArchSpec` plus the cache of the last forward pass.

    ``params[i]`` is a dict for layer ``i``: conv layers hold ``W`` (C_in,
    *window, C_out), ``b`` and ``alpha``; dense layers hold ``W`` (F_in,
    F_out), ``b`` and, except for the output layer, ``alpha``; pool layers
    hold nothing.
    """

    def __init__(self, arch: ArchSpec, params: list[dict[str, np.ndarray]], dropout_ratio: float = 0.5):
        self.arch = arch
        self.params = params
        self.dropout_ratio = dropout_ratio
        self._cache = None

    @property
    def dtype(self):
        for p in self.params:
            if "W" in p:
                return p["W"].dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "Network":
        params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return Network(self.arch, params, self.dropout_ratio)

    def copy(self) -> "Network":
        return Network(self.arch, copy.deepcopy(self.params), self.dropout_ratio)

    def num_parameters(self) -> int:
        return sum(v.size for p in self.params for v in p.values())

    def input_shape(self) -> tuple[int, ...]:
        a = self.arch
        return (a.input_size,) * a.rank + (a.in_channels,)

    # -- forward / backward ---------------------------------------------

    def forward(self, x, train_mode: bool = False, dropout_seed=None):
        """Run a channels-last batch ``(N, *spatial, C)``.

        Returns ``(scores, features)``: pre-softmax outputs of the last dense
        layer and post-activation outputs of the second-last one.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape():
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {self.input_shape()}")
        dropout = train_mode and self.dropout_ratio > 0
        rng = _rng(0 if dropout_seed is None else dropout_seed) if dropout else None
        keep = 1.0 - self.dropout_ratio
        layers = self.arch.layers
        last = len(layers) - 1
        feat_layer = self.arch.dense_layers[-2] if len(self.arch.dense_layers) > 1 else None
        cache = []
        features = None
        for i, (layer, p) in enumerate(zip(layers, self.params)):
            entry = {"in_shape": x.shape}
            if isinstance(layer, Conv):
                z, entry["cols"] = L.conv_forward(x, p["W"], p["b"])
                entry["z"] = z
                x = L.prelu_forward(z, p["alpha"])
            elif isinstance(layer, Pool):
                x, entry["arg"] = L.pool_forward(x, layer.size, layer.stride)
            else:
                flat = x.reshape(x.shape[0], -1)
                entry["flat"] = flat
                z = flat @ p["W"] + p["b"]
                if i == last:
                    x = z
                else:
                    entry["z"] = z
                    x = L.prelu_forward(z, p["alpha"])
                    if i == feat_layer:
                        features = x
                    if dropout:
                        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
                        entry["mask"] = mask
                        x = x * mask
            cache.append(entry)
        self._cache = cache
        return x, features

    def backward(self, grad_scores):
        """Gradients of every parameter given d(loss)/d(scores) for the cached batch."""
        if self._cache is None:
            raise RuntimeError("backward() called before forward()")
        g = np.asarray(grad_scores, dtype=self.dtype)
        layers = self.arch.layers
        last = len(layers) - 1
        grads: list[dict[str, np.ndarray]] = [dict() for _ in layers]
        for i in range(last, -1, -1):
            layer, p, entry = layers[i], self.params[i], self._cache[i]
            need_dx = i > 0
            if isinstance(layer, Conv):
                g, grads[i]["alpha"] = L.prelu_backward(g, entry["z"], p["alpha"])
                g, grads[i]["W"], grads[i]["b"] = L.conv_backward(g, entry["cols"], p["W"], need_dx)
            elif isinstance(layer, Pool):
                g = L.pool_backward(g, entry["arg"], entry["in_shape"], layer.size, layer.stride)
            else:
                if i != last:
                    if "mask" in entry:
                        g = g * entry["mask"]
                    g, grads[i]["alpha"] = L.prelu_backward(g, entry["z"], p["alpha"])
                grads[i]["W"] = entry["flat"].T @ g
                grads[i]["b"] = g.sum(axis=0)
                if need_dx:
                    g = (g @ p["W"].T).reshape(entry["in_shape"])
        return grads

    def predict(self, x, batch_size: int = 256):
        """Inference-mode scores and features for a large batch, chunked."""
        scores, feats = [], []
        for s in range(0, len(x), batch_size):
            sc, f = self.forward(x[s:s + batch_size])
            scores.append(sc)
            feats.append(f)
        self._cache = None
        return np.concatenate(scores), (np.concatenate(feats) if feats and feats[0] is not None else None)


def init_msra(arch: ArchSpec, seed: int = 0, dtype=np.float32, dropout_ratio: float = 0.5) -> Network:
    """Gaussian weights with variance 2 / fan_in, zero biases, PReLU slopes 0.25."""
    rng = _rng(seed)
    params = []
    channels = arch.in_channels
    side = arch.input_size
    last = len(arch.layers) - 1
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            shape = (channels,) + (layer.size,) * arch.rank + (layer.kernels,)
            fan_in = channels * layer.size ** arch.rank
            W = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            params.append({
                "W": W.astype(dtype),
                "b": np.zeros(layer.kernels, dtype=dtype),
                "alpha": np.full(layer.kernels, ALPHA_INIT, dtype=dtype),
            })
            channels = layer.kernels
            side = side - layer.size + 1
        elif isinstance(layer, Pool):
            params.append({})
            side = (side - layer.size) // layer.stride + 1
        else:
            fan_in = channels * side ** arch.rank if side else channels
            W = rng.standard_normal((fan_in, layer.neurons)) * np.sqrt(2.0 / fan_in)
            p = {"W": W.astype(dtype), "b": np.zeros(layer.neurons, dtype=dtype)}
            if i != last:
                p["alpha"] = np.full(layer.neurons, ALPHA_INIT, dtype=dtype)
            params.append(p)
            channels, side = layer.neurons, 0
    return Network(arch, params, dropout_ratio)
