"""Architecture notation: I (input), C (conv), P (max-pool), F (dense).

Six named networks are available; any other net can be written explicitly as
``"I31.C7x64.P3s2.C5x64.C3x64.F128.F3"`` (size, kernel x count, size s stride,
neurons). Named networks get a final ``F`` with one neuron per class.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Conv:
    size: int
    kernels: int

    def token(self):
        return f"C{self.size}x{self.kernels}"


@dataclass(frozen=True)
class Pool:
    size: int
    stride: int

    def token(self):
        return f"P{self.size}s{self.stride}"


@dataclass(frozen=True)
class Dense:
    neurons: int

    def token(self):
        return f"F{self.neurons}"


# "c" = conv of base width, "f" = hidden dense of base size
_NAMED = {
    "3-3-3-3-3": [("c", 3), ("p", 3, 2), ("c", 3), ("c", 3), ("c", 3), ("c", 3), ("f",), ("f",)],
    "3-3-3-3-3-3-3-3": [("c", 3)] * 8 + [("f",), ("f",)],
    "5-5-5-5-5": [("c", 5)] * 5 + [("f",), ("f",)],
    "7-5-3": [("c", 7), ("p", 3, 2), ("c", 5), ("c", 3), ("f",)],
    "9-7-5-3-3": [("c", 9), ("c", 7), ("c", 5), ("c", 3), ("c", 3), ("f",), ("f",)],
    "SmallAlex": [("c", 11), ("p", 2, 1), ("c", 5), ("p", 2, 1), ("c", 3), ("c", 3), ("c", 3), ("f",), ("f",)],
}
ARCH_NAMES = tuple(_NAMED)

_TOKEN = re.compile(r"^(?:I(?P<i>\d+)|C(?P<cs>\d+)x(?P<ck>\d+)|P(?P<ps>\d+)s(?P<pt>\d+)|F(?P<f>\d+))$")


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple
    rank: int
    in_channels: int
    num_classes: int
    input_size: int = 31
    name: str = field(default="", compare=False)

    @property
    def notation(self) -> str:
        return ".".join([f"I{self.input_size}"] + [l.token() for l in self.layers])

    @property
    def spatial_trace(self) -> list[int]:
        """Spatial side length at the input and after every conv/pool layer."""
        trace = [self.input_size]
        for layer in self.layers:
            if isinstance(layer, Conv):
                trace.append(trace[-1] - layer.size + 1)
            elif isinstance(layer, Pool):
                trace.append((trace[-1] - layer.size) // layer.stride + 1)
        return trace

    @property
    def conv_output_size(self) -> int:
        return self.spatial_trace[-1]

    @property
    def dense_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]

    @property
    def feature_dim(self) -> int:
        dense = self.dense_layers
        if len(dense) < 2:
            raise ArchError("network has no hidden dense layer to take features from")
        return self.layers[dense[-2]].neurons


def _canonical_name(notation: str) -> str | None:
    key = notation.replace(" ", "").lower()
    for name in _NAMED:
        if name.lower() == key:
            return name
    return None


def parse_arch(
    notation: str,
    rank: int = 2,
    in_channels: int = 1,
    num_classes: int = 2,
    input_size: int = 31,
    width: int = 64,
    hidden: int = 128,
) -> ArchSpec:
    """Build an :class:`ArchSpec` from a network name or explicit layer string.

    ``width`` and ``hidden`` set the conv kernel count and hidden dense size of
    named networks (64 and 128 in the reference designs).
    """
    if rank not in (2, 3):
        raise ArchError(f"rank must be 2 or 3, got {rank}")
    if in_channels < 1 or num_classes < 2:
        raise ArchError("need at least one input channel and two classes")
    name = _canonical_name(notation)
    if name is not None:
        layers = []
        for item in _NAMED[name]:
            if item[0] == "c":
                layers.append(Conv(item[1], width))
            elif item[0] == "p":
                layers.append(Pool(item[1], item[2]))
            else:
                layers.append(Dense(hidden))
        layers.append(Dense(num_classes))
    else:
        tokens = [t for t in re.split(r"[.\s·]+", notation.strip()) if t]
        if not tokens or not tokens[0].startswith("I"):
            raise ArchError(f"unknown architecture {notation!r}; expected one of {ARCH_NAMES} or an explicit I..F string")
        layers = []
        for tok in tokens:
            m = _TOKEN.match(tok)
            if not m:
                raise ArchError(f"bad layer token {tok!r}")
            if m["i"]:
                if layers:
                    raise ArchError("input token must come first")
                input_size = int(m["i"])
            elif m["cs"]:
                layers.append(Conv(int(m["cs"]), int(m["ck"])))
            elif m["ps"]:
                layers.append(Pool(int(m["ps"]), int(m["pt"])))
            else:
                layers.append(Dense(int(m["f"])))
        name = ""
    arch = ArchSpec(tuple(layers), rank, in_channels, num_classes, input_size, name)
    _validate(arch)
    return arch


def _validate(arch: ArchSpec) -> None:
    layers = arch.layers
    if not layers or not isinstance(layers[-1], Dense):
        raise ArchError("last layer must be dense")
    if layers[-1].neurons != arch.num_classes:
        raise ArchError(f"last layer has {layers[-1].neurons} neurons but there are {arch.num_classes} classes")
    seen_dense = False
    for layer in layers:
        if isinstance(layer, Dense):
            seen_dense = True
        elif seen_dense:
            raise ArchError("conv/pool layers cannot follow dense layers")
        if isinstance(layer, Conv) and (layer.size < 1 or layer.kernels < 1):
            raise ArchError(f"bad conv layer {layer}")
        if isinstance(layer, Pool) and (layer.size < 1 or layer.stride < 1):
            raise ArchError(f"bad pool layer {layer}")
        if isinstance(layer, Dense) and layer.neurons < 1:
            raise ArchError(f"bad dense layer {layer}")
    trace = [arch.input_size]
    for layer in layers:
        if isinstance(layer, Conv):
            trace.append(trace[-1] - layer.size + 1)
        elif isinstance(layer, Pool):
            trace.append((trace[-1] - layer.size) // layer.stride + 1 if trace[-1] >= layer.size else 0)
        if trace[-1] < 1:
            raise ArchError(f"architecture collapses below size 1 at {layer.token()} (trace {trace})")


def receptive_field(arch: ArchSpec) -> int:
    """Minimal input side that still yields a 1-voxel conv output."""
    n = 1
    for layer in reversed([l for l in arch.layers if not isinstance(l, Dense)]):
        if isinstance(layer, Conv):
            n = n + layer.size - 1
        else:
            n = (n - 1) * layer.stride + layer.size
    return n
