"""Flat binary network checkpoints.

Layout: magic ``RDNN``, version u32, input shape, class count, then the layer
list. All integers are little-endian u32 (kind tag is one byte) and all
parameter blobs are little-endian float32. A human-readable JSON sidecar
(``<path>.manifest.json``) describes the shapes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import (
    BatchNorm2D,
    Conv2D,
    Flatten,
    GlobalMaxPool,
    Linear,
    MaxPool2D,
    ReLU,
    SharedPointMLP,
)
from .network import Network

MAGIC = b"RDNN"
VERSION = 1

_KIND_IDS = {
    "Linear": 1,
    "Conv2D": 2,
    "BatchNorm2D": 3,
    "ReLU": 4,
    "MaxPool2D": 5,
    "GlobalMaxPool": 6,
    "Flatten": 7,
    "SharedPointMLP": 8,
}


class CheckpointError(ValueError):
    pass


def _u32(value):
    return struct.pack("<I", value)


def _blob(array):
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def save_checkpoint(net: Network, path):
    path = Path(path)
    parts = [MAGIC, _u32(VERSION), _u32(len(net.input_shape))]
    parts += [_u32(d) for d in net.input_shape]
    parts += [_u32(net.num_classes), _u32(len(net.layers))]
    manifest_layers = []
    for layer in net.layers:
        kind = layer.kind
        parts.append(struct.pack("<B", _KIND_IDS[kind]))
        entry = {"kind": kind}
        if kind == "Linear" or kind == "SharedPointMLP":
            parts += [_u32(layer.in_features), _u32(layer.out_features)]
            parts += [_blob(layer.weight), _blob(layer.bias)]
            entry["weight_shape"] = list(layer.weight.shape)
            entry["bias_shape"] = list(layer.bias.shape)
        elif kind == "Conv2D":
            parts += [_u32(layer.in_channels), _u32(layer.out_channels),
                      _u32(layer.kernel_size), _u32(layer.stride), _u32(layer.padding)]
            parts += [_blob(layer.weight), _blob(layer.bias)]
            entry["weight_shape"] = list(layer.weight.shape)
            entry["bias_shape"] = list(layer.bias.shape)
            entry["stride"] = layer.stride
            entry["padding"] = layer.padding
        elif kind == "BatchNorm2D":
            parts += [_u32(layer.channels), struct.pack("<f", layer.eps), struct.pack("<f", layer.momentum)]
            parts += [_blob(layer.gamma), _blob(layer.beta),
                      _blob(layer.running_mean), _blob(layer.running_var)]
            entry["channels"] = layer.channels
        elif kind == "MaxPool2D":
            parts += [_u32(layer.kernel_size), _u32(layer.stride)]
            entry["kernel_size"] = layer.kernel_size
            entry["stride"] = layer.stride
        manifest_layers.append(entry)
    path.write_bytes(b"".join(parts))
    manifest = {
        "format": "RDNN",
        "version": VERSION,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": manifest_layers,
    }
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def f32(self):
        return struct.unpack("<f", self.take(4))[0]

    def blob(self, shape):
        count = int(np.prod(shape))
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return arr.astype(np.float32)


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version = rd.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    ndim = rd.u32()
    input_shape = tuple(rd.u32() for _ in range(ndim))
    num_classes = rd.u32()
    n_layers = rd.u32()
    ids = {v: k for k, v in _KIND_IDS.items()}
    layers = []
    for _ in range(n_layers):
        kind = ids.get(rd.u8())
        if kind is None:
            raise CheckpointError(f"unknown layer kind at byte {rd.pos - 1}")
        if kind in ("Linear", "SharedPointMLP"):
            fin, fout = rd.u32(), rd.u32()
            cls = Linear if kind == "Linear" else SharedPointMLP
            layer = cls(fin, fout)
            layer.weight = rd.blob((fin, fout))
            layer.bias = rd.blob((fout,))
        elif kind == "Conv2D":
            cin, cout, k, stride, pad = (rd.u32() for _ in range(5))
            layer = Conv2D(cin, cout, k, stride=stride, padding=pad)
            layer.weight = rd.blob((cout, cin, k, k))
            layer.bias = rd.blob((cout,))
        elif kind == "BatchNorm2D":
            channels = rd.u32()
            eps, momentum = rd.f32(), rd.f32()
            layer = BatchNorm2D(channels, eps=eps, momentum=momentum)
            layer.gamma = rd.blob((channels,))
            layer.beta = rd.blob((channels,))
            layer.running_mean = rd.blob((channels,))
            layer.running_var = rd.blob((channels,))
        elif kind == "MaxPool2D":
            k, stride = rd.u32(), rd.u32()
            layer = MaxPool2D(k, stride)
        elif kind == "ReLU":
            layer = ReLU()
        elif kind == "GlobalMaxPool":
            layer = GlobalMaxPool()
        else:
            layer = Flatten()
        layers.append(layer)
    if rd.pos != len(data):
        raise CheckpointError(f"{len(data) - rd.pos} trailing bytes after layer list")
    return Network(layers, input_shape, num_classes)
