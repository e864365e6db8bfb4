"""Network container, forward pass with activation record, and builders."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    DTYPE,
    BatchNorm2D,
    Conv2D,
    Flatten,
    GlobalMaxPool,
    Layer,
    Linear,
    MaxPool2D,
    ReLU,
    ShapeError,
    SharedPointMLP,
)


@dataclass
class ForwardRecord:
    """Per-layer inputs retained by a recorded forward pass.

    ``inputs[i]`` is the batch that entered layer ``i``; relevance
    propagation walks this record backward.
    """

    inputs: list = field(default_factory=list)
    logits: np.ndarray | None = None


class Network:
    """An ordered stack of layers mapping a fixed input shape to class logits."""

    def __init__(self, layers, input_shape, num_classes):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        out = self.validate()
        if out != (self.num_classes,):
            raise ShapeError(f"network output shape {out} != ({self.num_classes},)")

    def validate(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as err:
                raise ShapeError(f"layer {i} ({layer.kind}): {err}") from None
        return shape

    def forward(self, x, training=False, cache=False, record=False):
        """Run the stack. With ``record=True`` returns (logits, ForwardRecord)."""
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            if x.shape == self.input_shape:
                x = x[None]
            else:
                raise ShapeError(f"input shape {x.shape} does not match network input {self.input_shape}")
        rec = ForwardRecord() if record else None
        for i, layer in enumerate(self.layers):
            if record:
                rec.inputs.append(x)
            try:
                x = layer.forward(x, training=training, cache=cache)
            except ShapeError as err:
                raise ShapeError(f"layer {i} ({layer.kind}): {err}") from None
        if record:
            rec.logits = x
            return x, rec
        return x

    def backward(self, dlogits):
        """Backpropagate after a cached forward; gradients land on the layers."""
        dy = dlogits
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params().items():
                yield f"{i}.{name}", layer, name, value

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers)

    def params_hash(self):
        """Hash of all parameter bytes; identifies a weight snapshot."""
        h = hashlib.sha256()
        for key, _, _, value in self.named_params():
            h.update(key.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()

    def astype(self, dtype):
        net = Network.__new__(Network)
        net.layers = [layer.astype(dtype) for layer in self.layers]
        net.input_shape = self.input_shape
        net.num_classes = self.num_classes
        return net

    def copy(self):
        return self.astype(DTYPE)

    def __repr__(self):
        inner = ", ".join(repr(l) for l in self.layers)
        return f"Network(input={self.input_shape}, classes={self.num_classes}, [{inner}])"


def build_small_cnn(input_shape, num_classes, seed=0, widths=(8, 16)):
    """Two conv+BN+ReLU+pool blocks and a linear head. Deterministic per seed."""
    c, h, w = input_shape
    if h < 8 or w < 8:
        raise ShapeError(f"build_small_cnn needs H, W >= 8, got {h}x{w}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    w1, w2 = widths
    layers = [
        Conv2D(c, w1, 3, stride=1, padding=1, rng=rng),
        BatchNorm2D(w1),
        ReLU(),
        MaxPool2D(2),
        Conv2D(w1, w2, 3, stride=1, padding=1, rng=rng),
        BatchNorm2D(w2),
        ReLU(),
        MaxPool2D(2),
        Flatten(),
        Linear(w2 * (h // 4) * (w // 4), num_classes, rng=rng),
    ]
    return Network(layers, input_shape, num_classes)


def build_pointnet_lite(n_points, num_classes, seed=0, widths=(32, 64)):
    """Shared per-point MLP, global max pool, linear head.

    Permutation-invariant by construction: the only cross-point operation
    is the symmetric max.
    """
    if n_points < 64:
        raise ShapeError(f"build_pointnet_lite needs N >= 64, got {n_points}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    layers = []
    fin = 3
    for width in widths:
        layers.append(SharedPointMLP(fin, width, rng=rng))
        layers.append(ReLU())
        fin = width
    layers.append(GlobalMaxPool())
    layers.append(Linear(fin, num_classes, rng=rng))
    return Network(layers, (n_points, 3), num_classes)
