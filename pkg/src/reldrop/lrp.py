"""Layer-wise relevance propagation over a Network.

Relevance starts at one target logit (pre-softmax) and is redistributed
backward layer by layer. Rules follow the usual modified-backprop forms:

* ``Epsilon``  -- R_i = sum_j x_i w_ij / (sum_k x_k w_kj + eps*sign) * R_j
* ``ZPlus``    -- only positive pre-activations x_i w+_ij contribute
* ``Gamma``    -- weights w + gamma*w+ in numerator and denominator
* ``Flat``     -- each output's relevance spread uniformly over its
                  in-bounds receptive inputs
* ``Box``      -- first-layer rule using per-channel input bounds [low, high]

Denominators exclude the bias, so the epsilon rule conserves relevance up to
the stabilizer. Pooling routes relevance winner-take-all; ReLU and Flatten
pass it through. BatchNorm layers must be fused away first (``canonize``).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import PARAMETRIZED_KINDS, conv2d_forward, conv2d_input_backward
from .network import Network

_STAB = 1e-9  # tie-over stabilizer for rules without their own epsilon


class LrpError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rules

@dataclass(frozen=True)
class Flat:
    name = "flat"


@dataclass(frozen=True)
class Epsilon:
    eps: float = 1e-6
    name = "epsilon"

    def __post_init__(self):
        if self.eps <= 0:
            raise LrpError(f"epsilon must be > 0, got {self.eps}")


@dataclass(frozen=True)
class ZPlus:
    name = "zplus"


@dataclass(frozen=True)
class Gamma:
    gamma: float = 0.25
    name = "gamma"

    def __post_init__(self):
        if self.gamma < 0:
            raise LrpError(f"gamma must be >= 0, got {self.gamma}")


class Box:
    """Bounded-input rule; ``low``/``high`` are per-channel input bounds."""

    name = "box"

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=np.float32)
        self.high = np.asarray(high, dtype=np.float32)
        if self.low.shape != self.high.shape or np.any(self.low > self.high):
            raise LrpError("Box rule needs elementwise low <= high")

    def __repr__(self):
        return f"Box(low={self.low!r}, high={self.high!r})"


@dataclass
class Composite:
    """Rule assignment for a network.

    Resolution order per parametrized layer: explicit per-index override,
    then the first-layer rule (first parametrized layer only), then a
    per-kind rule, then the default.
    """

    default: object | None
    first: object | None = None
    kind_rules: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    purpose: str = "augmentation"  # augmentation | visualization | evaluation

    def __post_init__(self):
        if self.purpose not in ("augmentation", "visualization", "evaluation"):
            raise LrpError(f"unknown composite purpose {self.purpose!r}")

    def resolve(self, net: Network):
        """Rule per layer index (None for rule-free layers)."""
        rules = []
        seen_first = False
        for i, layer in enumerate(net.layers):
            if layer.kind not in PARAMETRIZED_KINDS:
                rules.append(None)
                continue
            rule = self.overrides.get(i)
            if rule is None and not seen_first:
                rule = self.first
            seen_first = True
            if rule is None:
                rule = self.kind_rules.get(layer.kind)
            if rule is None:
                rule = self.default
            if rule is None:
                raise LrpError(f"composite assigns no rule to layer {i} ({layer.kind})")
            rules.append(rule)
        return rules


def augmentation_composite_2d(eps=1e-6):
    return Composite(default=Epsilon(eps), first=Flat(), purpose="augmentation")


def augmentation_composite_3d():
    return Composite(default=ZPlus(), first=Flat(), purpose="augmentation")


def evaluation_composite():
    """z+ variant used for rank-accuracy and flipping metrics."""
    return Composite(default=ZPlus(), first=Flat(), purpose="evaluation")


def visualization_composite(low, high, gamma=0.25, eps=1e-6):
    """Box first, gamma on conv/point layers, epsilon on dense layers."""
    return Composite(
        default=Epsilon(eps),
        first=Box(low, high),
        kind_rules={"Conv2D": Gamma(gamma), "SharedPointMLP": Gamma(gamma)},
        purpose="visualization",
    )


# ---------------------------------------------------------------------------
# canonization

def canonize(net: Network) -> Network:
    """Fuse every BatchNorm2D into its preceding Conv2D or Linear layer.

    Uses the running statistics, so the fused network matches the original
    in inference mode. The input network is left untouched.
    """
    fused = []
    for i, layer in enumerate(net.layers):
        if layer.kind != "BatchNorm2D":
            fused.append(copy.deepcopy(layer))
            continue
        if not fused or fused[-1].kind not in ("Conv2D", "Linear"):
            raise LrpError(f"layer {i}: BatchNorm2D without a fusible Conv2D/Linear predecessor")
        prev = fused[-1]
        scale = (layer.gamma / np.sqrt(layer.running_var + layer.eps)).astype(np.float32)
        if prev.kind == "Conv2D":
            prev.weight = (prev.weight * scale[:, None, None, None]).astype(np.float32)
        else:
            prev.weight = (prev.weight * scale[None, :]).astype(np.float32)
        prev.bias = ((prev.bias - layer.running_mean) * scale + layer.beta).astype(np.float32)
    return Network(fused, net.input_shape, net.num_classes)


# ---------------------------------------------------------------------------
# propagation

def _stabilize(z, eps):
    return z + np.where(z >= 0, eps, -eps).astype(z.dtype)


def _dense_prop(x, weight, relevance, rule):
    """Linear / SharedPointMLP relevance step (last axis is the feature axis)."""
    if isinstance(rule, Flat):
        fan_in = weight.shape[0]
        return np.repeat(relevance.sum(axis=-1, keepdims=True) / fan_in, fan_in, axis=-1)
    if isinstance(rule, Box):
        wp = np.maximum(weight, 0)
        wn = np.minimum(weight, 0)
        low = np.broadcast_to(rule.low, x.shape)
        high = np.broadcast_to(rule.high, x.shape)
        z = x @ weight - low @ wp - high @ wn
        s = relevance / _stabilize(z, _STAB)
        return x * (s @ weight.T) - low * (s @ wp.T) - high * (s @ wn.T)
    if isinstance(rule, Epsilon):
        w, eps = weight, rule.eps
    elif isinstance(rule, ZPlus):
        w, eps = np.maximum(weight, 0), _STAB
    elif isinstance(rule, Gamma):
        w, eps = weight + rule.gamma * np.maximum(weight, 0), _STAB
    else:
        raise LrpError(f"rule {rule!r} not applicable to dense layers")
    z = x @ w
    s = relevance / _stabilize(z, eps)
    return x * (s @ w.T)


def _conv_prop(x, layer, relevance, rule):
    stride, pad = layer.stride, layer.padding
    if isinstance(rule, Flat):
        ones_w = np.ones_like(layer.weight)
        ones_x = np.ones_like(x)
        counts, _ = conv2d_forward(ones_x, ones_w, None, stride, pad)
        s = relevance / counts
        return conv2d_input_backward(s, ones_w, x.shape, stride, pad)
    if isinstance(rule, Box):
        wp = np.maximum(layer.weight, 0)
        wn = np.minimum(layer.weight, 0)
        low = np.broadcast_to(rule.low[:, None, None], x.shape[1:])
        low = np.ascontiguousarray(np.broadcast_to(low, x.shape))
        high = np.broadcast_to(rule.high[:, None, None], x.shape[1:])
        high = np.ascontiguousarray(np.broadcast_to(high, x.shape))
        z = (conv2d_forward(x, layer.weight, None, stride, pad)[0]
             - conv2d_forward(low, wp, None, stride, pad)[0]
             - conv2d_forward(high, wn, None, stride, pad)[0])
        s = relevance / _stabilize(z, _STAB)
        return (x * conv2d_input_backward(s, layer.weight, x.shape, stride, pad)
                - low * conv2d_input_backward(s, wp, x.shape, stride, pad)
                - high * conv2d_input_backward(s, wn, x.shape, stride, pad))
    if isinstance(rule, Epsilon):
        w, eps = layer.weight, rule.eps
    elif isinstance(rule, ZPlus):
        w, eps = np.maximum(layer.weight, 0), _STAB
    elif isinstance(rule, Gamma):
        w, eps = layer.weight + rule.gamma * np.maximum(layer.weight, 0), _STAB
    else:
        raise LrpError(f"rule {rule!r} not applicable to Conv2D")
    z, _ = conv2d_forward(x, w, None, stride, pad)
    s = relevance / _stabilize(z, eps)
    return x * conv2d_input_backward(s, w, x.shape, stride, pad)


@dataclass
class RelevanceRecord:
    """Attribution result: relevance of the model input plus every layer input."""

    input_relevance: np.ndarray
    layer_relevances: list
    targets: np.ndarray
    output_scores: np.ndarray
    logits: np.ndarray
    batched: bool


def attribute(net: Network, x, targets, composite: Composite) -> RelevanceRecord:
    """LRP attribution of ``targets``' logits wrt the input.

    Pure in ``net``: the forward pass runs without caching, so concurrent
    calls on a frozen network are safe.
    """
    for i, layer in enumerate(net.layers):
        if layer.kind == "BatchNorm2D":
            raise LrpError(f"layer {i}: canonize the network before attribution")
    rules = composite.resolve(net)
    x = np.asarray(x, dtype=np.float32)
    batched = x.shape != net.input_shape
    if not batched:
        x = x[None]
    targets = np.atleast_1d(np.asarray(targets))
    if targets.shape[0] != x.shape[0]:
        raise LrpError(f"{targets.shape[0]} targets for batch of {x.shape[0]}")
    if targets.min() < 0 or targets.max() >= net.num_classes:
        raise LrpError(f"target class out of range [0, {net.num_classes})")

    logits, record = net.forward(x, training=False, cache=False, record=True)
    rows = np.arange(x.shape[0])
    scores = logits[rows, targets]
    relevance = np.zeros_like(logits)
    relevance[rows, targets] = scores

    layer_relevances = [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        inp = record.inputs[i]
        kind = layer.kind
        if kind in ("Linear", "SharedPointMLP"):
            relevance = _dense_prop(inp, layer.weight, relevance, rules[i])
        elif kind == "Conv2D":
            relevance = _conv_prop(inp, layer, relevance, rules[i])
        elif kind == "ReLU":
            pass  # elementwise: relevance passes through
        elif kind == "Flatten":
            relevance = relevance.reshape(inp.shape)
        elif kind == "MaxPool2D":
            windows, _, _ = layer._window_view(inp)
            relevance = layer.route(relevance, inp.shape, argmax=windows.argmax(axis=2))
        elif kind == "GlobalMaxPool":
            relevance = layer.route(relevance, inp.shape, argmax=inp.argmax(axis=1))
        else:
            raise LrpError(f"layer {i}: no relevance propagation for {kind}")
        if not np.all(np.isfinite(relevance)):
            raise LrpError(f"layer {i} ({kind}): non-finite relevance")
        layer_relevances[i] = relevance

    if not batched:
        return RelevanceRecord(relevance[0], [r[0] for r in layer_relevances],
                               targets, scores, logits, batched=False)
    return RelevanceRecord(relevance, layer_relevances, targets, scores, logits, batched=True)


def pixel_relevance(rec: RelevanceRecord) -> np.ndarray:
    """Channel-summed map: (C, H, W) -> (H, W), batch dim preserved."""
    r = rec.input_relevance
    if r.ndim == 4:
        return r.sum(axis=1)
    if r.ndim == 3:
        return r.sum(axis=0)
    raise LrpError(f"expected a (C, H, W) input relevance, got shape {r.shape}")


def point_relevance(rec: RelevanceRecord) -> np.ndarray:
    """Coordinate-summed per-point scores: (N, 3) -> (N,), batch dim preserved."""
    r = rec.input_relevance
    if r.ndim == 3:
        return r.sum(axis=2)
    if r.ndim == 2:
        return r.sum(axis=1)
    raise LrpError(f"expected an (N, 3) input relevance, got shape {r.shape}")
