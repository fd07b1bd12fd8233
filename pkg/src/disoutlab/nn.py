"""Small feedforward networks with hand-written forward and backward passes.

Layers are declarative ``LayerSpec`` records; ``init_network`` resolves the
shape chain (filling in inferred input widths), validates it, and draws
parameters.  The backward pass treats the distortion term as a constant:
gradients cross a distorted activation through the ``1 / (1 - p)`` rescale
only, never through the distortion field itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .disout import apply_distortion
from .errors import ConfigError, NumericError
from .tensor import (
    _conv_out_hw,
    col2im,
    im2col,
    maxpool2d,
    maxpool2d_backward,
)

LAYER_KINDS = ("dense", "conv", "relu", "maxpool", "flatten", "softmax_ce")


@dataclass
class LayerSpec:
    """One layer in a network definition.

    ``in_features`` / ``in_channels`` of 0 mean "infer from the previous
    layer" and are filled in by ``init_network``.
    """

    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    distort: bool = False


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def conv(in_channels: int, out_channels: int, kernel: int,
         stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding)


def relu(distort: bool = False) -> LayerSpec:
    return LayerSpec("relu", distort=distort)


def maxpool(window: int, stride: int = 0) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=stride or window)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def softmax_ce() -> LayerSpec:
    return LayerSpec("softmax_ce")


@dataclass
class Network:
    layers: list
    params: dict
    input_shape: tuple
    dtype: np.dtype


def _shape_step(ly: LayerSpec, shape: tuple, index: int, resolve: bool) -> tuple:
    """Output shape of one layer given its input shape (no batch axis).

    With ``resolve`` set, zero ``in_features`` / ``in_channels`` are filled
    in on the layer record; otherwise they are only checked.
    """
    if ly.kind == "dense":
        if len(shape) != 1:
            raise ConfigError(
                f"layer {index}: dense expects a flat input, got shape {shape}")
        if ly.out_features <= 0:
            raise ConfigError(f"layer {index}: dense out_features must be positive")
        if ly.in_features == 0:
            if not resolve:
                raise ConfigError(f"layer {index}: dense input width unresolved")
            ly.in_features = shape[0]
        if ly.in_features != shape[0]:
            raise ConfigError(
                f"layer {index}: dense expects {ly.in_features} inputs, "
                f"previous layer produces {shape[0]}")
        return (ly.out_features,)
    if ly.kind == "conv":
        if len(shape) != 3:
            raise ConfigError(
                f"layer {index}: conv expects a (C, H, W) input, got shape {shape}")
        if ly.out_channels <= 0 or ly.kernel <= 0:
            raise ConfigError(f"layer {index}: conv needs positive channels and kernel")
        if ly.in_channels == 0:
            if not resolve:
                raise ConfigError(f"layer {index}: conv input channels unresolved")
            ly.in_channels = shape[0]
        if ly.in_channels != shape[0]:
            raise ConfigError(
                f"layer {index}: conv expects {ly.in_channels} channels, "
                f"previous layer produces {shape[0]}")
        try:
            oh, ow = _conv_out_hw(shape[1], shape[2], ly.kernel, ly.kernel,
                                  ly.stride, ly.padding)
        except ValueError as exc:
            raise ConfigError(f"layer {index}: {exc}") from exc
        return (ly.out_channels, oh, ow)
    if ly.kind == "relu":
        return shape
    if ly.kind == "maxpool":
        if len(shape) != 3:
            raise ConfigError(
                f"layer {index}: maxpool expects a (C, H, W) input, got shape {shape}")
        if ly.window <= 0:
            raise ConfigError(f"layer {index}: maxpool window must be positive")
        try:
            oh, ow = _conv_out_hw(shape[1], shape[2], ly.window, ly.window,
                                  ly.stride, 0)
        except ValueError as exc:
            raise ConfigError(f"layer {index}: {exc}") from exc
        return (shape[0], oh, ow)
    if ly.kind == "flatten":
        return (int(np.prod(shape)),)
    if ly.kind == "softmax_ce":
        if len(shape) != 1:
            raise ConfigError(
                f"layer {index}: loss head expects a flat input, got shape {shape}")
        return shape
    raise ConfigError(f"layer {index}: unknown layer kind {ly.kind!r}")


def infer_shapes(layers: list, input_shape: tuple, resolve: bool = False) -> list:
    """Per-layer output shapes (without the batch axis).

    Raises ConfigError if the chain is inconsistent, a distortion flag sits
    on a non-relu layer, or a loss head appears anywhere but last.
    """
    shape = tuple(int(s) for s in input_shape)
    shapes = []
    for i, ly in enumerate(layers):
        if ly.distort and ly.kind != "relu":
            raise ConfigError(f"layer {i}: only relu layers can carry distortion")
        if ly.kind == "softmax_ce" and i != len(layers) - 1:
            raise ConfigError(f"layer {i}: loss head must be the final layer")
        shape = _shape_step(ly, shape, i, resolve)
        shapes.append(shape)
    return shapes


def init_network(layers: list, input_shape: tuple, rng: np.random.Generator,
                 dtype=np.float32, use_bias: bool = True) -> Network:
    """Resolve shapes and draw He-normal weights (zero biases).

    The ``layers`` specs are updated in place when input widths were left
    to be inferred.  ``use_bias=False`` omits bias parameters entirely.
    """
    dtype = np.dtype(dtype)
    infer_shapes(layers, input_shape, resolve=True)
    params = {}
    for i, ly in enumerate(layers):
        if ly.kind == "dense":
            scale = np.sqrt(2.0 / ly.in_features)
            params[f"W{i}"] = (scale * rng.standard_normal(
                (ly.out_features, ly.in_features))).astype(dtype)
            if use_bias:
                params[f"b{i}"] = np.zeros(ly.out_features, dtype=dtype)
        elif ly.kind == "conv":
            fan_in = ly.in_channels * ly.kernel * ly.kernel
            scale = np.sqrt(2.0 / fan_in)
            params[f"W{i}"] = (scale * rng.standard_normal(
                (ly.out_channels, ly.in_channels, ly.kernel, ly.kernel))).astype(dtype)
            if use_bias:
                params[f"b{i}"] = np.zeros(ly.out_channels, dtype=dtype)
    return Network(layers, params, tuple(int(s) for s in input_shape), dtype)


@dataclass
class BatchCache:
    """Per-batch intermediates kept for the backward pass."""

    inputs: list
    logits: np.ndarray
    cols: dict = field(default_factory=dict)
    pool_idx: dict = field(default_factory=dict)
    flat_shapes: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)


def forward(net: Network, x: np.ndarray, distortion=None, mode: str = "train"):
    """Run the network; returns (logits, BatchCache).

    ``distortion`` supplies DistortionState per distorted layer, either as a
    mapping ``{layer index: state}`` or a callable ``(layer index, features)
    -> state``.  Evaluation mode ignores distortion layers entirely and
    rejects a supplied ``distortion`` to keep eval passes clean.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" and distortion is not None:
        raise ConfigError("evaluation forward does not take distortion states")
    h = np.asarray(x, dtype=net.dtype)
    cache = BatchCache(inputs=[], logits=None)
    for i, ly in enumerate(net.layers):
        cache.inputs.append(h)
        if ly.kind == "dense":
            h = h @ net.params[f"W{i}"].T
            if f"b{i}" in net.params:
                h = h + net.params[f"b{i}"]
        elif ly.kind == "conv":
            kh = kw = ly.kernel
            cols = im2col(h, kh, kw, ly.stride, ly.padding)
            w = net.params[f"W{i}"]
            out = cols @ w.reshape(w.shape[0], -1).T
            if f"b{i}" in net.params:
                out = out + net.params[f"b{i}"]
            n = h.shape[0]
            oh, ow = _conv_out_hw(h.shape[2], h.shape[3], kh, kw,
                                  ly.stride, ly.padding)
            h = np.ascontiguousarray(
                out.reshape(n, oh, ow, w.shape[0]).transpose(0, 3, 1, 2))
            cache.cols[i] = cols
        elif ly.kind == "relu":
            h = np.maximum(h, 0)
            if ly.distort and mode == "train":
                if distortion is None:
                    raise ConfigError(
                        f"layer {i} expects a distortion state in training mode")
                if callable(distortion):
                    state = distortion(i, h)
                else:
                    state = distortion[i]
                cache.states[i] = state
                h = apply_distortion(h, state.mask, state.epsilon,
                                     state.p_effective)
        elif ly.kind == "maxpool":
            h, idx = maxpool2d(h, ly.window, ly.stride)
            cache.pool_idx[i] = idx
        elif ly.kind == "flatten":
            cache.flat_shapes[i] = h.shape
            h = h.reshape(h.shape[0], -1)
        elif ly.kind == "softmax_ce":
            pass
        else:
            raise ConfigError(f"layer {i}: unknown layer kind {ly.kind!r}")
    cache.logits = h
    return h, cache


def softmax_crossentropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy with a stable log-softmax; returns (loss, probs)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits reached the loss")
    if labels.shape != (logits.shape[0],):
        raise ValueError(
            f"labels shape {labels.shape} does not match batch of {logits.shape[0]}")
    classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -float(logp[np.arange(len(labels)), labels].mean())
    return loss, np.exp(logp)


def backward(net: Network, cache: BatchCache, labels: np.ndarray) -> dict:
    """Parameter gradients of the mean cross-entropy for the cached batch.

    The distortion applied in the forward pass is treated as constant, so
    its layers contribute only the ``1 / (1 - p)`` rescale factor.
    """
    labels = np.asarray(labels)
    _, probs = softmax_crossentropy(cache.logits, labels)
    n = len(labels)
    g = probs
    g[np.arange(n), labels] -= 1.0
    g = g / n
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        ly = net.layers[i]
        x_in = cache.inputs[i]
        if ly.kind == "dense":
            grads[f"W{i}"] = g.T @ x_in
            if f"b{i}" in net.params:
                grads[f"b{i}"] = g.sum(axis=0)
            g = g @ net.params[f"W{i}"]
        elif ly.kind == "conv":
            w = net.params[f"W{i}"]
            k = w.shape[0]
            dout = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, k)
            grads[f"W{i}"] = (dout.T @ cache.cols[i]).reshape(w.shape)
            if f"b{i}" in net.params:
                grads[f"b{i}"] = dout.sum(axis=0)
            dcols = dout @ w.reshape(k, -1)
            g = col2im(dcols, x_in.shape, ly.kernel, ly.kernel,
                       ly.stride, ly.padding)
        elif ly.kind == "relu":
            state = cache.states.get(i)
            if state is not None:
                g = g / (1.0 - state.p_effective)
            g = g * (x_in > 0)
        elif ly.kind == "maxpool":
            g = maxpool2d_backward(g, cache.pool_idx[i], x_in.shape[2:])
        elif ly.kind == "flatten":
            g = g.reshape(cache.flat_shapes[i])
        elif ly.kind == "softmax_ce":
            pass
    return grads


def sgd_step(params: dict, grads: dict, state: dict, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> dict:
    """One SGD update with classical momentum, in place.

    ``state`` holds the velocity buffers and is created lazily; weight decay
    is added to the gradient before the momentum update.
    """
    for key, p in params.items():
        gr = grads[key]
        if gr.shape != p.shape:
            raise ValueError(
                f"gradient shape {gr.shape} does not match parameter "
                f"{key} shape {p.shape}")
        gr = gr.astype(p.dtype, copy=False)
        if weight_decay:
            gr = gr + weight_decay * p
        if momentum:
            v = state.get(key)
            v = gr.copy() if v is None else momentum * v + gr
            state[key] = v
        else:
            v = gr
        p -= lr * v
    return params


@dataclass
class AttachmentPlan:
    """Where a distortion hook sits and which downstream layer guides it."""

    layer: int
    mode: str
    weight_key: str
    feature_shape: tuple
    stride: int = 1
    padding: int = 0
    q_area: int = 0


def attachment_plans(net: Network) -> list:
    """One plan per distorted relu layer.

    The guiding layer is the next dense or conv layer; an intervening
    flatten forces dense guidance on the flattened features.
    """
    shapes = infer_shapes(net.layers, net.input_shape)
    plans = []
    for i, ly in enumerate(net.layers):
        if ly.kind != "relu" or not ly.distort:
            continue
        j = i + 1
        through_flatten = False
        while j < len(net.layers) and net.layers[j].kind == "flatten":
            through_flatten = True
            j += 1
        if j >= len(net.layers) or net.layers[j].kind not in ("dense", "conv"):
            raise ConfigError(
                f"layer {i}: distorted activation must feed a dense or conv "
                "layer, optionally through flatten")
        guide = net.layers[j]
        feat = shapes[i]
        if guide.kind == "dense":
            plans.append(AttachmentPlan(i, "fc", f"W{j}", feat))
        else:
            if through_flatten:
                raise ConfigError(
                    f"layer {i}: conv guidance cannot cross a flatten layer")
            oh, ow = _conv_out_hw(feat[1], feat[2], guide.kernel, guide.kernel,
                                  guide.stride, guide.padding)
            plans.append(AttachmentPlan(i, "conv", f"W{j}", feat,
                                        guide.stride, guide.padding, oh * ow))
    return plans


PRESETS = ("mlp", "mlp2", "mnist_cnn", "mnist_cnn_conv", "cifar_cnn")


def build_preset(name: str, distort: bool = False, hidden: int = 64,
                 classes: int = 10) -> list:
    """Layer list for a named architecture; widths left to inference."""
    d = distort
    if name == "mlp":
        return [flatten(), dense(0, hidden), relu(distort=d),
                dense(hidden, classes), softmax_ce()]
    if name == "mlp2":
        return [flatten(), dense(0, hidden), relu(distort=d),
                dense(hidden, hidden), relu(distort=d),
                dense(hidden, classes), softmax_ce()]
    if name == "mnist_cnn":
        return [conv(0, 8, 5, padding=2), relu(), maxpool(2, 2),
                conv(8, 16, 5, padding=2), relu(), maxpool(2, 2),
                flatten(), dense(0, 128), relu(distort=d),
                dense(128, classes), softmax_ce()]
    if name == "mnist_cnn_conv":
        return [conv(0, 8, 3, padding=1), relu(distort=d),
                conv(8, 16, 3, padding=1), relu(), maxpool(2, 2),
                flatten(), dense(0, 64), relu(),
                dense(64, classes), softmax_ce()]
    if name == "cifar_cnn":
        return [conv(0, 96, 5, padding=2), relu(), maxpool(3, 2),
                conv(96, 128, 5, padding=2), relu(), maxpool(3, 2),
                conv(128, 256, 5, padding=2), relu(), maxpool(3, 2),
                flatten(), dense(0, 2048), relu(distort=d),
                dense(2048, 2048), relu(distort=d),
                dense(2048, classes), softmax_ce()]
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
