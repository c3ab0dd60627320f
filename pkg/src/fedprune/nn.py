"""Small numpy neural-network engine with exact analytic gradients.

Tensors are float64 ``numpy`` arrays in row-major (C) order, image batches are
laid out NCHW. Dense weights are ``(out, in)``; conv weights are
``(out_channels, in_channels, kh, kw)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Dataset
from .errors import ConfigError, InputError


# ---------------------------------------------------------------------------
# Architecture description


@dataclass(frozen=True)
class Dense:
    in_units: int
    out_units: int


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class MaxPool2D:
    size: int = 2


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class SoftmaxCrossEntropyHead:
    classes: int


Layer = Union[Dense, Conv2D, MaxPool2D, ReLU, Flatten, SoftmaxCrossEntropyHead]
PARAM_LAYERS = (Dense, Conv2D)


def _out_shape(layer: Layer, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    def bad(msg: str):
        return ConfigError(f"layer {index} ({type(layer).__name__}): {msg}, got input shape {shape}")

    if isinstance(layer, Dense):
        if shape != (layer.in_units,):
            raise bad(f"expects ({layer.in_units},)")
        return (layer.out_units,)
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise bad(f"expects ({layer.in_channels}, H, W)")
        if layer.stride < 1 or layer.padding < 0:
            raise bad("stride must be >= 1 and padding >= 0")
        h = (shape[1] + 2 * layer.padding - layer.kernel_h) // layer.stride + 1
        w = (shape[2] + 2 * layer.padding - layer.kernel_w) // layer.stride + 1
        if h < 1 or w < 1:
            raise bad("kernel larger than padded input")
        return (layer.out_channels, h, w)
    if isinstance(layer, MaxPool2D):
        if len(shape) != 3 or shape[1] < layer.size or shape[2] < layer.size:
            raise bad(f"expects (C, H, W) with H, W >= {layer.size}")
        return (shape[0], shape[1] // layer.size, shape[2] // layer.size)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    if isinstance(layer, SoftmaxCrossEntropyHead):
        if shape != (layer.classes,):
            raise bad(f"expects ({layer.classes},) logits")
        return shape
    raise ConfigError(f"layer {index}: unsupported layer {layer!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list plus the per-sample input shape."""

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        heads = [i for i, l in enumerate(self.layers) if isinstance(l, SoftmaxCrossEntropyHead)]
        if heads != [len(self.layers) - 1]:
            raise ConfigError("exactly one SoftmaxCrossEntropyHead is required, as the last layer")
        if not self.param_layers:
            raise ConfigError("model has no parameterized layer")
        self.shapes  # validates composition

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        """``shapes[i]`` is the input shape of layer ``i``; ``shapes[-1]`` the logits shape."""
        out = [self.input_shape]
        for i, layer in enumerate(self.layers):
            out.append(_out_shape(layer, out[-1], i))
        return out

    @property
    def classes(self) -> int:
        return self.layers[-1].classes

    @property
    def param_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, PARAM_LAYERS)]

    @property
    def prunable_layers(self) -> list[int]:
        """Hidden Dense layers and Conv layers; the layer feeding the head is never pruned."""
        return self.param_layers[:-1]

    def width(self, index: int) -> int:
        layer = self.layers[index]
        return layer.out_units if isinstance(layer, Dense) else layer.out_channels

    def activation_index(self, index: int) -> int:
        """Layer whose output holds the post-nonlinearity activation of layer ``index``."""
        nxt = index + 1
        return nxt if nxt < len(self.layers) and isinstance(self.layers[nxt], ReLU) else index


def mlp(n_inputs: int, hidden: list[int] | tuple[int, ...], classes: int) -> ModelSpec:
    layers: list[Layer] = []
    prev = n_inputs
    for width in hidden:
        layers += [Dense(prev, width), ReLU()]
        prev = width
    layers += [Dense(prev, classes), SoftmaxCrossEntropyHead(classes)]
    return ModelSpec((n_inputs,), tuple(layers))


def reference_cnn(classes: int = 62) -> ModelSpec:
    """Two 5x5 conv layers (32, 64 filters, same padding) with 2x2 pooling, a
    2048-unit dense layer and the class head; 28x28 greyscale input."""
    return ModelSpec(
        (1, 28, 28),
        (
            Conv2D(1, 32, 5, 5, padding=2), ReLU(), MaxPool2D(),
            Conv2D(32, 64, 5, 5, padding=2), ReLU(), MaxPool2D(),
            Flatten(),
            Dense(3136, 2048), ReLU(),
            Dense(2048, classes),
            SoftmaxCrossEntropyHead(classes),
        ),
    )


# ---------------------------------------------------------------------------
# Parameters


class LayerParams(NamedTuple):
    weight: np.ndarray
    bias: np.ndarray


Params = dict[int, LayerParams]


def param_shapes(spec: ModelSpec) -> dict[int, tuple[tuple[int, ...], tuple[int, ...]]]:
    out = {}
    for i in spec.param_layers:
        layer = spec.layers[i]
        if isinstance(layer, Dense):
            out[i] = ((layer.out_units, layer.in_units), (layer.out_units,))
        else:
            out[i] = ((layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w), (layer.out_channels,))
    return out


def init_params(spec: ModelSpec, seed: int) -> Params:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, (wshape, bshape) in param_shapes(spec).items():
        receptive = math.prod(wshape[2:])
        limit = math.sqrt(6.0 / ((wshape[1] + wshape[0]) * receptive))
        params[i] = LayerParams(rng.uniform(-limit, limit, size=wshape), np.zeros(bshape))
    return params


def check_params(spec: ModelSpec, params: Params) -> None:
    expected = param_shapes(spec)
    if set(params) != set(expected):
        raise ConfigError(f"parameters for layers {sorted(params)}, model expects {sorted(expected)}")
    for i, (ws, bs) in expected.items():
        if params[i].weight.shape != ws or params[i].bias.shape != bs:
            raise ConfigError(
                f"layer {i}: parameter shapes {params[i].weight.shape}/{params[i].bias.shape}, expected {ws}/{bs}"
            )


def count_params(spec: ModelSpec) -> int:
    return sum(math.prod(w) + math.prod(b) for w, b in param_shapes(spec).values())


def params_to_vector(params: Params) -> np.ndarray:
    return np.concatenate([np.concatenate([p.weight.ravel(), p.bias.ravel()]) for _, p in sorted(params.items())])


def vector_to_params(vector: np.ndarray, like: Params) -> Params:
    out, pos = {}, 0
    for i, p in sorted(like.items()):
        w = vector[pos : pos + p.weight.size].reshape(p.weight.shape)
        pos += p.weight.size
        b = vector[pos : pos + p.bias.size].reshape(p.bias.shape)
        pos += p.bias.size
        out[i] = LayerParams(w.copy(), b.copy())
    if pos != vector.size:
        raise InputError(f"vector of length {vector.size} does not match {pos} parameters")
    return out


def copy_params(params: Params) -> Params:
    return {i: LayerParams(p.weight.copy(), p.bias.copy()) for i, p in params.items()}


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray


def _conv_windows(layer: Conv2D, x: np.ndarray) -> np.ndarray:
    p = layer.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (layer.kernel_h, layer.kernel_w), axis=(2, 3))
    return win[:, :, :: layer.stride, :: layer.stride]  # (N, C, Ho, Wo, kh, kw)


def _layer_forward(layer: Layer, p: LayerParams | None, x: np.ndarray):
    if isinstance(layer, Dense):
        return x @ p.weight.T + p.bias, None
    if isinstance(layer, Conv2D):
        win = _conv_windows(layer, x)
        out = np.tensordot(win, p.weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
        return out.transpose(0, 3, 1, 2) + p.bias[None, :, None, None], win
    if isinstance(layer, MaxPool2D):
        s = layer.size
        n, c, h, w = x.shape
        ho, wo = h // s, w // s
        blocks = x[:, :, : ho * s, : wo * s].reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, ho, wo, s * s)
        arg = blocks.argmax(axis=-1)  # first maximum wins on ties
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0), None
    if isinstance(layer, Flatten):
        return x.reshape(len(x), -1), None
    if isinstance(layer, SoftmaxCrossEntropyHead):
        return x, None
    raise ConfigError(f"unsupported layer {layer!r}")


def _layer_backward(layer: Layer, p: LayerParams | None, x: np.ndarray, cache, dy: np.ndarray):
    """Return (dx, LayerParams of gradients or None)."""
    if isinstance(layer, Dense):
        return dy @ p.weight, LayerParams(dy.T @ x, dy.sum(axis=0))
    if isinstance(layer, Conv2D):
        win = cache
        dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
        db = dy.sum(axis=(0, 2, 3))
        dwin = np.tensordot(dy, p.weight, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
        n, c, h, w = x.shape
        pad, s = layer.padding, layer.stride
        ho, wo = dy.shape[2], dy.shape[3]
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for i in range(layer.kernel_h):
            for j in range(layer.kernel_w):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, LayerParams(dw, db)
    if isinstance(layer, MaxPool2D):
        s = layer.size
        n, c, h, w = x.shape
        ho, wo = dy.shape[2], dy.shape[3]
        blocks = np.zeros((n, c, ho, wo, s * s))
        np.put_along_axis(blocks, cache[..., None], dy[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
        dx = np.zeros_like(x)
        dx[:, :, : ho * s, : wo * s] = blocks
        return dx, None
    if isinstance(layer, ReLU):
        return dy * (x > 0), None
    if isinstance(layer, Flatten):
        return dy.reshape(x.shape), None
    raise ConfigError(f"unsupported layer {layer!r}")


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(len(labels))
    loss = float(np.mean(np.log(total[:, 0]) - shifted[rows, labels]))
    grad = exp / total
    grad[rows, labels] -= 1.0
    return loss, grad / len(labels)


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if len(batch.labels) < 1:
        raise InputError("batch must hold at least one sample")
    if batch.inputs.shape[1:] != spec.input_shape or len(batch.inputs) != len(batch.labels):
        raise ConfigError(f"batch inputs {batch.inputs.shape} do not match model input {spec.input_shape}")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.classes:
        raise InputError(f"labels must lie in [0, {spec.classes})")


def _check_dataset(spec: ModelSpec, dataset: Dataset) -> None:
    if dataset.inputs.shape[1:] != spec.input_shape:
        raise ConfigError(f"dataset inputs {dataset.inputs.shape} do not match model input {spec.input_shape}")
    if dataset.labels.max() >= spec.classes:
        raise InputError(f"labels must lie in [0, {spec.classes})")


def _run_forward(spec: ModelSpec, params: Params, inputs: np.ndarray):
    outs, caches = [inputs], []
    for i, layer in enumerate(spec.layers):
        y, cache = _layer_forward(layer, params.get(i), outs[-1])
        outs.append(y)
        caches.append(cache)
    return outs, caches


def _hidden_activations(spec: ModelSpec, outs: list[np.ndarray]) -> dict[int, np.ndarray]:
    return {i: outs[spec.activation_index(i) + 1] for i in spec.prunable_layers}


def forward(spec: ModelSpec, params: Params, batch: Batch):
    """Return ``(mean loss, {prunable layer: post-activation tensor}, logits)``."""
    check_params(spec, params)
    _check_batch(spec, batch)
    outs, _ = _run_forward(spec, params, batch.inputs)
    logits = outs[-1]
    loss, _ = _softmax_xent(logits, batch.labels)
    return loss, _hidden_activations(spec, outs), logits


def loss_and_gradients(spec: ModelSpec, params: Params, batch: Batch):
    """One forward/backward pass: ``(loss, gradients, hidden activations)``."""
    outs, caches = _run_forward(spec, params, batch.inputs)
    loss, dy = _softmax_xent(outs[-1], batch.labels)
    grads = {}
    for i in range(len(spec.layers) - 2, -1, -1):
        dy, g = _layer_backward(spec.layers[i], params.get(i), outs[i], caches[i], dy)
        if g is not None:
            grads[i] = g
    return loss, grads, _hidden_activations(spec, outs)


def backward(spec: ModelSpec, params: Params, batch: Batch) -> Params:
    """Exact gradients of the mean batch loss w.r.t. every weight and bias."""
    check_params(spec, params)
    _check_batch(spec, batch)
    return loss_and_gradients(spec, params, batch)[1]


def sgd_step(params: Params, gradients: Params, lr: float) -> Params:
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    return {
        i: LayerParams(p.weight - lr * gradients[i].weight, p.bias - lr * gradients[i].bias)
        for i, p in params.items()
    }


# ---------------------------------------------------------------------------
# Training and evaluation


def local_train(
    spec: ModelSpec,
    params: Params,
    dataset: Dataset,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> tuple[Params, dict[int, np.ndarray], float]:
    """Minibatch SGD over a seeded reshuffle per epoch.

    Returns the trained parameters, the mean |post-activation| of every hidden
    unit over all training forward passes (conv filters averaged over spatial
    positions), and the sample-weighted mean loss of the last epoch.
    """
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    check_params(spec, params)
    _check_dataset(spec, dataset)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    act_sum = {i: np.zeros(spec.width(i)) for i in spec.prunable_layers}
    seen = 0
    epoch_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            # sorted within the batch so a full batch reproduces dataset order exactly
            idx = np.sort(order[start : start + batch_size])
            batch = Batch(dataset.inputs[idx], dataset.labels[idx])
            loss, grads, acts = loss_and_gradients(spec, params, batch)
            params = sgd_step(params, grads, lr)
            epoch_loss += loss * len(idx)
            for i, a in acts.items():
                a = np.abs(a)
                act_sum[i] += (a.mean(axis=(2, 3)) if a.ndim == 4 else a).sum(axis=0)
            seen += len(idx)
    return params, {i: s / seen for i, s in act_sum.items()}, epoch_loss / n


def predict_logits(spec: ModelSpec, params: Params, inputs: np.ndarray, chunk: int = 2048) -> np.ndarray:
    parts = [_run_forward(spec, params, inputs[s : s + chunk])[0][-1] for s in range(0, len(inputs), chunk)]
    return np.concatenate(parts)


def evaluate(spec: ModelSpec, params: Params, dataset: Dataset) -> tuple[float, float]:
    """``(accuracy, mean loss)``; argmax ties go to the lowest class index."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    check_params(spec, params)
    _check_dataset(spec, dataset)
    logits = predict_logits(spec, params, dataset.inputs)
    loss, _ = _softmax_xent(logits, dataset.labels)
    accuracy = float(np.mean(logits.argmax(axis=1) == dataset.labels))
    return accuracy, loss


def count_flops(spec: ModelSpec) -> int:
    """Multiply-accumulates of one single-sample forward pass (Dense and Conv2D only)."""
    shapes = spec.shapes
    total = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            total += layer.in_units * layer.out_units
        elif isinstance(layer, Conv2D):
            _, ho, wo = shapes[i + 1]
            total += ho * wo * layer.out_channels * layer.in_channels * layer.kernel_h * layer.kernel_w
    return total
