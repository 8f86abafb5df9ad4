"""Small numpy models with per-sample losses and per-sample gradients.

Parameters are a single flat float64 vector. Flattening order is layer by
layer in declaration order, weights before biases, row-major within each
array (dense weights are stored as (out, in), conv weights as
(filters, channels, k, k)).
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Union

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from masked_dpsgd.core_math import SeededRng, l2_norm
from masked_dpsgd.domain import Dataset, GradBatch, ParamVector

LOGGER = logging.getLogger("masked_dpsgd")

LAYER_KINDS = ("dense", "relu", "conv", "maxpool", "flatten")
MODEL_NAMES = ("logreg", "mlp", "cnn_mnist", "cnn_cifar")


class ModelError(ValueError):
    """Raised when a model receives mismatched dimensions or produces non-finite values."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


class _Layer(ABC):
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    param_shapes: tuple[tuple[int, ...], ...] = ()
    fan_in: int = 1

    @abstractmethod
    def forward(self, x: np.ndarray, weights: list[np.ndarray]) -> tuple[np.ndarray, Any]:
        ...

    @abstractmethod
    def backward(
        self, grad_out: np.ndarray, weights: list[np.ndarray], cache: Any
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Return the input gradient and one per-sample gradient array per parameter."""


class _Dense(_Layer):
    def __init__(self, input_shape: tuple[int, ...], units: int) -> None:
        if len(input_shape) != 1:
            raise ModelError(f"dense layer needs flat input, got shape {input_shape}")
        self.input_shape = input_shape
        self.output_shape = (units,)
        self.param_shapes = ((units, input_shape[0]), (units,))
        self.fan_in = input_shape[0]

    def forward(self, x: np.ndarray, weights: list[np.ndarray]) -> tuple[np.ndarray, Any]:
        w, b = weights
        return x @ w.T + b, x

    def backward(self, grad_out: np.ndarray, weights: list[np.ndarray], cache: Any) -> tuple[np.ndarray, list[np.ndarray]]:
        w, _ = weights
        grad_w = grad_out[:, :, None] * cache[:, None, :]
        return grad_out @ w, [grad_w, grad_out]


class _Relu(_Layer):
    def __init__(self, input_shape: tuple[int, ...]) -> None:
        self.input_shape = input_shape
        self.output_shape = input_shape

    def forward(self, x: np.ndarray, weights: list[np.ndarray]) -> tuple[np.ndarray, Any]:
        active = x > 0.0
        return np.where(active, x, 0.0), active

    def backward(self, grad_out: np.ndarray, weights: list[np.ndarray], cache: Any) -> tuple[np.ndarray, list[np.ndarray]]:
        return np.where(cache, grad_out, 0.0), []


class _Flatten(_Layer):
    def __init__(self, input_shape: tuple[int, ...]) -> None:
        self.input_shape = input_shape
        self.output_shape = (int(np.prod(input_shape)),)

    def forward(self, x: np.ndarray, weights: list[np.ndarray]) -> tuple[np.ndarray, Any]:
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_out: np.ndarray, weights: list[np.ndarray], cache: Any) -> tuple[np.ndarray, list[np.ndarray]]:
        return grad_out.reshape(cache), []


def _window_output(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class _Conv(_Layer):
    def __init__(self, input_shape: tuple[int, ...], filters: int, kernel: int, stride: int, padding: int) -> None:
        if len(input_shape) != 3:
            raise ModelError(f"conv layer needs (channels, height, width) input, got {input_shape}")
        channels, height, width = input_shape
        out_h = _window_output(height, kernel, stride, padding)
        out_w = _window_output(width, kernel, stride, padding)
        if out_h < 1 or out_w < 1:
            raise ModelError(f"conv kernel {kernel} does not fit input {input_shape}")
        self.input_shape = input_shape
        self.output_shape = (filters, out_h, out_w)
        self.param_shapes = ((filters, channels, kernel, kernel), (filters,))
        self.fan_in = channels * kernel * kernel
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def _windows(self, x: np.ndarray) -> np.ndarray:
        p = self.padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(padded, (self.kernel, self.kernel), axis=(2, 3))
        return windows[:, :, :: self.stride, :: self.stride]

    def forward(self, x: np.ndarray, weights: list[np.ndarray]) -> tuple[np.ndarray, Any]:
        w, b = weights
        windows = self._windows(x)
        out = np.einsum("bchwij,fcij->bfhw", windows, w, optimize=True) + b[None, :, None, None]
        return out, (x.shape, windows)

    def backward(self, grad_out: np.ndarray, weights: list[np.ndarray], cache: Any) -> tuple[np.ndarray, list[np.ndarray]]:
        w, _ = weights
        x_shape, windows = cache
        grad_w = np.einsum("bfhw,bchwij->bfcij", grad_out, windows, optimize=True)
        grad_b = grad_out.sum(axis=(2, 3))

        batch, channels, height, width = x_shape
        p, s, k = self.padding, self.stride, self.kernel
        out_h, out_w = grad_out.shape[2], grad_out.shape[3]
        grad_padded = np.zeros((batch, channels, height + 2 * p, width + 2 * p))
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s] += np.einsum(
                    "bfhw,fc->bchw", grad_out, w[:, :, i, j], optimize=True
                )
        return grad_padded[:, :, p : p + height, p : p + width], [grad_w, grad_b]


class _MaxPool(_Layer):
    def __init__(self, input_shape: tuple[int, ...], kernel: int, stride: int) -> None:
        if len(input_shape) != 3:
            raise ModelError(f"maxpool layer needs (channels, height, width) input, got {input_shape}")
        channels, height, width = input_shape
        out_h = _window_output(height, kernel, stride, 0)
        out_w = _window_output(width, kernel, stride, 0)
        if out_h < 1 or out_w < 1:
            raise ModelError(f"pool kernel {kernel} does not fit input {input_shape}")
        self.input_shape = input_shape
        self.output_shape = (channels, out_h, out_w)
        self.kernel = kernel
        self.stride = stride

    def forward(self, x: np.ndarray, weights: list[np.ndarray]) -> tuple[np.ndarray, Any]:
        k, s = self.kernel, self.stride
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = windows.reshape(*windows.shape[:4], k * k)
        # argmax returns the first maximum, so ties route the gradient to the earliest window cell
        winner = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]
        return out, (x.shape, winner)

    def backward(self, grad_out: np.ndarray, weights: list[np.ndarray], cache: Any) -> tuple[np.ndarray, list[np.ndarray]]:
        x_shape, winner = cache
        k, s = self.kernel, self.stride
        out_h, out_w = grad_out.shape[2], grad_out.shape[3]
        grad_in = np.zeros(x_shape)
        for cell in range(k * k):
            i, j = divmod(cell, k)
            grad_in[:, :, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s] += np.where(
                winner == cell, grad_out, 0.0
            )
        return grad_in, []


def _build_layer(spec: LayerSpec, input_shape: tuple[int, ...]) -> _Layer:
    if spec.kind == "dense":
        return _Dense(input_shape, spec.units)
    if spec.kind == "relu":
        return _Relu(input_shape)
    if spec.kind == "flatten":
        return _Flatten(input_shape)
    if spec.kind == "conv":
        return _Conv(input_shape, spec.units, spec.kernel, spec.stride, spec.padding)
    if spec.kind == "maxpool":
        return _MaxPool(input_shape, spec.kernel, spec.stride)
    raise ModelError(f"unknown layer kind: {spec.kind} (expected one of {', '.join(LAYER_KINDS)})")


class Network:
    """Feed-forward softmax classifier trained with categorical cross-entropy."""

    def __init__(self, name: str, input_shape: tuple[int, ...], classes: int, specs: tuple[LayerSpec, ...]) -> None:
        if classes < 1:
            raise ModelError("classes must be >= 1")
        self.name = name
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.specs = tuple(specs)
        self.layers: list[_Layer] = []
        shape = self.input_shape
        for spec in self.specs:
            layer = _build_layer(spec, shape)
            self.layers.append(layer)
            shape = layer.output_shape
        if shape != (classes,):
            raise ModelError(f"{name}: final layer emits shape {shape}, expected ({classes},)")

        self._slices: list[list[tuple[int, int, tuple[int, ...]]]] = []
        offset = 0
        for layer in self.layers:
            entries = []
            for param_shape in layer.param_shapes:
                size = int(np.prod(param_shape))
                entries.append((offset, offset + size, param_shape))
                offset += size
            self._slices.append(entries)
        self.param_count = offset

    @property
    def feature_count(self) -> int:
        return int(np.prod(self.input_shape))

    def describe(self) -> list[dict[str, Any]]:
        return [
            {"kind": spec.kind, "output_shape": list(layer.output_shape), "params": [list(s) for s in layer.param_shapes]}
            for spec, layer in zip(self.specs, self.layers)
        ]

    def unflatten(self, params: ParamVector) -> list[list[np.ndarray]]:
        self._check_params(params)
        return [[params[start:end].reshape(shape) for start, end, shape in entries] for entries in self._slices]

    def logits(self, params: ParamVector, features: npt.NDArray[np.float64]) -> np.ndarray:
        out, _ = self._forward(params, features)
        return out

    def loss_and_grads(
        self, params: ParamVector, features: npt.NDArray[np.float64], labels: npt.NDArray[np.int64]
    ) -> tuple[npt.NDArray[np.float64], GradBatch]:
        outside = (labels < 0) | (labels >= self.classes)
        if np.any(outside):
            bad = int(np.flatnonzero(outside)[0])
            raise ModelError(f"label {int(labels[bad])} at sample index {bad} outside [0, {self.classes})")
        weights = self.unflatten(params)
        out, caches = self._forward(params, features, weights)
        log_probs = _log_softmax(out)
        rows = np.arange(out.shape[0])
        losses = -log_probs[rows, labels]

        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        per_layer: list[list[np.ndarray]] = [[] for _ in self.layers]
        for index in range(len(self.layers) - 1, -1, -1):
            grad, param_grads = self.layers[index].backward(grad, weights[index], caches[index])
            per_layer[index] = param_grads

        batch = out.shape[0]
        flat = [g.reshape(batch, -1) for grads in per_layer for g in grads]
        grads = np.concatenate(flat, axis=1)
        _raise_on_non_finite(grads, "gradient")
        return losses, grads

    def _forward(
        self,
        params: ParamVector,
        features: npt.NDArray[np.float64],
        weights: list[list[np.ndarray]] | None = None,
    ) -> tuple[np.ndarray, list[Any]]:
        if weights is None:
            weights = self.unflatten(params)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_count:
            raise ModelError(f"{self.name}: expected (B, {self.feature_count}) features, got {features.shape}")
        x = features.reshape((features.shape[0],) + self.input_shape)
        caches = []
        for layer, layer_weights in zip(self.layers, weights):
            x, cache = layer.forward(x, layer_weights)
            caches.append(cache)
        _raise_on_non_finite(x, "activation")
        return x, caches

    def _check_params(self, params: ParamVector) -> None:
        if params.ndim != 1 or params.shape[0] != self.param_count:
            raise ModelError(f"{self.name}: expected {self.param_count} parameters, got shape {params.shape}")


class QuadraticModel:
    """Per-sample loss 0.5 * ||theta - x||^2; gradient-Lipschitz with constant 1."""

    smoothness = 1.0

    def __init__(self, dim: int) -> None:
        if dim < 1:
            raise ModelError("quadratic model needs dim >= 1")
        self.name = "quadratic"
        self.param_count = dim
        self.classes = 1

    def loss_and_grads(
        self, params: ParamVector, features: npt.NDArray[np.float64], labels: npt.NDArray[np.int64]
    ) -> tuple[npt.NDArray[np.float64], GradBatch]:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.param_count,):
            raise ModelError(f"quadratic: expected {self.param_count} parameters, got shape {params.shape}")
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.param_count:
            raise ModelError(f"quadratic: expected (B, {self.param_count}) features, got {features.shape}")
        diff = params[None, :] - features
        return 0.5 * np.sum(diff * diff, axis=1), diff

    @staticmethod
    def minimizer(features: npt.NDArray[np.float64]) -> ParamVector:
        return np.mean(features, axis=0)

    def minimum_loss(self, features: npt.NDArray[np.float64]) -> float:
        losses, _ = self.loss_and_grads(self.minimizer(features), features, np.zeros(features.shape[0], dtype=np.int64))
        return float(np.mean(losses))


Model = Union[Network, QuadraticModel]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _raise_on_non_finite(values: np.ndarray, what: str) -> None:
    finite = np.isfinite(values.reshape(values.shape[0], -1)).all(axis=1)
    if not finite.all():
        sample = int(np.flatnonzero(~finite)[0])
        raise ModelError(f"non-finite {what} at sample index {sample}")


def architecture(name: str, input_shape: tuple[int, ...], classes: int, hidden: int = 64) -> tuple[LayerSpec, ...]:
    head = (LayerSpec("flatten"),) if len(input_shape) > 1 else ()
    if name == "logreg":
        return head + (LayerSpec("dense", units=classes),)
    if name == "mlp":
        return head + (LayerSpec("dense", units=hidden), LayerSpec("relu"), LayerSpec("dense", units=classes))
    if name == "cnn_mnist":
        return (
            LayerSpec("conv", units=16, kernel=8, stride=2, padding=2),
            LayerSpec("relu"),
            LayerSpec("maxpool", kernel=2, stride=1),
            LayerSpec("conv", units=32, kernel=4, stride=2, padding=2),
            LayerSpec("relu"),
            LayerSpec("maxpool", kernel=2, stride=1),
            LayerSpec("flatten"),
            LayerSpec("dense", units=32),
            LayerSpec("relu"),
            LayerSpec("dense", units=classes),
        )
    if name == "cnn_cifar":
        return (
            LayerSpec("conv", units=16, kernel=3, stride=1, padding=1),
            LayerSpec("relu"),
            LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("conv", units=16, kernel=3, stride=1, padding=1),
            LayerSpec("relu"),
            LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("conv", units=32, kernel=3, stride=1, padding=1),
            LayerSpec("relu"),
            LayerSpec("maxpool", kernel=2, stride=2),
            LayerSpec("flatten"),
            LayerSpec("dense", units=128),
            LayerSpec("relu"),
            LayerSpec("dense", units=classes),
        )
    raise ModelError(f"unknown model: {name} (expected one of {', '.join(MODEL_NAMES)})")


def build_model(name: str, input_shape: tuple[int, ...], classes: int, hidden: int = 64) -> Network:
    if name in ("cnn_mnist", "cnn_cifar") and len(input_shape) != 3:
        raise ModelError(f"{name} needs image input (channels, height, width), got {input_shape}")
    return Network(name, input_shape, classes, architecture(name, input_shape, classes, hidden))


def init_params(model: Model, seed: int) -> ParamVector:
    """Weights uniform in +-1/sqrt(fan_in) drawn from the run seed; biases start at zero."""
    if isinstance(model, QuadraticModel):
        return np.zeros(model.param_count)
    rng = SeededRng(seed)
    chunks: list[np.ndarray] = []
    for layer in model.layers:
        for position, shape in enumerate(layer.param_shapes):
            if position == 0:
                bound = 1.0 / np.sqrt(layer.fan_in)
                chunks.append(rng.uniform(-bound, bound, shape).ravel())
            else:
                chunks.append(np.zeros(int(np.prod(shape))))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def per_sample_loss(model: Model, params: ParamVector, features: npt.ArrayLike, label: int) -> float:
    row = np.asarray(features, dtype=np.float64).reshape(1, -1)
    losses, _ = model.loss_and_grads(np.asarray(params, dtype=np.float64), row, np.array([label], dtype=np.int64))
    return float(losses[0])


def per_sample_grads(
    model: Model, params: ParamVector, features: npt.ArrayLike, labels: npt.ArrayLike
) -> GradBatch:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ModelError("batch must hold at least one sample")
    if labels.shape != (features.shape[0],):
        raise ModelError(f"expected {features.shape[0]} labels, got shape {labels.shape}")
    _, grads = model.loss_and_grads(np.asarray(params, dtype=np.float64), features, labels)
    return grads


def finite_diff_grad(model: Model, params: ParamVector, features: npt.ArrayLike, label: int, h: float) -> ParamVector:
    if h <= 0:
        raise ModelError(f"h must be > 0, got {h}")
    base = np.asarray(params, dtype=np.float64)
    out = np.zeros_like(base)
    for j in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[j] += h
        minus[j] -= h
        out[j] = (per_sample_loss(model, plus, features, label) - per_sample_loss(model, minus, features, label)) / (2 * h)
    return out


def max_relative_error(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||), zero when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(l2_norm(a), l2_norm(b))
    if scale == 0.0:
        return 0.0
    return l2_norm(a - b) / scale


def predict(model: Network, params: ParamVector, features: npt.NDArray[np.float64], chunk_size: int = 512) -> npt.NDArray[np.int64]:
    predictions = [
        np.argmax(model.logits(params, features[start : start + chunk_size]), axis=1)
        for start in range(0, features.shape[0], chunk_size)
    ]
    return np.concatenate(predictions).astype(np.int64)


def accuracy(model: Network, params: ParamVector, dataset: Dataset, chunk_size: int = 512) -> float:
    return float(np.mean(predict(model, params, dataset.features, chunk_size) == dataset.labels))


def dataset_loss(model: Model, params: ParamVector, dataset: Dataset, chunk_size: int = 512) -> float:
    total = 0.0
    for start in range(0, dataset.size, chunk_size):
        stop = start + chunk_size
        if isinstance(model, Network):
            log_probs = _log_softmax(model.logits(params, dataset.features[start:stop]))
            labels = dataset.labels[start:stop]
            total += float(-np.sum(log_probs[np.arange(labels.size), labels]))
        else:
            losses, _ = model.loss_and_grads(params, dataset.features[start:stop], dataset.labels[start:stop])
            total += float(np.sum(losses))
    return total / dataset.size
