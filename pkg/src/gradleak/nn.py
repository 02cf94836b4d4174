"""Mini convolutional / fully-connected classifiers with exact gradients.

Tensors are plain float64 numpy arrays. A model is a ``ModelSpec`` (ordered
layer descriptions) plus ``Params``, a list holding one dict per layer with
``"weight"`` and ``"bias"`` arrays (empty for parameterless layers).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence, Union

import numpy as np

from . import autodiff as ad

Params = list  # list[dict[str, np.ndarray]], one entry per layer


class ShapeError(ValueError):
    """A model description, tensor, or gradient set has inconsistent shapes."""


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel_size: int


@dataclass(frozen=True)
class MaxPool:
    window: int


@dataclass(frozen=True)
class FullyConnected:
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class SoftmaxOutput:
    num_classes: int


LayerSpec = Union[Conv2d, MaxPool, FullyConnected, ReLU, SoftmaxOutput]
_PARAM_KINDS = (Conv2d, FullyConnected, SoftmaxOutput)


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    num_classes: int
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", _infer_shapes(self))

    def param_layers(self) -> list[int]:
        """Indices of layers that carry weights."""
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, _PARAM_KINDS)]

    def layer_name(self, index: int) -> str:
        layer = self.layers[index]
        return f"{type(layer).__name__}@{index}"

    def input_size(self) -> int:
        return int(np.prod(self.input_shape))


def _infer_shapes(spec: ModelSpec) -> tuple[tuple[int, ...], ...]:
    """Input shape of every layer followed by the final output shape."""
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise ShapeError(f"input_shape must be (channels, height, width), got {spec.input_shape}")
    if spec.num_classes < 1:
        raise ShapeError(f"num_classes must be positive, got {spec.num_classes}")
    if not spec.layers or not isinstance(spec.layers[-1], SoftmaxOutput):
        raise ShapeError("the last layer must be SoftmaxOutput")
    shape: tuple[int, ...] = spec.input_shape
    shapes = [shape]
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({type(layer).__name__})"
        if isinstance(layer, SoftmaxOutput) and i != len(spec.layers) - 1:
            raise ShapeError(f"{where}: SoftmaxOutput may only appear as the last layer")
        if isinstance(layer, Conv2d):
            if len(shape) != 3:
                raise ShapeError(f"{where}: expects a (C, H, W) input, got {shape}")
            c, h, w = shape
            k = layer.kernel_size
            if layer.out_channels < 1 or k < 1:
                raise ShapeError(f"{where}: sizes must be positive")
            if k > h or k > w:
                raise ShapeError(f"{where}: kernel {k} exceeds input {h}x{w}")
            shape = (layer.out_channels, h - k + 1, w - k + 1)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise ShapeError(f"{where}: expects a (C, H, W) input, got {shape}")
            c, h, w = shape
            p = layer.window
            if p < 1:
                raise ShapeError(f"{where}: window must be positive")
            if h // p < 1 or w // p < 1:
                raise ShapeError(f"{where}: window {p} exceeds input {h}x{w}")
            shape = (c, h // p, w // p)
        elif isinstance(layer, FullyConnected):
            if layer.out_features < 1:
                raise ShapeError(f"{where}: out_features must be positive")
            shape = (layer.out_features,)
        elif isinstance(layer, SoftmaxOutput):
            if layer.num_classes != spec.num_classes:
                raise ShapeError(
                    f"{where}: has {layer.num_classes} outputs but the model has "
                    f"{spec.num_classes} classes"
                )
            shape = (layer.num_classes,)
        elif isinstance(layer, ReLU):
            pass
        else:
            raise ShapeError(f"{where}: unknown layer kind")
        shapes.append(shape)
    return tuple(shapes)


def param_shapes(spec: ModelSpec, index: int) -> dict[str, tuple[int, ...]]:
    layer = spec.layers[index]
    in_shape = spec.shapes[index]
    if isinstance(layer, Conv2d):
        k = layer.kernel_size
        return {"weight": (layer.out_channels, in_shape[0], k, k), "bias": (layer.out_channels,)}
    if isinstance(layer, (FullyConnected, SoftmaxOutput)):
        out = layer.out_features if isinstance(layer, FullyConnected) else layer.num_classes
        return {"weight": (out, int(np.prod(in_shape))), "bias": (out,)}
    return {}


_ARCH_TOKEN = re.compile(r"^(C(\d+)\((\d+)\)|P\((\d+)\)|F(\d+)|O(\d*))$")


def parse_architecture(text: str, input_shape: Sequence[int], num_classes: int) -> ModelSpec:
    """Build a spec from strings like ``"C4(3)-P(2)-C8(3)-P(2)-F32-O4"``.

    A ReLU follows every conv and hidden FC layer. Pooling layers whose
    window does not fit the current feature map are skipped, so the same
    string can serve 8x8 and 16x16 inputs.
    """
    layers: list[LayerSpec] = []
    c, h, w = (int(s) for s in input_shape)
    for token in text.split("-"):
        m = _ARCH_TOKEN.match(token.strip())
        if m is None:
            raise ShapeError(f"unrecognised architecture token {token!r}")
        if m.group(2):
            k = int(m.group(3))
            layers += [Conv2d(int(m.group(2)), k), ReLU()]
            c, h, w = int(m.group(2)), h - k + 1, w - k + 1
        elif m.group(4):
            p = int(m.group(4))
            if h // p >= 1 and w // p >= 1:
                layers.append(MaxPool(p))
                h, w = h // p, w // p
        elif m.group(5):
            layers += [FullyConnected(int(m.group(5))), ReLU()]
        else:
            n = int(m.group(6)) if m.group(6) else num_classes
            layers.append(SoftmaxOutput(n))
    return ModelSpec(tuple(input_shape), tuple(layers), num_classes)


ARCHITECTURES = {
    "lenet-mini": "C4(3)-P(2)-C8(3)-P(2)-F32-O",
    "fc2": "F32-O",
}


def named_model(name: str, input_shape: Sequence[int] = (1, 8, 8), num_classes: int = 4) -> ModelSpec:
    try:
        arch = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    return parse_architecture(arch, input_shape, num_classes)


def init_params(spec: ModelSpec, seed: int) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: Params = []
    for i in range(len(spec.layers)):
        shapes = param_shapes(spec, i)
        if not shapes:
            params.append({})
            continue
        wshape = shapes["weight"]
        fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        params.append({
            "weight": rng.uniform(-bound, bound, size=wshape),
            "bias": np.zeros(shapes["bias"]),
        })
    return params


def check_params(spec: ModelSpec, params: Params) -> None:
    if len(params) != len(spec.layers):
        raise ShapeError(f"expected {len(spec.layers)} layer entries, got {len(params)}")
    for i, entry in enumerate(params):
        expected = param_shapes(spec, i)
        got = {k: tuple(np.shape(v)) for k, v in entry.items()}
        if got != expected:
            raise ShapeError(f"layer {i}: expected parameter shapes {expected}, got {got}")


def copy_params(params: Params) -> Params:
    return [{k: np.array(v, dtype=np.float64, copy=True) for k, v in entry.items()} for entry in params]


# -- differentiable forward pass ---------------------------------------------

@lru_cache(maxsize=64)
def _im2col_index(n: int, c: int, h: int, w: int, k: int) -> np.ndarray:
    oh, ow = h - k + 1, w - k + 1
    ci, di, dj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = oi.reshape(-1, 1) + di.reshape(1, -1)
    cols = oj.reshape(-1, 1) + dj.reshape(1, -1)
    chan = np.broadcast_to(ci.reshape(1, -1), rows.shape)
    per_sample = (chan * h + rows) * w + cols  # (oh*ow, c*k*k)
    base = np.arange(n).reshape(n, 1, 1) * (c * h * w)
    idx = base + per_sample[None]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=64)
def _pool_windows(n: int, c: int, h: int, w: int, p: int) -> np.ndarray:
    oh, ow = h // p, w // p
    ni, ci, oi, oj, di, dj = np.meshgrid(
        np.arange(n), np.arange(c), np.arange(oh), np.arange(ow), np.arange(p), np.arange(p),
        indexing="ij",
    )
    idx = ((ni * c + ci) * h + oi * p + di) * w + oj * p + dj
    idx = idx.reshape(n, c, oh, ow, p * p)
    idx.setflags(write=False)
    return idx


def _conv(x: ad.Var, weight: ad.Var, bias: ad.Var) -> ad.Var:
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    oh, ow = h - k + 1, w - k + 1
    cols = ad.gather(x, _im2col_index(n, c, h, w, k)).reshape(n * oh * ow, c * k * k)
    out = cols @ ad.transpose(weight.reshape(o, c * k * k)) + bias
    return ad.transpose(out.reshape(n, oh * ow, o), (0, 2, 1)).reshape(n, o, oh, ow)


def _maxpool(x: ad.Var, p: int) -> ad.Var:
    n, c, h, w = x.shape
    windows = _pool_windows(n, c, h, w, p)
    vals = x.value.reshape(-1)[windows]
    pick = np.take_along_axis(windows, vals.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return ad.gather(x, pick)


def forward_var(spec: ModelSpec, params: Sequence[dict], x: ad.Var) -> tuple[ad.Var, list[ad.Var]]:
    """Batched forward pass on ``Var`` inputs of shape (N, C, H, W).

    ``params`` entries may hold arrays or Vars. Returns the logits and the
    output of every layer.
    """
    acts = []
    h = x
    for layer, entry in zip(spec.layers, params):
        if isinstance(layer, Conv2d):
            h = _conv(h, ad.as_var(entry["weight"]), ad.as_var(entry["bias"]))
        elif isinstance(layer, MaxPool):
            h = _maxpool(h, layer.window)
        elif isinstance(layer, ReLU):
            h = ad.relu(h)
        else:
            flat = h.reshape(h.shape[0], -1)
            h = flat @ ad.transpose(ad.as_var(entry["weight"])) + ad.as_var(entry["bias"])
        acts.append(h)
    return h, acts


def _as_batch(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None]
    if x.ndim == 4 and x.shape[1:] == spec.input_shape:
        return x
    raise ShapeError(f"input shape mismatch: expected {spec.input_shape}, got {x.shape}")


def forward(spec: ModelSpec, params: Params, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits and per-layer activations for a single sample."""
    batch = _as_batch(spec, x)
    if batch.shape[0] != 1:
        raise ShapeError(f"forward takes one sample of shape {spec.input_shape}, got {np.shape(x)}")
    logits, acts = forward_var(spec, params, ad.Var(batch))
    return logits.value[0], [a.value[0] for a in acts]


# -- losses --------------------------------------------------------------------

LOSSES = ("cross_entropy", "square")


def cross_entropy(logits, y: int) -> float:
    """-log softmax(logits)[y] in nats."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(y) < logits.shape[-1]:
        raise IndexError(f"class index {y} out of range for {logits.shape[-1]} classes")
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[int(y)])


def loss_var(logits: ad.Var, target, loss: str = "cross_entropy") -> ad.Var:
    """Mean loss over the batch.

    ``target`` is an integer class array (hard labels), a (N, K) array or Var
    of soft labels for cross-entropy, or real-valued targets for the square
    loss ``0.5 * ||logits - y||^2``.
    """
    n, k = logits.shape
    if loss == "square":
        diff = logits - ad.as_var(np.asarray(target, dtype=np.float64).reshape(n, k))
        return ad.sum_(diff * diff) * (0.5 / n)
    if loss != "cross_entropy":
        raise ValueError(f"unknown loss {loss!r}")
    logp = ad.log_softmax(logits, axis=1)
    if isinstance(target, ad.Var) or np.asarray(target).dtype.kind == "f":
        soft = ad.as_var(target)
        return -ad.sum_(soft * logp) * (1.0 / n)
    y = np.asarray(target, dtype=np.intp).reshape(n)
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"class index out of range for {k} classes: {y}")
    return -ad.sum_(ad.gather(logp, np.arange(n) * k + y)) * (1.0 / n)


# -- gradients -----------------------------------------------------------------

@dataclass
class GradientSet:
    """Per-layer gradients, congruent with the ``Params`` they differentiate."""

    layers: list
    batch_size: int = 1
    epochs: int = 1

    def _check(self, other: GradientSet) -> None:
        if len(self.layers) != len(other.layers):
            raise ShapeError("gradient sets have different layer counts")
        for i, (a, b) in enumerate(zip(self.layers, other.layers)):
            if a.keys() != b.keys() or any(a[k].shape != b[k].shape for k in a):
                raise ShapeError(f"gradient sets differ in shape at layer {i}")

    def __add__(self, other: GradientSet) -> GradientSet:
        self._check(other)
        return GradientSet(
            [{k: a[k] + b[k] for k in a} for a, b in zip(self.layers, other.layers)],
            self.batch_size, self.epochs,
        )

    def __sub__(self, other: GradientSet) -> GradientSet:
        return self + other * -1.0

    def __mul__(self, c: float) -> GradientSet:
        return GradientSet([{k: v * c for k, v in e.items()} for e in self.layers], self.batch_size, self.epochs)

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> GradientSet:
        return self * (1.0 / c)

    def layer_flat(self, index: int) -> np.ndarray:
        """Weight then bias of one layer, flattened."""
        entry = self.layers[index]
        if not entry:
            return np.zeros(0)
        return np.concatenate([entry["weight"].ravel(), entry["bias"].ravel()])

    def flat(self, indices: Iterable[int] | None = None) -> np.ndarray:
        if indices is None:
            indices = range(len(self.layers))
        parts = [self.layer_flat(i) for i in indices]
        return np.concatenate(parts) if parts else np.zeros(0)

    def allclose(self, other: GradientSet, rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        self._check(other)
        return bool(np.allclose(self.flat(), other.flat(), rtol=rtol, atol=atol))


def _stack_batch(spec: ModelSpec, batch) -> tuple[np.ndarray, np.ndarray]:
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    xs = np.stack([_as_batch(spec, x)[0] for x, _ in batch])
    ys = np.asarray([y for _, y in batch])
    return xs, ys


def param_vars(params: Params) -> list[dict[str, ad.Var]]:
    return [{k: ad.leaf(v) for k, v in entry.items()} for entry in params]


def backward(
    spec: ModelSpec, params: Params, batch, loss: str = "cross_entropy"
) -> tuple[float, GradientSet]:
    """Batch-mean loss and batch-mean parameter gradients.

    ``batch`` is a sequence of ``(x, y)`` pairs.
    """
    xs, ys = _stack_batch(spec, batch)
    check_params(spec, params)
    pv = param_vars(params)
    logits, _ = forward_var(spec, pv, ad.Var(xs))
    value = loss_var(logits, ys, loss)
    leaves = [v for entry in pv for v in entry.values()]
    grads = iter(ad.grad(value, leaves))
    layers = [{k: next(grads).value for k in entry} for entry in pv]
    return float(value.value), GradientSet(layers, batch_size=len(xs), epochs=1)


def sgd_step(params: Params, grads: GradientSet, lr: float) -> Params:
    """p <- p - lr * g for every parameter."""
    if len(params) != len(grads.layers):
        raise ShapeError("params and gradients have different layer counts")
    out: Params = []
    for i, (entry, g) in enumerate(zip(params, grads.layers)):
        if entry.keys() != g.keys() or any(np.shape(entry[k]) != g[k].shape for k in entry):
            raise ShapeError(f"params and gradients differ in shape at layer {i}")
        out.append({k: entry[k] - lr * g[k] for k in entry})
    return out


def params_delta(after: Params, before: Params, epochs: int = 1, batch_size: int = 1) -> GradientSet:
    return GradientSet(
        [{k: a[k] - b[k] for k in a} for a, b in zip(after, before)], batch_size, epochs
    )


def train(
    spec: ModelSpec,
    params: Params,
    dataset,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    loss: str = "cross_entropy",
) -> Params:
    """Mini-batch SGD; each epoch visits the data in a freshly seeded order."""
    data = list(dataset)
    if not data:
        raise ValueError("empty dataset")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    current = copy_params(params)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(data))
        for start in range(0, len(data), batch_size):
            chunk = [data[j] for j in order[start:start + batch_size]]
            _, g = backward(spec, current, chunk, loss)
            current = sgd_step(current, g, lr)
    return current
