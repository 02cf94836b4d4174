"""Shared updates as an honest-but-curious server sees them.

Covers FedSGD / FedAvg updates, mixing with non-target updates, DP clipping
with Gaussian noise, and random gradient masking. Also hosts the
second-order machinery the attacks and sensitivity metrics use: gradient
distances, their derivatives with respect to a dummy input, and the
input-gradient Jacobian of one layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .nn import GradientSet, ModelSpec, Params, ShapeError

FD_STEP = float(np.cbrt(np.finfo(np.float64).eps))


class DegenerateGradientError(ArithmeticError):
    """A cosine distance was requested for a zero-norm gradient."""


@dataclass(frozen=True)
class MaskSpec:
    """Keep a random ``fraction`` or ``count`` of entries in every layer."""

    fraction: float | None = None
    count: int | None = None
    selection_seed: int = 0

    def __post_init__(self):
        if (self.fraction is None) == (self.count is None):
            raise ValueError("give exactly one of fraction or count")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.count is not None and self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")

    def retained_size(self, size: int) -> int:
        if self.fraction is not None:
            return min(size, math.ceil(self.fraction * size))
        if self.count > size:
            raise ValueError(f"mask count {self.count} exceeds layer size {size}")
        return self.count


@dataclass(frozen=True)
class Provenance:
    mode: str = "FedSGD"
    epochs: int = 1
    batch_size: int = 1
    lr: float | None = None
    mix_factor: int = 0
    dp: tuple[float, float] | None = None
    mask: MaskSpec | None = None


@dataclass
class SharedUpdate:
    grads: GradientSet
    provenance: Provenance = field(default_factory=Provenance)
    # layer index -> sorted flat indices visible to the observer; None = all
    retained: dict[int, np.ndarray] | None = None

    def indices(self, layer: int) -> np.ndarray | None:
        if self.retained is None:
            return None
        return self.retained.get(layer)

    def observed(self, layer: int) -> np.ndarray:
        """Visible entries of one layer (weight then bias order)."""
        flat = self.grads.layer_flat(layer)
        idx = self.indices(layer)
        return flat if idx is None else flat[idx]

    def observed_flat(self, layers: Sequence[int]) -> np.ndarray:
        return np.concatenate([self.observed(i) for i in layers])


def as_update(g: SharedUpdate | GradientSet) -> SharedUpdate:
    return g if isinstance(g, SharedUpdate) else SharedUpdate(g)


# -- producing updates ---------------------------------------------------------

def fed_sgd_update(spec: ModelSpec, params: Params, batch, loss: str = "cross_entropy") -> SharedUpdate:
    """Raw batch-mean gradients, no learning-rate scaling."""
    batch = list(batch)
    _, grads = nn.backward(spec, params, batch, loss)
    return SharedUpdate(grads, Provenance("FedSGD", 1, len(batch)))


def fed_avg_update(
    spec: ModelSpec, params: Params, dataset, epochs: int, batch_size: int, lr: float, seed: int
) -> SharedUpdate:
    """Parameter delta W^t - W^0 after local mini-batch SGD."""
    trained = nn.train(spec, params, dataset, epochs, batch_size, lr, seed)
    delta = nn.params_delta(trained, params, epochs=epochs, batch_size=batch_size)
    return SharedUpdate(delta, Provenance("FedAvg", epochs, batch_size, lr))


def aggregate_mixed(target: SharedUpdate, nontargets: Sequence[SharedUpdate], mix_factor: int) -> SharedUpdate:
    """Mean of the target update and ``mix_factor`` non-target updates."""
    if mix_factor != len(nontargets):
        raise ValueError(f"mix_factor {mix_factor} but {len(nontargets)} non-target updates")
    total = target.grads
    for other in nontargets:
        total = total + other.grads
    mixed = total / (mix_factor + 1)
    mixed.batch_size, mixed.epochs = target.grads.batch_size, target.grads.epochs
    return SharedUpdate(mixed, replace(target.provenance, mix_factor=mix_factor), target.retained)


def dp_clip_noise(
    update: SharedUpdate, max_norm: float, sigma: float, seed: int, per_layer: bool = False
) -> SharedUpdate:
    """Clip the l2 norm to ``max_norm`` then add i.i.d. N(0, sigma^2) noise.

    The norm is taken over the whole update unless ``per_layer`` is set.
    """
    if max_norm <= 0 or sigma < 0:
        raise ValueError("max_norm must be > 0 and sigma >= 0")
    layers = update.grads.layers
    if per_layer:
        scales = []
        for i in range(len(layers)):
            norm = float(np.linalg.norm(update.grads.layer_flat(i)))
            scales.append(min(1.0, max_norm / norm) if norm > 0 else 1.0)
    else:
        norm = float(np.linalg.norm(update.grads.flat()))
        scales = [min(1.0, max_norm / norm) if norm > 0 else 1.0] * len(layers)
    rng = np.random.default_rng(seed)
    out = []
    for entry, s in zip(layers, scales):
        noisy = {}
        for k in ("weight", "bias"):
            if k in entry:
                v = entry[k] * s
                noisy[k] = v + rng.normal(0.0, sigma, size=v.shape) if sigma > 0 else v
        out.append(noisy)
    grads = GradientSet(out, update.grads.batch_size, update.grads.epochs)
    return SharedUpdate(grads, replace(update.provenance, dp=(max_norm, sigma)), update.retained)


def apply_mask(update: SharedUpdate, mask: MaskSpec) -> SharedUpdate:
    """Expose a random subset of every parameterised layer's entries.

    Dropped entries are not zeroed; they are left out of ``retained`` so
    every consumer only ever reads the visible values.
    """
    retained = {}
    for i, entry in enumerate(update.grads.layers):
        if not entry:
            continue
        size = update.grads.layer_flat(i).size
        k = mask.retained_size(size)
        rng = np.random.default_rng([mask.selection_seed, i])
        retained[i] = np.sort(rng.choice(size, size=k, replace=False))
    return SharedUpdate(update.grads, replace(update.provenance, mask=mask), retained)


# -- distances -------------------------------------------------------------------

DISTANCES = ("L2", "Cosine")


def _check_kind(kind: str) -> None:
    if kind not in DISTANCES:
        raise ValueError(f"unknown distance kind {kind!r}; use one of {DISTANCES}")


def distance_values(g_hat: np.ndarray, g_obs: np.ndarray, kind: str) -> float:
    _check_kind(kind)
    if g_hat.shape != g_obs.shape:
        raise ShapeError(f"gradient vectors differ in length: {g_hat.shape} vs {g_obs.shape}")
    if kind == "L2":
        d = g_hat - g_obs
        return float(d @ d)
    na, nb = np.linalg.norm(g_hat), np.linalg.norm(g_obs)
    if na == 0 or nb == 0:
        raise DegenerateGradientError("cosine distance of a zero-norm gradient")
    return float(1.0 - (g_hat @ g_obs) / (na * nb))


def _distance_var(g_hat: ad.Var, g_obs: np.ndarray, kind: str) -> ad.Var:
    if kind == "L2":
        d = g_hat - g_obs
        return ad.dot(d, d)
    nb = float(np.linalg.norm(g_obs))
    sq = ad.dot(g_hat, g_hat)
    if nb == 0 or float(sq.value) == 0:
        raise DegenerateGradientError("cosine distance of a zero-norm gradient")
    return 1.0 - ad.dot(g_hat, g_obs) / (ad.sqrt(sq) * nb)


def grad_distance(
    g_hat: GradientSet | SharedUpdate,
    g_obs: GradientSet | SharedUpdate,
    kind: str,
    layer_subset: Sequence[int],
) -> float:
    """Squared l2 or cosine distance over the concatenated layer subset.

    When ``g_obs`` is a masked update only its visible entries count.
    """
    obs = as_update(g_obs)
    hat = as_update(g_hat)
    parts_hat, parts_obs = [], []
    for i in layer_subset:
        a, b = hat.grads.layer_flat(i), obs.grads.layer_flat(i)
        if a.shape != b.shape:
            raise ShapeError(f"layer {i}: gradient sizes differ ({a.size} vs {b.size})")
        idx = obs.indices(i)
        parts_hat.append(a if idx is None else a[idx])
        parts_obs.append(b if idx is None else b[idx])
    return distance_values(np.concatenate(parts_hat), np.concatenate(parts_obs), kind)


def _check_subset(spec: ModelSpec, layer_subset: Sequence[int]) -> list[int]:
    subset = [int(i) for i in layer_subset]
    if not subset:
        raise ValueError("empty layer subset")
    with_params = set(spec.param_layers())
    for i in subset:
        if i not in with_params:
            raise ValueError(f"layer {i} ({spec.layer_name(i) if 0 <= i < len(spec.layers) else '?'}) has no parameters")
    return subset


def _dummy_target(spec: ModelSpec, dummy_y):
    """Hard label (int) or trainable logits; returns (target, logits Var or None)."""
    if isinstance(dummy_y, (int, np.integer)):
        return np.array([int(dummy_y)]), None
    logits = np.asarray(dummy_y, dtype=np.float64).reshape(1, spec.num_classes)
    return None, logits


def layer_grads_var(
    spec: ModelSpec, params: Params, x: ad.Var, target, layer_subset: Sequence[int], loss: str
) -> list[ad.Var]:
    """Flattened per-layer gradients as differentiable functions of ``x``/``target``."""
    pv = nn.param_vars(params)
    logits, _ = nn.forward_var(spec, pv, x)
    value = nn.loss_var(logits, target, loss)
    wanted = [pv[i][k] for i in layer_subset for k in ("weight", "bias")]
    gs = ad.grad(value, wanted, create_graph=True)
    return [ad.concat_flat(gs[2 * j:2 * j + 2]) for j in range(len(layer_subset))]


def _observed_parts(obs: SharedUpdate, subset: Sequence[int]):
    idx = [obs.indices(i) for i in subset]
    return idx, np.concatenate([obs.observed(i) for i in subset])


def _analytic_distance(spec, params, obs, x, y, kind, subset, loss):
    hard, logits0 = _dummy_target(spec, y)
    xv = ad.leaf(np.asarray(x, dtype=np.float64).reshape((1,) + spec.input_shape))
    inputs = [xv]
    if hard is not None:
        target = hard
    else:
        yv = ad.leaf(logits0)
        inputs.append(yv)
        target = ad.softmax(yv, axis=1)
    parts = layer_grads_var(spec, params, xv, target, subset, loss)
    idx, g_obs = _observed_parts(obs, subset)
    parts = [p if ix is None else ad.gather(p, ix) for p, ix in zip(parts, idx)]
    dist = _distance_var(ad.concat_flat(parts), g_obs, kind)
    grads = ad.grad(dist, inputs)
    dx = grads[0].value.reshape(spec.input_shape)
    dy = grads[1].value.reshape(spec.num_classes) if hard is None else None
    return float(dist.value), dx, dy


def _plain_distance(spec, params, obs, x, y, kind, subset, loss) -> float:
    hard, logits = _dummy_target(spec, y)
    if hard is not None:
        target = int(hard[0])
    else:
        z = logits[0] - logits[0].max()
        target = np.exp(z) / np.exp(z).sum()
    _, g = nn.backward(spec, params, [(np.asarray(x).reshape(spec.input_shape), target)], loss)
    hat = np.concatenate([g.layer_flat(i) if obs.indices(i) is None else g.layer_flat(i)[obs.indices(i)]
                          for i in subset])
    return distance_values(hat, _observed_parts(obs, subset)[1], kind)


def _central_diff(f, v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.size)
    flat = v.reshape(-1)
    for i in range(flat.size):
        h = FD_STEP * max(1.0, abs(flat[i]))
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        out[i] = (f(up.reshape(v.shape)) - f(down.reshape(v.shape))) / (2 * h)
    return out.reshape(v.shape)


def grad_of_grad_distance(
    spec: ModelSpec,
    params: Params,
    g_obs: GradientSet | SharedUpdate,
    dummy_x,
    dummy_y,
    kind: str,
    layer_subset: Sequence[int],
    backend: str = "Analytic",
    loss: str = "cross_entropy",
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Gradient-matching distance and its derivatives w.r.t. the dummy sample.

    ``dummy_y`` is either a fixed class index (no label derivative is
    returned) or a vector of label logits that pass through a softmax to
    form a soft one-hot label.
    """
    _check_kind(kind)
    subset = _check_subset(spec, layer_subset)
    obs = as_update(g_obs)
    x = np.asarray(dummy_x, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise ShapeError(f"dummy input shape {x.shape} != {spec.input_shape}")
    if backend == "Analytic":
        return _analytic_distance(spec, params, obs, x, dummy_y, kind, subset, loss)
    if backend != "FD":
        raise ValueError(f"unknown backend {backend!r}")
    dist = _plain_distance(spec, params, obs, x, dummy_y, kind, subset, loss)
    dx = _central_diff(lambda v: _plain_distance(spec, params, obs, v, dummy_y, kind, subset, loss), x)
    dy = None
    if not isinstance(dummy_y, (int, np.integer)):
        y = np.asarray(dummy_y, dtype=np.float64).reshape(spec.num_classes)
        dy = _central_diff(lambda v: _plain_distance(spec, params, obs, x, v, kind, subset, loss), y)
    return dist, dx, dy


# -- input-gradient Jacobian -------------------------------------------------------

@dataclass
class JacobianMatrix:
    values: np.ndarray  # (|G_l|, |x|)
    layer: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def input_gradient_jacobian(
    spec: ModelSpec,
    params: Params,
    x,
    y,
    layer: int,
    backend: str = "Analytic",
    loss: str = "cross_entropy",
) -> JacobianMatrix:
    """d(flattened layer gradient) / d(flattened input) for one sample."""
    if not param_layer(spec, layer):
        name = spec.layer_name(layer) if 0 <= layer < len(spec.layers) else f"layer {layer}"
        raise ValueError(f"{name} has no parameters, so it has no gradient to differentiate")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise ShapeError(f"input shape {x.shape} != {spec.input_shape}")
    target = np.asarray([y]) if loss == "cross_entropy" else np.asarray(y, dtype=np.float64).reshape(1, -1)
    n_in = x.size
    if backend == "FD":
        def layer_grad(v):
            xv = ad.Var(v.reshape((1,) + spec.input_shape))
            pv = nn.param_vars(params)
            logits, _ = nn.forward_var(spec, pv, xv)
            gw, gb = ad.grad(nn.loss_var(logits, target, loss), [pv[layer]["weight"], pv[layer]["bias"]])
            return np.concatenate([gw.value.ravel(), gb.value.ravel()])

        flat = x.reshape(-1)
        cols = []
        for c in range(n_in):
            h = FD_STEP * max(1.0, abs(flat[c]))
            up, down = flat.copy(), flat.copy()
            up[c] += h
            down[c] -= h
            cols.append((layer_grad(up) - layer_grad(down)) / (2 * h))
        return JacobianMatrix(np.stack(cols, axis=1), layer)
    if backend != "Analytic":
        raise ValueError(f"unknown backend {backend!r}")
    xv = ad.leaf(x.reshape((1,) + spec.input_shape))
    (g,) = layer_grads_var(spec, params, xv, target, [layer], loss)
    rows = np.empty((g.size, n_in))
    basis = np.zeros(g.size)
    for r in range(g.size):
        basis[r] = 1.0
        (d,) = ad.grad(g, [xv], seed=basis)
        rows[r] = d.value.reshape(-1)
        basis[r] = 0.0
    return JacobianMatrix(rows, layer)


def param_layer(spec: ModelSpec, layer: int) -> bool:
    return layer in spec.param_layers()


def consecutive_layer_sets(spec: ModelSpec, size: int = 2) -> list[tuple[int, ...]]:
    """Runs of ``size`` consecutive parameterised layers."""
    layers = spec.param_layers()
    return [tuple(layers[i:i + size]) for i in range(len(layers) - size + 1)]
