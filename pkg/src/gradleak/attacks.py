"""Attack families used as predictive families for usable information.

* Gradient-matching reconstruction (DRA) with random restarts, optimising a
  dummy input (and, when the label cannot be read off the output bias
  gradient, a dummy soft label).
* Attribute inference (AIA): binary classifiers trained on layer gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import updates as up
from .nn import GradientSet, ModelSpec, Params, ShapeError


class AmbiguousLabelError(ValueError):
    """The output-layer bias gradient does not single out one class."""


def infer_label(update: up.SharedUpdate | GradientSet) -> int:
    """Class whose output-layer bias gradient is negative.

    For a single sample under softmax cross-entropy that gradient equals
    softmax(logits) - onehot(y), so exactly one entry is negative.
    """
    update = up.as_update(update)
    out_layer = max(i for i, entry in enumerate(update.grads.layers) if entry)
    idx = update.indices(out_layer)
    if idx is not None:
        n_weight = update.grads.layers[out_layer]["weight"].size
        n_bias = update.grads.layers[out_layer]["bias"].size
        if not np.all(np.isin(np.arange(n_weight, n_weight + n_bias), idx)):
            raise AmbiguousLabelError("output-layer bias gradient is masked")
    bias = update.grads.layers[out_layer]["bias"]
    negative = np.flatnonzero(bias < 0)
    if negative.size != 1:
        raise AmbiguousLabelError(
            f"{negative.size} negative output-bias entries; the update likely aggregates several samples"
        )
    return int(negative[0])


# -- data reconstruction -------------------------------------------------------

INITS = ("uniform", "gaussian")
OPTIMIZERS = ("adam", "gd")


@dataclass(frozen=True)
class DraConfig:
    layer_subset: tuple[int, ...]
    dist_kind: str = "L2"
    steps: int = 400
    step_size: float = 0.05
    optimizer: str = "adam"
    restarts: int = 10
    init: str = "uniform"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if not self.layer_subset:
            raise ValueError("layer_subset must not be empty")
        if self.dist_kind not in up.DISTANCES:
            raise ValueError(f"unknown distance {self.dist_kind!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")
        if self.steps < 1 or self.restarts < 1 or self.step_size <= 0:
            raise ValueError("steps and restarts must be >= 1 and step_size > 0")

    @property
    def member(self) -> str:
        return f"{self.dist_kind}-{self.optimizer}"


@dataclass
class DraRun:
    x_hat: np.ndarray
    y_hat: int
    trace: np.ndarray
    final_distance: float
    restart: int
    seed: int
    label_inferred: bool
    diverged: bool = False
    ssim: float | None = None


def restart_rng(seed: int, restart: int) -> np.random.Generator:
    return np.random.default_rng([seed, restart])


def draw_init(rng: np.random.Generator, shape, init: str) -> np.ndarray:
    if init == "uniform":
        return rng.uniform(0.0, 1.0, size=shape)
    if init == "gaussian":
        return rng.normal(0.0, 1.0, size=shape)
    raise ValueError(f"unknown init {init!r}")


def random_reconstruction_baseline(input_shape, restarts: int, seed: int, init: str = "uniform") -> list[np.ndarray]:
    """Reconstructions that ignore the gradients entirely."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    return [draw_init(restart_rng(seed, r), tuple(input_shape), init) for r in range(restarts)]


class _Adam:
    def __init__(self, size: int, lr: float, b1: float, b2: float, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _single_restart(spec, params, observed, truth, config: DraConfig, r: int, label, x0) -> DraRun:
    rng = restart_rng(config.seed, r)
    x = draw_init(rng, spec.input_shape, config.init)
    joint = label is None
    y_logits = rng.normal(0.0, 1.0, size=spec.num_classes) if joint else None
    if x0 is not None:
        x = np.array(x0, dtype=np.float64).reshape(spec.input_shape)
    n_x = x.size
    opt = _Adam(n_x + (spec.num_classes if joint else 0), config.step_size, config.beta1, config.beta2)
    trace = np.full(config.steps, np.nan)
    diverged = False
    final = np.nan
    try:
        for step in range(config.steps):
            dist, dx, dy = up.grad_of_grad_distance(
                spec, params, observed, x, y_logits if joint else label,
                config.dist_kind, config.layer_subset,
            )
            trace[step] = dist
            g = dx.ravel() if not joint else np.concatenate([dx.ravel(), dy])
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite attack gradient")
            delta = opt.step(g) if config.optimizer == "adam" else config.step_size * g
            x = x - delta[:n_x].reshape(x.shape)
            if joint:
                y_logits = y_logits - delta[n_x:]
        final, _, _ = up.grad_of_grad_distance(
            spec, params, observed, x, y_logits if joint else label,
            config.dist_kind, config.layer_subset,
        )
        diverged = not np.isfinite(final) or final > trace[0]
    except (up.DegenerateGradientError, FloatingPointError):
        diverged = True
    y_hat = int(np.argmax(y_logits)) if joint else int(label)
    score = None
    if truth is not None:
        score = metrics.ssim(truth[0], x) if np.all(np.isfinite(x)) else 0.0
    return DraRun(x, y_hat, trace, float(final), r, config.seed, not joint, diverged, score)


def run_dra(
    spec: ModelSpec,
    params: Params,
    observed: up.SharedUpdate | GradientSet,
    config: DraConfig,
    truth: tuple | None = None,
    restarts: Sequence[int] | None = None,
    x0=None,
) -> list[DraRun]:
    """Gradient-matching reconstruction, one run per restart.

    Each restart draws its own dummy from ``(config.seed, restart)``, so a
    run never depends on which other restarts were executed. The label is
    fixed by :func:`infer_label` when that is unambiguous and otherwise
    optimised jointly as softmax logits. ``x0`` pins the initial dummy.
    """
    observed = up.as_update(observed)
    for i in config.layer_subset:
        if i >= len(observed.grads.layers) or not observed.grads.layers[i]:
            raise ShapeError(f"observed update has no gradient for layer {i}")
    try:
        label = infer_label(observed)
    except AmbiguousLabelError:
        label = None
    if restarts is None:
        restarts = range(config.restarts)
    return [_single_restart(spec, params, observed, truth, config, r, label, x0) for r in restarts]


# -- attribute inference -----------------------------------------------------------

@dataclass
class AiaFeatures:
    X: np.ndarray
    p: np.ndarray
    layer: int
    retained: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def build_aia_dataset(
    spec: ModelSpec,
    params: Params,
    with_attr: Sequence,
    without_attr: Sequence,
    batch_size: int,
    layer: int | Sequence[int],
    rows_per_label: int | tuple[int, int] = 50,
    mask: up.MaskSpec | None = None,
    seed: int = 0,
    make_update: Callable | None = None,
) -> AiaFeatures | dict[int, AiaFeatures]:
    """Gradient features of batches drawn from one attribute pool at a time.

    Row ``i`` uses a batch of ``batch_size`` samples drawn without
    replacement from a single pool; its label is 1 for ``with_attr``. When
    ``layer`` is a sequence, features for every listed layer are built from
    the same updates and returned as a dict. ``make_update(batch, row_seed)``
    can replace the default FedSGD update (e.g. to add a defence).
    """
    n1, n0 = (rows_per_label, rows_per_label) if np.isscalar(rows_per_label) else rows_per_label
    pools = {0: list(without_attr), 1: list(with_attr)}
    for p, pool in pools.items():
        if not pool:
            raise ValueError("attribute pools must be non-empty")
        if batch_size > len(pool):
            raise ValueError(f"batch size {batch_size} exceeds pool of {len(pool)} samples (P={p})")
    layers = [layer] if np.isscalar(layer) else list(layer)
    if make_update is None:
        make_update = lambda batch, row_seed: up.fed_sgd_update(spec, params, batch)  # noqa: E731
    rng = np.random.default_rng(seed)
    labels = np.array([0] * n0 + [1] * n1)
    feats: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    for row, p in enumerate(labels):
        pick = rng.choice(len(pools[p]), size=batch_size, replace=False)
        update = make_update([pools[p][j] for j in pick], [seed, row])
        if mask is not None:
            update = up.apply_mask(update, mask)
        for l in layers:
            feats[l].append(update.observed(l))
    out = {l: AiaFeatures(np.array(feats[l]), labels.copy(), l, update.indices(l)) for l in layers}
    return out[layers[0]] if np.isscalar(layer) else out


AIA_MEMBERS = ("logistic", "mlp", "constant")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))


@dataclass
class AiaModel:
    member: str
    weights: dict = field(default_factory=dict)
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    layer: int | None = None
    retained: np.ndarray | None = None
    dim: int = 0
    history: list = field(default_factory=list)

    def _standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ShapeError(f"feature dimension {X.shape[1]} != model dimension {self.dim}")
        return (X - self.mean) / self.scale

    def logits(self, X) -> np.ndarray:
        Z = self._standardize(X)
        w = self.weights
        if self.member == "constant":
            return np.zeros(len(Z))
        if self.member == "logistic":
            return Z @ w["w"] + w["b"]
        hidden = np.maximum(Z @ w["W1"] + w["b1"], 0.0)
        return hidden @ w["w2"] + w["b2"]

    def predict_proba(self, X) -> np.ndarray:
        """Probability that P = 1, strictly inside (0, 1)."""
        return _sigmoid(self.logits(X))


def constant_model(dim: int) -> AiaModel:
    return AiaModel("constant", {}, np.zeros(dim), np.ones(dim), dim=dim)


def _bce(q: np.ndarray, p: np.ndarray) -> float:
    return float(np.mean(-(p * np.log(q) + (1 - p) * np.log(1 - q))))


def train_aia(
    features,
    labels,
    member: str = "logistic",
    epochs: int = 200,
    lr: float = 0.1,
    seed: int = 0,
    hidden: int = 32,
    batch_size: int | None = 32,
    weight_decay: float = 1e-3,
    descriptor: AiaFeatures | None = None,
) -> AiaModel:
    """Fit one family member by mini-batch gradient descent on binary cross-entropy.

    Features are standardised first (constant columns are left as they
    are) and the transform is stored in the returned model.
    ``batch_size=None`` means full-batch descent.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    p = np.asarray(labels, dtype=np.float64).ravel()
    if len(X) != len(p) or len(X) < 2:
        raise ValueError("need at least two labelled rows")
    if len(np.unique(p)) < 2:
        raise ValueError("both attribute labels must be present")
    if member not in AIA_MEMBERS:
        raise ValueError(f"unknown family member {member!r}")
    dim = X.shape[1]
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    constant = scale == 0
    mean[constant] = 0.0
    scale[constant] = 1.0
    model = AiaModel(member, {}, mean, scale, dim=dim)
    if descriptor is not None:
        model.layer, model.retained = descriptor.layer, descriptor.retained
    if member == "constant":
        return model
    rng = np.random.default_rng(seed)
    if member == "logistic":
        model.weights = {"w": np.zeros(dim), "b": 0.0}
    else:
        model.weights = {
            "W1": rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, np.sqrt(1.0 / hidden), size=hidden),
            "b2": 0.0,
        }
    Z = (X - mean) / scale
    n = len(Z)
    bs = n if batch_size is None else min(batch_size, n)
    w = model.weights
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            z, t = Z[idx], p[idx]
            if member == "logistic":
                err = _sigmoid(z @ w["w"] + w["b"]) - t
                w["w"] = w["w"] - lr * (z.T @ err / len(idx) + weight_decay * w["w"])
                w["b"] = w["b"] - lr * err.mean()
            else:
                pre = z @ w["W1"] + w["b1"]
                h = np.maximum(pre, 0.0)
                err = _sigmoid(h @ w["w2"] + w["b2"]) - t
                dh = np.outer(err, w["w2"]) * (pre > 0)
                w["w2"] = w["w2"] - lr * (h.T @ err / len(idx) + weight_decay * w["w2"])
                w["b2"] = w["b2"] - lr * err.mean()
                w["W1"] = w["W1"] - lr * (z.T @ dh / len(idx) + weight_decay * w["W1"])
                w["b1"] = w["b1"] - lr * dh.mean(axis=0)
        model.history.append(_bce(model.predict_proba(X), p))
    return model


def aia_predict(model: AiaModel, g) -> float:
    """P(P = 1 | g) for one feature row; P(P = 0 | g) is one minus this."""
    return float(model.predict_proba(np.asarray(g, dtype=np.float64).reshape(1, -1))[0])
