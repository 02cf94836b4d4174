"""Leakage measures: SSIM, success probabilities, usable information,
Jacobian p-norm risk and Grassmann distance between gradient subspaces."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import subspace_angles

from . import nn
from .nn import ModelSpec, Params

LN2 = math.log(2.0)
PROB_CLAMP = 1e-7


@dataclass
class SimilarityOutcome:
    ssims: np.ndarray
    tau: float
    success_prob: float
    baseline_prob: float


@dataclass
class UsableInfoValue:
    value: float
    kind: str  # "original" | "latent"
    members: list[str] = field(default_factory=list)
    terms: dict[str, float] = field(default_factory=dict)


@dataclass
class SensitivityValue:
    layer: int | tuple[int, ...]
    metric: str
    value: float
    count: int | tuple[int, int] = 1


def ssim(x, x_hat, dynamic_range: float = 1.0, return_raw: bool = False):
    """Whole-image SSIM (no sliding window), clipped to [0, 1].

    With ``return_raw`` the unclipped product is returned alongside.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(x_hat, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if dynamic_range <= 0:
        raise ValueError("dynamic_range must be positive")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    c3 = c2 / 2
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    # variances and covariance from the same expression, so x == y gives exactly 1
    vx, vy, cov = np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy)
    sxsy = np.sqrt(vx * vy)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    con = (2 * sxsy + c2) / (vx + vy + c2)
    struct = (cov + c3) / (sxsy + c3)
    raw = float(lum * con * struct)
    value = min(1.0, max(0.0, raw))
    return (value, raw) if return_raw else value


def success_probability(ssims: Sequence[float], tau: float, smoothing: str = "none") -> float:
    """Fraction of restarts whose similarity reaches ``tau``.

    ``"laplace"`` adds one success and one failure, keeping the estimate
    strictly inside (0, 1) for use under a logarithm.
    """
    values = np.asarray(ssims, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no similarity values")
    hits = int(np.count_nonzero(values >= tau))
    if smoothing == "none":
        return hits / values.size
    if smoothing == "laplace":
        return (hits + 1) / (values.size + 2)
    raise ValueError(f"unknown smoothing {smoothing!r}")


def _neglog_mean(probs: Sequence[float]) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError(f"probabilities must lie strictly inside (0, 1), got {p}")
    return float(np.mean(-np.log(p)))


def usable_original_info(
    per_sample: Sequence[Mapping], family: Sequence[str] | None = None
) -> UsableInfoValue:
    """Usable information from gradients to the original sample.

    ``per_sample`` holds, for every sample of the evaluation set, a mapping
    ``{"members": {name: smoothed success prob}, "baseline": smoothed prob}``.
    The baseline (random reconstruction) also acts as the member that
    ignores the gradients, so the value is never negative.
    """
    if not per_sample:
        raise ValueError("empty evaluation set")
    if family is None:
        family = list(per_sample[0]["members"])
    prior = _neglog_mean([s["baseline"] for s in per_sample])
    terms = {"baseline": prior}
    for name in family:
        terms[name] = _neglog_mean([s["members"][name] for s in per_sample])
    best = min(terms.values())
    return UsableInfoValue(prior - best, "original", ["baseline", *family], terms)


def usable_latent_info(features, labels, family: Sequence) -> UsableInfoValue:
    """Usable information from gradients to a binary attribute, in nats.

    ``family`` holds trained classifiers (anything with ``predict_proba``
    and a ``member`` name). The constant-1/2 member is always part of the
    family, so the prior term is ln 2 and the value lies in [0, ln 2].
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    p = np.asarray(labels).astype(int).ravel()
    if p.size == 0:
        raise ValueError("empty evaluation set")
    terms = {"constant": LN2}
    for model in family:
        q1 = np.clip(model.predict_proba(X), PROB_CLAMP, 1 - PROB_CLAMP)
        q = np.where(p == 1, q1, 1 - q1)
        terms[model.member] = float(np.mean(-np.log(q)))
    best = min(terms.values())
    return UsableInfoValue(LN2 - best, "latent", list(terms), terms)


def _matrix_norm(m: np.ndarray, p) -> float:
    if p in ("F", "fro"):
        return float(np.sqrt(np.sum(m * m)))
    if p in (1, "1"):
        return float(np.abs(m).sum(axis=0).max())
    if p in ("inf", np.inf, "∞"):
        return float(np.abs(m).sum(axis=1).max())
    raise ValueError(f"unsupported norm {p!r}")


def jacobian_pnorm_risk(jacobians: Sequence, p="F", layer=-1) -> SensitivityValue:
    """Mean matrix p-norm (F, 1 = max column sum, inf = max row sum)."""
    mats = [np.atleast_2d(np.asarray(getattr(j, "values", j), dtype=np.float64)) for j in jacobians]
    if not mats:
        raise ValueError("no Jacobians given")
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("Jacobians have different shapes")
    first = jacobians[0]
    if layer == -1 and hasattr(first, "layer"):
        layer = first.layer
    value = float(np.mean([_matrix_norm(m, p) for m in mats]))
    return SensitivityValue(layer, f"jac_{'F' if p in ('F', 'fro') else p}", value, len(mats))


def gradient_matrix(weight_grad: np.ndarray) -> np.ndarray:
    """2-D view of a weight gradient: out x in for FC, out_ch x (in_ch*k*k) for conv."""
    return weight_grad.reshape(weight_grad.shape[0], -1)


def mean_gradients_by_attribute(
    spec: ModelSpec, params: Params, s0, s1, layer: int, loss: str = "cross_entropy"
) -> tuple[np.ndarray, np.ndarray]:
    """Mean per-sample weight gradient of ``layer`` over each attribute subset."""
    if layer not in spec.param_layers():
        raise ValueError(f"layer {layer} has no parameters")
    out = []
    for subset in (s0, s1):
        subset = list(subset)
        if not subset:
            raise ValueError("attribute subsets must be non-empty")
        # batch-mean gradient == mean of per-sample gradients
        _, g = nn.backward(spec, params, subset, loss)
        out.append(gradient_matrix(g.layers[layer]["weight"]))
    return out[0], out[1]


def _orth_basis(m: np.ndarray, rank_tol: float) -> np.ndarray:
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise ValueError("zero gradient matrix: the gradients vanish, no subspace to compare")
    rank = int(np.count_nonzero(s > rank_tol * s[0]))
    return u[:, :rank]


def principal_angles(g0, g1, rank_tol: float = 1e-10) -> np.ndarray:
    a = np.asarray(g0, dtype=np.float64)
    b = np.asarray(g1, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise ValueError(f"matrix shapes differ: {a.shape} vs {b.shape}")
    q0, q1 = _orth_basis(a, rank_tol), _orth_basis(b, rank_tol)
    k = min(q0.shape[1], q1.shape[1])
    # scipy switches to sines for the small angles, where arccos loses digits
    return subspace_angles(q0[:, :k], q1[:, :k])


def grassmann_distance(g0, g1, rank_tol: float = 1e-10, layer=-1) -> SensitivityValue:
    """Geodesic distance between the column spans of two gradient matrices.

    Singular directions below ``rank_tol * sigma_max`` are dropped and both
    bases are cut to the smaller rank. A matrix whose rank equals its row
    count spans the whole column space, so two such matrices are at
    distance 0 regardless of their entries; a coarser ``rank_tol`` keeps
    only the dominant directions.
    """
    theta = principal_angles(g0, g1, rank_tol)
    return SensitivityValue(layer, "grassmann", float(np.sqrt(np.sum(theta ** 2))), theta.size)
