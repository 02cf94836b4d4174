"""Declarative leakage scenarios and their per-layer report tables.

A :class:`ScenarioConfig` names a mini model, a synthetic dataset, an
attack (``dra`` or ``aia``), an optional sweep over one training or
defence knob, and the seeds to repeat over. :func:`run_scenario` turns it
into a :class:`LeakageReport`; :func:`emit_report` writes it as CSV or JSON.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import attacks as at
from . import metrics
from . import nn
from . import updates as up
from .data import SyntheticDataset, synth_dataset

CSV_FIELDS = ("scenario", "seed", "layer_set", "metric", "sweep_value", "tau", "value", "status", "runtime_ms")
METRICS = ("usable_original", "usable_latent", "jac_F", "jac_1", "jac_inf", "grassmann", "success_prob")
SWEEP_DEFAULTS = {
    "none": [None],
    "mix_factor": [0, 1, 3, 10, 30],
    "epochs": [1, 5, 10, 20, 50],
    "mask_fraction": [0.01, 0.05, 0.1, 0.5, 1.0],
    "mask_count": [1, 4, 16, 32],
    "dp_sigma": [1e-4, 1e-3, 1e-2, 1e-1, 1.0],
}
DEFAULT_TAUS = [round(0.05 * i, 2) for i in range(1, 17)]


class ConfigError(ValueError):
    """A scenario description is invalid."""


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    model: str = "lenet-mini"
    attack: str = "aia"
    n: int = 512
    height: int = 16
    width: int = 16
    data_seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sweep: str = "none"
    sweep_values: list | None = None
    taus: list = field(default_factory=lambda: list(DEFAULT_TAUS))
    threshold_mode: str = "grid"
    restarts: int = 20
    pretrain_epochs: int = 0
    pretrain_lr: float = 0.1
    local_lr: float = 0.05
    local_batch_size: int = 8
    dp_max_norm: float = 1.0
    mask_seed: int = 0
    dra_members: list = field(default_factory=lambda: ["L2", "Cosine"])
    dra_steps: int = 200
    dra_step_size: float = 0.05
    dra_optimizer: str = "adam"
    dra_init: str = "uniform"
    dra_targets: int = 1
    aia_batch_size: int = 32
    aia_rows_per_label: int = 60
    aia_members: list = field(default_factory=lambda: ["logistic", "mlp"])
    aia_epochs: int = 100
    aia_lr: float = 0.05
    aia_hidden: int = 32
    grassmann_rank_tol: float = 1e-2
    record_timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in nn.ARCHITECTURES:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.attack not in ("dra", "aia"):
            raise ConfigError(f"attack must be 'dra' or 'aia', got {self.attack!r}")
        if self.sweep not in SWEEP_DEFAULTS:
            raise ConfigError(f"unknown sweep {self.sweep!r}; choose from {sorted(SWEEP_DEFAULTS)}")
        if self.threshold_mode not in ("grid", "expectation"):
            raise ConfigError("threshold_mode must be 'grid' or 'expectation'")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(not 0 < t < 1 for t in self.taus):
            raise ConfigError("every tau must lie in (0, 1)")
        if self.sweep != "none" and any(v is None or v < 0 for v in self.resolved_sweep()):
            raise ConfigError("sweep values must be non-negative")
        if self.sweep == "mask_fraction" and any(not 0 < v <= 1 for v in self.resolved_sweep()):
            raise ConfigError("mask fractions must lie in (0, 1]")
        if self.sweep in ("mask_count", "epochs") and any(v < 1 for v in self.resolved_sweep()):
            raise ConfigError(f"{self.sweep} values must be >= 1")
        for name in ("n", "height", "width", "restarts", "dra_steps", "dra_targets", "aia_batch_size",
                     "aia_rows_per_label", "aia_epochs", "local_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.grassmann_rank_tol < 1:
            raise ConfigError("grassmann_rank_tol must lie in (0, 1)")
        if self.dp_max_norm <= 0:
            raise ConfigError("dp_max_norm must be positive")
        bad = [m for m in self.dra_members if m not in up.DISTANCES]
        bad += [m for m in self.aia_members if m not in at.AIA_MEMBERS]
        if bad:
            raise ConfigError(f"unknown family members {bad}")

    def resolved_sweep(self) -> list:
        if self.sweep == "none":
            return [None]
        return list(self.sweep_values) if self.sweep_values else list(SWEEP_DEFAULTS[self.sweep])

    def spec(self) -> nn.ModelSpec:
        return nn.named_model(self.model, (1, self.height, self.width), 4)

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    """Read a YAML (or JSON) key-value document into a config."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value document")
    return ScenarioConfig.from_dict(data)


@dataclass(frozen=True)
class ReportRow:
    scenario: str
    seed: int
    layer_set: str
    metric: str
    sweep_value: float | None
    tau: float | None
    value: float | None
    status: str = "ok"
    runtime_ms: int = 0

    def sort_key(self):
        layers = tuple(int(p) for p in self.layer_set.split("-"))
        return (
            self.scenario, self.seed, layers, self.metric,
            -math.inf if self.sweep_value is None else self.sweep_value,
            -math.inf if self.tau is None else self.tau,
        )


@dataclass
class LeakageReport:
    rows: list = field(default_factory=list)

    def sorted(self) -> LeakageReport:
        return LeakageReport(sorted(self.rows, key=ReportRow.sort_key))

    def select(self, **criteria) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]


def layer_label(spec: nn.ModelSpec, layers) -> str:
    """1-based ordinal(s) among the parameterised layers, e.g. ``"2-3"``."""
    order = spec.param_layers()
    return "-".join(str(order.index(l) + 1) for l in layers)


# -- shared-update construction ---------------------------------------------------

@dataclass
class _Context:
    cfg: ScenarioConfig
    spec: nn.ModelSpec
    params: list
    dataset: SyntheticDataset
    seed: int
    value: Any


def _base_update(ctx: _Context, batch, row_seed, params=None) -> up.SharedUpdate:
    params = ctx.params if params is None else params
    if ctx.cfg.sweep == "epochs":
        epochs = int(ctx.value)
        bs = ctx.cfg.local_batch_size
        update = up.fed_avg_update(ctx.spec, params, batch, epochs, bs, ctx.cfg.local_lr, _int_seed(row_seed))
        # the server knows lr and step count, so it reads the delta as an average gradient
        steps = epochs * math.ceil(len(batch) / bs)
        grads = update.grads * (-1.0 / (ctx.cfg.local_lr * steps))
        return up.SharedUpdate(grads, update.provenance)
    return up.fed_sgd_update(ctx.spec, params, batch)


def _int_seed(row_seed) -> int:
    return int(np.random.SeedSequence(row_seed).generate_state(1)[0])


def _nontargets(ctx: _Context, pool: list, batch_size: int, row_seed) -> list[up.SharedUpdate]:
    if ctx.cfg.sweep != "mix_factor" or not ctx.value:
        return []
    rng = np.random.default_rng([*np.atleast_1d(row_seed), 7919])
    out = []
    for _ in range(int(ctx.value)):
        pick = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
        out.append(up.fed_sgd_update(ctx.spec, ctx.params, [pool[j] for j in pick]))
    return out


def _defend(ctx: _Context, update: up.SharedUpdate, nontargets, row_seed) -> up.SharedUpdate:
    cfg = ctx.cfg
    if cfg.sweep == "mix_factor":
        update = up.aggregate_mixed(update, nontargets, int(ctx.value))
    if cfg.sweep == "dp_sigma":
        update = up.dp_clip_noise(update, cfg.dp_max_norm, float(ctx.value), _int_seed(row_seed))
    if cfg.sweep == "mask_fraction":
        update = up.apply_mask(update, up.MaskSpec(fraction=float(ctx.value), selection_seed=cfg.mask_seed))
    if cfg.sweep == "mask_count":
        update = up.apply_mask(update, up.MaskSpec(count=int(ctx.value), selection_seed=cfg.mask_seed))
    return update


def _params_for_seed(cfg: ScenarioConfig, spec: nn.ModelSpec, dataset: SyntheticDataset, seed: int):
    params = nn.init_params(spec, seed)
    if cfg.pretrain_epochs:
        params = nn.train(spec, params, dataset.pairs(), cfg.pretrain_epochs, 16, cfg.pretrain_lr, seed)
    return params


def _dataset_for_seed(cfg: ScenarioConfig, seed: int) -> SyntheticDataset:
    return synth_dataset(cfg.n, cfg.height, cfg.width, cfg.data_seed + seed)


# -- cells -------------------------------------------------------------------------------

def _row(cfg, seed, label, metric, value, tau, val, status="ok", ms=0) -> ReportRow:
    return ReportRow(
        cfg.name, int(seed), label, metric,
        None if value is None else float(value),
        None if tau is None else float(tau),
        None if val is None else float(val),
        status, int(ms) if cfg.record_timing else 0,
    )


def _update_jacobian(ctx: _Context, x, y, layers, nontargets, row_seed) -> np.ndarray:
    """Jacobian of the exposed entries of ``layers`` w.r.t. the target input."""
    spec, cfg = ctx.spec, ctx.cfg
    if cfg.sweep in ("none", "mix_factor", "mask_fraction", "mask_count"):
        scale = 1.0 / (int(ctx.value) + 1) if cfg.sweep == "mix_factor" else 1.0
        probe = _defend(ctx, up.fed_sgd_update(spec, ctx.params, [(x, y)]), nontargets, row_seed)
        blocks = []
        for l in layers:
            jac = up.input_gradient_jacobian(spec, ctx.params, x, y, l).values * scale
            idx = probe.indices(l)
            blocks.append(jac if idx is None else jac[idx])
        return np.concatenate(blocks, axis=0)

    # clipping and local training are not linear in the sample: differentiate the whole pipeline
    def exposed(v):
        update = _defend(ctx, _base_update(ctx, [(v.reshape(spec.input_shape), y)], row_seed), nontargets, row_seed)
        return update.observed_flat(layers)

    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    cols = []
    for c in range(flat.size):
        h = up.FD_STEP * max(1.0, abs(flat[c]))
        hi, lo = flat.copy(), flat.copy()
        hi[c] += h
        lo[c] -= h
        cols.append((exposed(hi) - exposed(lo)) / (2 * h))
    return np.stack(cols, axis=1)


def _dra_cell(cfg: ScenarioConfig, seed: int, value, layers: tuple) -> list[ReportRow]:
    start = time.perf_counter()
    spec = cfg.spec()
    dataset = _dataset_for_seed(cfg, seed)
    params = _params_for_seed(cfg, spec, dataset, seed)
    ctx = _Context(cfg, spec, params, dataset, seed, value)
    label = layer_label(spec, layers)
    taus = cfg.taus
    rng = np.random.default_rng([seed, 104729])
    targets = rng.choice(len(dataset), size=min(cfg.dra_targets, len(dataset)), replace=False)
    try:
        per_target = []
        jacobians = []
        all_ssims = []
        for t_i, t in enumerate(targets):
            x, y = dataset.images[t], int(dataset.labels[t])
            row_seed = [seed, int(t)]
            pool = dataset.pairs([i for i in range(len(dataset)) if i != t])
            nontargets = _nontargets(ctx, pool, 1, row_seed)
            observed = _defend(ctx, _base_update(ctx, [(x, y)], row_seed), nontargets, row_seed)
            member_ssims = {}
            for kind in cfg.dra_members:
                dra = at.DraConfig(
                    tuple(layers), kind, cfg.dra_steps, cfg.dra_step_size, cfg.dra_optimizer,
                    cfg.restarts, cfg.dra_init, _int_seed([seed, int(t), 1]),
                )
                runs = at.run_dra(spec, params, observed, dra, truth=(x, y))
                member_ssims[dra.member] = np.array([r.ssim for r in runs])
            baseline = at.random_reconstruction_baseline(spec.input_shape, cfg.restarts, _int_seed([seed, int(t), 2]), cfg.dra_init)
            base_ssims = np.array([metrics.ssim(x, b) for b in baseline])
            per_target.append((member_ssims, base_ssims))
            all_ssims.extend(np.concatenate(list(member_ssims.values())))
            jacobians.append(_update_jacobian(ctx, x, y, layers, nontargets, row_seed))
    except (up.DegenerateGradientError, ValueError, FloatingPointError, ArithmeticError):
        ms = (time.perf_counter() - start) * 1e3
        grid = taus if cfg.threshold_mode == "grid" else [None]
        rows = [_row(cfg, seed, label, m, value, t, None, "diverged", ms)
                for t in grid for m in ("success_prob", "usable_original")]
        rows += [_row(cfg, seed, label, m, value, None, None, "diverged", ms) for m in ("jac_F", "jac_1", "jac_inf")]
        return rows

    if cfg.threshold_mode == "expectation":
        taus = [float(np.clip(np.mean(all_ssims), 0.01, 0.99))]
    rows = []
    elapsed = (time.perf_counter() - start) * 1e3
    for tau in taus:
        samples = []
        raw = {}
        for member_ssims, base_ssims in per_target:
            members = {m: metrics.success_probability(s, tau, "laplace") for m, s in member_ssims.items()}
            for m, s in member_ssims.items():
                raw.setdefault(m, []).append(metrics.success_probability(s, tau))
            samples.append({"members": members, "baseline": metrics.success_probability(base_ssims, tau, "laplace")})
        info = metrics.usable_original_info(samples)
        best = max(float(np.mean(v)) for v in raw.values())
        rows.append(_row(cfg, seed, label, "success_prob", value, tau, best, ms=elapsed))
        rows.append(_row(cfg, seed, label, "usable_original", value, tau, info.value, ms=elapsed))
    for p, name in (("F", "jac_F"), (1, "jac_1"), ("inf", "jac_inf")):
        risk = metrics.jacobian_pnorm_risk(jacobians, p)
        rows.append(_row(cfg, seed, label, name, value, None, risk.value, ms=elapsed))
    return rows


def _aia_cell(cfg: ScenarioConfig, seed: int, value, layers: tuple) -> list[ReportRow]:
    start = time.perf_counter()
    spec = cfg.spec()
    dataset = _dataset_for_seed(cfg, seed)
    params = _params_for_seed(cfg, spec, dataset, seed)
    ctx = _Context(cfg, spec, params, dataset, seed, value)
    without, with_ = dataset.split_by_attribute()
    everyone = dataset.pairs()
    bs = min(cfg.aia_batch_size, len(without), len(with_))

    def make_update(batch, row_seed):
        nontargets = _nontargets(ctx, everyone, bs, row_seed)
        return _defend(ctx, _base_update(ctx, batch, row_seed), nontargets, row_seed)

    feats = at.build_aia_dataset(
        spec, params, with_, without, bs, list(layers), cfg.aia_rows_per_label,
        seed=_int_seed([seed, 3]), make_update=make_update,
    )
    n_rows = 2 * cfg.aia_rows_per_label
    order = np.random.default_rng([seed, 4]).permutation(n_rows)
    n_train = int(round(0.7 * n_rows))
    train_idx, eval_idx = order[:n_train], order[n_train:]
    if len(set(feats[layers[0]].p[train_idx])) < 2:
        raise RuntimeError("AIA split lost one label; increase aia_rows_per_label")

    # attribute-conditioned mean gradients; mixing pulls both towards the population mean
    mix = int(value) if cfg.sweep == "mix_factor" else 0
    rows = []
    for l in layers:
        label = layer_label(spec, (l,))
        f = feats[l]
        try:
            family = [
                at.train_aia(f.X[train_idx], f.p[train_idx], member, cfg.aia_epochs, cfg.aia_lr,
                             _int_seed([seed, l, k]), hidden=cfg.aia_hidden, descriptor=f)
                for k, member in enumerate(cfg.aia_members)
            ]
            info = metrics.usable_latent_info(f.X[eval_idx], f.p[eval_idx], family).value
            status = "ok"
        except (ValueError, FloatingPointError):
            info, status = None, "diverged"
        try:
            g0, g1 = metrics.mean_gradients_by_attribute(spec, params, without, with_, l)
            if mix:
                _, g_all = nn.backward(spec, params, everyone)
                g_all = metrics.gradient_matrix(g_all.layers[l]["weight"])
                g0, g1 = (g0 + mix * g_all) / (mix + 1), (g1 + mix * g_all) / (mix + 1)
            gr = metrics.grassmann_distance(g0, g1, cfg.grassmann_rank_tol, layer=l).value
            gstatus = "ok"
        except ValueError:
            gr, gstatus = None, "diverged"
        elapsed = (time.perf_counter() - start) * 1e3
        rows.append(_row(cfg, seed, label, "usable_latent", value, None, info, status, elapsed))
        rows.append(_row(cfg, seed, label, "grassmann", value, None, gr, gstatus, elapsed))
    return rows


def _run_cell(args) -> list[ReportRow]:
    cfg, seed, value, layers = args
    if cfg.attack == "dra":
        return _dra_cell(cfg, seed, value, layers)
    return _aia_cell(cfg, seed, value, layers)


def scenario_cells(cfg: ScenarioConfig) -> list[tuple]:
    """Independent work units: (seed, sweep value, layer set) for DRA and
    (seed, sweep value, all layers) for AIA, whose layers share one set of
    gradient features."""
    spec = cfg.spec()
    cells = []
    for seed in cfg.seeds:
        for value in cfg.resolved_sweep():
            if cfg.attack == "dra":
                for layers in up.consecutive_layer_sets(spec, 2):
                    cells.append((cfg, seed, value, layers))
            else:
                cells.append((cfg, seed, value, tuple(spec.param_layers())))
    return cells


def run_scenario(cfg: ScenarioConfig, jobs: int = 1) -> LeakageReport:
    """Run every cell and return the sorted report; output never depends on ``jobs``."""
    cells = scenario_cells(cfg)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    return LeakageReport([row for rows in results for row in rows]).sorted()


# -- emission ----------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.9g}"


def _json_num(v):
    return None if v is None else float(f"{v:.9g}")


def report_to_csv(report: LeakageReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in report.rows:
        writer.writerow([r.scenario, r.seed, r.layer_set, r.metric, _fmt(r.sweep_value),
                         _fmt(r.tau), _fmt(r.value), r.status, r.runtime_ms])
    return buf.getvalue()


def report_to_json(report: LeakageReport) -> str:
    items = [
        {"scenario": r.scenario, "seed": r.seed, "layer_set": r.layer_set, "metric": r.metric,
         "sweep_value": _json_num(r.sweep_value), "tau": _json_num(r.tau), "value": _json_num(r.value),
         "status": r.status, "runtime_ms": r.runtime_ms}
        for r in report.rows
    ]
    return json.dumps(items, indent=2) + "\n"


def emit_report(report: LeakageReport, fmt: str, path) -> None:
    if fmt == "csv":
        text = report_to_csv(report)
    elif fmt == "json":
        text = report_to_json(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def _parse_num(text: str):
    return None if text == "" else float(text)


def read_report(path) -> LeakageReport:
    """Load a report written by :func:`emit_report` (CSV or JSON by content)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc}") from exc
    if text.lstrip().startswith("["):
        items = json.loads(text)
        rows = [ReportRow(d["scenario"], int(d["seed"]), d["layer_set"], d["metric"], d["sweep_value"],
                          d["tau"], d["value"], d["status"], int(d["runtime_ms"])) for d in items]
        return LeakageReport(rows)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_FIELDS:
        raise ValueError(f"{path}: unexpected CSV header {header}")
    rows = [
        ReportRow(s, int(seed), layer, metric, _parse_num(sw), _parse_num(tau), _parse_num(val), status, int(ms))
        for s, seed, layer, metric, sw, tau, val, status, ms in reader
    ]
    return LeakageReport(rows)
