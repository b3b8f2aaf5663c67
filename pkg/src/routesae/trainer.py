"""Adam training loop with a warmup/stable/decay schedule and periodic decoder renorm."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorio
from .activation_store import NormalizationStats, apply_normalization, compute_norm_stats, load_shard
from .errors import CheckpointError, ConfigError, DataError, DimensionMismatchError, TrainingDivergedError
from .models import ARCHITECTURES, build_model, model_from_tensors

log = logging.getLogger(__name__)

CHECKPOINT_TAG = "routesae-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    architecture: str = "route-hard"
    M: int = 128
    k: int = 4
    base_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.05
    stable_frac: float = 0.75
    decay_frac: float = 0.20
    total_steps: int = 1000
    batch_size: int = 64
    renorm_every: int = 10
    l1_coefficient: float = 1e-3
    seed: int = 0
    layer: int | None = None  # absolute layer id read by single-layer archs; default: last
    router_init_scale: float = 0.0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.renorm_every < 1:
            raise ConfigError("renorm_every must be >= 1")
        total = self.warmup_frac + self.stable_frac + self.decay_frac
        if abs(total - 1.0) > 1e-9 or min(self.warmup_frac, self.stable_frac, self.decay_frac) < 0:
            raise ConfigError(f"schedule fractions must be non-negative and sum to 1, got {total}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0, constant plateau, linear decay to 0 at total_steps."""
    T = config.total_steps
    if not 0 <= step < T:
        raise ValueError(f"step {step} outside [0, {T})")
    warm_end = config.warmup_frac * T
    decay_start = (config.warmup_frac + config.stable_frac) * T
    if step < warm_end:
        return config.base_lr * step / warm_end
    if step < decay_start:
        return config.base_lr
    return config.base_lr * (T - step) / (T - decay_start)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[AdamState, dict[str, np.ndarray]]:
    t = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name!r} at optimizer step {t}")
    m, v, new = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionMismatchError(f"gradient {name!r} has shape {g.shape}, parameter {p.shape}")
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new[name] = p - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
    return AdamState(m, v, t), new


@dataclass
class Checkpoint:
    config: TrainConfig
    model: object
    adam: AdamState
    step: int  # completed steps
    norm_scales: np.ndarray
    layer_ids: tuple[int, ...]
    extra: dict = field(default_factory=dict)

    @property
    def arch(self) -> str:
        return self.config.architecture


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    tensors = dict(ckpt.model.tensors())
    for name in tensors.copy():
        tensors[f"adam.m.{name}"] = ckpt.adam.m[name]
        tensors[f"adam.v.{name}"] = ckpt.adam.v[name]
    tensors["norm.scales"] = np.asarray(ckpt.norm_scales, dtype=np.float64)
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "architecture": ckpt.arch,
        "config": asdict(ckpt.config),
        "step": ckpt.step,
        "adam_step": ckpt.adam.step,
        "layer_ids": list(ckpt.layer_ids),
        "layer_index": getattr(ckpt.model, "layer_index", None),
        "extra": ckpt.extra,
    }
    tensorio.save(tensorio.TensorFile(CHECKPOINT_TAG, meta, tensors), path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    tf = tensorio.load(path, expect_tag=CHECKPOINT_TAG)
    meta = tf.meta
    version = meta.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        config = TrainConfig.from_dict(meta["config"])
        params = {k: v for k, v in tf.tensors.items() if not k.startswith(("adam.", "norm."))}
        model = model_from_tensors(
            config.architecture, params, k=config.k,
            layer_index=meta.get("layer_index") or 0, l1_coefficient=config.l1_coefficient,
        )
        adam = AdamState(
            {k: tf.tensors[f"adam.m.{k}"] for k in params},
            {k: tf.tensors[f"adam.v.{k}"] for k in params},
            int(meta["adam_step"]),
        )
        return Checkpoint(config, model, adam, int(meta["step"]), tf.tensors["norm.scales"],
                          tuple(meta["layer_ids"]), meta.get("extra", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc


class BatchSampler:
    """Stateless sampler: the batch for a step depends only on (seed, step).

    Sample positions run through a sequence of per-epoch permutations, so data
    wraps around deterministically and resumption needs no sampler state.
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("no training data")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            if len(self._perms) > 4:
                self._perms.pop(min(self._perms))
            self._perms[epoch] = np.random.default_rng([self.seed, 1, epoch]).permutation(self.n)
        return self._perms[epoch]

    def indices(self, step: int) -> np.ndarray:
        q = step * self.batch_size + np.arange(self.batch_size)
        epochs, pos = np.divmod(q, self.n)
        out = np.empty(self.batch_size, dtype=np.int64)
        for e in np.unique(epochs):
            sel = epochs == e
            out[sel] = self._perm(int(e))[pos[sel]]
        return out


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, step])


@dataclass
class MetricRow:
    step: int
    lr: float
    loss: float
    l0: float
    routing: tuple[float, ...] | None = None

    def to_line(self) -> str:
        hist = "-" if self.routing is None else ",".join(f"{f:.6g}" for f in self.routing)
        return f"{self.step}\t{self.lr:.9g}\t{self.loss:.9g}\t{self.l0:.6g}\t{hist}"


METRICS_HEADER = "step\tlr\tloss\tl0\trouting"


def write_metrics(rows: Sequence[MetricRow], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(row.to_line() + "\n")


def read_metrics(path: str | os.PathLike) -> list[MetricRow]:
    rows = []
    with open(path) as fh:
        if fh.readline().rstrip("\n") != METRICS_HEADER:
            raise DataError(f"{path}: not a metrics log")
        for line in fh:
            step, lr, loss, l0, hist = line.rstrip("\n").split("\t")
            routing = None if hist == "-" else tuple(float(f) for f in hist.split(","))
            rows.append(MetricRow(int(step), float(lr), float(loss), float(l0), routing))
    return rows


def load_training_data(
    shards: Sequence[str | os.PathLike], norm_stats: NormalizationStats | None = None
) -> tuple[np.ndarray, NormalizationStats, tuple[int, ...]]:
    """Load shards into one float64 array (N, L, d), normalized."""
    arrays, ref = [], None
    for path in shards:
        header, batch = load_shard(path)
        if ref is not None and (header.d, header.layer_ids) != (ref.d, ref.layer_ids):
            raise DimensionMismatchError(f"{path}: shard shape differs from {shards[0]}")
        ref = header
        arrays.append(batch.x)
    if ref is None:
        raise ValueError("no shards given")
    if norm_stats is None:
        norm_stats = compute_norm_stats(shards)
    x = apply_normalization(np.concatenate(arrays).astype(np.float64), norm_stats)
    return x, norm_stats, ref.layer_ids


def train(
    config: TrainConfig,
    data: np.ndarray | Sequence[str | os.PathLike],
    norm_stats: NormalizationStats | None = None,
    *,
    layer_ids: Sequence[int] | None = None,
    model=None,
    resume: Checkpoint | None = None,
    until_step: int | None = None,
    callback: Callable[[int, object, MetricRow], None] | None = None,
) -> tuple[Checkpoint, list[MetricRow]]:
    """Train for ``config.total_steps`` steps (or up to ``until_step``).

    ``data`` is either an already-normalized array (n, L, d) or a list of shard
    paths (normalized here with ``norm_stats``, computed if absent).
    Renormalization runs after the optimizer update on every step that is a
    multiple of ``renorm_every`` and once more after the final step.
    """
    if isinstance(data, np.ndarray):
        x = np.asarray(data, dtype=np.float64)
        if norm_stats is None:
            norm_stats = NormalizationStats.identity(x.shape[1], x.shape[2])
        if layer_ids is None:
            layer_ids = tuple(range(x.shape[1]))
    else:
        x, norm_stats, layer_ids = load_training_data(data, norm_stats)
    layer_ids = tuple(layer_ids)
    _, L, d = x.shape

    if resume is not None:
        model, adam, start = resume.model, resume.adam, resume.step
    else:
        if model is None:
            layer_index = L - 1
            if config.layer is not None:
                if config.layer not in layer_ids:
                    raise ConfigError(f"layer {config.layer} not among shard layers {layer_ids}")
                layer_index = layer_ids.index(config.layer)
            model = build_model(
                config.architecture, L, d, config.M, config.k, config.seed,
                layer_index=layer_index, l1_coefficient=config.l1_coefficient,
                router_init_scale=config.router_init_scale,
            )
        adam, start = AdamState.zeros_like(model.tensors()), 0
    end = config.total_steps if until_step is None else min(until_step, config.total_steps)
    sampler = BatchSampler(len(x), config.batch_size, config.seed)
    routed = config.architecture.startswith("route")

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(config, model, adam, step, np.asarray(norm_stats.per_layer_scale), layer_ids)

    rows: list[MetricRow] = []
    for step in range(start, end):
        lr = lr_at(step, config)
        batch = x[sampler.indices(step)]
        grads, stats = model.loss_and_grads(batch, step_rng(config.seed, step))
        if not math.isfinite(stats.loss):
            raise TrainingDivergedError(f"loss is {stats.loss} at step {step}", snapshot(step))
        try:
            adam, new = adam_step(adam, model.tensors(), grads, lr, config.beta1, config.beta2, config.eps)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(str(exc), snapshot(step)) from None
        model = model.with_tensors(new)
        if step % config.renorm_every == 0 or step == config.total_steps - 1:
            model = model.renorm()
        hist = None
        if routed:
            hist = tuple(np.bincount(stats.selected_layer, minlength=L) / len(batch))
        row = MetricRow(step, lr, stats.loss, stats.l0, hist)
        rows.append(row)
        if callback is not None:
            callback(step, model, row)
    return snapshot(end), rows
