"""Measurements: normalized MSE, downstream KL via substitution into the toy LM,
threshold-based context extraction, routing histograms and feature steering."""

from __future__ import annotations

import csv
import heapq
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .activation_store import RecordBatch
from .errors import DataError, DegenerateDataError
from .models import Reconstruction
from .toy_lm import PatchPlan, ToyLm, lm_forward, patched_forward, greedy_continue

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 32
MIN_CONTEXTS = 4
CONTEXTS_PER_TOKEN = 2


class Artifact:
    """A trained model plus the normalization and layer ids it was trained with.

    Inputs are raw host-model activations (n, L, d); substitution vectors are
    returned in raw scale, keyed by absolute layer id.
    """

    def __init__(self, model, layer_ids: Sequence[int], norm_scales: np.ndarray, seed: int = 0):
        self.model = model
        self.layer_ids = tuple(int(i) for i in layer_ids)
        self.norm_scales = np.asarray(norm_scales, dtype=np.float64)
        self.seed = seed

    @classmethod
    def from_checkpoint(cls, ckpt) -> "Artifact":
        return cls(ckpt.model, ckpt.layer_ids, ckpt.norm_scales, ckpt.config.seed)

    @property
    def arch(self) -> str:
        return self.model.arch

    def rng(self, key: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 3, key])

    def reconstruct(self, x_raw: np.ndarray, key: int = 0) -> Reconstruction:
        x = np.asarray(x_raw, dtype=np.float64) * self.norm_scales[None, :, None]
        return self.model.reconstruct(x, self.rng(key))

    def substitution(self, x_raw: np.ndarray, key: int = 0, z: np.ndarray | None = None):
        """(absolute layer per token, raw-scale replacement vectors, reconstruction)."""
        rec = self.reconstruct(x_raw, key)
        if rec.substitute is None:
            raise DataError(f"{self.arch} has no single-layer substitution")
        sub = self.model.decode_code(rec.z if z is None else z, rec)
        raw = sub / self.norm_scales[rec.layer][:, None]
        layers = np.asarray(self.layer_ids)[rec.layer]
        return layers, raw, rec


class _FixedLayerModel:
    def __init__(self, layer_index: int, zero: bool):
        self.layer_index = layer_index
        self.zero = zero
        self.arch = "zero" if zero else "identity"

    def reconstruct(self, x, rng=None) -> Reconstruction:
        xi = x[:, self.layer_index]
        x_hat = np.zeros_like(xi) if self.zero else xi.copy()
        n = len(x)
        empty = np.zeros((n, 0))
        return Reconstruction(empty, empty.astype(bool), xi, x_hat,
                              np.full(n, self.layer_index, dtype=np.int64), x_hat)

    def decode_code(self, z, rec):
        return rec.x_hat


def identity_artifact(layer_ids: Sequence[int], layer_index: int = -1) -> Artifact:
    L = len(layer_ids)
    return Artifact(_FixedLayerModel(layer_index % L, zero=False), layer_ids, np.ones(L))


def zero_artifact(layer_ids: Sequence[int], layer_index: int = -1) -> Artifact:
    L = len(layer_ids)
    return Artifact(_FixedLayerModel(layer_index % L, zero=True), layer_ids, np.ones(L))


def normalized_mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """sum ||x - xhat||^2 / sum ||x - mean(x)||^2 over the batch (leading axis)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DataError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if x.shape[0] < 2:
        raise DataError("normalized MSE needs a batch of at least 2")
    x2 = x.reshape(len(x), -1)
    denom = ((x2 - x2.mean(axis=0)) ** 2).sum()
    if denom == 0:
        raise DegenerateDataError("constant batch: normalized MSE undefined")
    return float(((x2 - x_hat.reshape(len(x), -1)) ** 2).sum() / denom)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_divergence(logits_p: np.ndarray, logits_q: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-position KL(P || Q) in nats and its mean."""
    logits_p = np.asarray(logits_p, dtype=np.float64)
    logits_q = np.asarray(logits_q, dtype=np.float64)
    if logits_p.shape != logits_q.shape:
        raise DataError(f"shape mismatch {logits_p.shape} vs {logits_q.shape}")
    lp, lq = log_softmax(logits_p), log_softmax(logits_q)
    per = (np.exp(lp) * (lp - lq)).sum(axis=-1)
    return per, float(per.mean())


def _layer_stack(resid: np.ndarray, layer_ids: Sequence[int]) -> np.ndarray:
    """(n_layers, T, d) -> (T, L, d) for the artifact's layers."""
    return resid[list(layer_ids)].transpose(1, 0, 2)


@dataclass
class FrontierRow:
    label: str
    k: int
    mean_l0: float
    mean_kl: float
    nmse: float
    n_tokens: int


def evaluate_substitution(lm: ToyLm, artifact: Artifact, sequences: Sequence[Sequence[int]]) -> dict:
    """Mean per-token KL between clean and substituted logits, plus L0 and NMSE."""
    kls, l0s, xs, xhats, layers = [], [], [], [], []
    for s, tokens in enumerate(sequences):
        logits, resid = lm_forward(lm, tokens)
        x_raw = _layer_stack(resid, artifact.layer_ids)
        abs_layers, vecs, rec = artifact.substitution(x_raw, key=s)
        plan = PatchPlan.from_arrays(np.arange(len(vecs)), abs_layers, vecs)
        per, _ = kl_divergence(logits, patched_forward(lm, tokens, plan))
        kls.append(per)
        l0s.append(rec.active.sum(axis=1))
        xs.append(rec.x_in)
        xhats.append(rec.x_hat)
        layers.append(rec.layer)
    kl = np.concatenate(kls)
    return {
        "mean_kl": float(kl.mean()),
        "mean_l0": float(np.concatenate(l0s).mean()),
        "nmse": normalized_mse(np.concatenate(xs), np.concatenate(xhats)),
        "n_tokens": len(kl),
        "layers": np.concatenate(layers),
    }


def kl_frontier(
    lm: ToyLm,
    artifacts: Mapping[int, Artifact | None],
    sequences: Sequence[Sequence[int]],
    label: str = "",
) -> list[FrontierRow]:
    """One row per k; a missing artifact (None) is skipped with a warning."""
    rows = []
    for k in sorted(artifacts):
        art = artifacts[k]
        if art is None:
            log.warning("no artifact for k=%d, skipping frontier row", k)
            continue
        res = evaluate_substitution(lm, art, sequences)
        rows.append(FrontierRow(label or art.arch, k, res["mean_l0"], res["mean_kl"], res["nmse"], res["n_tokens"]))
    return rows


def write_frontier_csv(rows: Iterable[FrontierRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["architecture", "k", "mean_l0", "mean_kl", "nmse", "n_tokens"])
        for r in rows:
            w.writerow([r.label, r.k, f"{r.mean_l0:.6g}", f"{r.mean_kl:.9g}", f"{r.nmse:.9g}", r.n_tokens])


# -- context extraction -------------------------------------------------------


@dataclass
class FeatureContext:
    feature_id: int
    token_id: int
    activation_value: float
    context_window: tuple[int, ...]
    sequence_id: int
    position: int
    routed_layer: int
    center: int = 0  # index of the activating token inside context_window


@dataclass
class FeatureDossier:
    feature_id: int
    contexts: dict[int, list[FeatureContext]] = field(default_factory=dict)  # token id -> top-2, descending
    activations: list[float] = field(default_factory=list)  # every above-threshold firing, descending

    @property
    def n_active(self) -> int:
        return len(self.activations)

    @property
    def n_kept(self) -> int:
        return sum(len(v) for v in self.contexts.values())

    @property
    def retained(self) -> bool:
        return self.n_active >= MIN_CONTEXTS

    def kept(self) -> list[FeatureContext]:
        out = [c for group in self.contexts.values() for c in group]
        return sorted(out, key=lambda c: (-c.activation_value, c.sequence_id, c.position))


def _sequence_index(batch: RecordBatch) -> dict[int, np.ndarray]:
    seqs: dict[int, np.ndarray] = {}
    order = np.lexsort((batch.position, batch.sequence_id))
    sid, pos, tok = batch.sequence_id[order], batch.position[order], batch.token_id[order]
    bounds = np.flatnonzero(np.diff(sid)) + 1
    for chunk_s, chunk_p, chunk_t in zip(np.split(sid, bounds), np.split(pos, bounds), np.split(tok, bounds)):
        if len(chunk_s) == 0:
            continue
        arr = np.full(int(chunk_p.max()) + 1, -1, dtype=np.int64)
        arr[chunk_p] = chunk_t
        seqs[int(chunk_s[0])] = arr
    return seqs


def iter_contexts(
    artifact: Artifact,
    batch: RecordBatch,
    threshold: float,
    window: int = DEFAULT_WINDOW,
    chunk: int = 4096,
) -> Iterator[FeatureContext]:
    """Every (token, latent) pair with activation strictly above ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if len(batch) and (batch.token_id < 0).any():
        raise DataError("context extraction needs shards that carry token ids")
    seqs = _sequence_index(batch)
    for start in range(0, len(batch), chunk):
        stop = min(start + chunk, len(batch))
        rec = artifact.reconstruct(batch.x[start:stop], key=start)
        rows, feats = np.nonzero(rec.z > threshold)
        abs_layers = np.asarray(artifact.layer_ids)[rec.layer]
        for r, f in zip(rows, feats):
            i = start + int(r)
            sid, pos = int(batch.sequence_id[i]), int(batch.position[i])
            seq = seqs[sid]
            lo = max(0, pos - window)
            ctx = tuple(int(t) for t in seq[lo : pos + window + 1] if t >= 0)
            yield FeatureContext(int(f), int(batch.token_id[i]), float(rec.z[r, f]), ctx,
                                 sid, pos, int(abs_layers[r]), pos - lo)


def build_dossiers(contexts: Iterable[FeatureContext]) -> dict[int, FeatureDossier]:
    """Keep the top-2 contexts per (feature, token id) with a size-2 min-heap.

    On equal activations the earlier context is kept.
    """
    heaps: dict[tuple[int, int], list] = {}
    values: dict[int, list[float]] = {}
    for n, c in enumerate(contexts):
        values.setdefault(c.feature_id, []).append(c.activation_value)
        heap = heaps.setdefault((c.feature_id, c.token_id), [])
        item = (c.activation_value, -n, c)
        if len(heap) < CONTEXTS_PER_TOKEN:
            heapq.heappush(heap, item)
        elif item[:2] > heap[0][:2]:
            heapq.heapreplace(heap, item)
    dossiers: dict[int, FeatureDossier] = {}
    for (f, tok), heap in sorted(heaps.items(), key=lambda kv: kv[0]):
        dos = dossiers.setdefault(f, FeatureDossier(f, activations=sorted(values[f], reverse=True)))
        dos.contexts[tok] = [c for _, _, c in sorted(heap, key=lambda t: (-t[0], -t[1]))]
    return dossiers


def extract_contexts(artifact: Artifact, batch: RecordBatch, threshold: float,
                     window: int = DEFAULT_WINDOW) -> dict[int, FeatureDossier]:
    return build_dossiers(iter_contexts(artifact, batch, threshold, window))


def count_interpretable(dossiers: Mapping[int, FeatureDossier], thresholds: Sequence[float],
                        built_at: float | None = None) -> list[tuple[float, int]]:
    """Retained-feature counts after re-filtering the stored firings at each threshold.

    Exact as long as the dossiers were built at a threshold no larger than any
    requested one.
    """
    if built_at is not None and min(thresholds) < built_at:
        raise ValueError(f"dossiers built at {built_at} cannot be recounted at {min(thresholds)}")
    out = []
    for t in thresholds:
        n = 0
        for dos in dossiers.values():
            n += sum(1 for v in dos.activations if v > t) >= MIN_CONTEXTS
        out.append((t, n))
    return out


def render_context(ctx: FeatureContext) -> str:
    def text(ids):
        return bytes(i for i in ids if i < 256).decode("latin-1")

    w = ctx.context_window
    return text(w[: ctx.center]) + "[[" + text(w[ctx.center : ctx.center + 1]) + "]]" + text(w[ctx.center + 1 :])


def render_token(token_id: int) -> str:
    return bytes([token_id]).decode("latin-1") if token_id < 256 else f"<{token_id}>"


def write_dossiers(dossiers: Mapping[int, FeatureDossier], path: str | os.PathLike, retained_only: bool = True) -> int:
    """One JSON object per feature per line; returns the number written."""
    n = 0
    with open(path, "w") as fh:
        for f in sorted(dossiers):
            dos = dossiers[f]
            if retained_only and not dos.retained:
                continue
            record = {
                "feature_id": f,
                "n_active": dos.n_active,
                "activations": [float(v) for v in dos.activations],
                "retained": dos.retained,
                "contexts": [
                    {
                        "token_id": c.token_id,
                        "token": render_token(c.token_id),
                        "activation": float(c.activation_value),
                        "context": render_context(c),
                        "context_ids": list(c.context_window),
                        "center": c.center,
                        "sequence_id": c.sequence_id,
                        "position": c.position,
                        "layer": c.routed_layer,
                    }
                    for c in dos.kept()
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            n += 1
    return n


def read_dossiers(path: str | os.PathLike) -> dict[int, FeatureDossier]:
    dossiers = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dos = FeatureDossier(int(rec["feature_id"]), activations=[float(v) for v in rec["activations"]])
                for c in rec["contexts"]:
                    fc = FeatureContext(dos.feature_id, int(c["token_id"]), float(c["activation"]),
                                        tuple(c["context_ids"]), int(c["sequence_id"]), int(c["position"]),
                                        int(c["layer"]), int(c["center"]))
                    dos.contexts.setdefault(fc.token_id, []).append(fc)
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: malformed dossier ({exc})") from exc
            for group in dos.contexts.values():
                group.sort(key=lambda c: -c.activation_value)
            dossiers[dos.feature_id] = dos
    return dossiers


def routing_histogram(selected_layers: Iterable[int] | np.ndarray, L: int) -> np.ndarray:
    sel = np.asarray(list(selected_layers) if not isinstance(selected_layers, np.ndarray) else selected_layers)
    if sel.size == 0:
        raise DataError("routing histogram of an empty decision stream")
    return np.bincount(sel.astype(np.int64), minlength=L) / sel.size


def write_histogram_csv(hist: np.ndarray, layer_ids: Sequence[int], path: str | os.PathLike, phase: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "layer", "fraction"])
        for layer, frac in zip(layer_ids, hist):
            w.writerow([phase, layer, f"{frac:.9g}"])


# -- steering -----------------------------------------------------------------


@dataclass
class SteerResult:
    prompt: np.ndarray
    original: np.ndarray  # prompt + greedy continuation, no intervention
    clamped: np.ndarray  # prompt + greedy continuation under substitution
    logit_delta: np.ndarray  # mean |delta logit| per position over the original sequence
    mean_abs_delta: float


def _substituted_logits(lm: ToyLm, artifact: Artifact, tokens: np.ndarray,
                        feature_id: int, clamp_value: float | None) -> np.ndarray:
    _, resid = lm_forward(lm, tokens)
    x_raw = _layer_stack(resid, artifact.layer_ids)
    rec = artifact.reconstruct(x_raw)
    z = rec.z.copy()
    if clamp_value is not None:
        z[:, feature_id] = clamp_value
    layers, vecs, _ = artifact.substitution(x_raw, z=z)
    plan = PatchPlan.from_arrays(np.arange(len(tokens)), layers, vecs)
    return patched_forward(lm, tokens, plan)


def steer(lm: ToyLm, artifact: Artifact, tokens: Sequence[int], feature_id: int,
          clamp_value: float | None = 20.0, horizon: int = 16) -> SteerResult:
    """Clamp one latent at every position's routed layer and continue greedily.

    ``clamp_value=None`` substitutes the unedited reconstruction (the control).
    Logit deltas are taken against the clean model on the clean continuation so
    different clamp values are compared on the same tokens.
    """
    if not 0 <= feature_id < artifact.model.M:
        raise ValueError(f"feature_id {feature_id} outside [0, {artifact.model.M})")
    prompt = np.asarray(tokens, dtype=np.int64)
    max_seq = lm.config.max_seq
    horizon = max(0, min(horizon, max_seq - len(prompt)))
    original = greedy_continue(lm, prompt, horizon)
    seq = list(prompt)
    for _ in range(horizon):
        logits = _substituted_logits(lm, artifact, np.array(seq), feature_id, clamp_value)
        seq.append(int(np.argmax(logits[-1])))
    clean, _ = lm_forward(lm, original)
    edited = _substituted_logits(lm, artifact, original, feature_id, clamp_value)
    delta = np.abs(edited - clean).mean(axis=1)
    return SteerResult(prompt, original, np.array(seq, dtype=np.int64), delta, float(delta.mean()))


def decode_bytes(tokens: Sequence[int]) -> str:
    return bytes(int(t) for t in tokens if 0 <= int(t) < 256).decode("latin-1")
