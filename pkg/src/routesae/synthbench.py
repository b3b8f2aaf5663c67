"""Planted-dictionary multi-layer activations with known per-feature layer profiles.

Each planted feature f has a unit direction D_f and a peak layer. A token draws
``sparsity_s`` distinct features with positive coefficients a_f and emits, per
layer i,

    x_i = sum_f a_f * w_f(i) * D_f + noise,   w_f(i) = max(0, 1 - |i - peak_f| / width)

so some features are strongest in shallow layers and others in deep ones.
"""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .activation_store import RecordBatch, ShardHeader, write_shard
from .errors import ShardCorruptionError, ShardFormatError

GT_MAGIC = b"RSGT"
GT_VERSION = 1
DICTIONARY_TAG = "synth-dictionary"
_BLOCK = 1024  # tokens per generator block; token t lives in block t // _BLOCK


@dataclass(frozen=True)
class SyntheticSpec:
    M_true: int = 64
    d: int = 32
    L: int = 4
    sparsity_s: int = 4
    profile_width: float = 2.0
    coeff_low: float = 0.5
    coeff_high: float = 1.5
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.sparsity_s <= self.M_true:
            raise ValueError(f"sparsity_s={self.sparsity_s} outside [1, {self.M_true}]")
        if self.L < 1 or self.d < 1:
            raise ValueError("L and d must be positive")
        if self.profile_width <= 0:
            raise ValueError("profile_width must be positive")
        if not 0 < self.coeff_low <= self.coeff_high:
            raise ValueError("coefficients must be positive with low <= high")

    def peak_layers(self) -> np.ndarray:
        return np.arange(self.M_true) % self.L


@dataclass
class GroundTruth:
    feature_ids: np.ndarray  # (n, s)
    coefficients: np.ndarray  # (n, s)
    dominant: np.ndarray  # (n,) feature id with the largest coefficient

    def __len__(self) -> int:
        return len(self.dominant)


def gen_dictionary(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm rows (M_true, d) and round-robin peak layers."""
    rng = np.random.default_rng([spec.seed, 0])
    D = rng.standard_normal((spec.M_true, spec.d))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    return D, spec.peak_layers()


def layer_profile(spec: SyntheticSpec, peaks: np.ndarray) -> np.ndarray:
    """Weights w_f(i) as an array (M_true, L)."""
    dist = np.abs(np.arange(spec.L)[None, :] - np.asarray(peaks)[:, None])
    return np.maximum(0.0, 1.0 - dist / spec.profile_width)


def _gen_block(spec: SyntheticSpec, block: int):
    rng = np.random.default_rng([spec.seed, 1, block])
    ids = np.argsort(rng.random((_BLOCK, spec.M_true)), axis=1)[:, : spec.sparsity_s]
    coeffs = rng.uniform(spec.coeff_low, spec.coeff_high, size=(_BLOCK, spec.sparsity_s))
    noise = rng.standard_normal((_BLOCK, spec.L, spec.d)) * spec.noise_sigma
    return ids, coeffs, noise


def synthesize(spec: SyntheticSpec, D: np.ndarray, ids: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Noise-free activations (n, L, d) for given ground-truth codes."""
    W = layer_profile(spec, spec.peak_layers())
    # (n, s, L) layer weights times coefficients, then combine directions
    weights = coeffs[:, :, None] * W[ids]
    return np.einsum("nsl,nsd->nld", weights, D[ids])


def gen_samples(spec: SyntheticSpec, n: int, start: int = 0) -> tuple[np.ndarray, GroundTruth]:
    """Tokens ``start .. start+n-1``; each token's draw depends only on (seed, index)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    D, _ = gen_dictionary(spec)
    first, last = start // _BLOCK, (start + n - 1) // _BLOCK
    parts = [_gen_block(spec, b) for b in range(first, last + 1)]
    ids = np.concatenate([p[0] for p in parts])
    coeffs = np.concatenate([p[1] for p in parts])
    noise = np.concatenate([p[2] for p in parts])
    lo = start - first * _BLOCK
    ids, coeffs, noise = ids[lo : lo + n], coeffs[lo : lo + n], noise[lo : lo + n]
    x = synthesize(spec, D, ids, coeffs) + noise
    dominant = ids[np.arange(n), np.argmax(coeffs, axis=1)]
    return x, GroundTruth(ids, coeffs, dominant)


def write_synthetic(spec: SyntheticSpec, n: int, out_dir: str | os.PathLike, name: str = "synth",
                    start: int = 0) -> dict[str, Path]:
    """Shard, ground-truth sidecar and dictionary file for tokens [start, start+n)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x, gt = gen_samples(spec, n, start)
    header = ShardHeader(d=spec.d, layer_ids=tuple(range(spec.L)), source_tag=f"synthbench:{name}")
    idx = np.arange(start, start + n, dtype=np.int64)
    batch = RecordBatch(x=x.astype(np.float32), sequence_id=idx, position=np.zeros(n, dtype=np.int64),
                        token_id=np.full(n, -1, dtype=np.int64))
    paths = {"shard": out_dir / f"{name}.rsae", "truth": out_dir / f"{name}.gt",
             "dictionary": out_dir / "dictionary.rste"}
    write_shard(header, batch, paths["shard"])
    write_ground_truth(gt, spec.M_true, paths["truth"])
    D, peaks = gen_dictionary(spec)
    tensorio.save(tensorio.TensorFile(DICTIONARY_TAG, {"spec": asdict(spec)},
                                      {"dictionary": D, "peak_layer": peaks.astype(np.int64)}),
                  paths["dictionary"])
    return paths


def write_ground_truth(gt: GroundTruth, M_true: int, path: str | os.PathLike) -> int:
    """Sidecar: "RSGT" | version u32 | s u32 | M_true u32 | n u64, then per token
    s x u32 ids | s x f32 coefficients | u32 dominant id."""
    n, s = gt.feature_ids.shape
    rec = np.dtype([("ids", "<u4", (s,)), ("coeffs", "<f4", (s,)), ("dominant", "<u4")])
    out = np.empty(n, dtype=rec)
    out["ids"] = gt.feature_ids
    out["coeffs"] = gt.coefficients
    out["dominant"] = gt.dominant
    head = GT_MAGIC + struct.pack("<IIIQ", GT_VERSION, s, M_true, n)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(out.tobytes())
    return len(head) + out.nbytes


def read_ground_truth(path: str | os.PathLike) -> GroundTruth:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != GT_MAGIC:
        raise ShardFormatError(f"{path}: bad ground-truth magic")
    version, s, _, n = struct.unpack("<IIIQ", buf[4:24])
    if version != GT_VERSION:
        raise ShardFormatError(f"{path}: unsupported ground-truth version {version}")
    rec = np.dtype([("ids", "<u4", (s,)), ("coeffs", "<f4", (s,)), ("dominant", "<u4")])
    if len(buf) - 24 < n * rec.itemsize:
        raise ShardCorruptionError(f"{path}: truncated ground truth", 24 + (len(buf) - 24) // rec.itemsize * rec.itemsize)
    raw = np.frombuffer(buf[24 : 24 + n * rec.itemsize], dtype=rec)
    return GroundTruth(raw["ids"].astype(np.int64), raw["coeffs"].astype(np.float64),
                       raw["dominant"].astype(np.int64))


@dataclass
class RecoveryReport:
    best_cos: np.ndarray  # per planted feature, |cos| of its greedy match (0 if unmatched)
    match: np.ndarray  # learned column index per planted feature, -1 if unmatched
    mean_cos: float
    matched_fraction: float
    tau: float


def abs_cosine(planted: np.ndarray, learned_decoder: np.ndarray) -> np.ndarray:
    """|cos| between planted rows (M_true, d) and learned decoder columns (d, M)."""
    P = planted / np.linalg.norm(planted, axis=1, keepdims=True)
    Q = learned_decoder / np.linalg.norm(learned_decoder, axis=0, keepdims=True)
    return np.abs(P @ Q)


def recovery_report(planted: np.ndarray, learned_decoder: np.ndarray, tau: float = 0.9) -> RecoveryReport:
    """Greedy one-to-one matching by descending |cos|."""
    if planted.shape[1] != learned_decoder.shape[0]:
        raise ValueError("planted rows and decoder columns differ in width")
    C = abs_cosine(planted, learned_decoder)
    n_planted, n_learned = C.shape
    order = np.argsort(-C, axis=None, kind="stable")
    match = np.full(n_planted, -1, dtype=np.int64)
    used = np.zeros(n_learned, dtype=bool)
    remaining = min(n_planted, n_learned)
    for flat in order:
        if remaining == 0:
            break
        i, j = divmod(int(flat), n_learned)
        if match[i] < 0 and not used[j]:
            match[i] = j
            used[j] = True
            remaining -= 1
    best = np.where(match >= 0, C[np.arange(n_planted), np.maximum(match, 0)], 0.0)
    return RecoveryReport(best, match, float(best.mean()), float((best >= tau).mean()), tau)


def routing_accuracy(truth: GroundTruth, selected_layer: np.ndarray, peaks: np.ndarray,
                     L: int | None = None) -> tuple[float, np.ndarray]:
    """Fraction of tokens routed to the peak layer of their largest-coefficient
    feature, over tokens where that feature is unique; plus the selection histogram."""
    selected_layer = np.asarray(selected_layer)
    if len(selected_layer) != len(truth):
        raise ValueError("decisions and ground truth differ in length")
    L = int(peaks.max()) + 1 if L is None else L
    top = np.sort(truth.coefficients, axis=1)
    unique = top[:, -1] > top[:, -2] if top.shape[1] > 1 else np.ones(len(truth), dtype=bool)
    target = np.asarray(peaks)[truth.dominant]
    hits = (selected_layer == target)[unique]
    acc = float(hits.mean()) if hits.size else float("nan")
    hist = np.bincount(selected_layer, minlength=L) / len(selected_layer)
    return acc, hist
