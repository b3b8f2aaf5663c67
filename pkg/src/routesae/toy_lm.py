"""A small frozen byte-level transformer for harvesting and patching residual streams.

Pre-norm blocks (causal multi-head attention, then a GELU MLP), learned absolute
position embeddings, final LayerNorm and an untied unembedding. The residual
stream "at layer i" is the output of block i, after both residual additions.
Weights are seeded random draws; nothing here is trained.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensorio
from .activation_store import RecordBatch, ShardHeader, read_header, write_shard
from .errors import DataError

WEIGHTS_TAG = "toy-lm"
LN_EPS = 1e-5


@dataclass(frozen=True)
class ToyLmConfig:
    vocab: int = 256
    d_model: int = 32
    n_layers: int = 8
    n_heads: int = 4
    mlp_ratio: int = 4
    max_seq: int = 128
    seed: int = 0
    # if > 0, each token embedding is a sparse sum of this many planted unit directions
    planted_atoms: int = 0
    atoms_per_token: int = 2
    branch_scale: float = 1.0  # multiplies W_o and W_out; small values keep the embedding visible downstream

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")


@dataclass
class ToyLm:
    config: ToyLmConfig
    weights: dict[str, np.ndarray]

    def w(self, name: str) -> np.ndarray:
        return self.weights[name]


def routing_range(n_layers: int) -> list[int]:
    """Middle layers from 1/4 to 3/4 depth, half-open: 16 layers -> 4..11."""
    return list(range(n_layers // 4, 3 * n_layers // 4))


def baseline_layer(n_layers: int) -> int:
    """Single-layer SAE layer at about 3/4 depth (0-based; 16 layers -> 11)."""
    return 3 * n_layers // 4 - 1


def planted_embedding(config: ToyLmConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Embedding table built from a planted dictionary.

    Returns (embedding (vocab, d), atoms (A, d) unit rows, atom ids per token (vocab, m)).
    """
    rng = np.random.default_rng([config.seed, 7])
    atoms = rng.standard_normal((config.planted_atoms, config.d_model))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    ids = np.argsort(rng.random((config.vocab, config.planted_atoms)), axis=1)[:, : config.atoms_per_token]
    coeffs = rng.uniform(0.5, 1.5, size=ids.shape)
    emb = np.einsum("tm,tmd->td", coeffs, atoms[ids])
    return emb, atoms, ids


def init_toy_lm(config: ToyLmConfig = ToyLmConfig()) -> ToyLm:
    rng = np.random.default_rng(config.seed)
    d, h = config.d_model, config.d_model * config.mlp_ratio
    s = 1.0 / np.sqrt(d)
    w = {}
    if config.planted_atoms:
        w["embed"] = planted_embedding(config)[0]
    else:
        w["embed"] = rng.standard_normal((config.vocab, d))
    w["pos"] = 0.1 * rng.standard_normal((config.max_seq, d))
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        w[p + "ln1.g"] = np.ones(d)
        w[p + "ln1.b"] = np.zeros(d)
        for name in ("W_q", "W_k", "W_v", "W_o"):
            w[p + name] = s * rng.standard_normal((d, d))
        w[p + "W_o"] *= config.branch_scale
        w[p + "ln2.g"] = np.ones(d)
        w[p + "ln2.b"] = np.zeros(d)
        w[p + "W_in"] = s * rng.standard_normal((d, h))
        w[p + "b_in"] = np.zeros(h)
        w[p + "W_out"] = (config.branch_scale / np.sqrt(h)) * rng.standard_normal((h, d))
        w[p + "b_out"] = np.zeros(d)
    w["ln_f.g"] = np.ones(d)
    w["ln_f.b"] = np.zeros(d)
    w["unembed"] = s * rng.standard_normal((d, config.vocab))
    return ToyLm(config, w)


def save_toy_lm(lm: ToyLm, path: str | os.PathLike) -> None:
    tensorio.save(tensorio.TensorFile(WEIGHTS_TAG, {"config": asdict(lm.config)}, lm.weights), path)


def load_toy_lm(path: str | os.PathLike) -> ToyLm:
    tf = tensorio.load(path, expect_tag=WEIGHTS_TAG)
    return ToyLm(ToyLmConfig(**tf.meta["config"]), tf.tensors)


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def attention(lm: ToyLm, i: int, h: np.ndarray, return_weights: bool = False):
    cfg = lm.config
    p = f"blocks.{i}."
    T, d = h.shape
    hd = d // cfg.n_heads
    q = (h @ lm.w(p + "W_q")).reshape(T, cfg.n_heads, hd).transpose(1, 0, 2)
    k = (h @ lm.w(p + "W_k")).reshape(T, cfg.n_heads, hd).transpose(1, 0, 2)
    v = (h @ lm.w(p + "W_v")).reshape(T, cfg.n_heads, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd)
    mask = np.triu(np.ones((T, T), dtype=bool), 1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    out = (att @ v).transpose(1, 0, 2).reshape(T, d) @ lm.w(p + "W_o")
    return (out, att) if return_weights else out


def block(lm: ToyLm, i: int, x: np.ndarray, debug: list | None = None) -> np.ndarray:
    p = f"blocks.{i}."
    a = attention(lm, i, layer_norm(x, lm.w(p + "ln1.g"), lm.w(p + "ln1.b")), debug is not None)
    if debug is not None:
        a, att = a
        debug.append(att)
    x = x + a
    hidden = gelu(layer_norm(x, lm.w(p + "ln2.g"), lm.w(p + "ln2.b")) @ lm.w(p + "W_in") + lm.w(p + "b_in"))
    return x + hidden @ lm.w(p + "W_out") + lm.w(p + "b_out")


def lm_head(lm: ToyLm, resid: np.ndarray) -> np.ndarray:
    return layer_norm(resid, lm.w("ln_f.g"), lm.w("ln_f.b")) @ lm.w("unembed")


def _check_tokens(lm: ToyLm, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise DataError("tokens must be a non-empty 1-D sequence")
    if len(tokens) > lm.config.max_seq:
        raise DataError(f"sequence length {len(tokens)} exceeds max_seq={lm.config.max_seq}")
    if tokens.min() < 0 or tokens.max() >= lm.config.vocab:
        raise DataError(f"token ids must lie in [0, {lm.config.vocab})")
    return tokens


def embed(lm: ToyLm, tokens: np.ndarray) -> np.ndarray:
    return lm.w("embed")[tokens] + lm.w("pos")[: len(tokens)]


def lm_forward(lm: ToyLm, tokens, debug: bool = False):
    """Returns (logits (T, vocab), residual streams (n_layers, T, d)).

    With ``debug=True`` a third element lists per-layer attention weights (heads, T, T).
    """
    tokens = _check_tokens(lm, tokens)
    x = embed(lm, tokens)
    att: list | None = [] if debug else None
    resid = np.empty((lm.config.n_layers,) + x.shape)
    for i in range(lm.config.n_layers):
        x = block(lm, i, x, att)
        resid[i] = x
    logits = lm_head(lm, x)
    return (logits, resid, att) if debug else (logits, resid)


@dataclass
class PatchPlan:
    """Replacement vectors keyed by (position, layer)."""

    entries: dict[tuple[int, int], np.ndarray]

    @classmethod
    def from_arrays(cls, positions, layers, vectors) -> "PatchPlan":
        entries = {}
        for p, l, v in zip(positions, layers, vectors):
            key = (int(p), int(l))
            if key in entries:
                raise DataError(f"duplicate patch at position {key[0]}, layer {key[1]}")
            entries[key] = np.asarray(v)
        return cls(entries)

    def validate(self, T: int, n_layers: int, d: int) -> None:
        bad = [
            key for key, vec in self.entries.items()
            if not (0 <= key[0] < T and 0 <= key[1] < n_layers and np.shape(vec) == (d,))
        ]
        if bad:
            raise DataError(f"invalid patch entries (position, layer): {sorted(bad)}")


def patched_forward(lm: ToyLm, tokens, plan: PatchPlan) -> np.ndarray:
    """Like ``lm_forward`` but each planned residual vector replaces the block
    output at (position, layer) before later blocks read it."""
    tokens = _check_tokens(lm, tokens)
    plan.validate(len(tokens), lm.config.n_layers, lm.config.d_model)
    by_layer: dict[int, list[tuple[int, np.ndarray]]] = {}
    for (pos, layer), vec in plan.entries.items():
        by_layer.setdefault(layer, []).append((pos, vec))
    x = embed(lm, tokens)
    for i in range(lm.config.n_layers):
        x = block(lm, i, x)
        for pos, vec in by_layer.get(i, ()):
            x[pos] = vec
    return lm_head(lm, x)


def harvest(
    lm: ToyLm,
    sequences: Iterable[Sequence[int]],
    layer_ids: Sequence[int],
    out_path: str | os.PathLike,
    source_tag: str = "toy-lm",
) -> ShardHeader:
    """Run each sequence and write one record per token with the chosen layers."""
    layer_ids = list(layer_ids)
    if not layer_ids or min(layer_ids) < 0 or max(layer_ids) >= lm.config.n_layers:
        raise DataError(f"layer ids {layer_ids} outside [0, {lm.config.n_layers})")
    header = ShardHeader(d=lm.config.d_model, layer_ids=tuple(layer_ids), has_token_ids=True,
                         source_tag=source_tag)

    def batches():
        for seq_id, seq in enumerate(sequences):
            tokens = _check_tokens(lm, seq)
            _, resid = lm_forward(lm, tokens)
            T = len(tokens)
            yield RecordBatch(
                x=resid[layer_ids].transpose(1, 0, 2).astype(np.float32),
                sequence_id=np.full(T, seq_id, dtype=np.int64),
                position=np.arange(T, dtype=np.int64),
                token_id=tokens,
            )

    write_shard(header, batches(), out_path)
    return read_header(out_path)


def synthetic_token_stream(n_seqs: int, seq_len: int, seed: int = 0, alphabet: bytes | None = None) -> list[np.ndarray]:
    """Byte sequences from a seeded first-order Markov chain over a small alphabet."""
    alphabet = alphabet or b"abcdefghijklmnopqrstuvwxyz ,."
    a = np.frombuffer(alphabet, dtype=np.uint8).astype(np.int64)
    rng = np.random.default_rng([seed, 11])
    # sparse-ish transition matrix so sequences have structure
    logits = rng.standard_normal((len(a), len(a))) * 2.0
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    cum = P.cumsum(axis=1)
    seqs = []
    for _ in range(n_seqs):
        state = int(rng.integers(len(a)))
        u = rng.random(seq_len)
        out = np.empty(seq_len, dtype=np.int64)
        for t in range(seq_len):
            out[t] = a[state]
            state = min(int(np.searchsorted(cum[state], u[t])), len(a) - 1)
        seqs.append(out)
    return seqs


def load_token_file(path: str | os.PathLike, seq_len: int, fmt: str = "bytes") -> list[np.ndarray]:
    """Split a raw byte file or a little-endian u32 token file into sequences."""
    raw = Path(path).read_bytes()
    if fmt == "bytes":
        tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    elif fmt == "u32":
        if len(raw) % 4:
            raise DataError(f"{path}: u32 token file length {len(raw)} is not a multiple of 4")
        tokens = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    else:
        raise ValueError(f"unknown token format {fmt!r}")
    return [tokens[i : i + seq_len] for i in range(0, len(tokens), seq_len) if len(tokens[i : i + seq_len])]


def greedy_continue(lm: ToyLm, tokens, steps: int) -> np.ndarray:
    seq = list(np.asarray(tokens, dtype=np.int64))
    for _ in range(steps):
        logits, _ = lm_forward(lm, seq[-lm.config.max_seq :])
        seq.append(int(np.argmax(logits[-1])))
    return np.array(seq, dtype=np.int64)
