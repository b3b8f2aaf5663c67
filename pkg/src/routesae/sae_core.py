"""Single-input sparse autoencoder with hand-written gradients.

Forward::

    u    = W_enc (x - b_pre)
    z    = relu(u)          or  topk(u)   (k largest signed values, kept verbatim)
    xhat = W_dec z + b_pre
    loss = ||x - xhat||^2  (+ l1 * ||z||_1 for the ReLU kind)

Batched functions take x of shape (n, d); batch losses are means over samples.
The TopK/ReLU selection mask is treated as constant in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .errors import DimensionMismatchError

ActivationKind = Literal["relu", "topk"]


@dataclass(frozen=True)
class SaeParams:
    W_enc: np.ndarray  # (M, d)
    b_pre: np.ndarray  # (d,)
    W_dec: np.ndarray  # (d, M)
    activation_kind: ActivationKind = "topk"
    k: int = 1

    def __post_init__(self):
        M, d = self.W_enc.shape
        if self.W_dec.shape != (d, M) or self.b_pre.shape != (d,):
            raise DimensionMismatchError(
                f"inconsistent SAE shapes W_enc={self.W_enc.shape}, "
                f"W_dec={self.W_dec.shape}, b_pre={self.b_pre.shape}"
            )
        if M < d:
            raise ValueError(f"latent width M={M} must be >= d={d}")
        if self.activation_kind not in ("relu", "topk"):
            raise ValueError(f"unknown activation kind {self.activation_kind!r}")
        if self.activation_kind == "topk" and not 1 <= self.k <= M:
            raise ValueError(f"k={self.k} outside [1, {M}]")

    @property
    def d(self) -> int:
        return self.W_enc.shape[1]

    @property
    def M(self) -> int:
        return self.W_enc.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W_enc": self.W_enc, "b_pre": self.b_pre, "W_dec": self.W_dec}


@dataclass(frozen=True)
class SparseCode:
    indices: np.ndarray
    values: np.ndarray
    M: int

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")

    @property
    def l0(self) -> int:
        return len(self.indices)

    def dense(self) -> np.ndarray:
        z = np.zeros(self.M, dtype=np.result_type(self.values, np.float64))
        z[self.indices] = self.values
        return z


@dataclass
class SaeGradients:
    g_W_enc: np.ndarray
    g_b_pre: np.ndarray
    g_W_dec: np.ndarray
    g_input: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W_enc": self.g_W_enc, "b_pre": self.g_b_pre, "W_dec": self.g_W_dec}


def topk_mask(u: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries along the last axis; ties go to the lower index."""
    M = u.shape[-1]
    mask = np.zeros(u.shape, dtype=bool)
    if k >= M:
        mask[...] = True
        return mask
    order = np.argsort(-u, axis=-1, kind="stable")[..., :k]
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def preactivations(params: SaeParams, x: np.ndarray) -> np.ndarray:
    return (x - params.b_pre) @ params.W_enc.T


def activate(params: SaeParams, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dense z, active mask)."""
    if params.activation_kind == "topk":
        active = topk_mask(u, params.k)
    else:
        active = u > 0
    return np.where(active, u, 0.0), active


def encode_dense(params: SaeParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return activate(params, preactivations(params, x))


def decode_dense(params: SaeParams, z: np.ndarray) -> np.ndarray:
    return z @ params.W_dec.T + params.b_pre


def encode(params: SaeParams, x: np.ndarray) -> SparseCode:
    x = np.asarray(x)
    if x.shape != (params.d,):
        raise DimensionMismatchError(f"expected x of width {params.d}, got {x.shape}")
    z, active = encode_dense(params, x)
    idx = np.flatnonzero(active)
    return SparseCode(indices=idx, values=z[idx], M=params.M)


def decode(params: SaeParams, code: SparseCode) -> np.ndarray:
    if code.M != params.M:
        raise DimensionMismatchError(f"code width {code.M} != M={params.M}")
    idx = np.asarray(code.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= params.M):
        raise IndexError(f"latent index out of range [0, {params.M})")
    return params.W_dec[:, idx] @ np.asarray(code.values) + params.b_pre


def loss_mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Squared L2 error summed over components; batches (2-D) are averaged over rows."""
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionMismatchError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    per_sample = ((x - x_hat) ** 2).sum(axis=-1)
    return float(np.mean(per_sample))


def sae_backward_dense(
    params: SaeParams,
    x: np.ndarray,
    z: np.ndarray,
    active: np.ndarray,
    l1_coefficient: float = 0.0,
) -> tuple[SaeGradients, float]:
    """Gradients of the batch-mean loss for x of shape (n, d) given its code (z, active).

    The code must come from ``encode_dense(params, x)``; this is not re-checked.
    ``g_input`` is per-sample, shape (n, d), and includes both the target path
    and the encoder path.
    """
    n = x.shape[0]
    x_hat = decode_dense(params, z)
    resid = x_hat - x
    per_sample = (resid**2).sum(axis=1)
    lam = l1_coefficient if params.activation_kind == "relu" else 0.0
    if lam:
        per_sample = per_sample + lam * np.abs(z).sum(axis=1)
    loss = float(per_sample.mean())

    g_xhat = (2.0 / n) * resid
    g_W_dec = g_xhat.T @ z
    g_z = g_xhat @ params.W_dec
    if lam:
        g_z = g_z + (lam / n) * np.sign(z)
    g_u = np.where(active, g_z, 0.0)
    centered = x - params.b_pre
    g_W_enc = g_u.T @ centered
    g_centered = g_u @ params.W_enc
    g_b_pre = g_xhat.sum(axis=0) - g_centered.sum(axis=0)
    g_input = g_centered - g_xhat
    return SaeGradients(g_W_enc, g_b_pre, g_W_dec, g_input), loss


def sae_backward(
    params: SaeParams, x: np.ndarray, code: SparseCode, l1_coefficient: float = 0.0
) -> tuple[SaeGradients, float]:
    """Single-sample form of ``sae_backward_dense``."""
    z = code.dense()
    active = np.zeros(params.M, dtype=bool)
    active[code.indices] = True
    grads, loss = sae_backward_dense(params, x[None, :], z[None, :], active[None, :], l1_coefficient)
    grads.g_input = grads.g_input[0]
    return grads, loss


def renorm_decoder(params: SaeParams) -> SaeParams:
    return replace(params, W_dec=unit_columns(params.W_dec))


def unit_columns(W: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(W, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"decoder column {int(zero[0])} has zero norm")
    return W / norms


def init_params(
    d: int,
    M: int,
    seed: int,
    activation_kind: ActivationKind = "topk",
    k: int = 1,
    dtype=np.float64,
) -> SaeParams:
    if M < d:
        raise ValueError(f"latent width M={M} must be >= d={d}")
    rng = np.random.default_rng(seed)
    W_dec = unit_columns(rng.standard_normal((d, M))).astype(dtype)
    return SaeParams(
        W_enc=W_dec.T.copy(),
        b_pre=np.zeros(d, dtype=dtype),
        W_dec=W_dec,
        activation_kind=activation_kind,
        k=k,
    )


def param_count(params: SaeParams) -> int:
    return sum(t.size for t in params.tensors().values())
