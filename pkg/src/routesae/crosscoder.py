"""Crosscoder baseline, rebuilt from its verbal description.

Each layer has its own encoder, decoder and bias; encoder outputs are summed
before a single TopK, so all layers share one sparse code::

    u      = sum_i W_enc[i] (x_i - b[i])
    z      = topk(u)
    xhat_i = W_dec[i] z + b[i]
    loss   = sum_i ||x_i - xhat_i||^2
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatchError
from .sae_core import topk_mask, unit_columns


@dataclass(frozen=True)
class CrosscoderParams:
    W_enc: np.ndarray  # (L, M, d)
    W_dec: np.ndarray  # (L, d, M)
    b: np.ndarray  # (L, d)
    k: int

    def __post_init__(self):
        L, M, d = self.W_enc.shape
        if self.W_dec.shape != (L, d, M) or self.b.shape != (L, d):
            raise DimensionMismatchError(
                f"inconsistent crosscoder shapes {self.W_enc.shape}, {self.W_dec.shape}, {self.b.shape}"
            )
        if not 1 <= self.k <= M:
            raise ValueError(f"k={self.k} outside [1, {M}]")

    @property
    def L(self) -> int:
        return self.W_enc.shape[0]

    @property
    def M(self) -> int:
        return self.W_enc.shape[1]

    @property
    def d(self) -> int:
        return self.W_enc.shape[2]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W_enc": self.W_enc, "W_dec": self.W_dec, "b": self.b}


@dataclass
class CrosscoderForward:
    z: np.ndarray
    active: np.ndarray
    x_hat: np.ndarray  # (n, L, d)
    layer_losses: np.ndarray  # (L,) batch means
    loss: float


@dataclass
class CrosscoderGradients:
    g_W_enc: np.ndarray
    g_W_dec: np.ndarray
    g_b: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W_enc": self.g_W_enc, "W_dec": self.g_W_dec, "b": self.g_b}


def init_crosscoder(L: int, d: int, M: int, k: int, seed: int) -> CrosscoderParams:
    if M < d:
        raise ValueError(f"latent width M={M} must be >= d={d}")
    rng = np.random.default_rng(seed)
    W_dec = np.stack([unit_columns(rng.standard_normal((d, M))) for _ in range(L)])
    # each layer's encoder is its decoder transposed, scaled so the summed
    # pre-activation has roughly single-layer magnitude
    W_enc = np.transpose(W_dec, (0, 2, 1)) / L
    return CrosscoderParams(W_enc.copy(), W_dec, np.zeros((L, d)), k)


def _check(params: CrosscoderParams, x: np.ndarray) -> None:
    if x.ndim != 3 or x.shape[1:] != (params.L, params.d):
        raise DimensionMismatchError(f"expected (n, {params.L}, {params.d}), got {x.shape}")


def cc_preactivations(params: CrosscoderParams, x: np.ndarray) -> np.ndarray:
    u = (x[:, 0] - params.b[0]) @ params.W_enc[0].T
    for i in range(1, params.L):
        u = u + (x[:, i] - params.b[i]) @ params.W_enc[i].T
    return u


def cc_decode(params: CrosscoderParams, z: np.ndarray) -> np.ndarray:
    return np.stack([z @ params.W_dec[i].T + params.b[i] for i in range(params.L)], axis=1)


def cc_forward(params: CrosscoderParams, x_by_layer: np.ndarray) -> CrosscoderForward:
    x = np.asarray(x_by_layer)
    _check(params, x)
    u = cc_preactivations(params, x)
    active = topk_mask(u, params.k)
    z = np.where(active, u, 0.0)
    x_hat = cc_decode(params, z)
    layer_losses = ((x - x_hat) ** 2).sum(axis=2).mean(axis=0)
    loss = float(((x - x_hat) ** 2).sum(axis=(1, 2)).mean()) if params.L > 1 else float(layer_losses[0])
    return CrosscoderForward(z, active, x_hat, layer_losses, loss)


def cc_backward(
    params: CrosscoderParams, x_by_layer: np.ndarray, cache: CrosscoderForward
) -> tuple[CrosscoderGradients, float]:
    x = np.asarray(x_by_layer)
    n = x.shape[0]
    g_W_enc = np.empty_like(params.W_enc)
    g_W_dec = np.empty_like(params.W_dec)
    g_b = np.empty_like(params.b)
    g_xhat = [(2.0 / n) * (cache.x_hat[:, i] - x[:, i]) for i in range(params.L)]
    g_z = g_xhat[0] @ params.W_dec[0]
    for i in range(1, params.L):
        g_z = g_z + g_xhat[i] @ params.W_dec[i]
    g_u = np.where(cache.active, g_z, 0.0)
    for i in range(params.L):
        g_W_dec[i] = g_xhat[i].T @ cache.z
        g_W_enc[i] = g_u.T @ (x[:, i] - params.b[i])
        g_b[i] = g_xhat[i].sum(axis=0) - (g_u @ params.W_enc[i]).sum(axis=0)
    return CrosscoderGradients(g_W_enc, g_W_dec, g_b), cache.loss


def cc_renorm_decoder(params: CrosscoderParams) -> CrosscoderParams:
    return replace(params, W_dec=np.stack([unit_columns(W) for W in params.W_dec]))


def cc_param_count(params: CrosscoderParams) -> int:
    return sum(t.size for t in params.tensors().values())
