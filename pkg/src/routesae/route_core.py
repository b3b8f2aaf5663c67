"""Router plus shared TopK SAE.

Per token with layer stack x (L, d)::

    v       = sum_i x_i
    alpha   = W_router v
    p       = softmax(alpha)
    hard:   i* = argmax p,      x_route = p[i*] * x[i*]
    soft:   x_route = sum_i p_i x_i
    random: p = 1/L, i* drawn uniformly, x_route = x[i*] / L

and then x_route goes through the shared SAE. The router input v is treated as
constant (the host model is frozen); the argmax is held fixed in the backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import sae_core
from .errors import DimensionMismatchError
from .sae_core import SaeGradients, SaeParams

RouteMode = Literal["hard", "soft", "random"]


@dataclass(frozen=True)
class RouterParams:
    W_router: np.ndarray  # (L, d)
    mode: RouteMode = "hard"

    def __post_init__(self):
        if self.W_router.ndim != 2 or self.W_router.shape[0] < 1:
            raise DimensionMismatchError(f"W_router must be (L, d), got {self.W_router.shape}")
        if self.mode not in ("hard", "soft", "random"):
            raise ValueError(f"unknown routing mode {self.mode!r}")

    @property
    def L(self) -> int:
        return self.W_router.shape[0]

    @property
    def d(self) -> int:
        return self.W_router.shape[1]


@dataclass
class RouteDecision:
    probs: np.ndarray  # (..., L)
    selected_layer: np.ndarray  # (...,) int
    x_route: np.ndarray  # (..., d)
    v: np.ndarray  # (..., d)

    @property
    def selected_prob(self) -> np.ndarray:
        return np.take_along_axis(self.probs, self.selected_layer[..., None], axis=-1)[..., 0]


@dataclass
class RouteForward:
    decision: RouteDecision
    alpha: np.ndarray
    z: np.ndarray
    active: np.ndarray
    x_hat: np.ndarray
    loss: float


def init_router(L: int, d: int, seed: int, mode: RouteMode = "hard", scale: float = 0.0) -> RouterParams:
    """Zero router by default (uniform probabilities); ``scale`` adds Gaussian noise."""
    W = np.zeros((L, d))
    if scale:
        W = scale * np.random.default_rng(seed).standard_normal((L, d))
    return RouterParams(W, mode)


def pool_sum(x_by_layer: np.ndarray) -> np.ndarray:
    x = np.asarray(x_by_layer)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ValueError("pool_sum needs at least one layer")
    return x.sum(axis=-2)


def softmax(alpha: np.ndarray) -> np.ndarray:
    shifted = alpha - alpha.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_logits(router: RouterParams, v: np.ndarray) -> np.ndarray:
    return v @ router.W_router.T


def layer_probs(router: RouterParams, v: np.ndarray) -> np.ndarray:
    if router.mode == "random":
        return np.full(np.shape(v)[:-1] + (router.L,), 1.0 / router.L)
    return softmax(layer_logits(router, v))


def route(
    x_by_layer: np.ndarray,
    probs: np.ndarray,
    mode: RouteMode,
    rng: np.random.Generator | None = None,
) -> RouteDecision:
    """Combine the layer stack into the SAE input.

    Works on a single token (L, d) or a batch (n, L, d). Random mode needs
    ``rng`` to draw the layer.
    """
    x = np.asarray(x_by_layer)
    probs = np.asarray(probs)
    if x.shape[-2] != probs.shape[-1]:
        raise DimensionMismatchError(f"{x.shape[-2]} layers but {probs.shape[-1]} probabilities")
    v = x.sum(axis=-2)
    if mode == "random":
        if rng is None:
            raise ValueError("random routing needs an rng")
        sel = rng.integers(0, x.shape[-2], size=x.shape[:-2])
    else:
        sel = np.argmax(probs, axis=-1)  # first maximum wins
    sel = np.asarray(sel, dtype=np.int64)
    if mode == "soft":
        x_route = (probs[..., :, None] * x).sum(axis=-2)
    else:
        x_sel = np.take_along_axis(x, sel[..., None, None], axis=-2)[..., 0, :]
        p_sel = np.take_along_axis(probs, sel[..., None], axis=-1)
        x_route = p_sel * x_sel
    return RouteDecision(probs=probs, selected_layer=sel, x_route=x_route, v=v)


def routesae_forward(
    router: RouterParams,
    sae: SaeParams,
    x_by_layer: np.ndarray,
    rng: np.random.Generator | None = None,
) -> RouteForward:
    """Batched forward on x of shape (n, L, d); the loss is the batch mean."""
    if sae.activation_kind != "topk":
        raise ValueError("the shared SAE must be a TopK SAE")
    x = np.asarray(x_by_layer)
    if x.shape[-2:] != (router.L, sae.d):
        raise DimensionMismatchError(f"expected (n, {router.L}, {sae.d}), got {x.shape}")
    v = pool_sum(x)
    alpha = layer_logits(router, v)
    probs = layer_probs(router, v)
    decision = route(x, probs, router.mode, rng)
    z, active = sae_core.encode_dense(sae, decision.x_route)
    x_hat = sae_core.decode_dense(sae, z)
    loss = float(((decision.x_route - x_hat) ** 2).sum(axis=-1).mean())
    return RouteForward(decision, alpha, z, active, x_hat, loss)


def routesae_backward(
    router: RouterParams,
    sae: SaeParams,
    x_by_layer: np.ndarray,
    cache: RouteForward,
) -> tuple[SaeGradients, np.ndarray, float]:
    """Gradients for SAE and router parameters; ``cache`` must be the matching forward."""
    x = np.asarray(x_by_layer)
    dec = cache.decision
    sae_grads, loss = sae_core.sae_backward_dense(sae, dec.x_route, cache.z, cache.active)
    g_route = sae_grads.g_input  # (n, d)
    if router.mode == "random":
        g_alpha = np.zeros_like(dec.probs)
    elif router.mode == "hard":
        sel = dec.selected_layer
        x_sel = np.take_along_axis(x, sel[:, None, None], axis=1)[:, 0, :]
        g_psel = (g_route * x_sel).sum(axis=1)
        p = dec.probs
        p_sel = dec.selected_prob
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, sel[:, None], 1.0, axis=1)
        g_alpha = (g_psel * p_sel)[:, None] * (onehot - p)
    else:
        g_p = np.einsum("nd,nld->nl", g_route, x)
        p = dec.probs
        g_alpha = p * (g_p - (p * g_p).sum(axis=1, keepdims=True))
    g_W_router = g_alpha.T @ dec.v
    return sae_grads, g_W_router, loss


def substitution_vector(decision: RouteDecision, x_hat_route: np.ndarray, mode: RouteMode) -> np.ndarray:
    """Map a reconstruction of x_route back to the selected layer's scale.

    Hard and random routing scale the chosen layer by its probability, so the
    reconstruction is divided by that probability before substitution. Soft
    routing has no single-layer inverse; its reconstruction is used as is.
    """
    if mode == "soft":
        return x_hat_route
    return x_hat_route / decision.selected_prob[..., None]
