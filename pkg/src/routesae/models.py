"""Architecture wrappers: one object per trainable family with a uniform surface.

Every model consumes normalized layer stacks of shape (n, L, d) and exposes

* ``tensors()`` / ``with_tensors()`` for the optimizer and checkpoints,
* ``loss_and_grads()`` for training,
* ``reconstruct()`` for evaluation, returning the code, the vector the SAE
  actually saw, its reconstruction, the layer it belongs to, and the vector to
  substitute back into the host model at that layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import crosscoder as cc
from . import route_core, sae_core
from .route_core import RouterParams
from .sae_core import SaeParams

ARCHITECTURES = ("relu", "topk", "route-hard", "route-soft", "route-random", "crosscoder")
ROUTE_MODES = {"route-hard": "hard", "route-soft": "soft", "route-random": "random"}


@dataclass
class StepStats:
    loss: float
    l0: float
    selected_layer: np.ndarray | None = None


@dataclass
class Reconstruction:
    z: np.ndarray  # (n, M) dense code
    active: np.ndarray  # (n, M)
    x_in: np.ndarray  # what the encoder reconstructs, (n, d) or (n, L, d)
    x_hat: np.ndarray
    layer: np.ndarray  # (n,) index into the routed layer stack
    substitute: np.ndarray | None  # (n, d), normalized space; None if not defined
    probs: np.ndarray | None = None


class SaeModel:
    """Single-layer ReLU or TopK SAE reading one layer of the stack."""

    def __init__(self, params: SaeParams, layer_index: int, l1_coefficient: float = 0.0):
        self.params = params
        self.layer_index = layer_index
        self.l1_coefficient = l1_coefficient

    @property
    def arch(self) -> str:
        return self.params.activation_kind

    @property
    def M(self) -> int:
        return self.params.M

    def tensors(self) -> dict[str, np.ndarray]:
        return {f"sae.{k}": v for k, v in self.params.tensors().items()}

    def with_tensors(self, t: dict[str, np.ndarray]) -> "SaeModel":
        p = replace(self.params, W_enc=t["sae.W_enc"], b_pre=t["sae.b_pre"], W_dec=t["sae.W_dec"])
        return SaeModel(p, self.layer_index, self.l1_coefficient)

    def renorm(self) -> "SaeModel":
        return SaeModel(sae_core.renorm_decoder(self.params), self.layer_index, self.l1_coefficient)

    def decoder_columns(self) -> list[np.ndarray]:
        return [self.params.W_dec]

    def loss_and_grads(self, x: np.ndarray, rng=None):
        xi = x[:, self.layer_index]
        z, active = sae_core.encode_dense(self.params, xi)
        grads, loss = sae_core.sae_backward_dense(self.params, xi, z, active, self.l1_coefficient)
        g = {f"sae.{k}": v for k, v in grads.tensors().items()}
        return g, StepStats(loss, float(active.sum(axis=1).mean()))

    def reconstruct(self, x: np.ndarray, rng=None) -> Reconstruction:
        xi = x[:, self.layer_index]
        z, active = sae_core.encode_dense(self.params, xi)
        x_hat = sae_core.decode_dense(self.params, z)
        layer = np.full(len(x), self.layer_index, dtype=np.int64)
        return Reconstruction(z, active, xi, x_hat, layer, x_hat)

    def decode_code(self, z: np.ndarray, rec: Reconstruction) -> np.ndarray:
        """Substitution vector for an edited code."""
        return sae_core.decode_dense(self.params, z)


class RouteModel:
    """Router plus shared TopK SAE (hard, soft or random routing)."""

    def __init__(self, router: RouterParams, params: SaeParams):
        self.router = router
        self.params = params

    @property
    def arch(self) -> str:
        return f"route-{self.router.mode}"

    @property
    def M(self) -> int:
        return self.params.M

    def tensors(self) -> dict[str, np.ndarray]:
        t = {f"sae.{k}": v for k, v in self.params.tensors().items()}
        t["router.W_router"] = self.router.W_router
        return t

    def with_tensors(self, t: dict[str, np.ndarray]) -> "RouteModel":
        p = replace(self.params, W_enc=t["sae.W_enc"], b_pre=t["sae.b_pre"], W_dec=t["sae.W_dec"])
        return RouteModel(replace(self.router, W_router=t["router.W_router"]), p)

    def renorm(self) -> "RouteModel":
        return RouteModel(self.router, sae_core.renorm_decoder(self.params))

    def decoder_columns(self) -> list[np.ndarray]:
        return [self.params.W_dec]

    def loss_and_grads(self, x: np.ndarray, rng=None):
        fwd = route_core.routesae_forward(self.router, self.params, x, rng)
        grads, g_router, loss = route_core.routesae_backward(self.router, self.params, x, fwd)
        g = {f"sae.{k}": v for k, v in grads.tensors().items()}
        g["router.W_router"] = g_router
        stats = StepStats(loss, float(fwd.active.sum(axis=1).mean()), fwd.decision.selected_layer)
        return g, stats

    def reconstruct(self, x: np.ndarray, rng=None) -> Reconstruction:
        fwd = route_core.routesae_forward(self.router, self.params, x, rng)
        sub = route_core.substitution_vector(fwd.decision, fwd.x_hat, self.router.mode)
        return Reconstruction(
            fwd.z, fwd.active, fwd.decision.x_route, fwd.x_hat,
            fwd.decision.selected_layer, sub, fwd.decision.probs,
        )

    def decode_code(self, z: np.ndarray, rec: Reconstruction) -> np.ndarray:
        x_hat = sae_core.decode_dense(self.params, z)
        decision = route_core.RouteDecision(rec.probs, rec.layer, rec.x_in, rec.x_in)
        return route_core.substitution_vector(decision, x_hat, self.router.mode)


class CrosscoderModel:
    def __init__(self, params: cc.CrosscoderParams):
        self.params = params

    arch = "crosscoder"

    @property
    def M(self) -> int:
        return self.params.M

    def tensors(self) -> dict[str, np.ndarray]:
        return {f"cc.{k}": v for k, v in self.params.tensors().items()}

    def with_tensors(self, t: dict[str, np.ndarray]) -> "CrosscoderModel":
        return CrosscoderModel(replace(self.params, W_enc=t["cc.W_enc"], W_dec=t["cc.W_dec"], b=t["cc.b"]))

    def renorm(self) -> "CrosscoderModel":
        return CrosscoderModel(cc.cc_renorm_decoder(self.params))

    def decoder_columns(self) -> list[np.ndarray]:
        return list(self.params.W_dec)

    def loss_and_grads(self, x: np.ndarray, rng=None):
        fwd = cc.cc_forward(self.params, x)
        grads, loss = cc.cc_backward(self.params, x, fwd)
        g = {f"cc.{k}": v for k, v in grads.tensors().items()}
        return g, StepStats(loss, float(fwd.active.sum(axis=1).mean()))

    def reconstruct(self, x: np.ndarray, rng=None) -> Reconstruction:
        fwd = cc.cc_forward(self.params, x)
        # several reconstructions, no single substitution point
        layer = np.zeros(len(x), dtype=np.int64)
        return Reconstruction(fwd.z, fwd.active, x, fwd.x_hat, layer, None)

    def decode_code(self, z: np.ndarray, rec: Reconstruction) -> np.ndarray:
        raise NotImplementedError("crosscoder reconstructions cover every layer; no single substitution")


def build_model(arch: str, L: int, d: int, M: int, k: int, seed: int, *,
                layer_index: int | None = None, l1_coefficient: float = 0.0,
                router_init_scale: float = 0.0):
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
    if arch in ("relu", "topk"):
        params = sae_core.init_params(d, M, seed, activation_kind=arch, k=k)
        return SaeModel(params, L - 1 if layer_index is None else layer_index, l1_coefficient)
    if arch == "crosscoder":
        return CrosscoderModel(cc.init_crosscoder(L, d, M, k, seed))
    params = sae_core.init_params(d, M, seed, activation_kind="topk", k=k)
    router = route_core.init_router(L, d, seed + 1, ROUTE_MODES[arch], router_init_scale)
    return RouteModel(router, params)


def model_from_tensors(arch: str, tensors: dict[str, np.ndarray], *, k: int, layer_index: int = 0,
                       l1_coefficient: float = 0.0):
    if arch in ("relu", "topk"):
        p = SaeParams(tensors["sae.W_enc"], tensors["sae.b_pre"], tensors["sae.W_dec"], arch, k)
        return SaeModel(p, layer_index, l1_coefficient)
    if arch == "crosscoder":
        return CrosscoderModel(cc.CrosscoderParams(tensors["cc.W_enc"], tensors["cc.W_dec"], tensors["cc.b"], k))
    if arch in ROUTE_MODES:
        p = SaeParams(tensors["sae.W_enc"], tensors["sae.b_pre"], tensors["sae.W_dec"], "topk", k)
        return RouteModel(RouterParams(tensors["router.W_router"], ROUTE_MODES[arch]), p)
    raise ValueError(f"unknown architecture {arch!r}")
