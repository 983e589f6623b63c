"""Multimodal world model (a conditional VAE) and the alternative state predictors.

The world model fuses the lookahead node's view with the instruction through
stacked residual cross-attention, maps the fused vector to a diagonal
Gaussian, samples a latent and decodes it together with the node embedding
into the compressed visual state the agent should see on arrival.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ParamStore, Rng, Tensor, concat, cross_attention, kl_to_standard_normal, mlp, mse,
                       reparameterize, reshape, softplus, take_rows)
from .errors import ContractError, DimensionError, DomainError, LookupFailure, TrainingError


@dataclass
class MWMOutput:
    c_j: Tensor
    mu: Tensor
    sigma: Tensor
    z: Tensor
    s_hat: Tensor


def init_mwm(params: ParamStore, d_model: int, z_dim: int, s_dim: int, layers: int = 3) -> None:
    if layers < 1:
        raise ValueError("the world model needs at least one attention layer")
    for layer in range(layers):
        params.add_attention(f"mwm.attn{layer}", d_model, d_model, d_model)
    params.add_mlp("mwm.mu", [d_model, d_model, z_dim])
    params.add_mlp("mwm.sigma", [d_model, d_model, z_dim])
    params.add_mlp("mwm.dec", [z_dim + d_model, d_model, s_dim])


def init_alternatives(params: ParamStore, d_model: int, feature_dim: int, v_max: int) -> None:
    """Parameters of the view-only world model and the two auxiliary predictors."""
    params.add_mlp("vis.enc", [d_model, d_model, d_model])
    params.add_mlp("topo.mlp", [d_model, d_model, d_model])
    params.add_mlp("dense.mlp", [d_model, d_model, v_max * feature_dim])


def mwm_layers(params: ParamStore) -> int:
    n = 0
    while f"mwm.attn{n}.W_q" in params:
        n += 1
    return n


def mwm_encode(view: Tensor, instr: Tensor, params: ParamStore) -> Tensor:
    """Residual stack: x ← x + CrossAttn(x, instr) per layer; output keeps the query width."""
    if instr.shape[0] < 1:
        raise ContractError("world model needs a non-empty instruction")
    x = view
    for layer in range(mwm_layers(params)):
        x = x + cross_attention(x, instr, params, f"mwm.attn{layer}")
    return x


def mwm_heads(c_j: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
    mu = mlp(c_j, params, "mwm.mu")
    sigma = softplus(mlp(c_j, params, "mwm.sigma"))
    return mu, sigma


def mwm_decode(z: Tensor, v_j: Tensor, params: ParamStore) -> Tensor:
    x = concat([z, v_j], axis=1)
    if x.shape[1] != params["mwm.dec.W0"].shape[0]:
        raise DimensionError(f"decoder expects width {params['mwm.dec.W0'].shape[0]}, got {x.shape[1]}")
    return mlp(x, params, "mwm.dec")


def _sample(mu: Tensor, sigma: Tensor, mode: str, rng: Rng | None) -> Tensor:
    if mode == "deterministic":
        return mu
    if mode != "stochastic":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("stochastic prediction needs an rng")
    eps = rng.normal(mu.shape).astype(mu.dtype)
    return reparameterize(mu, sigma, eps)


def mwm_predict(view: Tensor, instr: Tensor, v_j: Tensor, params: ParamStore,
                mode: str = "deterministic", rng: Rng | None = None) -> MWMOutput:
    c = mwm_encode(view, instr, params)
    mu, sigma = mwm_heads(c, params)
    z = _sample(mu, sigma, mode, rng)
    return MWMOutput(c, mu, sigma, z, mwm_decode(z, v_j, params))


def viswm_predict(view: Tensor, v_j: Tensor, params: ParamStore, mode: str = "deterministic",
                  rng: Rng | None = None) -> MWMOutput:
    """Same CVAE with the fusion stack replaced by a residual MLP on the view alone."""
    c = view + mlp(view, params, "vis.enc")
    mu, sigma = mwm_heads(c, params)
    z = _sample(mu, sigma, mode, rng)
    return MWMOutput(c, mu, sigma, z, mwm_decode(z, v_j, params))


def mwm_loss(out: MWMOutput, label, beta: float = 0.5) -> Tensor:
    """MSE(ŝ, label) + β·KL(N(μ, σ²) ‖ N(0, I))."""
    if beta < 0:
        raise DomainError("beta must be >= 0")
    label = np.atleast_2d(label.data if isinstance(label, Tensor) else np.asarray(label))
    loss = mse(out.s_hat, label)
    if beta > 0:
        loss = loss + kl_to_standard_normal(out.mu, out.sigma) * beta
    if not np.isfinite(loss.data).all():
        raise TrainingError("world-model loss is not finite")
    return loss


def topostate_predict(node_embeddings: Tensor, params: ParamStore) -> Tensor:
    """Mean-pool the node rows and map the pooled state through an MLP."""
    if node_embeddings.shape[0] < 1:
        raise ContractError("need at least one node row")
    return mlp(node_embeddings.mean(axis=0), params, "topo.mlp")


def dense_predict(node_embeddings: Tensor, j: int, params: ParamStore, v_max: int, feature_dim: int) -> Tensor:
    """Predict a padded v_max×feature_dim view stack from candidate row ``j``."""
    if not 0 <= j < node_embeddings.shape[0]:
        raise LookupFailure(f"candidate index {j} out of range")
    out = mlp(take_rows(node_embeddings, j), params, "dense.mlp")
    return reshape(out, (v_max, feature_dim))


def dense_target(raw_state: np.ndarray, v_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad (or truncate) a view stack to v_max rows; the mask marks real rows."""
    rows = min(len(raw_state), v_max)
    target = np.zeros((v_max, raw_state.shape[1]))
    target[:rows] = raw_state[:rows]
    mask = np.zeros_like(target)
    mask[:rows] = 1.0
    return target, mask
