"""Finite-difference suite over every parameterized module, on a three-node world.

Argmax choices are pinned (the lookahead is a fixed candidate) so each loss
is a smooth function of the parameters being checked.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import GradCheckReport, ParamStore, Rng, Tensor, cross_entropy, finite_diff_grad_check, mse, tsum
from .config import ModelConfig
from .encoders import ae_reconstruct, encode_instruction, init_autoencoder
from .graphworld import WorldSpec, make_episode, observe, world_from_edges
from .hpfn import predict_state, refine_embeddings, score_stage1, score_stage2
from .mwm import dense_predict, dense_target, mwm_loss, topostate_predict
from .topomap import TopoMap, candidate_set, tne_encode, update_map
from .training import build_params

SUITE_MODEL = ModelConfig(feature_dim=6, landmark_count=3, d_model=8, z_dim=4, s_dim=5, mwm_layers=3,
                          feedback_layers=2, v_max=3)


@dataclass
class ModuleResult:
    module: str
    report: GradCheckReport
    seconds: float


def tiny_setup(model: ModelConfig = SUITE_MODEL, seed: int = 0):
    """Path world 0-1-2 with the agent at node 0 after one observation."""
    spec = WorldSpec(node_count=3, feature_dim=model.feature_dim, landmark_count=model.landmark_count,
                     view_noise_std=0.0, seed=seed)
    world = world_from_edges([[0.0, 0.0], [2.0, 0.5], [4.0, 0.0]], [(0, 1), (1, 2)], landmark=[0, 1, 2],
                             spec=spec)
    episode = make_episode(world, 0, 2)
    tmap = update_map(TopoMap(), 0, observe(world, 0), {1: world.edge_length(0, 1)})
    return world, episode, tmap


def _weights(shape, seed: int) -> np.ndarray:
    return Rng(seed).child("probe-weights").normal(shape)


def suite_cases(params: ParamStore, model: ModelConfig = SUITE_MODEL):
    """(module name, loss function, parameter names) for every checked module."""
    world, episode, tmap = tiny_setup(model)
    cands = candidate_set(tmap)
    j = cands.index(1)  # the frontier node, pinned as lookahead
    label_state = _weights((1, model.s_dim), 1) * 0.1
    target_raw = np.stack([observe(world, 1).views[k][2] for k in range(2)])
    dense_t, dense_m = dense_target(target_raw, model.v_max)

    def embed(p):
        instr = encode_instruction(episode.instruction, p)
        return instr, tne_encode(tmap, instr, p, cands)

    def tne_loss(p):
        _, V = embed(p)
        return tsum(V * Tensor(_weights(V.shape, 2)))

    def wm_loss(variant):
        def f(p):
            instr, V = embed(p)
            out, _ = predict_state(tmap, 1, instr, V[j], p, variant, "stochastic", Rng(3))
            return mwm_loss(out, label_state, beta=0.5)
        return f

    def topo_loss(p):
        _, V = embed(p)
        return mse(topostate_predict(V[list(range(V.shape[0] - 1))], p), _weights((1, model.d_model), 4) * 0.1)

    def dense_loss(p):
        _, V = embed(p)
        return mse(dense_predict(V, j, p, model.v_max, model.feature_dim), dense_t, dense_m)

    def stage1_loss(p):
        _, V = embed(p)
        return cross_entropy(score_stage1(V, p), j)

    def feedback_loss(p):
        instr, V = embed(p)
        out, _ = predict_state(tmap, 1, instr, V[j], p, "MWM", "stochastic", Rng(3))
        logits, _ = score_stage2(refine_embeddings(V, out.s_hat, p), p)
        return cross_entropy(logits, j)

    def group(*prefixes):
        return [n for n in params if n.startswith(prefixes)]

    return [
        ("TNE", tne_loss, group("enc.", "tne.")),
        ("MWM", wm_loss("MWM"), group("enc.", "tne.", "mwm.")),
        ("VisWM", wm_loss("VisWM"), group("vis.", "mwm.mu", "mwm.sigma", "mwm.dec")),
        ("TopoState", topo_loss, group("topo.", "tne.")),
        ("Cond2Vis", dense_loss, group("dense.", "tne.")),
        ("FFN stage 1", stage1_loss, group("pol.s1", "tne.")),
        ("feedback + FFN stage 2", feedback_loss, group("pol.fb", "pol.s2", "mwm.", "tne.")),
    ]


def run_suite(seed: int = 0, h: float = 1e-5, tol: float = 1e-4, max_coords: int = 300) -> list[ModuleResult]:
    params = build_params(SUITE_MODEL, seed)
    results = []
    for name, fn, names in suite_cases(params):
        t0 = time.perf_counter()
        rep = finite_diff_grad_check(fn, params, h=h, tol=tol, max_coords=max_coords, seed=seed, names=names)
        results.append(ModuleResult(name, rep, time.perf_counter() - t0))
    ae = init_autoencoder(SUITE_MODEL.feature_dim, SUITE_MODEL.s_dim, seed=seed)
    x = _weights((4, SUITE_MODEL.feature_dim), 5)
    t0 = time.perf_counter()
    rep = finite_diff_grad_check(lambda p: mse(ae_reconstruct(Tensor(x), p), x), ae, h=h, tol=tol,
                                 max_coords=max_coords, seed=seed)
    results.append(ModuleResult("auto-encoder", rep, time.perf_counter() - t0))
    return results
