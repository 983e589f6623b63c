"""Instruction / view encoders and the view auto-encoder that produces state labels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ParamStore, Rng, Tensor, adam_step, mlp, mse, no_grad, take_rows
from .errors import DimensionError, TrainingError, VocabularyError
from .graphworld import World, node_visual_state_raw, observe

AE_LADDER = (32, 64, 128)

_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_table(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal position rows."""
    key = (max_len, d_model)
    if key not in _POS_CACHE:
        pos = np.arange(max_len)[:, None]
        i = np.arange(d_model)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
        table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        _POS_CACHE[key] = table * 0.5
    return _POS_CACHE[key]


def init_encoders(params: ParamStore, vocab_size: int, feature_dim: int, d_model: int) -> None:
    params.add("enc.tok", (vocab_size, d_model), init="normal")
    params.add_mlp("enc.view", [feature_dim, d_model, d_model])


def encode_instruction(tokens: Sequence[int], params: ParamStore) -> Tensor:
    """Token embedding lookup plus additive position rows → N×d_model."""
    table = params["enc.tok"]
    vocab, d_model = table.shape
    tokens = [int(t) for t in tokens]
    for t in tokens:
        if not 0 <= t < vocab:
            raise VocabularyError(f"token id {t} outside vocabulary of size {vocab}")
    if not tokens:
        return Tensor(np.zeros((0, d_model), dtype=table.dtype))
    pos = positional_table(max(len(tokens), 1), d_model)[: len(tokens)].astype(table.dtype)
    return take_rows(table, tokens) + Tensor(pos)


def encode_view(view_feature, params: ParamStore) -> Tensor:
    """Two-layer tanh MLP from view space to model width."""
    x = view_feature if isinstance(view_feature, Tensor) else Tensor(np.atleast_2d(view_feature))
    if x.shape[1] != params["enc.view.W0"].shape[0]:
        raise DimensionError(f"view width {x.shape[1]} != {params['enc.view.W0'].shape[0]}")
    return mlp(x, params, "enc.view")


# auto-encoder ----------------------------------------------------------------
def init_autoencoder(feature_dim: int, s_dim: int, seed: int = 0, dtype=np.float64) -> ParamStore:
    """Affine ladder feature_dim → 32 → 64 → 128 → s_dim and its mirror."""
    ae = ParamStore(seed, dtype)
    ae.add_mlp("ae.enc", [feature_dim, *AE_LADDER, s_dim])
    ae.add_mlp("ae.dec", [s_dim, *reversed(AE_LADDER), feature_dim])
    return ae


def ae_encode(x: Tensor, ae: ParamStore) -> Tensor:
    if x.shape[1] != ae["ae.enc.W0"].shape[0]:
        raise DimensionError(f"view width {x.shape[1]} != {ae['ae.enc.W0'].shape[0]}")
    return mlp(x, ae, "ae.enc")


def ae_reconstruct(x: Tensor, ae: ParamStore) -> Tensor:
    return mlp(ae_encode(x, ae), ae, "ae.dec")


def autoencoder_compress(raw_state, ae: ParamStore) -> Tensor:
    """Encode each view row and average-pool over rows → 1×s_dim."""
    x = raw_state if isinstance(raw_state, Tensor) else Tensor(np.atleast_2d(np.asarray(raw_state, dtype=ae.dtype)))
    if x.shape[0] < 1:
        raise DimensionError("raw state needs at least one view row")
    return ae_encode(x, ae).mean(axis=0)


def node_state_label(world: World, node: int, ae: ParamStore) -> np.ndarray:
    """Compressed visual state of ``node``; the target the world model regresses to."""
    with no_grad():
        return autoencoder_compress(node_visual_state_raw(world, node), ae).data.copy()


def label_table(world: World, ae: ParamStore) -> np.ndarray:
    """All node labels of a world (cached on the world; the auto-encoder is frozen)."""
    cache = world.__dict__.setdefault("_label_cache", {})
    key = id(ae)
    if key not in cache:
        cache[key] = np.concatenate([node_state_label(world, n, ae) for n in range(world.node_count)])
    return cache[key]


@dataclass
class AETrainLog:
    train_mse: list = field(default_factory=list)
    initial_heldout_mse: float = math.nan
    final_heldout_mse: float = math.nan

    @property
    def heldout_ratio(self) -> float:
        return self.final_heldout_mse / self.initial_heldout_mse


def _recon_mse(x: np.ndarray, ae: ParamStore) -> float:
    with no_grad():
        return float(mse(ae_reconstruct(Tensor(x), ae), x).data)


def autoencoder_train(views, ae: ParamStore, epochs: int = 30, lr: float = 2e-3, batch_size: int = 64,
                      seed: int = 0, heldout_fraction: float = 0.1) -> AETrainLog:
    """Minimize reconstruction MSE with Adam; 10% of the corpus is held out."""
    x = np.asarray(np.concatenate([np.atleast_2d(v) for v in views]) if isinstance(views, list) else views,
                   dtype=ae.dtype)
    if len(x) == 0:
        raise TrainingError("empty view corpus")
    rng = Rng(seed).child("ae")
    order = rng.permutation(len(x))
    n_hold = int(round(heldout_fraction * len(x))) if len(x) > 1 else 0
    hold, train = x[order[:n_hold]], x[order[n_hold:]]
    log = AETrainLog()
    if n_hold:
        log.initial_heldout_mse = _recon_mse(hold, ae)
    step = 0
    for epoch in range(epochs):
        perm = rng.child("epoch", epoch).permutation(len(train))
        total, count = 0.0, 0
        for i in range(0, len(train), batch_size):
            batch = train[perm[i:i + batch_size]]
            ae.clear_grad()
            loss = mse(ae_reconstruct(Tensor(batch), ae), batch)
            if not np.isfinite(loss.data):
                raise TrainingError(f"auto-encoder diverged at epoch {epoch}")
            loss.backward()
            step += 1
            adam_step(ae, lr=lr, t=step)
            total += float(loss.data) * len(batch)
            count += len(batch)
        log.train_mse.append(total / count)
    if n_hold:
        log.final_heldout_mse = _recon_mse(hold, ae)
    return log


def view_corpus(worlds: Sequence[World], size: int, seed: int = 0) -> np.ndarray:
    """First ``size`` noisy panorama views, world by world and node by node."""
    rng = Rng(seed).child("views")
    rows: list[np.ndarray] = []
    total = 0
    for wi, world in enumerate(worlds):
        for n in range(world.node_count):
            feats = observe(world, n, rng.child(wi, n)).feature_matrix()
            rows.append(feats)
            total += len(feats)
            if total >= size:
                return np.concatenate(rows)[:size]
    if not rows:
        raise TrainingError("no views to collect")
    return np.concatenate(rows)
