"""Two-stage navigator: coarse scoring, world-model lookahead, feedback, fine scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Rng, Tensor, cross_attention, mlp, reshape
from .config import TrainConfig
from .encoders import encode_view
from .errors import ContractError
from .mwm import MWMOutput, mwm_predict, viswm_predict
from .topomap import STOP, CandidateSet, TopoMap, candidate_set, observation_of, tne_encode


def init_policy(params: ParamStore, d_model: int, s_dim: int, feedback_layers: int = 2) -> None:
    params.add_mlp("pol.s1", [d_model, d_model, 1])
    for m in range(feedback_layers):
        params.add_attention(f"pol.fb{m}", d_model, s_dim, d_model)
    params.add_mlp("pol.s2", [d_model, d_model, 1])


def feedback_layers(params: ParamStore) -> int:
    n = 0
    while f"pol.fb{n}.W_q" in params:
        n += 1
    return n


def _row_scores(x: Tensor, params: ParamStore, tag: str) -> Tensor:
    return reshape(mlp(x, params, tag), (1, x.shape[0]))


def argmax_first(logits) -> int:
    """Index of the largest entry; ties go to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return int(np.argmax(data.reshape(-1)))


def score_stage1(node_embeddings: Tensor, params: ParamStore) -> Tensor:
    """One logit per candidate row (1×C)."""
    if node_embeddings.shape[0] < 2:
        raise ContractError("need at least one node row plus STOP")
    return _row_scores(node_embeddings, params, "pol.s1")


def select_lookahead(logits1, candidates: CandidateSet):
    idx = argmax_first(logits1)
    return idx, candidates.entries[idx]


def refine_embeddings(node_embeddings: Tensor, s_hat: Tensor | None, params: ParamStore) -> Tensor:
    """Nodes query the predicted state; a residual wraps every attention layer."""
    if s_hat is None:
        raise ContractError("refine_embeddings needs a predicted state")
    x = node_embeddings
    for m in range(feedback_layers(params)):
        x = x + cross_attention(x, s_hat, params, f"pol.fb{m}")
    return x


def score_stage2(refined: Tensor, params: ParamStore) -> tuple[Tensor, int]:
    logits = _row_scores(refined, params, "pol.s2")
    return logits, argmax_first(logits)


@dataclass
class StepDecision:
    candidates: CandidateSet
    node_embeddings: Tensor
    logits1: Tensor
    a_prime: int
    lookahead: object  # node id or STOP
    mwm_out: MWMOutput | None
    view_j: Tensor | None
    refined: Tensor
    logits2: Tensor
    a_dprime: int

    def executed(self, supervision: str) -> int:
        """Candidate index the agent acts on: a′ only in the a′-only ablation."""
        return self.a_prime if supervision == "a1" else self.a_dprime


def lookahead_view(tmap: TopoMap, node: int, params: ParamStore) -> Tensor:
    """Encoded raw embedding of a candidate node (own observation or frontier mean)."""
    raw = observation_of(tmap, node)
    return encode_view(np.atleast_2d(raw).astype(params.dtype), params)


def predict_state(tmap: TopoMap, node: int, instr: Tensor, v_j: Tensor, params: ParamStore,
                  variant: str, mode: str, rng: Rng | None) -> tuple[MWMOutput, Tensor]:
    view = lookahead_view(tmap, node, params)
    if variant == "VisWM":
        return viswm_predict(view, v_j, params, mode, rng), view
    return mwm_predict(view, instr, v_j, params, mode, rng), view


def step_policy(tmap: TopoMap, instr_features: Tensor, params: ParamStore, config: TrainConfig,
                mode: str = "deterministic", rng: Rng | None = None) -> StepDecision:
    """tne → stage 1 → lookahead → (world model → feedback) → stage 2.

    Stage 2 runs on the unrefined embeddings when the lookahead is STOP, when
    feedback is off, or when the configured predictor never feeds the policy.
    In the a″-only setting stage 1 sees detached embeddings, so navigation
    losses on stage 2 cannot reach it.
    """
    cands = candidate_set(tmap)
    V = tne_encode(tmap, instr_features, params, cands)
    logits1 = score_stage1(V.detach() if config.supervision == "a2" else V, params)
    if not config.stop_in_lookahead:
        masked = logits1.data.copy()
        masked[0, cands.stop_index] = -np.inf
        a_prime = argmax_first(masked)
    else:
        a_prime = argmax_first(logits1)
    lookahead = cands.entries[a_prime]
    mwm_out, view_j, refined = None, None, V
    if lookahead != STOP and config.feeds_back:
        mwm_out, view_j = predict_state(tmap, lookahead, instr_features, V[a_prime], params,
                                        config.variant, mode, rng)
        refined = refine_embeddings(V, mwm_out.s_hat, params)
    logits2, a_dprime = score_stage2(refined, params)
    return StepDecision(cands, V, logits1, a_prime, lookahead, mwm_out, view_j, refined, logits2, a_dprime)
