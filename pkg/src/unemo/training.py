"""Rollouts, imitation losses, the phased schedule and the training loop."""
from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import (ParamStore, Rng, Tensor, adam_step, clip_grad_norm, cross_entropy,
                       mse, no_grad)
from .config import ModelConfig, TrainConfig
from .encoders import encode_instruction, init_encoders, label_table
from .errors import LabelingError, NonFiniteError, TrainingError, TransitionError
from .evalmetrics import MetricsReport, PredictionStats, compute_metrics, prediction_stats
from .graphworld import Episode, World, _dijkstra_dist, node_visual_state_raw, observe, shortest_path_in
from .hpfn import StepDecision, init_policy, predict_state, step_policy
from .mwm import dense_predict, dense_target, init_alternatives, init_mwm, mwm_loss, topostate_predict
from .topomap import STOP, TopoMap, init_tne, update_map

LOG_COLUMNS = ("phase", "batch", "l_bc", "l_dag", "l_aux", "total", "val_sr", "l_probe")

# parameter groups retrained at phase boundaries, per predictor variant
WORLD_MODEL_GROUPS = {
    "MWM": ("mwm.",),
    "VisWM": ("vis.", "mwm.mu", "mwm.sigma", "mwm.dec"),
    "TopoState": ("topo.",),
    "Cond2Vis": ("dense.",),
    "none": (),
}


@dataclass
class Agent:
    model: ModelConfig
    params: ParamStore
    ae: ParamStore


def build_params(model: ModelConfig, seed: int = 0) -> ParamStore:
    params = ParamStore(seed, np.dtype(model.dtype))
    init_encoders(params, model.vocab_size, model.feature_dim, model.d_model)
    init_tne(params, model.basis_dim, model.d_model)
    init_mwm(params, model.d_model, model.z_dim, model.s_dim, model.mwm_layers)
    init_alternatives(params, model.d_model, model.feature_dim, model.v_max)
    init_policy(params, model.d_model, model.s_dim, model.feedback_layers)
    return params


def world_model_names(params: ParamStore, variant: str) -> list[str]:
    prefixes = WORLD_MODEL_GROUPS[variant]
    return [n for n in params if any(n.startswith(p) for p in prefixes)]


# trajectories ------------------------------------------------------------------
@dataclass
class StepRecord:
    at: int
    decision: StepDecision
    adjacency: dict | None = None
    tmap: TopoMap | None = None


@dataclass
class TrajectoryRecord:
    episode: Episode
    nodes: list[int]
    steps: list[StepRecord]
    labels: list[int] | None
    label_kind: str
    stop_reason: str
    path_length: float
    instr: Tensor | None = None
    fallbacks: list[int] = field(default_factory=list)


def _arrive(world: World, tmap: TopoMap, node: int, rng: Rng) -> None:
    pano = observe(world, node, rng)
    update_map(tmap, node, pano, world.adjacency[node])


def rollout(world: World, episode: Episode, agent: Agent, mode: str, config: TrainConfig, rng: Rng,
            stochastic: bool = False, keep_adjacency: bool = False, keep_maps: bool = False) -> TrajectoryRecord:
    """Run one episode.

    ``teacher`` walks the expert path and labels every step (STOP at the goal);
    ``on-policy`` executes the policy's action, travelling along the known map
    to non-adjacent targets, until STOP or the step cap.
    """
    if mode not in ("teacher", "on-policy"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    params = agent.params
    instr = encode_instruction(episode.instruction, params)
    tmap = TopoMap()
    _arrive(world, tmap, episode.start, rng.child("obs", 0))
    nodes = [episode.start]
    steps: list[StepRecord] = []
    labels: list[int] = []
    tl = 0.0
    reason = "step-cap"
    path = episode.expert_path
    pred_mode = "stochastic" if stochastic else "deterministic"
    for t in range(config.step_cap):
        snap = tmap.snapshot_adjacency() if keep_adjacency else None
        dec = step_policy(tmap, instr, params, config, pred_mode, rng.child("z", t))
        steps.append(StepRecord(tmap.current, dec, snap, copy.deepcopy(tmap) if keep_maps else None))
        if mode == "teacher":
            target = path[t + 1] if t + 1 < len(path) else STOP
            labels.append(dec.candidates.index(target))
        else:
            target = dec.candidates.entries[dec.executed(config.supervision)]
        if target == STOP:
            reason = "stop"
            break
        if target == tmap.current:
            continue
        hops, _ = shortest_path_in(tmap.adjacency, tmap.current, target)
        for k, (u, v) in enumerate(zip(hops[:-1], hops[1:])):
            if v not in world.adjacency[u]:
                raise TransitionError(f"map edge {u}-{v} does not exist in the world")
            tl += world.edge_length(u, v)
            _arrive(world, tmap, v, rng.child("obs", t + 1, k))
            nodes.append(v)
    return TrajectoryRecord(episode, nodes, steps, labels if mode == "teacher" else None,
                            "expert" if mode == "teacher" else "none", reason, tl, instr)


def expert_trajectory(world: World, episode: Episode) -> TrajectoryRecord:
    """What a perfect follower does: walk the expert path, then stop."""
    path = list(episode.expert_path)
    tl = 0.0
    for u, v in zip(path[:-1], path[1:]):
        tl += world.edge_length(u, v)
    return TrajectoryRecord(episode, path, [], None, "expert", "stop", tl)


# labels & losses ------------------------------------------------------------------
def pseudo_label(world: World, at: int, entries: Sequence, adjacency: dict, goal: int,
                 threshold: float = 3.0) -> tuple[int, bool]:
    """Candidate minimizing known-map distance to it plus its geodesic to the goal.

    Returns (candidate index, used_fallback). STOP once within ``threshold`` of
    the goal. Near-ties (1e-9 relative) go to the candidate closer to the
    agent, then to the earlier candidate.
    """
    stop = len(entries) - 1
    if world.distance(at, goal) <= threshold:
        return stop, False
    n = world.node_count
    d_map = _dijkstra_dist(adjacency, at, n) if adjacency else np.full(n, np.inf)
    geo = world.geodesics_from(goal)
    best = None
    scored = []
    for i, c in enumerate(entries[:-1]):
        if c == at or not math.isfinite(d_map[c]):
            continue
        scored.append((d_map[c] + geo[c], d_map[c], i))
    if scored:
        low = min(s[0] for s in scored)
        tied = [s for s in scored if s[0] <= low + 1e-9 * max(1.0, low)]
        best = min(tied, key=lambda s: (s[1], s[2]))[2]
        return best, False
    # no candidate reachable within the map: first hop of the global geodesic
    hop = shortest_path_in(world.adjacency, at, goal)[0][1]
    if hop not in entries:
        raise LabelingError(f"fallback hop {hop} is not a candidate")
    return entries.index(hop), True


def dagger_labels(world: World, traj: TrajectoryRecord, threshold: float = 3.0) -> list[int]:
    """Shortest-path pseudo-labels for every step of an on-policy trajectory."""
    labels = []
    traj.fallbacks.clear()
    for t, step in enumerate(traj.steps):
        if step.adjacency is None:
            raise LabelingError("trajectory was recorded without map snapshots")
        lab, fb = pseudo_label(world, step.at, step.decision.candidates.entries, step.adjacency,
                               traj.episode.goal, threshold)
        if fb:
            traj.fallbacks.append(t)
        labels.append(lab)
    return labels


def _ce_terms(step: StepRecord, label: int, supervision: str) -> Tensor:
    dec = step.decision
    if not 0 <= label < len(dec.candidates):
        raise LabelingError(f"label {label} outside candidate set of size {len(dec.candidates)}")
    if supervision == "a1":
        return cross_entropy(dec.logits1, label)
    if supervision == "a2":
        return cross_entropy(dec.logits2, label)
    return (cross_entropy(dec.logits1, label) + cross_entropy(dec.logits2, label)) * 0.5


def imitation_loss(traj: TrajectoryRecord, labels: Sequence[int], supervision: str = "a2") -> Tensor:
    """Mean per-step cross-entropy of the supervised logits against ``labels``."""
    if len(labels) != len(traj.steps):
        raise LabelingError(f"{len(labels)} labels for {len(traj.steps)} steps")
    if not traj.steps:
        return Tensor(0.0)
    total = None
    for step, lab in zip(traj.steps, labels):
        term = _ce_terms(step, lab, supervision)
        total = term if total is None else total + term
    return total * (1.0 / len(traj.steps))


def bc_loss(traj: TrajectoryRecord, supervision: str = "a2") -> Tensor:
    if traj.labels is None:
        raise LabelingError("behavioural cloning needs a teacher-forced trajectory")
    return imitation_loss(traj, traj.labels, supervision)


def probe_loss(traj: TrajectoryRecord, labels: Sequence[int]) -> Tensor:
    """Stage-1 cross-entropy; in a″-only mode its inputs are detached embeddings."""
    return imitation_loss(traj, labels, "a1")


def aux_loss(traj: TrajectoryRecord, world: World, agent: Agent, config: TrainConfig, rng: Rng) -> Tensor:
    """State-prediction loss of the configured predictor over a teacher-forced run."""
    variant = config.variant
    params, model = agent.params, agent.model
    terms: list[Tensor] = []
    if variant in ("MWM", "VisWM"):
        labels = label_table(world, agent.ae)
        for t, step in enumerate(traj.steps):
            dec = step.decision
            if dec.lookahead == STOP:
                continue
            out = dec.mwm_out
            if out is None:
                out = _predict_for_aux(traj, t, agent, config, rng)
            if config.mwm_label == "expert" and traj.labels is not None:
                target_entry = dec.candidates.entries[traj.labels[t]]
                if target_entry == STOP:
                    continue
                label = labels[target_entry]
            else:
                label = labels[dec.lookahead]
            terms.append(mwm_loss(out, label, config.beta))
    elif variant == "TopoState":
        for t in range(len(traj.steps) - 1):
            cur = traj.steps[t].decision.node_embeddings
            nxt = traj.steps[t + 1].decision.node_embeddings
            target = nxt.data[:-1].mean(axis=0, keepdims=True)
            terms.append(mse(topostate_predict(cur[slice(0, cur.shape[0] - 1)], params), target))
    elif variant == "Cond2Vis":
        for t, step in enumerate(traj.steps):
            dec = step.decision
            entry = dec.candidates.entries[traj.labels[t]] if traj.labels is not None else STOP
            if entry == STOP:
                continue
            target, mask = dense_target(node_visual_state_raw(world, entry), model.v_max)
            pred = dense_predict(dec.node_embeddings, traj.labels[t], params, model.v_max, model.feature_dim)
            terms.append(mse(pred, target, mask))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def _predict_for_aux(traj: TrajectoryRecord, t: int, agent: Agent, config: TrainConfig, rng: Rng):
    """World-model prediction for step ``t`` when the policy did not run it (feedback off)."""
    step = traj.steps[t]
    if step.tmap is None:
        raise TrainingError("feedback-off world-model training needs the map of each step")
    dec = step.decision
    out, _ = predict_state(step.tmap, dec.lookahead, traj.instr, dec.node_embeddings[dec.a_prime], agent.params,
                           config.variant, "stochastic", rng.child("aux", t))
    return out


@dataclass(frozen=True)
class ScheduleFlags:
    mwm_loss_active: bool
    mwm_retrain_due: bool


def phased_schedule(phase: int, batch: int, config: TrainConfig) -> ScheduleFlags:
    """State prediction runs in the first ⌈fraction·batches⌉ batches of each phase;
    the world model is retrained at the start of every phase after the first."""
    if not 0 <= batch < config.batches_per_phase:
        raise ValueError(f"batch {batch} outside phase of {config.batches_per_phase} batches")
    active_batches = math.ceil(config.mwm_active_fraction * config.batches_per_phase - 1e-12)
    return ScheduleFlags(batch < active_batches, batch == 0 and phase > 0)


@dataclass
class LossBreakdown:
    l_bc: float
    l_dag: float
    l_aux: float
    total: float
    l_probe: float = 0.0


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def weighted_total(bc, dag, aux, config: TrainConfig, aux_active: bool = True):
    """λ·bc + dag + aux_weight·aux (aux only while active); works on floats or tensors."""
    total = bc * config.lam + dag
    if aux_active and config.aux_weight != 0:
        total = total + aux * config.aux_weight
    return total


def total_loss(bc, dag, aux, config: TrainConfig, aux_active: bool = True) -> LossBreakdown:
    vals = [_value(bc), _value(dag), _value(aux)]
    if not all(math.isfinite(v) for v in vals):
        raise TrainingError(f"non-finite loss component {vals}")
    total = weighted_total(vals[0], vals[1], vals[2], config, aux_active)
    return LossBreakdown(vals[0], vals[1], vals[2] if aux_active else 0.0, total)


# training loop --------------------------------------------------------------------
Dataset = Sequence[tuple[World, Sequence[Episode]]]


def _episode_index(data: Dataset) -> list[tuple[int, int]]:
    return [(wi, ei) for wi, (_, eps) in enumerate(data) for ei in range(len(eps))]


def _batch_losses(agent: Agent, data: Dataset, index, config: TrainConfig, rng: Rng, aux_active: bool):
    """Forward one batch: a teacher-forced episode and an on-policy DAgger episode."""
    (w1, e1), (w2, e2) = index
    world1, ep1 = data[w1][0], data[w1][1][e1]
    world2, ep2 = data[w2][0], data[w2][1][e2]
    needs_maps = aux_active and config.uses_world_model and not config.feeds_back
    tf = rollout(world1, ep1, agent, "teacher", config, rng.child("tf"), stochastic=True, keep_maps=needs_maps)
    op = rollout(world2, ep2, agent, "on-policy", config, rng.child("op"), stochastic=True, keep_adjacency=True)
    dag = dagger_labels(world2, op, config.success_threshold)
    l_bc = bc_loss(tf, config.supervision)
    l_dag = imitation_loss(op, dag, config.supervision)
    l_aux = Tensor(0.0)
    if aux_active and config.variant != "none":
        l_aux = aux_loss(tf, world1, agent, config, rng.child("aux"))
    l_probe = None
    if config.supervision == "a2":
        l_probe = (probe_loss(tf, tf.labels) * config.lam + probe_loss(op, dag)) * config.probe_weight
    return l_bc, l_dag, l_aux, l_probe


def _retrain_world_model(agent: Agent, data: Dataset, config: TrainConfig, rng: Rng, step: int) -> int:
    names = world_model_names(agent.params, config.variant)
    if not names or config.mwm_retrain_batches <= 0:
        return step
    if config.mwm_retrain_reinit:
        fresh = build_params(agent.model, seed=int(rng.integers(0, 2 ** 31)))
        agent.params.load_state({n: fresh[n].data for n in names})
        for n in names:
            agent.params.moments.pop(n, None)
    index = _episode_index(data)
    for k in range(config.mwm_retrain_batches):
        brng = rng.child("retrain", k)
        wi, ei = index[int(brng.integers(0, len(index)))]
        world, ep = data[wi][0], data[wi][1][ei]
        agent.params.zero_grad()
        tf = rollout(world, ep, agent, "teacher", config, brng.child("tf"), stochastic=True,
                     keep_maps=config.uses_world_model and not config.feeds_back)
        loss = aux_loss(tf, world, agent, config, brng.child("aux"))
        if loss.requires_grad:
            loss.backward()
            clip_grad_norm(agent.params, config.grad_clip)
            step += 1
            adam_step(agent.params, lr=config.lr, t=step, only=names)
    return step


@dataclass
class TrainResult:
    agent: Agent
    log: list[dict]


def train(agent: Agent, data: Dataset, config: TrainConfig, val_data: Dataset | None = None,
          on_batch: Callable[[dict], None] | None = None) -> TrainResult:
    """Imitation training with BC + DAgger, the phased auxiliary schedule and
    world-model retraining at phase boundaries. Deterministic per seed."""
    config.validate()
    index = _episode_index(data)
    if not index:
        raise TrainingError("training corpus has no episodes")
    rng = Rng(config.seed).child("train")
    log: list[dict] = []
    step = 0
    for phase in range(config.phases):
        for batch in range(config.batches_per_phase):
            flags = phased_schedule(phase, batch, config)
            brng = rng.child(phase, batch)
            if flags.mwm_retrain_due:
                step = _retrain_world_model(agent, data, config, brng.child("retrain"), step)
            pick = [index[int(brng.child("pick", i).integers(0, len(index)))] for i in range(2)]
            agent.params.zero_grad()
            try:
                l_bc, l_dag, l_aux, l_probe = _batch_losses(agent, data, pick, config, brng, flags.mwm_loss_active)
                total = weighted_total(l_bc, l_dag, l_aux, config, flags.mwm_loss_active)
                parts = total_loss(l_bc, l_dag, l_aux, config, flags.mwm_loss_active)
                if total.requires_grad:
                    total.backward()
                if l_probe is not None and l_probe.requires_grad:
                    l_probe.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"divergence at phase {phase} batch {batch}: {exc}") from exc
            except TrainingError as exc:
                raise TrainingError(f"phase {phase} batch {batch}: {exc}") from exc
            clip_grad_norm(agent.params, config.grad_clip)
            step += 1
            adam_step(agent.params, lr=config.lr, t=step)
            row = {"phase": phase, "batch": batch, "l_bc": parts.l_bc, "l_dag": parts.l_dag,
                   "l_aux": parts.l_aux, "total": parts.total, "val_sr": math.nan,
                   "l_probe": _value(l_probe) if l_probe is not None else 0.0}
            if batch == config.batches_per_phase - 1 and val_data:
                row["val_sr"] = evaluate(agent, val_data, config, limit=config.val_episodes).report.sr
            log.append(row)
            if on_batch:
                on_batch(row)
    return TrainResult(agent, log)


# evaluation --------------------------------------------------------------------------
@dataclass
class EvalResult:
    trajectories: list[TrajectoryRecord]
    worlds: list[World]
    report: MetricsReport
    predictions: PredictionStats


def evaluate(agent: Agent, data: Dataset, config: TrainConfig, oracle: bool = False,
             limit: int | None = None, seed: int | None = None) -> EvalResult:
    """Deterministic on-policy evaluation (or the expert, with ``oracle``)."""
    seed = config.seed if seed is None else seed
    root = Rng(seed).child("eval")
    trajs, worlds, preds, labels = [], [], [], []
    count = 0
    with no_grad():
        for wi, (world, eps) in enumerate(data):
            for ei, ep in enumerate(eps):
                if limit is not None and count >= limit:
                    break
                count += 1
                if oracle:
                    traj = expert_trajectory(world, ep)
                else:
                    traj = rollout(world, ep, agent, "on-policy", config, root.child(wi, ei))
                    if config.uses_world_model:
                        table = label_table(world, agent.ae)
                        for step in traj.steps:
                            out = step.decision.mwm_out
                            if out is not None:
                                preds.append(out.s_hat.data)
                                labels.append(table[step.decision.lookahead])
                trajs.append(traj)
                worlds.append(world)
    report = compute_metrics(trajs, worlds, config.success_threshold)
    return EvalResult(trajs, worlds, report, prediction_stats(preds, labels))


def world_model_stats(agent: Agent, data: Dataset, config: TrainConfig, limit: int | None = None) -> PredictionStats:
    """Deterministic world-model predictions against node labels along expert runs.

    Every expert step with a non-STOP lookahead contributes one (prediction,
    label) pair, regardless of whether feedback is enabled.
    """
    cfg = dataclasses.replace(config, feedback=True)
    root = Rng(config.seed).child("wm-stats")
    preds, labels = [], []
    count = 0
    with no_grad():
        for wi, (world, eps) in enumerate(data):
            table = label_table(world, agent.ae)
            for ei, ep in enumerate(eps):
                if limit is not None and count >= limit:
                    return prediction_stats(preds, labels)
                count += 1
                traj = rollout(world, ep, agent, "teacher", cfg, root.child(wi, ei))
                for step in traj.steps:
                    out = step.decision.mwm_out
                    if out is not None:
                        preds.append(out.s_hat.data)
                        labels.append(table[step.decision.lookahead])
    return prediction_stats(preds, labels)
