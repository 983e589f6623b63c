"""The agent's topological map and the instruction-conditioned node encoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, Tensor, concat, cross_attention, linear, mlp
from .errors import ContractError, TransitionError
from .graphworld import Panorama

STOP = "STOP"


@dataclass
class NodeRecord:
    status: str  # "visited" | "frontier"
    own_observation: np.ndarray | None = None
    partial_views: list = field(default_factory=list)
    seen_from: list = field(default_factory=list)  # observer of each partial view
    embedding_cache: np.ndarray | None = None


@dataclass
class CandidateSet:
    entries: list  # node ids, then STOP

    @property
    def nodes(self) -> list[int]:
        return self.entries[:-1]

    @property
    def stop_index(self) -> int:
        return len(self.entries) - 1

    def index(self, entry) -> int:
        return self.entries.index(entry)

    def __len__(self):
        return len(self.entries)


class TopoMap:
    """Visited and frontier nodes discovered so far, with known edge lengths."""

    def __init__(self):
        self.records: dict[int, NodeRecord] = {}
        self.adjacency: dict[int, dict[int, float]] = {}
        self.visited_order: list[int] = []
        self.current: int | None = None

    def __len__(self):
        return len(self.records)

    def visited(self) -> list[int]:
        return list(self.visited_order)

    def frontier(self) -> list[int]:
        return sorted(n for n, r in self.records.items() if r.status == "frontier")

    def snapshot_adjacency(self) -> dict[int, dict[int, float]]:
        return {k: dict(v) for k, v in self.adjacency.items()}


def update_map(tmap: TopoMap, arrived: int, pano: Panorama, lengths: dict[int, float] | None = None) -> TopoMap:
    """Mark ``arrived`` visited and register every neighbor in ``pano``.

    ``lengths`` gives the edge length to each neighbor; when omitted edges are
    recorded with unit length.  A revisit only moves ``current``.
    """
    if tmap.current is not None and arrived != tmap.current and arrived not in tmap.adjacency.get(tmap.current, {}):
        raise TransitionError(f"cannot move from {tmap.current} to non-adjacent node {arrived}")
    if pano.at != arrived:
        raise TransitionError(f"panorama taken at {pano.at}, agent arrived at {arrived}")
    rec = tmap.records.get(arrived)
    if rec is not None and rec.status == "visited":
        tmap.current = arrived
        return tmap
    feats = pano.feature_matrix() if pano.views else np.zeros((1, 0))
    if rec is None:
        rec = NodeRecord("visited")
        tmap.records[arrived] = rec
    rec.status = "visited"
    rec.own_observation = feats.mean(axis=0) if pano.views else None
    rec.embedding_cache = None
    tmap.visited_order.append(arrived)
    tmap.adjacency.setdefault(arrived, {})
    for nb, _angle, feat in pano.views:
        w = 1.0 if lengths is None else float(lengths[nb])
        tmap.adjacency[arrived][nb] = w
        tmap.adjacency.setdefault(nb, {})[arrived] = w
        nrec = tmap.records.get(nb)
        if nrec is None:
            nrec = NodeRecord("frontier")
            tmap.records[nb] = nrec
        nrec.partial_views.append(np.asarray(feat))
        nrec.seen_from.append(arrived)
        nrec.embedding_cache = None
    tmap.current = arrived
    return tmap


def frontier_embedding(rec: NodeRecord) -> np.ndarray:
    """Mean of the partial views of an unvisited node."""
    if rec.status != "frontier":
        raise ContractError("frontier_embedding called on a visited record")
    if not rec.partial_views:
        raise ContractError("frontier record has no partial views")
    return np.mean(rec.partial_views, axis=0)


def observation_of(tmap: TopoMap, node: int) -> np.ndarray:
    """Raw view-space embedding of a node: own observation if visited, else frontier mean."""
    rec = tmap.records[node]
    if rec.status == "visited":
        return rec.own_observation
    return frontier_embedding(rec)


def node_basis(tmap: TopoMap, node: int, feature_dim: int) -> np.ndarray:
    """Raw per-node input to the encoder.

    [appearance | from-here | surroundings | visited, current, adjacent-to-current]
    where appearance is the mean of views of the node seen from elsewhere,
    from-here is the view taken at the current node (zeros if none) and
    surroundings is the node's own panorama mean (zeros while unvisited).
    """
    rec = tmap.records[node]
    if rec.status == "frontier" and rec.embedding_cache is not None:
        base = rec.embedding_cache
    else:
        app = np.mean(rec.partial_views, axis=0) if rec.partial_views else np.zeros(feature_dim)
        sur = rec.own_observation if rec.own_observation is not None else np.zeros(feature_dim)
        base = np.concatenate([app, sur])
        if rec.status == "frontier":
            rec.embedding_cache = base
    here = np.zeros(feature_dim)
    if tmap.current in rec.seen_from:
        here = rec.partial_views[rec.seen_from.index(tmap.current)]
    flags = np.array([rec.status == "visited", node == tmap.current,
                      node in tmap.adjacency.get(tmap.current, {})], dtype=np.float64)
    return np.concatenate([base[:feature_dim], here, base[feature_dim:], flags])


def candidate_set(tmap: TopoMap) -> CandidateSet:
    """Visited nodes in visit order, frontier nodes by id, STOP last."""
    if not tmap.records:
        raise ContractError("candidate_set on an empty map")
    return CandidateSet(tmap.visited() + tmap.frontier() + [STOP])


def init_tne(params: ParamStore, basis_dim: int, d_model: int) -> None:
    params.add_linear("tne.in", basis_dim, d_model)
    params.add("tne.stop", (1, d_model), init="normal")
    params.add_attention("tne.attn", d_model, d_model, d_model)
    params.add_mlp("tne.mlp", [d_model, d_model, d_model])


def tne_encode(tmap: TopoMap, instr_features: Tensor, params: ParamStore,
               candidates: CandidateSet | None = None) -> Tensor:
    """Instruction-conditioned node embeddings, one row per candidate (STOP last).

    Each node basis is projected to model width, updated by one residual
    cross-attention layer over the instruction tokens and one residual MLP.
    The STOP row is a learned vector added to the current node's projection.
    """
    if instr_features.shape[0] < 1:
        raise ContractError("instruction features are empty")
    cands = candidates or candidate_set(tmap)
    nodes = cands.nodes
    w_in = params["tne.in.W"]
    feature_dim = (w_in.shape[0] - 3) // 3
    basis = np.stack([node_basis(tmap, n, feature_dim) for n in nodes]).astype(w_in.dtype)
    x0 = linear(Tensor(basis), w_in, params["tne.in.b"])
    stop = params["tne.stop"] + x0[nodes.index(tmap.current)]
    x = concat([x0, stop], axis=0)
    x = x + cross_attention(x, instr_features, params, "tne.attn")
    return x + mlp(x, params, "tne.mlp")
