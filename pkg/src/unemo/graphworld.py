"""Procedural graph worlds: random geometric graphs with synthetic views.

Positions are drawn on the unit square and stored scaled by ``WorldSpec.scale``
(default 10) so that distances read like meters.  Landmark vectors and the
direction encoding basis are fixed across worlds (seeded by a package
constant), which is what lets a policy trained on one set of worlds
generalize to unseen ones.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Rng
from .errors import FormatError, GenerationError, LookupFailure, UnreachableError

FEATURE_SEED = 20240917
N_DIRECTIONS = 8
DIRECTION_NAMES = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
CORPUS_FORMAT = "unemo-world"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class WorldSpec:
    node_count: int = 30
    connection_radius: float = 0.35  # unit-square units, before scaling
    feature_dim: int = 32
    landmark_count: int = 16
    view_noise_std: float = 0.05
    seed: int = 0
    scale: float = 10.0
    landmark_jitter: float = 0.15
    direction_strength: float = 0.5
    path_cap: int = 8

    def validate(self) -> None:
        if self.node_count < 2:
            raise GenerationError(f"node_count must be >= 2, got {self.node_count}")
        if not self.connection_radius > 0:
            raise GenerationError(f"connection_radius must be > 0, got {self.connection_radius}")
        if self.feature_dim < 2 or self.landmark_count < 1:
            raise GenerationError("feature_dim must be >= 2 and landmark_count >= 1")
        if self.view_noise_std < 0:
            raise GenerationError("view_noise_std must be >= 0")
        if self.path_cap < 2:
            raise GenerationError("path_cap must be >= 2")


@dataclass
class World:
    positions: np.ndarray  # (n, 2)
    adjacency: dict[int, dict[int, float]]
    landmark: list[int]
    base_feature: np.ndarray  # (n, feature_dim)
    spec: WorldSpec

    @property
    def node_count(self) -> int:
        return len(self.landmark)

    @property
    def feature_dim(self) -> int:
        return self.base_feature.shape[1]

    def neighbors(self, node: int) -> list[int]:
        self._check(node)
        return sorted(self.adjacency[node])

    def edge_length(self, a: int, b: int) -> float:
        return self.adjacency[a][b]

    def distance(self, a: int, b: int) -> float:
        """Straight-line distance between two node positions."""
        d = self.positions[a] - self.positions[b]
        return math.hypot(float(d[0]), float(d[1]))

    def bearing(self, a: int, b: int) -> float:
        d = self.positions[b] - self.positions[a]
        return math.atan2(float(d[1]), float(d[0]))

    def _check(self, node: int) -> None:
        if not (isinstance(node, (int, np.integer)) and 0 <= node < self.node_count):
            raise LookupFailure(f"unknown node {node!r}")

    def edges(self) -> list[tuple[int, int, float]]:
        return [(a, b, w) for a in range(self.node_count) for b, w in sorted(self.adjacency[a].items()) if a < b]

    def geodesics_from(self, source: int) -> np.ndarray:
        """Shortest-path distances from ``source`` to every node (cached)."""
        cache = self.__dict__.setdefault("_geo_cache", {})
        if source not in cache:
            cache[source] = _dijkstra_dist(self.adjacency, source, self.node_count)
        return cache[source]


@dataclass(frozen=True)
class Episode:
    start: int
    goal: int
    expert_path: tuple[int, ...]
    instruction: tuple[int, ...]


@dataclass
class Panorama:
    at: int
    views: list[tuple[int, float, np.ndarray]] = field(default_factory=list)

    def feature_matrix(self) -> np.ndarray:
        return np.stack([v[2] for v in self.views])


# fixed feature tables --------------------------------------------------------
_TABLES: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def feature_tables(feature_dim: int, landmark_count: int) -> tuple[np.ndarray, np.ndarray]:
    """(landmark unit vectors, 2-row direction basis) shared by all worlds."""
    key = (feature_dim, landmark_count)
    if key not in _TABLES:
        rng = Rng(FEATURE_SEED)
        lm = rng.child("landmarks").normal((landmark_count, feature_dim))
        lm /= np.linalg.norm(lm, axis=1, keepdims=True)
        basis = rng.child("directions").normal((2, feature_dim))
        basis[0] /= np.linalg.norm(basis[0])
        basis[1] -= basis[1] @ basis[0] * basis[0]
        basis[1] /= np.linalg.norm(basis[1])
        _TABLES[key] = (lm, basis)
    return _TABLES[key]


def direction_encoding(angle: float, spec: WorldSpec) -> np.ndarray:
    _, basis = feature_tables(spec.feature_dim, spec.landmark_count)
    return spec.direction_strength * (math.cos(angle) * basis[0] + math.sin(angle) * basis[1])


# generation -------------------------------------------------------------------
def is_connected(adjacency: dict[int, dict[int, float]], n: int) -> bool:
    if n == 0:
        return True
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adjacency[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


def generate_world(spec: WorldSpec) -> World:
    """Connected random geometric graph; retries with a bumped sub-seed up to 100 times."""
    spec.validate()
    root = Rng(spec.seed).child("world")
    for attempt in range(100):
        rng = root.child(attempt)
        unit = rng.uniform(0.0, 1.0, (spec.node_count, 2))
        adjacency: dict[int, dict[int, float]] = {i: {} for i in range(spec.node_count)}
        pos = unit * spec.scale
        for i in range(spec.node_count):
            for j in range(i + 1, spec.node_count):
                if np.hypot(*(unit[i] - unit[j])) <= spec.connection_radius:
                    w = math.hypot(float(pos[i, 0] - pos[j, 0]), float(pos[i, 1] - pos[j, 1]))
                    adjacency[i][j] = w
                    adjacency[j][i] = w
        if not is_connected(adjacency, spec.node_count):
            continue
        lm_table, _ = feature_tables(spec.feature_dim, spec.landmark_count)
        landmark = [int(x) for x in rng.child("landmark").integers(0, spec.landmark_count, spec.node_count)]
        jitter = rng.child("jitter").normal((spec.node_count, spec.feature_dim)) * (
            spec.landmark_jitter / math.sqrt(spec.feature_dim))
        base = lm_table[landmark] + jitter
        return World(pos, adjacency, landmark, base, spec)
    raise GenerationError(
        f"radius {spec.connection_radius} did not yield a connected graph of {spec.node_count} nodes "
        "after 100 attempts")


def world_from_edges(positions, edges: Iterable[tuple[int, int]], landmark=None, spec: WorldSpec | None = None,
                     base_feature=None) -> World:
    """Hand-built world; edge lengths are the Euclidean distances of the given positions."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    spec = spec or WorldSpec(node_count=n)
    adjacency: dict[int, dict[int, float]] = {i: {} for i in range(n)}
    for a, b in edges:
        if a == b:
            raise GenerationError("self-loops are not allowed")
        w = math.hypot(float(positions[a, 0] - positions[b, 0]), float(positions[a, 1] - positions[b, 1]))
        adjacency[a][b] = w
        adjacency[b][a] = w
    landmark = list(range(n)) if landmark is None else [int(x) for x in landmark]
    landmark = [x % spec.landmark_count for x in landmark]
    if base_feature is None:
        lm_table, _ = feature_tables(spec.feature_dim, spec.landmark_count)
        base_feature = lm_table[landmark].copy()
    return World(positions, adjacency, landmark, np.asarray(base_feature, dtype=np.float64), spec)


# shortest paths ----------------------------------------------------------------
def _dijkstra_dist(adjacency, source: int, n: int) -> np.ndarray:
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adjacency[u].items():
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


TIE_TOL = 1e-9  # relative; path lengths closer than this count as equal


def _distances_to(adjacency: dict[int, dict[int, float]], target: int) -> dict[int, float]:
    dist = {target: 0.0}
    heap = [(0.0, target)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adjacency.get(u, {}).items():
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def shortest_path_in(adjacency: dict[int, dict[int, float]], a: int, b: int) -> tuple[list[int], float]:
    """Shortest a→b path; lengths equal up to ``TIE_TOL`` resolve to the
    lexicographically smallest node sequence.

    Distances to ``b`` come from Dijkstra; the path is then built greedily,
    always stepping to the smallest neighbour that stays on a shortest route.
    The returned length is the edge sum along the returned path.
    """
    if a == b:
        return [a], 0.0
    dist = _distances_to(adjacency, b)
    if a not in dist:
        raise UnreachableError(f"node {b} is unreachable from {a}")
    path, total, u = [a], 0.0, a
    while u != b:
        slack = TIE_TOL * max(1.0, dist[u])
        u_next = min(v for v, w in adjacency[u].items() if v in dist and w + dist[v] <= dist[u] + slack)
        total += adjacency[u][u_next]
        path.append(u_next)
        u = u_next
    return path, total


def shortest_path(world: World, a: int, b: int) -> tuple[list[int], float]:
    world._check(a)
    world._check(b)
    return shortest_path_in(world.adjacency, a, b)


# instructions --------------------------------------------------------------------
@dataclass(frozen=True)
class Vocabulary:
    landmark_count: int

    @property
    def goal(self) -> int:
        return N_DIRECTIONS + self.landmark_count

    @property
    def pad(self) -> int:
        return N_DIRECTIONS + self.landmark_count + 1

    @property
    def size(self) -> int:
        return N_DIRECTIONS + self.landmark_count + 2

    def direction(self, k: int) -> int:
        return k % N_DIRECTIONS

    def landmark(self, lm: int) -> int:
        return N_DIRECTIONS + lm

    def name(self, token: int) -> str:
        if token < N_DIRECTIONS:
            return f"DIR_{DIRECTION_NAMES[token]}"
        if token < self.goal:
            return f"LM_{token - N_DIRECTIONS}"
        return "GOAL" if token == self.goal else "PAD"

    def names(self) -> dict[str, int]:
        return {self.name(i): i for i in range(self.size)}


def quantize_bearing(angle: float) -> int:
    """8-way sector index, sector 0 centred on due east, counter-clockwise."""
    return int(round(angle / (math.pi / 4))) % N_DIRECTIONS


def synthesize_instruction(path: Sequence[int], world: World) -> tuple[int, ...]:
    vocab = Vocabulary(world.spec.landmark_count)
    tokens: list[int] = []
    for u, v in zip(path[:-1], path[1:]):
        tokens.append(vocab.direction(quantize_bearing(world.bearing(u, v))))
        tokens.append(vocab.landmark(world.landmark[v]))
    tokens += [vocab.goal, vocab.landmark(world.landmark[path[-1]])]
    return tuple(tokens)


def follow_instruction(world: World, start: int, tokens: Sequence[int]) -> list[int]:
    """Greedy decoder: at each (direction, landmark) pair step to the lowest-id
    neighbor matching both. Used to audit that instructions are unambiguous."""
    vocab = Vocabulary(world.spec.landmark_count)
    path = [start]
    for i in range(0, len(tokens) - 2, 2):
        d, lm = tokens[i], tokens[i + 1] - N_DIRECTIONS
        here = path[-1]
        match = [v for v in world.neighbors(here)
                 if quantize_bearing(world.bearing(here, v)) == d and world.landmark[v] == lm]
        if not match:
            break
        path.append(match[0])
    if tokens[-2] != vocab.goal:
        raise FormatError("instruction does not end with GOAL + landmark")
    return path


def _unambiguous(world: World, path: Sequence[int]) -> bool:
    for u, v in zip(path[:-1], path[1:]):
        sector, lm = quantize_bearing(world.bearing(u, v)), world.landmark[v]
        for w in world.neighbors(u):
            if w != v and world.landmark[w] == lm and quantize_bearing(world.bearing(u, w)) == sector:
                return False
    return True


def make_episode(world: World, start: int, goal: int) -> Episode:
    path, _ = shortest_path(world, start, goal)
    return Episode(start, goal, tuple(path), synthesize_instruction(path, world))


def sample_episode(world: World, rng: Rng, cap: int | None = None, max_tries: int = 1000) -> Episode:
    """Random start ≠ goal whose expert geodesic has 2..cap nodes and whose
    instruction decodes back to exactly that path."""
    cap = cap or world.spec.path_cap
    n = world.node_count
    for _ in range(max_tries):
        start = int(rng.integers(0, n))
        goal = int(rng.integers(0, n - 1))
        if goal >= start:
            goal += 1
        path, _ = shortest_path(world, start, goal)
        if 2 <= len(path) <= cap and _unambiguous(world, path):
            return Episode(start, goal, tuple(path), synthesize_instruction(path, world))
    # fall back to a single hop from a random node, ambiguity permitting
    start = int(rng.integers(0, n))
    goal = world.neighbors(start)[0]
    return make_episode(world, start, goal)


# observations ------------------------------------------------------------------
def _view(world: World, at: int, nb: int) -> tuple[float, np.ndarray]:
    angle = world.bearing(at, nb)
    return angle, world.base_feature[nb] + direction_encoding(angle, world.spec)


def observe(world: World, node: int, rng: Rng | None = None, noise_std: float | None = None) -> Panorama:
    """One view per neighbor (ascending id): neighbor feature + direction code + noise."""
    world._check(node)
    std = world.spec.view_noise_std if noise_std is None else noise_std
    pano = Panorama(node)
    for nb in world.neighbors(node):
        angle, feat = _view(world, node, nb)
        if std > 0:
            if rng is None:
                raise ValueError("a noisy observation needs an rng")
            feat = feat + rng.normal(feat.shape) * std
        pano.views.append((nb, angle, feat))
    return pano


def node_visual_state_raw(world: World, node: int) -> np.ndarray:
    """Noiseless stacked views from ``node`` toward each neighbor, ordered by id."""
    world._check(node)
    return np.stack([_view(world, node, nb)[1] for nb in world.neighbors(node)])


# corpus serialization --------------------------------------------------------------
def _floats(a) -> list:
    return [float(x) for x in np.asarray(a).reshape(-1)]


def world_records(world: World, episodes: Sequence[Episode] = (), split: str = "train") -> list[dict]:
    recs: list[dict] = [{"record": "header", "format": CORPUS_FORMAT, "version": CORPUS_VERSION,
                         "split": split, "spec": asdict(world.spec)}]
    for i in range(world.node_count):
        recs.append({"record": "node", "id": i, "pos": _floats(world.positions[i]),
                     "landmark": world.landmark[i], "feature": _floats(world.base_feature[i])})
    for a, b, w in world.edges():
        recs.append({"record": "edge", "a": a, "b": b, "length": w})
    for ep in episodes:
        recs.append({"record": "episode", "start": ep.start, "goal": ep.goal,
                     "path": list(ep.expert_path), "instruction": list(ep.instruction)})
    return recs


def save_world(path, world: World, episodes: Sequence[Episode] = (), split: str = "train") -> None:
    lines = [json.dumps(r, separators=(",", ":")) for r in world_records(world, episodes, split)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_world(path) -> tuple[World, list[Episode], str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty corpus file")
    head = json.loads(lines[0])
    if head.get("record") != "header" or head.get("format") != CORPUS_FORMAT:
        raise FormatError(f"{path}: not a world corpus file")
    if head.get("version") != CORPUS_VERSION:
        raise FormatError(f"{path}: unsupported version {head.get('version')}")
    spec = WorldSpec(**head["spec"])
    nodes, edges, episodes = [], [], []
    for line in lines[1:]:
        r = json.loads(line)
        kind = r.get("record")
        if kind == "node":
            nodes.append(r)
        elif kind == "edge":
            edges.append(r)
        elif kind == "episode":
            episodes.append(Episode(r["start"], r["goal"], tuple(r["path"]), tuple(r["instruction"])))
        else:
            raise FormatError(f"{path}: unknown record type {kind!r}")
    nodes.sort(key=lambda r: r["id"])
    pos = np.array([r["pos"] for r in nodes], dtype=np.float64)
    adjacency: dict[int, dict[int, float]] = {i: {} for i in range(len(nodes))}
    for e in edges:
        adjacency[e["a"]][e["b"]] = e["length"]
        adjacency[e["b"]][e["a"]] = e["length"]
    world = World(pos, adjacency, [r["landmark"] for r in nodes],
                  np.array([r["feature"] for r in nodes], dtype=np.float64), spec)
    return world, episodes, head.get("split", "train")


# corpus assembly ---------------------------------------------------------------------
SPLIT_OFFSETS = {"train": 0, "val": 100_000}


def world_seed(base: int, split: str, index: int) -> int:
    if split not in SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}")
    return int(base) + SPLIT_OFFSETS[split] + int(index)


def build_split(spec: WorldSpec, split: str, count: int, episodes_per_world: int) -> list[tuple[World, list[Episode]]]:
    """``count`` worlds of a split with their sampled episodes; a pure function of its arguments."""
    out = []
    for i in range(count):
        seed = world_seed(spec.seed, split, i)
        world = generate_world(replace(spec, seed=seed))
        rng = Rng(seed).child("episodes")
        out.append((world, [sample_episode(world, rng.child(k)) for k in range(episodes_per_world)]))
    return out
