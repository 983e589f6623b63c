import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from unemo.config import ModelConfig, RunConfig, TrainConfig
from unemo.graphworld import Episode, WorldSpec, make_episode, world_from_edges

# tiny model used by the unit tests
TINY = ModelConfig(feature_dim=8, landmark_count=5, d_model=12, z_dim=4, s_dim=6, v_max=4)


def five_node_world():
    """Hand-built fixture (plane units):

        4 (0,4) ------------ 3 (6,4)
        |                    |
        0 (0,0) -- 1 (3,0) -- 2 (6,0)

    0-1 = 3, 1-2 = 3, 2-3 = 4, 0-4 = 4, 4-3 = 6.
    """
    spec = WorldSpec(node_count=5, feature_dim=TINY.feature_dim, landmark_count=TINY.landmark_count,
                     view_noise_std=0.0)
    pos = [[0, 0], [3, 0], [6, 0], [6, 4], [0, 4]]
    return world_from_edges(pos, [(0, 1), (1, 2), (2, 3), (0, 4), (4, 3)], landmark=[0, 1, 2, 3, 4], spec=spec)


def detour_world():
    """Corridor 0-1-2-3-4 along y=0 (spacing 4) plus a side branch 1-5-6 and a
    shortcut 6-4; node 7 hangs off 5. The goal is 4."""
    spec = WorldSpec(node_count=8, feature_dim=TINY.feature_dim, landmark_count=TINY.landmark_count,
                     view_noise_std=0.0)
    pos = [[0, 0], [4, 0], [8, 0], [12, 0], [16, 0], [6, 5], [11, 6], [3, 8]]
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 4), (5, 7)]
    return world_from_edges(pos, edges, landmark=[0, 1, 2, 3, 4, 0, 1, 2], spec=spec)


@pytest.fixture
def world5():
    return five_node_world()


@pytest.fixture
def world_detour():
    return detour_world()


@pytest.fixture
def tiny_model():
    return TINY


@pytest.fixture
def fast_train():
    return TrainConfig(phases=1, batches_per_phase=4, val_episodes=4, mwm_retrain_batches=2)


def fake_traj(world, start, goal, nodes, tl=None):
    """Minimal trajectory record for metric tests."""
    if tl is None:
        tl = sum(world.edge_length(u, v) for u, v in zip(nodes[:-1], nodes[1:]))
    ep = Episode(start, goal, (), ())
    return SimpleNamespace(episode=ep, nodes=list(nodes), path_length=tl)


def tiny_run_config(tmp_path, **train):
    spec = WorldSpec(node_count=12, feature_dim=TINY.feature_dim, landmark_count=TINY.landmark_count,
                     connection_radius=0.5)
    tc = dataclasses.replace(TrainConfig(phases=1, batches_per_phase=6, val_episodes=4, mwm_retrain_batches=2),
                             **train)
    return RunConfig(world=spec, model=dataclasses.replace(TINY), train=tc, corpus_dir=str(tmp_path / "corpus"),
                     ae_checkpoint=str(tmp_path / "ae.ckpt"), train_worlds=3, val_worlds=2, episodes_per_world=2,
                     ae_epochs=2, ae_corpus_size=200, sweep_seeds=5)
