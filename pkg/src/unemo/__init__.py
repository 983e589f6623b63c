"""Desk-scale navigator with a multimodal world model, on synthetic graph worlds."""
from .autodiff import ParamStore, Rng, Tensor, adam_step, finite_diff_grad_check, no_grad
from .config import ModelConfig, RunConfig, TrainConfig
from .encoders import autoencoder_train, init_autoencoder, node_state_label
from .evalmetrics import MetricsReport, PredictionStats, compute_metrics, prediction_stats
from .graphworld import Episode, World, WorldSpec, build_split, generate_world, observe, sample_episode, shortest_path
from .hpfn import StepDecision, step_policy
from .mwm import MWMOutput, mwm_loss, mwm_predict
from .topomap import STOP, TopoMap, candidate_set, tne_encode, update_map
from .training import Agent, build_params, evaluate, rollout, train

__version__ = "0.1.0"
