# One decision of the two-stage navigator: coarse scores, the lookahead node,
# the world model's guess of what it will look like, and the refined scores.
import numpy as np

from unemo.autodiff import Rng
from unemo.config import ModelConfig, TrainConfig
from unemo.encoders import encode_instruction
from unemo.graphworld import WorldSpec, generate_world, observe, sample_episode
from unemo.hpfn import step_policy
from unemo.topomap import TopoMap, update_map
from unemo.training import build_params

model = ModelConfig()
params = build_params(model, seed=0)
world = generate_world(WorldSpec(seed=1))
ep = sample_episode(world, Rng(0))

tmap = TopoMap()
update_map(tmap, ep.start, observe(world, ep.start, Rng(1)), world.adjacency[ep.start])
d = step_policy(tmap, encode_instruction(ep.instruction, params), params, TrainConfig(stop_in_lookahead=False))

print("candidates", d.candidates.entries)
print("stage-1 logits", d.logits1.data.round(3))
print("lookahead node", d.lookahead)
print("predicted state (first 5)", d.mwm_out.s_hat.data[0, :5].round(3))
print("stage-2 logits", d.logits2.data.round(3))
print("executed:", d.candidates.entries[d.executed("a2")])
print("embedding shift from feedback", np.abs(d.refined.data - d.node_embeddings.data).max())
