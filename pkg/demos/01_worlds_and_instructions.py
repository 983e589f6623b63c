# A synthetic world: random geometric graph, landmarks, panoramas and
# instructions built from the expert path.
import numpy as np

from unemo.autodiff import Rng
from unemo.graphworld import (Vocabulary, WorldSpec, follow_instruction, generate_world, observe, sample_episode,
                              shortest_path)

spec = WorldSpec(seed=3)
world = generate_world(spec)
print("nodes", world.node_count, "edges", len(world.edges()))
print("mean degree", np.mean([len(world.adjacency[n]) for n in range(world.node_count)]))

# each node shows one noisy view per neighbour
pano = observe(world, 0, Rng(0))
print("node 0 sees", [nb for nb, _, _ in pano.views], "view matrix", pano.feature_matrix().shape)

ep = sample_episode(world, Rng(1))
names = {v: k for k, v in Vocabulary(spec.landmark_count).names().items()}
print("episode", ep.start, "->", ep.goal, "expert path", ep.expert_path)
print("instruction:", " ".join(names[t] for t in ep.instruction))

path, length = shortest_path(world, ep.start, ep.goal)
print("geodesic %.3f" % length)

# instructions are unambiguous: replaying the tokens recovers the path
print("replay ok:", follow_instruction(world, ep.start, ep.instruction) == list(ep.expert_path))
