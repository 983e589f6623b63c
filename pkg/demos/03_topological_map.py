# Walking a world and growing the agent's map: visited nodes, frontier nodes
# seen from several places, and the candidate set the policy scores.
from unemo.autodiff import Rng
from unemo.graphworld import WorldSpec, generate_world, observe
from unemo.topomap import TopoMap, candidate_set, frontier_embedding, update_map

world = generate_world(WorldSpec(seed=5))
tmap = TopoMap()
node = 0
rng = Rng(2)
for t in range(4):
    update_map(tmap, node, observe(world, node, rng.child(t)), world.adjacency[node])
    print("at", node, "visited", tmap.visited(), "frontier", tmap.frontier())
    node = min(n for n in world.adjacency[node] if n not in tmap.visited()) \
        if any(n not in tmap.visited() for n in world.adjacency[node]) else min(world.adjacency[node])

# a frontier node's embedding is the mean of its partial views
many = [n for n in tmap.frontier() if len(tmap.records[n].partial_views) > 1]
for n in many[:2]:
    print("frontier", n, "seen", len(tmap.records[n].partial_views), "times, emb[:3]",
          frontier_embedding(tmap.records[n])[:3].round(3))

print("candidates", candidate_set(tmap).entries)
