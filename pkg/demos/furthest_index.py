"""
Furthest-neighbour queries on per-class kd-trees
================================================

Build one tree per class over random points, ask for the furthest point of
a class from a query, and count how many leaves the search had to open.
"""
import numpy as np

from ddsnas.embeddings import Embeddings
from ddsnas.index import brute_force_furthest, build_index, furthest, k_furthest

rng = np.random.default_rng(0)
points = rng.uniform(size=(20000, 8))
labels = rng.integers(0, 4, size=len(points))
emb = Embeddings(np.arange(len(points)), labels, points)
index = build_index(emb, leaf_size=8)

for c, tree in sorted(index.trees.items()):
    print(f"class {c}: {tree.size} points, {tree.n_leaves} leaves, depth {tree.depth}")

q = rng.uniform(size=8)
sid, dist = furthest(index, 2, q)
print("tree   :", sid, round(dist, 6), f"({index.last_leaves_visited} leaves opened)")
print("scan   :", *brute_force_furthest(emb, 2, q))

# excluding the winner hands back the runner-up
print("top 3  :", k_furthest(index, 2, q, 3))
print("no #1  :", furthest(index, 2, q, exclude={sid}))
