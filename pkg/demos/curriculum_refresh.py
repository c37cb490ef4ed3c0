"""
Subset refresh by hand
======================

Drive the curriculum with made-up feedback: after the warmup, once the subset
is mastered, easy members are swapped for the most dissimilar unused sample
of the same class and hard ones stay.
"""
import numpy as np

from ddsnas import curriculum as cur
from ddsnas.embeddings import Embeddings
from ddsnas.index import build_index

rng = np.random.default_rng(1)
labels = np.repeat(np.arange(5), 200)
emb = Embeddings(np.arange(len(labels)), labels, rng.normal(size=(len(labels), 8)))
index = build_index(emb)
state = cur.init_subset(labels, 20, seed=1, warmup_epochs=3)

for epoch in range(1, 7):
    ids = np.array(state.subset)
    # most samples confidently right, a few stubborn ones
    prob = np.where(ids % 7 == 0, 0.05, 0.97)
    fb = cur.EpochFeedback(ids, prob, prob > 0.5)
    report = cur.advance_epoch(state, fb, index)
    if report is None:
        print(f"epoch {epoch}: no refresh")
        continue
    print(f"epoch {epoch}: refresh {report.refresh_id}, kept {report.retained_count}, swapped {len(report.swaps)}")
    for r in report.swaps[:3]:
        print(f"    {r.replaced_id} -> {r.replacement_id} (class {r.class_label}, distance {r.distance:.3f})")

print("class counts:", np.bincount(labels[state.subset]))
print("samples seen so far:", len(state.visited))
