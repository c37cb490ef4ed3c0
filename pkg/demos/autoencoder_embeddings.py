"""
Similarity space from a small autoencoder
=========================================

Train the dense autoencoder with the contractive loss on the synthetic glyph
images and compare how well the bottleneck codes group by class before and
after training.
"""
import numpy as np

from ddsnas.autoencoder import AutoencoderConfig, EncoderDecoder, clustering_score, embed_dataset, train_autoencoder
from ddsnas.data import SyntheticSpec, synthetic_dataset

train, _ = synthetic_dataset(SyntheticSpec(n_train=2000, n_test=0, seed=0))
train = train.standardized()
x, y = train.flat(), train.labels

cfg = AutoencoderConfig(bottleneck=32, epochs=10)
model = EncoderDecoder(x.shape[1], cfg.bottleneck, cfg.hidden, rng=np.random.default_rng(0))
before = clustering_score(embed_dataset(model, x, y))

model, log = train_autoencoder(x, y, cfg, rng=np.random.default_rng(0), model=model)
after = clustering_score(embed_dataset(model, x, y))

print("loss per epoch:", " ".join(f"{v:.4f}" for v in log.epoch_loss))
print(f"clustering score (between / within class distance): {before:.4f} untrained, {after:.4f} trained")
