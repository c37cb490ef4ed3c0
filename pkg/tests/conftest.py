import pytest

from ddsnas.config import load_config

# a run small enough for unit tests (about a second)
SMALL = ["data.n_train=400", "data.n_test=100", "curriculum.subset_size=20", "supernet.max_epochs=25",
         "autoencoder.epochs=2", "autoencoder.hidden=[16]", "autoencoder.bottleneck=4", "supernet.n_nodes=2",
         "finetune.batch_size=32"]


@pytest.fixture
def small_cfg(tmp_path):
    def make(*extra):
        return load_config(None, SMALL + [f"output_dir={tmp_path / 'run'}"] + list(extra))
    return make
