"""
A complete search on a small problem
====================================

Run the three ablation modes once each on a reduced synthetic dataset and
print the resulting architectures and accuracies.  The default configuration
is larger; ``ddsnas ablate`` runs it.
"""
from ddsnas.config import load_config
from ddsnas.pipeline import run_search

overrides = ["data.n_train=1500", "data.n_test=500", "curriculum.subset_size=50", "supernet.max_epochs=60",
             "autoencoder.epochs=5", "supernet.n_nodes=3"]

for mode in ("full", "untrained-autoencoder", "fixed-subset"):
    cfg = load_config(None, overrides + [f"mode={mode}"])
    arch, m = run_search(cfg, write=False)
    print(f"{mode:>22}: search acc {m.search_accuracy:.3f}, fine-tune acc {m.finetune_accuracy:.3f}, "
          f"{m.refresh_count} refreshes, {m.unique_visited} samples seen, {m.param_count} parameters")
    print("    " + arch.genotype_text().replace("\n", "\n    ").rstrip())
