"""
Single-step retrosynthesis on synthetic graphs
==============================================

Generate reactions, train the two denoisers, then sample reactants for a few
test products with and without reward steering. Small settings, so the
numbers are noisy; the CLI runs the full sizes.
"""

import tempfile
from pathlib import Path

from retroflow import harness
from retroflow.harness import DataConfig, ExperimentConfig, TrainConfig

root = Path(tempfile.mkdtemp())
data = harness.generate_data(DataConfig(output=str(root / "data"), n_train=400, n_valid=0, n_test=40,
                                        dummy_count=2))
r = data["test"][0]
print("a test product has", r.product.n, "atoms; its reactants have", r.reactants.n)

bundle = harness.train_models(TrainConfig(dataset=str(root / "data"), output=str(root / "model.json"),
                                          dummy_count=2, epochs=100))

base = ExperimentConfig(T=20, N=40, K=4, lam=5.0, budgets=[28, 12], dummy_count=2, ks=[1, 3, 5])
for mode in ("rpf", "rpf-rs", "rsf-rs"):
    rep = harness.run_experiment(base.replace(mode=mode), bundle, data["test"])
    m = rep["metrics"]
    print(f"{mode:7s} exact@1 {m['exact']['1']:.3f}  round-trip@5 {m['round_trip']['5']:.3f}  "
          f"coverage@5 {m['coverage']['5']:.3f}")
