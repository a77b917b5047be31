"""
A discrete flow on two tokens
=============================

Two coupled pairs, an exact denoiser, a simulated chain and a learned table.
Run with ``python3 demos/toy_flow.py``.
"""

import numpy as np

from retroflow.denoiser import CouplingDataset, ExactDenoiser, JointFeaturizer, mean_posterior_kl, train_tabular
from retroflow.discrete import RandomStream, empirical, total_variation
from retroflow.flow import StreamBatch, TimeGrid, simulate_batch, state_index

# Two source/target pairs over binary tokens. From (0, 0) the flow goes to
# (1, 1) with probability 0.7 and to (0, 1) otherwise.
ds = CouplingDataset([[0, 0], [0, 0]], [[1, 1], [0, 1]], [2, 2], weights=[0.7, 0.3])

# Posterior of the clean token given a noisy state half way along the path.
den = ExactDenoiser(ds)
print("p(x1 | x_t=(0,1), t=0.5) per dimension:")
print(np.round(den(np.array([[0, 1]]), 0.5)[0], 3))

# Simulate many chains with the Euler kernel and compare the endpoint law.
n = 20000
xs = simulate_batch(np.zeros((n, 2), dtype=np.int64), den, TimeGrid(20), "euler", StreamBatch(0, np.arange(n)))
hist = empirical(state_index(xs, ds.vocab_sizes), 4)
truth = np.array([0.0, 0.3, 0.0, 0.7])  # states 00, 01, 10, 11
print("empirical endpoint law:", np.round(hist.weights, 3))
print("TV to the data:", round(total_variation(hist, truth), 4))

# The same posterior learned from samples with a lookup table.
model = train_tabular(ds, epochs=500, featurizer=JointFeaturizer(ds.vocab_sizes), rng=RandomStream(1))
print("mean KL of the learned table:", f"{mean_posterior_kl(ds, model):.2e}")
curve = model.meta["curve"]
print("training loss, first and last epoch:", round(curve[0], 4), round(curve[-1], 4))
