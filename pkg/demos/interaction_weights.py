"""Print the interaction attention of an untrained model over four proposals.

Each row is a softmax over all proposals, self included, so it sums to one.
The rows differ because the score network mixes both proposals' features
before its nonlinearity.
"""
import numpy as np

from pedcast import sti
from pedcast.nn import Tensor

rng = np.random.default_rng(0)
cfg = sti.STIConfig(phi_dim=8, alpha_hidden=16, interaction_dim=8)
params = sti.init_sti_params(rng, cfg, channels=4, t=3)
base = rng.normal(size=(2, cfg.feature_dim))
f = np.vstack([base[0], base[0] + 0.01, base[1], base[1] + 0.01])
g, w = sti.interaction(Tensor(f), params, cfg, return_weights=True)
np.set_printoptions(precision=3, suppress=True)
print("attention weights (rows sum to 1):")
print(w.data)
print("row sums:", w.data.sum(axis=1))
print("interaction embedding shape:", g.shape)
