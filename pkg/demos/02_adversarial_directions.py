# coding: utf-8
# # Finding the most sensitive input direction
#
# Power iteration with finite-difference Hessian-vector products. First on a
# toy model whose Hessian we know, then on a randomly initialised embedder.

# In[1]:

import numpy as np

from cdvat import embedder
from cdvat.perturbation import (EmbedderModel, LinearEmbedding, PerturbationConfig, adversarial_reports,
                                hessian_vector_product, power_iterate)

# e(r) = e0 + M r with e0 orthogonal to range(M) gives CD ~ |M r|^2 / 4, so
# the Hessian at r = 0 is M^T M / 2. Pick M so that it is diag(9, 1, 0.1).

# In[2]:

lam = np.array([9.0, 1.0, 0.1])
toy = LinearEmbedding(np.r_[1.0, 0, 0, 0], np.vstack([np.zeros(3), np.diag(np.sqrt(2 * lam))]), (3,))
x = np.zeros((1, 3))
for K in (1, 2, 3):
    _, d, dots = power_iterate(toy, x, PerturbationConfig(epsilon=1.0, zeta=0.005, K=K), np.random.default_rng(4))
    rq = d[0] @ hessian_vector_product(toy, x, d, 0.005)[0]
    print(f"K={K}  direction {np.round(d[0], 4)}  Rayleigh quotient {rq:.4f}")

# On the embedder, compare LCS along the power-iteration direction with
# LCS along the random start, at the same norm.

# In[3]:

cfg = embedder.EmbedderConfig()
rng = np.random.default_rng(1)
params = embedder.init_parameters(cfg, n_classes=5, rng=rng)
windows = rng.standard_normal((20, cfg.window_len, cfg.input_dim))
reports = adversarial_reports(EmbedderModel(params, cfg), windows, PerturbationConfig(3.0, 0.005, 2), rng)
ratios = np.array([r.ratio for r in reports])
print("median adversarial / random LCS:", np.median(ratios))
print("d(1).d(2) median:", np.median([r.iterates_dot[1] for r in reports]))
