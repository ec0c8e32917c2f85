# coding: utf-8
# # Cosine distance, its gradient, and gradient checking
#
# The smoothness penalty compares a clean embedding with a perturbed one
# through CD(a, b) = (1 - cos(a, b)) / 2. Everything downstream relies on
# analytic gradients, so this script checks them against central differences.

# In[1]:

import numpy as np

from cdvat import embedder
from cdvat.numerics import cosine_distance, cosine_distance_grad, finite_diff_grad, relative_error

print(cosine_distance([1, 0], [0, 1]), cosine_distance([1, 0], [-1, 0]))

# The gradient with respect to the second argument has no radial part:
# rescaling an embedding does not change its direction.

# In[2]:

e, er = np.array([2.0, 0.0]), np.array([0.0, 3.0])
g = cosine_distance_grad(e, er)
print(g, g @ er)
print(finite_diff_grad(lambda v: cosine_distance(e, v), er))

# # The whole embedder
#
# A small TDNN with attentive pooling. Backprop all the way to the input
# frames and compare with finite differences.

# In[3]:

cfg = embedder.EmbedderConfig(input_dim=4, layer_contexts=((-1, 0, 1), (0,)), layer_sizes=(8, 6),
                              attention_hidden=4, embedding_dim=4, window_len=9, base_shift=4, context_stride=2)
rng = np.random.default_rng(0)
params = embedder.init_parameters(cfg, n_classes=3, rng=rng)
x = rng.standard_normal((cfg.window_len, cfg.input_dim))
e_clean = embedder.embed_window(x, params, cfg)

r = 0.2 * rng.standard_normal(x.shape)
e_pert = embedder.embed_window(x + r, params, cfg)
_, dx = embedder.forward_backward(x + r, params, cfg, cosine_distance_grad(e_clean, e_pert))
fd = finite_diff_grad(lambda z: cosine_distance(e_clean, embedder.embed_window(x + z, params, cfg)), r)
print("relative error", relative_error(dx, fd))
