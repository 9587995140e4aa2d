"""Tour of the prox-attention layer on a small token ensemble.

Shows the soft-thresholding prox, the interaction kernel's behavior with
and without shrinkage, attention weights, one layer application, and the
per-token displacement divergence checked against finite differences.
"""

import numpy as np

from proxflow import RwpoParams, attention_weights, kernel_u, soft_threshold
from proxflow.layer import sparse_attention_divergence, sparse_attention_step

rng = np.random.default_rng(0)

print("== soft thresholding ==")
x = np.array([1.2, 0.3, -1.0, 0.05])
print(f"x          = {x}")
print(f"S_0.5(x)   = {soft_threshold(x, 0.5)}")
print(f"S_0(x)     = {soft_threshold(x, 0.0)}   (identity)")

print("\n== interaction kernel ==")
p0 = RwpoParams(lam=0.0, beta=1.0, h=0.1)
p1 = RwpoParams(lam=1.0, beta=1.0, h=0.1)
a, b = np.array([1.0, 0.0]), np.array([0.0, 0.5])
print(f"no shrinkage:   U(a,b) = {kernel_u(a, b, p0):+.4f}"
      f"   (Gaussian kernel, -beta|a-b|^2/(4h) = {-np.sum((a-b)**2)/0.4:+.4f})")
print(f"with shrinkage: U(a,b) = {kernel_u(a, b, p1):+.4f}"
      "   (source token's shrink residual and L1 bonus enter)")

print("\n== one layer application ==")
tokens = rng.normal(size=(6, 2))
w = attention_weights(tokens, p1)
print("attention row sums:", np.round(w.sum(axis=1), 12))
print("self weights:      ", np.round(np.diag(w), 3))
stepped = sparse_attention_step(tokens, p1)
print("max displacement:  ", np.abs(stepped - tokens).max().round(4))

print("\n== displacement divergence vs finite differences ==")
div = sparse_attention_divergence(tokens, p1)
j = 0
delta = 1e-5
fd = 0.0
for i in range(2):
    for sign in (1, -1):
        shifted = tokens.copy()
        shifted[j, i] += sign * delta
        disp = sparse_attention_step(shifted, p1)[j] - shifted[j]
        fd += sign * disp[i] / (2 * delta)
print(f"closed form: {div[j]:+.8f}")
print(f"central FD:  {fd:+.8f}")
