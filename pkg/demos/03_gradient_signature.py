"""
The gradient of a single linear layer
=====================================

For o = W x and loss L = ||o||, dL/dW is the outer product of o/||o|| and x.
That rank-1 structure means the gradient never has to be built: its
Frobenius norm is ||x||, and its element moments factor into moments of the
two vectors.
"""

import numpy as np

from gradprint.gradsig import exact_stats, forward, gradient_factors, loss, sampled_stats

rng = np.random.default_rng(1)
W = rng.normal(size=(300, 200))
x = rng.normal(size=200)
gf = gradient_factors(x, forward(x, W))

# Finite differences on one entry agree with the outer product.
h = 1e-4
Wp, Wm = W.copy(), W.copy()
Wp[7, 3] += h
Wm[7, 3] -= h
print("analytic  G[7,3] =", gf.o_hat[7] * x[3])
print("numerical G[7,3] =", (loss(forward(x, Wp)) - loss(forward(x, Wm))) / (2 * h))

print("||G||_F =", gf.fro_norm, " ||x|| =", np.linalg.norm(x))

# Exact moments in O(m + d) against uniform sampling of 500k entries.
exact = exact_stats(gf)
approx = sampled_stats(gf, 500_000, seed=3)
for field in ("mean", "std", "skewness", "kurtosis"):
    print(f"{field:>9}: exact {getattr(exact, field): .6f}  sampled {getattr(approx, field): .6f}")
