# Spectral bases of a weight matrix: the column space, the row space and their
# complements, all read off one full SVD.
import logging

import numpy as np

from prolora import spectral_bases
from prolora.linalg import projector, truncated_svd

logging.basicConfig(level=logging.INFO)
rng = np.random.default_rng(0)

# a 6x5 weight of rank 3
w = rng.standard_normal((6, 3)) @ rng.standard_normal((3, 5))
b = spectral_bases(w)
print("rank:", b.rank)
print("singular values:", np.round(b.singular_values, 4))
print("u_par", b.u_par.shape, "u_perp", b.u_perp.shape)
print("v_par", b.v_par.shape, "v_perp", b.v_perp.shape)

# the projectors split the identity
p, q = projector(b.u_par), projector(b.u_perp)
print("P + P_perp == I ?", np.allclose(p + q, np.eye(6)))
print("P is idempotent ?", np.allclose(p @ p, p))
print("P annihilates the left nullspace of W^T ?", np.allclose(q @ w, 0))

# sign convention: the largest-magnitude entry of each left vector is positive
print("column maxima positive:", (b.u[np.abs(b.u).argmax(axis=0), range(6)] > 0).all())

# rank tolerance: a tiny perturbation does not change the rank
noisy = w + 1e-14 * rng.standard_normal(w.shape)
print("rank after 1e-14 noise:", spectral_bases(noisy).rank)
print("rank with a loose tolerance on a full matrix:", spectral_bases(rng.standard_normal((6, 5)), rel_tol=0.05).rank)

# best rank-k approximation and its residual
up, down, residual = truncated_svd(w, 2)
print("rank-2 residual:", residual, "=", np.linalg.norm(w - up @ down))
