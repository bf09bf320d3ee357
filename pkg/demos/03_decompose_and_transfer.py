# Splitting an adapter update into subspace, nullspace and cross-term blocks,
# then moving the kept blocks onto a different target weight.
import math

import numpy as np

from prolora import TransferMode, decompose_adapter, spectral_bases, transfer_adapter
from prolora.transfer import copy_transfer, factorwise_delta, recompress
from prolora.synth import SynthSpec, generate_model_pair, synthetic_factors

rng = np.random.default_rng(3)
w_s, w_t, _ = generate_model_pair(SynthSpec((40, 32), 8, 8, [0.3] * 8, seed=3))
sb, tb = spectral_bases(w_s), spectral_bases(w_t)

up, down = synthetic_factors(sb, "general", 3, 3, rng)
delta = up @ down
d = decompose_adapter(delta, sb)
print("norms (delta, par, perp, residual):", np.round(d.norms, 4))
print("energy check:", d.delta_norm**2, "~", d.par_norm**2 + d.perp_norm**2 + d.residual_norm**2)

for mode in (TransferMode.FULL, TransferMode.SUBSPACE_ONLY, TransferMode.NULLSPACE_ONLY):
    out = transfer_adapter(d, tb, mode)
    print(f"{mode.value:>15}: |out| = {np.linalg.norm(out.dense):.4f}")

sub = transfer_adapter(d, tb, "subspace_only").dense
null = transfer_adapter(d, tb, "nullspace_only").dense
full = transfer_adapter(d, tb, "full").dense
print("subspace_only + nullspace_only == full:", np.abs(sub + null - full).max())

# baselines
print("copy           :", np.linalg.norm(copy_transfer(delta, "copy", tb).dense))
print("copy_projected :", np.linalg.norm(copy_transfer(delta, "copy_projected", tb).dense))

# factorwise routing keeps the rank of the factors
fw = factorwise_delta(up, down, 1.0, sb, tb)
print("factorwise factor shapes:", [f.shape for f in fw.factors])

# bring the dense result back to adapter factors
for rank in (1, 4, 16):
    print(f"recompress to rank {rank:2d}: residual {recompress(transfer_adapter(d, tb), rank)[2]:.4f}")
