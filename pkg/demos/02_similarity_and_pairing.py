# Subspace similarity and module pairing on synthetic weights whose column and
# row spaces meet at known principal angles.
import math

import numpy as np

from prolora import pair_modules
from prolora.similarity import module_similarity
from prolora.synth import SynthSpec, expected_similarity, generate_model_pair

angles = [math.radians(30), math.radians(60)]
w_s, w_t, truth = generate_model_pair(SynthSpec((24, 20), 2, 2, angles, seed=1))
print("mean cos^2 of the angles:", expected_similarity(angles))
print("ground truth:", truth.left, truth.right, truth.combined)
print("measured    :", module_similarity(w_s, w_t))

# three modules with engineered scores 0.95, 0.85 and 0.6
source, target = [], []
for k, score in enumerate((0.95, 0.85, 0.6)):
    theta = math.acos(math.sqrt(score))
    s, t, _ = generate_model_pair(SynthSpec((32, 32), 1, 1, [theta], seed=10 + k))
    source.append((f"blk{k}", s))
    target.append((f"blk{k}", t))

for threshold in (0.8, 0.9, 1.0):
    p = pair_modules(source, target, threshold)
    print(f"threshold {threshold}: pairs={[(a, b) for a, b, _ in p.pairs]} unmatched={p.unmatched_sources}")

print("combined score matrix:")
print(np.round(pair_modules(source, target, 0.0).combined_scores, 3))

# greedy versus optimal selection on a hand-made score table
from prolora.similarity import select_pairs

table = np.array([[0.9, 0.85], [0.85, np.nan]])
print("greedy :", select_pairs(table, 0.8, "greedy"))
print("optimal:", select_pairs(table, 0.8, "optimal"))
