"""Subspace similarity between weight matrices and similarity-driven module pairing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateSubspace, EmptyModel, ShapeError
from .linalg import DEFAULT_RANK_TOL, SpectralBases, as_matrix, spectral_bases

logger = logging.getLogger(__name__)

Combine = Literal["mean", "min"]
PairingMethod = Literal["greedy", "optimal"]

# Scores of identical subspaces land within a few ulp of 1.0; threshold tests allow this much slack.
SCORE_TOL = 1e-10


@dataclass(frozen=True)
class SimilarityScore:
    left: float
    right: float
    combined: float


@dataclass
class ModulePairing:
    pairs: list[tuple[str, str, SimilarityScore]]
    unmatched_sources: list[str]
    threshold: float
    combine: str = "mean"
    source_ids: list[str] = field(default_factory=list)
    target_ids: list[str] = field(default_factory=list)
    # NaN marks shape-incompatible (source, target) combinations.
    left_scores: np.ndarray | None = None
    right_scores: np.ndarray | None = None
    combined_scores: np.ndarray | None = None

    def target_for(self, source_id: str) -> str | None:
        for s, t, _ in self.pairs:
            if s == source_id:
                return t
        return None


def subspace_similarity(a_par, b_par) -> float:
    """``||A^T B||_F^2 / min(r_a, r_b)`` for column-orthonormal ``A``, ``B``.

    Equals the mean squared cosine of the principal angles between the two
    subspaces, so identical subspaces score 1 and orthogonal ones 0.
    """
    a = np.asarray(a_par, dtype=np.float64)
    b = np.asarray(b_par, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"ambient dimensions differ: {a.shape} vs {b.shape}")
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise DegenerateSubspace("similarity of a zero-dimensional subspace is undefined")
    c = a.T @ b
    return float(np.sum(c * c) / min(a.shape[1], b.shape[1]))


def combine_scores(left: float, right: float, combine: Combine = "mean") -> float:
    if combine == "mean":
        return 0.5 * (left + right)
    if combine == "min":
        return min(left, right)
    raise ValueError(f"unknown combine rule {combine!r}")


def bases_similarity(bs: SpectralBases, bt: SpectralBases, combine: Combine = "mean") -> SimilarityScore:
    if bs.source_shape != bt.source_shape:
        raise ShapeError(f"module shapes differ: {bs.source_shape} vs {bt.source_shape}")
    left = subspace_similarity(bs.u_par, bt.u_par)
    right = subspace_similarity(bs.v_par, bt.v_par)
    return SimilarityScore(left, right, combine_scores(left, right, combine))


def module_similarity(
    w_s, w_t, rel_tol: float = DEFAULT_RANK_TOL, combine: Combine = "mean"
) -> SimilarityScore:
    """Left (column-space) and right (row-space) similarity of two equally shaped weights."""
    a = as_matrix(w_s, "w_s")
    b = as_matrix(w_t, "w_t")
    if a.shape != b.shape:
        raise ShapeError(f"module shapes differ: {a.shape} vs {b.shape}")
    return bases_similarity(spectral_bases(a, rel_tol), spectral_bases(b, rel_tol), combine)


def select_pairs(
    scores,
    threshold: float,
    method: PairingMethod = "greedy",
) -> list[tuple[int, int]]:
    """Pick (source index, target index) pairs from a combined-score matrix.

    Entries that are NaN are never candidates. ``greedy`` walks candidates in
    descending score, ties broken by (source, target) index; ``optimal``
    maximizes the summed score over admissible pairs.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError("score matrix must be 2D")
    admissible = np.isfinite(s) & (s >= threshold - SCORE_TOL)

    if method == "greedy":
        cand = [(-s[i, j], i, j) for i, j in zip(*np.nonzero(admissible))]
        cand.sort()
        used_s: set[int] = set()
        used_t: set[int] = set()
        chosen = []
        for _, i, j in cand:
            if i in used_s or j in used_t:
                continue
            used_s.add(i)
            used_t.add(j)
            chosen.append((int(i), int(j)))
        return sorted(chosen)

    if method == "optimal":
        if not admissible.any():
            return []
        # Admissible scores are shifted to stay strictly above the inadmissible filler.
        weight = np.where(admissible, s + 1.0, 0.0)
        rows, cols = linear_sum_assignment(weight, maximize=True)
        return sorted((int(i), int(j)) for i, j in zip(rows, cols) if admissible[i, j])

    raise ValueError(f"unknown pairing method {method!r}")


ModuleInput = Union[SpectralBases, np.ndarray]


def _bases(item: ModuleInput, rel_tol: float) -> SpectralBases:
    if isinstance(item, SpectralBases):
        return item
    return spectral_bases(item, rel_tol)


def score_matrices(
    source: Sequence[SpectralBases],
    target: Sequence[SpectralBases],
    combine: Combine = "mean",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left, right and combined scores for every shape-compatible (source, target) pair."""
    shape = (len(source), len(target))
    left = np.full(shape, np.nan)
    right = np.full(shape, np.nan)
    comb = np.full(shape, np.nan)
    for i, bs in enumerate(source):
        for j, bt in enumerate(target):
            if bs.source_shape != bt.source_shape:
                continue
            if bs.rank == 0 or bt.rank == 0:
                left[i, j] = right[i, j] = comb[i, j] = 0.0
                continue
            sc = bases_similarity(bs, bt, combine)
            left[i, j], right[i, j], comb[i, j] = sc.left, sc.right, sc.combined
    return left, right, comb


def pair_modules(
    source: Sequence[tuple[str, ModuleInput]],
    target: Sequence[tuple[str, ModuleInput]],
    threshold: float = 0.8,
    combine: Combine = "mean",
    method: PairingMethod = "greedy",
    rel_tol: float = DEFAULT_RANK_TOL,
) -> ModulePairing:
    """Match source modules to target modules by combined subspace similarity.

    Items may be raw weight matrices or precomputed :class:`SpectralBases`.
    Only modules of identical shape are compared. A zero-rank module scores
    0 against everything rather than raising.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if len(source) == 0:
        raise EmptyModel("no source modules to pair")
    sid = [name for name, _ in source]
    tid = [name for name, _ in target]
    sb = [_bases(w, rel_tol) for _, w in source]
    tb = [_bases(w, rel_tol) for _, w in target]
    for name, b in zip(sid + tid, sb + tb):
        if b.rank == 0:
            logger.warning("module %s has numerical rank 0; it scores 0 against every module", name)

    left, right, comb = score_matrices(sb, tb, combine)
    chosen = select_pairs(comb, threshold, method)
    pairs = [
        (sid[i], tid[j], SimilarityScore(float(left[i, j]), float(right[i, j]), float(comb[i, j])))
        for i, j in chosen
    ]
    matched = {i for i, _ in chosen}
    unmatched = [sid[i] for i in range(len(sid)) if i not in matched]
    return ModulePairing(
        pairs=pairs,
        unmatched_sources=unmatched,
        threshold=threshold,
        combine=combine,
        source_ids=sid,
        target_ids=tid,
        left_scores=left,
        right_scores=right,
        combined_scores=comb,
    )
