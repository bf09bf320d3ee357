"""Dense matrix primitives: full SVD, numerical rank, basis splitting, truncated SVD.

All arithmetic is carried out in float64 whatever the on-disk dtype was.
Projections are always evaluated in factored form, ``B @ (B.T @ M)``, so an
``m x m`` projector is never materialized on the fast path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InvalidMatrix, NumericalFailure, RankError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_RANK_TOL = 1e-8
# Relative singular-value gap below which the rank cutoff is reported as ambiguous.
DEGENERATE_GAP = 1e-6

Side = Literal["left", "right"]


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a finite, non-empty, C-contiguous float64 2D array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidMatrix(f"{name} must be 2D, got shape {a.shape}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise InvalidMatrix(f"{name} has an empty dimension: {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(a)


def _sign_fix(cols: np.ndarray) -> np.ndarray:
    """+1/-1 per column so that its largest-magnitude entry becomes positive."""
    if cols.shape[1] == 0:
        return np.ones(0)
    idx = np.argmax(np.abs(cols), axis=0)
    signs = np.sign(cols[idx, np.arange(cols.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def svd_full(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full SVD ``M = U diag(sigma) V^T`` with square orthogonal ``U`` (m x m), ``V`` (n x n).

    Singular vectors are sign-normalized (largest-magnitude entry of each
    column of ``U`` is positive, paired ``V`` columns follow) so repeated
    calls on equal input return equal bases.
    """
    a = as_matrix(m)
    try:
        u, sigma, vt = np.linalg.svd(a, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    v = vt.T.copy()
    k = sigma.shape[0]
    s = _sign_fix(u[:, :k])
    u[:, :k] *= s
    v[:, :k] *= s
    u[:, k:] *= _sign_fix(u[:, k:])
    v[:, k:] *= _sign_fix(v[:, k:])
    return u, sigma, v


def numerical_rank(sigma, shape: tuple[int, int], rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Count singular values above ``rel_tol * max(m, n) * sigma[0]``."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.size == 0 or s[0] <= 0.0:
        return 0
    cutoff = rel_tol * max(shape) * s[0]
    return int(np.count_nonzero(s > cutoff))


@dataclass(frozen=True, eq=False)
class SpectralBases:
    """Orthonormal bases for the column/row spaces of one weight matrix and their complements."""

    u_par: np.ndarray
    u_perp: np.ndarray
    v_par: np.ndarray
    v_perp: np.ndarray
    singular_values: np.ndarray
    rank: int
    source_shape: tuple[int, int]

    @property
    def u(self) -> np.ndarray:
        return np.hstack([self.u_par, self.u_perp])

    @property
    def v(self) -> np.ndarray:
        return np.hstack([self.v_par, self.v_perp])

    def projectors(self) -> dict[str, np.ndarray]:
        """Dense projectors, for tests and diagnostics only."""
        return {
            "u_par": projector(self.u_par),
            "u_perp": projector(self.u_perp),
            "v_par": projector(self.v_par),
            "v_perp": projector(self.v_perp),
        }


def split_bases(u, v, sigma, rel_tol: float = DEFAULT_RANK_TOL) -> SpectralBases:
    """Partition full singular bases at the numerical rank."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    m, n = u.shape[0], v.shape[0]
    if u.shape != (m, m) or v.shape != (n, n) or sigma.shape != (min(m, n),):
        raise ShapeError(f"inconsistent SVD factors: U {u.shape}, V {v.shape}, sigma {sigma.shape}")
    r = numerical_rank(sigma, (m, n), rel_tol)
    if 0 < r < sigma.shape[0]:
        gap = sigma[r - 1] - sigma[r]
        if gap <= DEGENERATE_GAP * sigma[0]:
            logger.warning(
                "near-degenerate singular values at rank cutoff %d (gap %.3e, sigma_max %.3e); "
                "split is not basis-stable",
                r, gap, sigma[0],
            )
    return SpectralBases(
        u_par=u[:, :r].copy(),
        u_perp=u[:, r:].copy(),
        v_par=v[:, :r].copy(),
        v_perp=v[:, r:].copy(),
        singular_values=sigma.copy(),
        rank=r,
        source_shape=(m, n),
    )


def spectral_bases(w, rel_tol: float = DEFAULT_RANK_TOL) -> SpectralBases:
    u, sigma, v = svd_full(w)
    return split_bases(u, v, sigma, rel_tol)


def projector(basis) -> np.ndarray:
    b = np.asarray(basis, dtype=np.float64)
    return b @ b.T


def project_onto(basis, m, side: Side = "left") -> np.ndarray:
    """``B B^T M`` (left) or ``M B B^T`` (right) for column-orthonormal ``B``."""
    b = np.asarray(basis, dtype=np.float64)
    a = np.asarray(m, dtype=np.float64)
    if b.ndim != 2 or a.ndim != 2:
        raise ShapeError("basis and matrix must be 2D")
    if side == "left":
        if b.shape[0] != a.shape[0]:
            raise ShapeError(f"left basis has {b.shape[0]} rows, matrix has {a.shape[0]}")
        if b.shape[1] == 0:
            return np.zeros_like(a)
        return b @ (b.T @ a)
    if side == "right":
        if b.shape[0] != a.shape[1]:
            raise ShapeError(f"right basis has {b.shape[0]} rows, matrix has {a.shape[1]} columns")
        if b.shape[1] == 0:
            return np.zeros_like(a)
        return (a @ b) @ b.T
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def sandwich(left, m, right) -> np.ndarray:
    """``P_left M P_right`` with both projectors given by their orthonormal bases."""
    a = np.asarray(m, dtype=np.float64)
    if left.shape[0] != a.shape[0] or right.shape[0] != a.shape[1]:
        raise ShapeError(f"bases {left.shape}/{right.shape} do not conform to matrix {a.shape}")
    if left.shape[1] == 0 or right.shape[1] == 0:
        return np.zeros_like(a)
    core = left.T @ a @ right
    return left @ core @ right.T


def truncated_svd(m, k: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Best rank-``k`` factors ``up`` (m x k), ``down`` (k x n) and the Frobenius residual.

    The singular values are split evenly between the two factors.
    """
    a = as_matrix(m)
    kmax = min(a.shape)
    if k < 0 or k > kmax:
        raise RankError(f"rank {k} outside [0, {kmax}] for shape {a.shape}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    root = np.sqrt(s[:k])
    up = u[:, :k] * root
    down = root[:, None] * vt[:k]
    residual = float(np.sqrt(np.sum(s[k:] ** 2)))
    return up, down, residual
