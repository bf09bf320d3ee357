"""Carry a decomposed source delta into a target model's subspace and nullspace.

Besides the full projection this module provides the ablation variants
(subspace term only, nullspace term only), the two copy baselines, a
factorwise variant that projects ``up`` and ``down`` separately and so keeps
the adapter rank, and a coefficient-space route for modules whose shapes
differ between source and target.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .decompose import DecomposedDelta
from .errors import DegenerateSubspace, ShapeError
from .linalg import DEGENERATE_GAP, SpectralBases, as_matrix, sandwich, truncated_svd

logger = logging.getLogger(__name__)


class TransferMode(str, enum.Enum):
    FULL = "full"
    SUBSPACE_ONLY = "subspace_only"
    NULLSPACE_ONLY = "nullspace_only"
    COPY = "copy"
    COPY_PROJECTED = "copy_projected"
    FACTORWISE = "factorwise"

    def __str__(self) -> str:
        return self.value


PROJECTION_MODES = (TransferMode.FULL, TransferMode.SUBSPACE_ONLY, TransferMode.NULLSPACE_ONLY)


@dataclass(frozen=True, eq=False)
class TransferredDelta:
    """Transferred update for one target module.

    For the projection modes ``dense == par_component + perp_component``. For
    ``copy`` and ``factorwise`` the two components are the target-subspace and
    target-nullspace blocks of ``dense``, which need not add up to it.
    """

    dense: np.ndarray
    par_component: np.ndarray
    perp_component: np.ndarray
    mode: TransferMode
    source_module: str = ""
    target_module: str = ""
    factors: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.dense.shape


def _check_shape(shape, bases: SpectralBases, what: str) -> None:
    if tuple(shape) != tuple(bases.source_shape):
        raise ShapeError(f"{what} shape {tuple(shape)} does not match module shape {bases.source_shape}")


def transfer_adapter(
    decomposed: DecomposedDelta,
    target_bases: SpectralBases,
    mode: TransferMode | str = TransferMode.FULL,
    source_module: str = "",
    target_module: str = "",
) -> TransferredDelta:
    """Project the kept source components into the matching target blocks."""
    mode = TransferMode(mode)
    if mode not in PROJECTION_MODES:
        raise ValueError(f"transfer_adapter handles {[m.value for m in PROJECTION_MODES]}, got {mode.value}")
    _check_shape(decomposed.shape, target_bases, "delta")
    tb = target_bases
    if mode is TransferMode.NULLSPACE_ONLY:
        par = np.zeros(decomposed.shape)
    else:
        par = sandwich(tb.u_par, decomposed.par, tb.v_par)
    if mode is TransferMode.SUBSPACE_ONLY:
        perp = np.zeros(decomposed.shape)
    else:
        perp = sandwich(tb.u_perp, decomposed.perp, tb.v_perp)
    return TransferredDelta(par + perp, par, perp, mode, source_module, target_module)


def copy_transfer(
    delta,
    mode: TransferMode | str,
    target_bases: SpectralBases,
    source_module: str = "",
    target_module: str = "",
) -> TransferredDelta:
    """Copy baselines: the delta verbatim, or its target-basis diagonal blocks."""
    mode = TransferMode(mode)
    d = as_matrix(delta, "delta")
    _check_shape(d.shape, target_bases, "delta")
    tb = target_bases
    par = sandwich(tb.u_par, d, tb.v_par)
    perp = sandwich(tb.u_perp, d, tb.v_perp)
    if mode is TransferMode.COPY:
        dense = d.copy()
    elif mode is TransferMode.COPY_PROJECTED:
        dense = par + perp
    else:
        raise ValueError(f"copy_transfer handles copy and copy_projected, got {mode.value}")
    return TransferredDelta(dense, par, perp, mode, source_module, target_module)


def _route_left(x, src_par, src_perp, tgt_par, tgt_perp):
    """``P_t|| P_s|| X + P_t_|_ P_s_|_ X`` evaluated through the bases."""
    out = np.zeros_like(x)
    if src_par.shape[1] and tgt_par.shape[1]:
        out += tgt_par @ (tgt_par.T @ (src_par @ (src_par.T @ x)))
    if src_perp.shape[1] and tgt_perp.shape[1]:
        out += tgt_perp @ (tgt_perp.T @ (src_perp @ (src_perp.T @ x)))
    return out


def transfer_factorwise(
    up,
    down,
    source_bases: SpectralBases,
    target_bases: SpectralBases,
    mode: TransferMode | str = TransferMode.FULL,
) -> tuple[np.ndarray, np.ndarray]:
    """Project ``up`` (m x r) on the left and ``down`` (r x n) on the right; rank is unchanged."""
    mode = TransferMode(mode)
    if mode not in (TransferMode.FULL, TransferMode.FACTORWISE):
        raise ValueError(f"factorwise transfer only supports the full projection, got {mode.value}")
    up = as_matrix(up, "up")
    down = as_matrix(down, "down")
    if up.shape[1] != down.shape[0]:
        raise ShapeError(f"up {up.shape} and down {down.shape} disagree on rank")
    m, n = up.shape[0], down.shape[1]
    _check_shape((m, n), source_bases, "adapter")
    _check_shape((m, n), target_bases, "adapter")
    sb, tb = source_bases, target_bases
    new_up = _route_left(up, sb.u_par, sb.u_perp, tb.u_par, tb.u_perp)
    new_down = _route_left(down.T, sb.v_par, sb.v_perp, tb.v_par, tb.v_perp).T
    return new_up, np.ascontiguousarray(new_down)


def factorwise_delta(
    up,
    down,
    scale: float,
    source_bases: SpectralBases,
    target_bases: SpectralBases,
    source_module: str = "",
    target_module: str = "",
) -> TransferredDelta:
    """Factorwise transfer packaged as a :class:`TransferredDelta` (scale folded into ``up``)."""
    new_up, new_down = transfer_factorwise(up, down, source_bases, target_bases)
    new_up = new_up * scale
    dense = new_up @ new_down
    tb = target_bases
    return TransferredDelta(
        dense,
        sandwich(tb.u_par, dense, tb.v_par),
        sandwich(tb.u_perp, dense, tb.v_perp),
        TransferMode.FACTORWISE,
        source_module,
        target_module,
        factors=(new_up, new_down),
    )


def _warn_ties(bases: SpectralBases, count: int, label: str) -> None:
    s = bases.singular_values
    if count < 2 or s.size == 0 or s[0] == 0:
        return
    gaps = s[: count - 1] - s[1:count]
    tied = np.nonzero(gaps <= DEGENERATE_GAP * s[0])[0]
    if tied.size:
        logger.warning(
            "%s: tied singular values among the leading %d directions (indices %s); "
            "coefficient alignment is not basis-invariant there",
            label, count, tied.tolist(),
        )


def transfer_mismatched(
    decomposed: DecomposedDelta,
    source_bases: SpectralBases,
    target_bases: SpectralBases,
    mode: TransferMode | str = TransferMode.FULL,
    source_module: str = "",
    target_module: str = "",
) -> TransferredDelta:
    """Transfer between modules of different shape by matching leading singular directions.

    Coefficients of the source components in the leading ``min(r_s, r_t)``
    subspace directions (and the leading common nullspace directions, in SVD
    order) are re-expanded in the corresponding target directions.
    """
    mode = TransferMode(mode)
    if mode not in PROJECTION_MODES:
        raise ValueError(f"mismatched transfer handles {[m.value for m in PROJECTION_MODES]}, got {mode.value}")
    _check_shape(decomposed.shape, source_bases, "delta")
    sb, tb = source_bases, target_bases
    m, n = sb.source_shape
    mt, nt = tb.source_shape
    dc = min(sb.rank, tb.rank)
    if dc == 0:
        raise DegenerateSubspace("source or target weight has rank 0; no common subspace")
    _warn_ties(sb, dc, "source")
    _warn_ties(tb, dc, "target")

    par = np.zeros((mt, nt))
    perp = np.zeros((mt, nt))
    if mode is not TransferMode.NULLSPACE_ONLY:
        coeff = sb.u_par[:, :dc].T @ decomposed.par @ sb.v_par[:, :dc]
        par = tb.u_par[:, :dc] @ coeff @ tb.v_par[:, :dc].T
    if mode is not TransferMode.SUBSPACE_ONLY:
        dl = min(m - sb.rank, mt - tb.rank)
        dr = min(n - sb.rank, nt - tb.rank)
        if dl > 0 and dr > 0:
            coeff = sb.u_perp[:, :dl].T @ decomposed.perp @ sb.v_perp[:, :dr]
            perp = tb.u_perp[:, :dl] @ coeff @ tb.v_perp[:, :dr].T
    return TransferredDelta(par + perp, par, perp, mode, source_module, target_module)


def flatten_conv(kernel) -> np.ndarray:
    """(out, in, kh, kw) kernel to an (out, in*kh*kw) matrix, row-major."""
    k = np.asarray(kernel)
    if k.ndim != 4:
        raise ShapeError(f"conv kernel must be 4D, got shape {k.shape}")
    return k.reshape(k.shape[0], -1)


def unflatten_conv(matrix, kernel_shape: tuple[int, int, int, int]) -> np.ndarray:
    a = np.asarray(matrix)
    if len(kernel_shape) != 4:
        raise ShapeError(f"kernel shape must have 4 entries, got {kernel_shape}")
    out, cin, kh, kw = kernel_shape
    if a.shape != (out, cin * kh * kw):
        raise ShapeError(f"matrix {a.shape} cannot be folded into kernel {tuple(kernel_shape)}")
    return a.reshape(kernel_shape)


def recompress(transferred: TransferredDelta, rank: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Store a dense transferred delta as rank-``rank`` factors; returns the Frobenius residual too."""
    return truncated_svd(transferred.dense, rank)
