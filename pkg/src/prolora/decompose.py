"""Split an adapter delta against the spectral bases of its source weight.

The delta falls into four orthogonal blocks: (column space x row space),
(left nullspace x nullspace) and the two mixed blocks. The first two are
what gets transferred; the mixed blocks are kept as ``residual`` so reports
can show how much of the adapter is left behind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import SpectralBases, as_matrix, sandwich


@dataclass(frozen=True, eq=False)
class DecomposedDelta:
    par: np.ndarray
    perp: np.ndarray
    residual: np.ndarray
    delta_norm: float
    par_norm: float
    perp_norm: float
    residual_norm: float

    @property
    def norms(self) -> tuple[float, float, float, float]:
        return (self.delta_norm, self.par_norm, self.perp_norm, self.residual_norm)

    @property
    def shape(self) -> tuple[int, int]:
        return self.par.shape

    @property
    def kept(self) -> np.ndarray:
        return self.par + self.perp


def _fro(a: np.ndarray) -> float:
    return float(np.linalg.norm(a))


def decompose_adapter(delta, bases: SpectralBases, dense: bool = False) -> DecomposedDelta:
    """Project ``delta`` onto the subspace and nullspace blocks of ``bases``.

    ``dense=True`` materializes the four projectors and multiplies naively;
    it exists as a slow cross-check and should not be used on large modules.
    """
    d = as_matrix(delta, "delta")
    if d.shape != tuple(bases.source_shape):
        raise ShapeError(f"delta shape {d.shape} does not match module shape {bases.source_shape}")
    if dense:
        p = bases.projectors()
        par = p["u_par"] @ d @ p["v_par"]
        perp = p["u_perp"] @ d @ p["v_perp"]
    else:
        par = sandwich(bases.u_par, d, bases.v_par)
        perp = sandwich(bases.u_perp, d, bases.v_perp)
    residual = d - par - perp
    return DecomposedDelta(
        par=par,
        perp=perp,
        residual=residual,
        delta_norm=_fro(d),
        par_norm=_fro(par),
        perp_norm=_fro(perp),
        residual_norm=_fro(residual),
    )


def cross_blocks(delta, bases: SpectralBases) -> tuple[np.ndarray, np.ndarray]:
    """The two mixed blocks ``P_U|| D P_V_|_`` and ``P_U_|_ D P_V||`` computed directly."""
    d = as_matrix(delta, "delta")
    return (
        sandwich(bases.u_par, d, bases.v_perp),
        sandwich(bases.u_perp, d, bases.v_par),
    )

