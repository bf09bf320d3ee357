"""Synthetic model pairs and adapters with analytically known geometry.

Column and row subspaces of the generated source/target weights meet at
exactly the requested principal angles, so the expected similarity is
``sum(cos^2) / min(rank_s, rank_t)`` without any numerical fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.linalg import null_space

from .archive import AdapterModule, AdapterSet
from .decompose import DecomposedDelta
from .errors import ShapeError, SpecError
from .linalg import SpectralBases

_ANGLE_TOL = 1e-12


@dataclass
class SynthSpec:
    shape: tuple[int, int]
    rank_s: int
    rank_t: int
    principal_angles: Sequence[float] = ()
    seed: int = 0
    singular_value_profile: Sequence[float] | None = None
    # defaults: row-space angles equal column-space angles; target reuses the source profile
    row_principal_angles: Sequence[float] | None = None
    target_singular_value_profile: Sequence[float] | None = None

    def __post_init__(self) -> None:
        self.shape = tuple(int(d) for d in self.shape)
        self.principal_angles = tuple(float(a) for a in self.principal_angles)
        if self.row_principal_angles is not None:
            self.row_principal_angles = tuple(float(a) for a in self.row_principal_angles)

    @property
    def row_angles(self) -> tuple[float, ...]:
        return self.principal_angles if self.row_principal_angles is None else self.row_principal_angles

    def profile(self, which: str = "source") -> np.ndarray:
        prof = self.singular_value_profile
        if which == "target" and self.target_singular_value_profile is not None:
            prof = self.target_singular_value_profile
        if prof is None:
            r = max(self.rank_s, self.rank_t, 1)
            return np.linspace(2.0, 1.0, r) if r > 1 else np.array([1.0])
        return np.asarray(prof, dtype=np.float64)

    def validate(self) -> None:
        if len(self.shape) != 2 or min(self.shape) < 1:
            raise SpecError(f"shape must be two positive integers, got {self.shape}")
        m, n = self.shape
        for name, r in (("rank_s", self.rank_s), ("rank_t", self.rank_t)):
            if not 0 <= r <= min(m, n):
                raise SpecError(f"{name}={r} outside [0, {min(m, n)}]")
        k = min(self.rank_s, self.rank_t)
        for label, angles in (("principal_angles", self.principal_angles), ("row_principal_angles", self.row_angles)):
            if len(angles) != k:
                raise SpecError(f"{label} needs {k} entries (min of the ranks), got {len(angles)}")
            if any(not (-_ANGLE_TOL <= a <= math.pi / 2 + _ANGLE_TOL) for a in angles):
                raise SpecError(f"{label} must lie in [0, pi/2]")
        for which in ("source", "target"):
            prof = self.profile(which)
            need = self.rank_s if which == "source" else self.rank_t
            if prof.size < need:
                raise SpecError(f"{which} singular value profile has {prof.size} entries, needs {need}")
            if np.any(prof[:need] <= 0) or np.any(np.diff(prof[:need]) >= 0):
                raise SpecError(f"{which} singular value profile must be positive and strictly decreasing")
        for dim, angles, side in ((m, self.principal_angles, "column"), (n, self.row_angles, "row")):
            needed = _dims_needed(self.rank_s, self.rank_t, angles)
            if needed > dim:
                raise SpecError(
                    f"{side} space needs {needed} orthogonal directions for these ranks/angles, only {dim} available"
                )


def _dims_needed(rank_s: int, rank_t: int, angles: Sequence[float]) -> int:
    rotated = sum(1 for a in angles if a > _ANGLE_TOL)
    return rank_s + rotated + (rank_t - min(rank_s, rank_t))


def random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def angled_bases(
    dim: int, rank_a: int, rank_b: int, angles: Sequence[float], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal ``A`` (dim x rank_a), ``B`` (dim x rank_b) meeting at ``angles``.

    Each of the first ``len(angles)`` columns of ``B`` is the matching column of
    ``A`` rotated by its angle toward a fresh direction orthogonal to
    everything else; remaining columns of ``B`` are fresh as well. Also
    returns the random frame used, whose leading columns are ``A``.
    """
    if _dims_needed(rank_a, rank_b, angles) > dim:
        raise SpecError("not enough ambient dimensions for the requested angles")
    frame = random_orthogonal(dim, rng)
    a = frame[:, :rank_a]
    cols = []
    nxt = rank_a
    for i, theta in enumerate(angles):
        if theta > _ANGLE_TOL:
            cols.append(math.cos(theta) * a[:, i] + math.sin(theta) * frame[:, nxt])
            nxt += 1
        else:
            cols.append(a[:, i].copy())
    extra = rank_b - len(angles)
    b = np.column_stack(cols + [frame[:, nxt + j] for j in range(extra)]) if rank_b else np.zeros((dim, 0))
    return a.copy(), b, frame


def _complement(basis: np.ndarray) -> np.ndarray:
    if basis.shape[1] == 0:
        return np.eye(basis.shape[0])
    return null_space(basis.T)


def _bases(u_par, v_par, sigma_head, shape) -> SpectralBases:
    m, n = shape
    sigma = np.zeros(min(m, n))
    sigma[: sigma_head.size] = sigma_head
    return SpectralBases(
        u_par=u_par, u_perp=_complement(u_par), v_par=v_par, v_perp=_complement(v_par),
        singular_values=sigma, rank=u_par.shape[1], source_shape=(m, n),
    )


@dataclass(eq=False)
class GroundTruth:
    source_bases: SpectralBases
    target_bases: SpectralBases
    left: float
    right: float
    combined: float
    angles: tuple[float, ...]
    row_angles: tuple[float, ...]

    def as_dict(self) -> dict[str, Any]:
        return {
            "rank_s": self.source_bases.rank,
            "rank_t": self.target_bases.rank,
            "principal_angles": list(self.angles),
            "row_principal_angles": list(self.row_angles),
            "similarity": {"left": self.left, "right": self.right, "combined": self.combined},
        }


def expected_similarity(angles: Sequence[float]) -> float:
    if len(angles) == 0:
        return float("nan")
    return float(sum(math.cos(a) ** 2 for a in angles) / len(angles))


def generate_model_pair(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, GroundTruth]:
    """Return ``(W_s, W_t, truth)`` built to ``spec``; deterministic in ``spec.seed``."""
    spec.validate()
    m, n = spec.shape
    rng = np.random.default_rng(spec.seed)
    u_s, u_t, _ = angled_bases(m, spec.rank_s, spec.rank_t, spec.principal_angles, rng)
    v_s, v_t, _ = angled_bases(n, spec.rank_s, spec.rank_t, spec.row_angles, rng)
    s_prof = spec.profile("source")[: spec.rank_s]
    t_prof = spec.profile("target")[: spec.rank_t]
    w_s = (u_s * s_prof) @ v_s.T
    w_t = (u_t * t_prof) @ v_t.T
    left = expected_similarity(spec.principal_angles)
    right = expected_similarity(spec.row_angles)
    truth = GroundTruth(
        source_bases=_bases(u_s, v_s, s_prof, (m, n)),
        target_bases=_bases(u_t, v_t, t_prof, (m, n)),
        left=left,
        right=right,
        combined=0.5 * (left + right),
        angles=tuple(spec.principal_angles),
        row_angles=tuple(spec.row_angles),
    )
    return w_s, w_t, truth


def generate_adapter(
    bases: SpectralBases,
    par_coeffs=None,
    perp_coeffs=None,
    cross_coeffs: tuple[Any, Any] | None = None,
) -> tuple[np.ndarray, DecomposedDelta]:
    """Assemble a delta from block coefficients in the frame of ``bases``.

    ``par_coeffs`` is r x r, ``perp_coeffs`` (m-r) x (n-r); ``cross_coeffs`` is
    the pair (r x (n-r), (m-r) x r) for the two mixed blocks. Missing blocks
    are zero. The expected decomposition is returned alongside.
    """
    m, n = bases.source_shape
    r = bases.rank
    up_, uq = bases.u_par, bases.u_perp
    vp, vq = bases.v_par, bases.v_perp

    def block(c, rows, cols, label):
        if c is None:
            return np.zeros((rows, cols))
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (rows, cols):
            raise ShapeError(f"{label} coefficients must be {(rows, cols)}, got {c.shape}")
        return c

    a = block(par_coeffs, r, r, "par")
    b = block(perp_coeffs, uq.shape[1], vq.shape[1], "perp")
    x, y = cross_coeffs if cross_coeffs is not None else (None, None)
    x = block(x, r, vq.shape[1], "cross (par x perp)")
    y = block(y, uq.shape[1], r, "cross (perp x par)")

    par = up_ @ a @ vp.T
    perp = uq @ b @ vq.T
    residual = up_ @ x @ vq.T + uq @ y @ vp.T
    delta = par + perp + residual
    expected = DecomposedDelta(
        par=par,
        perp=perp,
        residual=residual,
        delta_norm=float(math.sqrt(np.sum(a * a) + np.sum(b * b) + np.sum(x * x) + np.sum(y * y))),
        par_norm=float(np.linalg.norm(a)),
        perp_norm=float(np.linalg.norm(b)),
        residual_norm=float(math.sqrt(np.sum(x * x) + np.sum(y * y))),
    )
    assert delta.shape == (m, n)
    return delta, expected


ADAPTER_KINDS = ("residual_free", "subspace_only", "pure_cross", "general")


def synthetic_factors(
    bases: SpectralBases,
    kind: str,
    rank_par: int,
    rank_perp: int,
    rng: np.random.Generator,
    magnitude: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Factored adapter ``(up, down)`` whose delta has a prescribed block structure.

    ``residual_free``: subspace and nullspace blocks only. ``subspace_only``:
    confined to the subspace block. ``pure_cross``: mixed blocks only.
    ``general``: unstructured Gaussian factors of rank ``rank_par + rank_perp``.
    """
    m, n = bases.source_shape
    r = bases.rank
    up_, uq, vp, vq = bases.u_par, bases.u_perp, bases.v_par, bases.v_perp
    if kind == "subspace_only":
        rank_perp = 0
    if kind == "general":
        k = rank_par + rank_perp
        return magnitude * rng.standard_normal((m, k)) / math.sqrt(m), rng.standard_normal((k, n)) / math.sqrt(n)

    def coeffs(rows, k):
        if rows == 0 or k == 0:
            return np.zeros((rows, k))
        return rng.standard_normal((rows, k))

    if kind in ("residual_free", "subspace_only"):
        lp, rp = up_, vp
        lq, rq = uq, vq
    elif kind == "pure_cross":
        lp, rp = up_, vq
        lq, rq = uq, vp
    else:
        raise SpecError(f"unknown adapter kind {kind!r}; expected one of {ADAPTER_KINDS}")
    k1 = min(rank_par, lp.shape[1], rp.shape[1])
    k2 = min(rank_perp, lq.shape[1], rq.shape[1])
    up = np.hstack([lp @ coeffs(lp.shape[1], k1), lq @ coeffs(lq.shape[1], k2)])
    down = np.vstack([(rp @ coeffs(rp.shape[1], k1)).T, (rq @ coeffs(rq.shape[1], k2)).T])
    up *= magnitude
    return up, down


# --------------------------------------------------------------------------- multi-module jobs


@dataclass
class SynthModule:
    name: str
    spec: SynthSpec
    conv_kernel: tuple[int, int] | None = None


@dataclass
class SynthJob:
    modules: list[SynthModule]
    seed: int = 0
    adapter_kind: str | None = "residual_free"
    adapter_rank_par: int = 2
    adapter_rank_perp: int = 2
    adapter_scale: float = 1.0
    # per-module adapter magnitude spread, so norm correlations are well defined
    magnitude_range: tuple[float, float] = (0.5, 2.0)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SynthJob":
        try:
            seed = int(doc.get("seed", 0))
            mods = []
            for i, md in enumerate(doc["modules"]):
                rank_s = int(md["rank_s"])
                rank_t = int(md.get("rank_t", rank_s))
                angles = md.get("principal_angles", 0.0)
                if isinstance(angles, (int, float)):
                    angles = [float(angles)] * min(rank_s, rank_t)
                row = md.get("row_principal_angles")
                if isinstance(row, (int, float)):
                    row = [float(row)] * min(rank_s, rank_t)
                kernel = md.get("conv_kernel")
                shape = tuple(md["shape"])
                spec = SynthSpec(
                    shape=shape,
                    rank_s=rank_s,
                    rank_t=rank_t,
                    principal_angles=angles,
                    seed=int(md.get("seed", seed * 1000 + i)),
                    singular_value_profile=md.get("singular_value_profile"),
                    row_principal_angles=row,
                    target_singular_value_profile=md.get("target_singular_value_profile"),
                )
                mods.append(SynthModule(str(md["name"]), spec, tuple(kernel) if kernel else None))
            ad = doc.get("adapter", {}) or {}
            job = cls(
                modules=mods,
                seed=seed,
                adapter_kind=ad.get("kind", "residual_free") if doc.get("adapter", True) is not None else None,
                adapter_rank_par=int(ad.get("rank_par", 2)),
                adapter_rank_perp=int(ad.get("rank_perp", 2)),
                adapter_scale=float(ad.get("scale", 1.0)),
                magnitude_range=tuple(ad.get("magnitude_range", (0.5, 2.0))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"invalid synth job: {exc!r}") from exc
        job.validate()
        return job

    def validate(self) -> None:
        if not self.modules:
            raise SpecError("synth job has no modules")
        names = [m.name for m in self.modules]
        if len(set(names)) != len(names):
            raise SpecError("module names must be unique")
        if self.adapter_kind is not None and self.adapter_kind not in ADAPTER_KINDS:
            raise SpecError(f"unknown adapter kind {self.adapter_kind!r}")
        if not (math.isfinite(self.adapter_scale) and self.adapter_scale > 0):
            raise SpecError("adapter scale must be positive")
        for mod in self.modules:
            mod.spec.validate()
            if mod.conv_kernel is not None:
                kh, kw = mod.conv_kernel
                if kh < 1 or kw < 1 or mod.spec.shape[1] % (kh * kw):
                    raise SpecError(f"{mod.name}: {mod.spec.shape[1]} columns cannot fold into a {kh}x{kw} kernel")


@dataclass
class SynthOutput:
    source: dict[str, np.ndarray]
    target: dict[str, np.ndarray]
    adapter: AdapterSet | None
    truth: dict[str, Any] = field(default_factory=dict)


def build_synthetic_job(job: SynthJob) -> SynthOutput:
    """Generate source/target tensors, an optional adapter and a ground-truth record."""
    job.validate()
    source: dict[str, np.ndarray] = {}
    target: dict[str, np.ndarray] = {}
    modules: dict[str, AdapterModule] = {}
    truth: dict[str, Any] = {"seed": job.seed, "adapter_kind": job.adapter_kind, "modules": {}}
    rng = np.random.default_rng(job.seed)
    lo, hi = job.magnitude_range
    for mod in job.modules:
        w_s, w_t, gt = generate_model_pair(mod.spec)
        kshape = None
        if mod.conv_kernel is not None:
            kh, kw = mod.conv_kernel
            m, n = mod.spec.shape
            kshape = (m, n // (kh * kw), kh, kw)
        source[mod.name + ".weight"] = w_s.reshape(kshape) if kshape else w_s
        target[mod.name + ".weight"] = w_t.reshape(kshape) if kshape else w_t
        entry = gt.as_dict()
        entry["shape"] = list(mod.spec.shape)
        if job.adapter_kind is not None:
            magnitude = float(rng.uniform(lo, hi))
            up, down = synthetic_factors(
                gt.source_bases, job.adapter_kind, job.adapter_rank_par, job.adapter_rank_perp, rng, magnitude
            )
            if up.shape[1] > 0:
                down_shape = up_shape = None
                if kshape:
                    down_shape = (up.shape[1],) + kshape[1:]
                    up_shape = (kshape[0], up.shape[1], 1, 1)
                modules[mod.name] = AdapterModule(
                    mod.name, down, up / job.adapter_scale, job.adapter_scale, down_shape, up_shape
                )
                delta = up @ down
                b = gt.source_bases
                par = b.u_par @ (b.u_par.T @ delta @ b.v_par) @ b.v_par.T
                perp = b.u_perp @ (b.u_perp.T @ delta @ b.v_perp) @ b.v_perp.T
                entry["adapter"] = {
                    "rank": int(up.shape[1]),
                    "delta_norm": float(np.linalg.norm(delta)),
                    "par_norm": float(np.linalg.norm(par)),
                    "perp_norm": float(np.linalg.norm(perp)),
                    "residual_norm": float(np.linalg.norm(delta - par - perp)),
                }
        truth["modules"][mod.name] = entry
    adapter = None
    if job.adapter_kind is not None:
        adapter = AdapterSet(modules, {"prolora.synth_kind": job.adapter_kind})
    return SynthOutput(source, target, adapter, truth)
