import math

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from prolora.decompose import decompose_adapter
from prolora.errors import ShapeError, SpecError
from prolora.linalg import spectral_bases
from prolora.similarity import module_similarity
from prolora.synth import (
    SynthJob,
    SynthSpec,
    build_synthetic_job,
    generate_adapter,
    generate_model_pair,
    synthetic_factors,
)


def test_zero_angles_give_similarity_one():
    w_s, w_t, truth = generate_model_pair(SynthSpec((16, 12), 4, 4, [0.0] * 4, seed=0))
    assert truth.combined == 1.0
    assert abs(module_similarity(w_s, w_t).combined - 1.0) < 1e-8


def test_right_angles_give_similarity_zero():
    w_s, w_t, truth = generate_model_pair(SynthSpec((16, 12), 3, 3, [math.pi / 2] * 3, seed=0))
    assert abs(truth.combined) < 1e-15
    assert abs(module_similarity(w_s, w_t).combined) < 1e-8


def test_thirty_sixty():
    angles = [math.radians(30), math.radians(60)]
    w_s, w_t, truth = generate_model_pair(SynthSpec((9, 9), 2, 2, angles, seed=11))
    analytic = (math.cos(angles[0]) ** 2 + math.cos(angles[1]) ** 2) / 2
    assert abs(analytic - 0.5) < 1e-15
    assert abs(truth.left - 0.5) < 1e-12
    sc = module_similarity(w_s, w_t)
    assert abs(sc.left - 0.5) < 1e-8 and abs(sc.right - 0.5) < 1e-8


def test_angles_are_exact_principal_angles():
    angles = [0.1, 0.7, 1.2]
    _, _, truth = generate_model_pair(SynthSpec((20, 15), 3, 5, angles, seed=2))
    measured = np.sort(subspace_angles(truth.source_bases.u_par, truth.target_bases.u_par))
    np.testing.assert_allclose(measured, np.sort(angles), atol=1e-10)


def test_weights_have_requested_rank_and_bases():
    w_s, w_t, truth = generate_model_pair(SynthSpec((10, 8), 3, 2, [0.3, 0.4], seed=9))
    bs, bt = spectral_bases(w_s), spectral_bases(w_t)
    assert (bs.rank, bt.rank) == (3, 2)
    p_true = truth.source_bases.u_par @ truth.source_bases.u_par.T
    assert np.abs(bs.u_par @ bs.u_par.T - p_true).max() < 1e-10
    comp = truth.target_bases.u_perp
    assert np.abs(comp.T @ truth.target_bases.u_par).max() < 1e-12


def test_determinism():
    spec = SynthSpec((10, 10), 3, 3, [0.2, 0.3, 0.4], seed=42)
    a = generate_model_pair(spec)
    b = generate_model_pair(SynthSpec((10, 10), 3, 3, [0.2, 0.3, 0.4], seed=42))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(shape=(4, 4), rank_s=3, rank_t=3, principal_angles=[0.5, 0.5, 0.5]),  # needs 6 dims
        dict(shape=(4, 4), rank_s=2, rank_t=2, principal_angles=[0.1]),
        dict(shape=(4, 4), rank_s=5, rank_t=1, principal_angles=[0.1]),
        dict(shape=(4, 4), rank_s=1, rank_t=1, principal_angles=[2.0]),
        dict(shape=(4, 4), rank_s=2, rank_t=2, principal_angles=[0, 0], singular_value_profile=[1, 2]),
    ],
)
def test_infeasible_specs(kwargs):
    with pytest.raises(SpecError):
        generate_model_pair(SynthSpec(**kwargs))


def test_generate_adapter_par_only():
    bases = spectral_bases(np.diag([2.0, 1.0, 0.0, 0.0]))
    delta, expected = generate_adapter(bases, par_coeffs=np.array([[1.0, 2.0], [0.5, -1.0]]))
    d = decompose_adapter(delta, bases)
    assert d.perp_norm < 1e-14 and d.residual_norm < 1e-14
    assert abs(d.par_norm - expected.par_norm) < 1e-12


def test_generate_adapter_pythagorean():
    bases = spectral_bases(np.diag([2.0, 1.0, 0.0, 0.0]))
    par = np.array([[3.0, 0.0], [0.0, 0.0]])
    perp = np.array([[0.0, 4.0], [0.0, 0.0]])
    delta, expected = generate_adapter(bases, par, perp)
    assert expected.par_norm == 3.0 and expected.perp_norm == 4.0
    assert abs(np.linalg.norm(delta) - 5.0) < 1e-12
    assert expected.delta_norm == 5.0


def test_generate_adapter_zero():
    bases = spectral_bases(np.diag([2.0, 1.0, 0.0]))
    delta, _ = generate_adapter(bases)
    assert not delta.any()


def test_generate_adapter_shape_error():
    bases = spectral_bases(np.diag([2.0, 1.0, 0.0]))
    with pytest.raises(ShapeError):
        generate_adapter(bases, par_coeffs=np.ones((3, 3)))


def test_generate_adapter_cross_blocks(rng):
    w_s, _, truth = generate_model_pair(SynthSpec((7, 6), 2, 2, [0.0, 0.0], seed=1))
    b = truth.source_bases
    x = rng.standard_normal((2, 4))
    y = rng.standard_normal((5, 2))
    delta, expected = generate_adapter(b, cross_coeffs=(x, y))
    d = decompose_adapter(delta, spectral_bases(w_s))
    assert d.par_norm < 1e-12 and d.perp_norm < 1e-12
    assert abs(d.residual_norm - expected.residual_norm) < 1e-10


@pytest.mark.parametrize("kind", ["residual_free", "subspace_only", "pure_cross", "general"])
def test_synthetic_factors_structure(kind):
    w_s, _, truth = generate_model_pair(SynthSpec((12, 10), 4, 4, [0.0] * 4, seed=3))
    up, down = synthetic_factors(truth.source_bases, kind, 2, 3, np.random.default_rng(0))
    d = decompose_adapter(up @ down, spectral_bases(w_s))
    scale = max(1.0, d.delta_norm)
    if kind == "residual_free":
        assert d.residual_norm < 1e-10 * scale and d.par_norm > 0 and d.perp_norm > 0
    elif kind == "subspace_only":
        assert d.residual_norm < 1e-10 * scale and d.perp_norm < 1e-10 * scale
    elif kind == "pure_cross":
        assert d.par_norm < 1e-10 * scale and d.perp_norm < 1e-10 * scale
    else:
        assert d.residual_norm > 0


def test_synth_job_from_dict_and_build():
    doc = {
        "seed": 7,
        "modules": [
            {"name": "a", "shape": [8, 6], "rank_s": 3, "principal_angles": 0.0},
            {"name": "b", "shape": [8, 18], "rank_s": 2, "rank_t": 2, "principal_angles": [0.1, 0.2], "conv_kernel": [3, 3]},
        ],
        "adapter": {"kind": "residual_free", "rank_par": 1, "rank_perp": 1, "scale": 2.0},
    }
    out = build_synthetic_job(SynthJob.from_dict(doc))
    assert out.source["b.weight"].shape == (8, 2, 3, 3)
    mod = out.adapter.modules["b"]
    assert mod.down_shape == (2, 2, 3, 3) and mod.up_shape == (8, 2, 1, 1)
    assert mod.scale == 2.0
    assert out.truth["modules"]["a"]["similarity"]["combined"] == 1.0
    assert out.truth["modules"]["b"]["adapter"]["residual_norm"] < 1e-10


@pytest.mark.parametrize(
    "doc",
    [
        {},
        {"modules": []},
        {"modules": [{"name": "a", "shape": [4, 4], "rank_s": 3, "principal_angles": 0.5}]},
        {"modules": [{"name": "a", "shape": [4, 5], "rank_s": 1, "conv_kernel": [2, 2]}]},
        {"modules": [{"name": "a", "shape": [4, 4], "rank_s": 1}], "adapter": {"kind": "bogus"}},
    ],
)
def test_synth_job_invalid(doc):
    with pytest.raises(SpecError):
        SynthJob.from_dict(doc)
