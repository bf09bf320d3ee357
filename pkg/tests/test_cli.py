import csv
import io
import json
import math

import numpy as np
import pytest

from prolora import cli
from prolora.archive import AdapterModule, AdapterSet, load_adapter, load_archive, save_adapter, save_archive
from prolora.decompose import decompose_adapter
from prolora.diagnostics import REPORT_COLUMNS
from prolora.linalg import spectral_bases


def synth(tmp_path, doc, name="job", dtype="f64"):
    spec = tmp_path / f"{name}.json"
    spec.write_text(json.dumps(doc))
    out = tmp_path / name
    assert cli.main(["synth", str(spec), "--out", str(out), "--dtype", dtype]) == 0
    return out


def simple_job(angle=0.0, kind="residual_free", n_modules=2, seed=1):
    return {
        "seed": seed,
        "modules": [
            {"name": f"blk{i}.proj", "shape": [16, 12], "rank_s": 4, "principal_angles": angle}
            for i in range(n_modules)
        ],
        "adapter": {"kind": kind, "rank_par": 2, "rank_perp": 2},
    }


def test_synth_zero_angles(tmp_path):
    out = synth(tmp_path, simple_job())
    truth = json.loads((out / "truth.json").read_text())
    assert truth["modules"]["blk0.proj"]["similarity"]["combined"] == 1.0
    assert {p.name for p in out.iterdir()} >= {"source.safetensors", "target.safetensors", "adapter.safetensors"}


def test_synth_is_byte_identical(tmp_path):
    a = synth(tmp_path, simple_job(), "a")
    b = synth(tmp_path, simple_job(), "b")
    for name in ("source.safetensors", "target.safetensors", "adapter.safetensors", "truth.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_infeasible_exits_2(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps({"modules": [{"name": "a", "shape": [4, 4], "rank_s": 3, "principal_angles": 0.5}]}))
    assert cli.main(["synth", str(spec), "--out", str(tmp_path / "o")]) == 2
    assert "prolora:" in capsys.readouterr().err


def test_pair_identical(tmp_path):
    out = synth(tmp_path, simple_job())
    dest = tmp_path / "pairing.json"
    src = str(out / "source.safetensors")
    assert cli.main(["pair", "--source", src, "--target", src, "--out", str(dest)]) == 0
    doc = json.loads(dest.read_text())
    assert [(p["source"], p["target"]) for p in doc["pairs"]] == [("blk0.proj", "blk0.proj"), ("blk1.proj", "blk1.proj")]
    assert all(abs(p["combined"] - 1.0) < 1e-8 for p in doc["pairs"])


def test_pair_below_threshold_exits_3(tmp_path):
    # cos^2 = 0.6 on both sides for a rank-1 module
    theta = math.acos(math.sqrt(0.6))
    job = {"seed": 3, "modules": [{"name": "m", "shape": [8, 8], "rank_s": 1, "principal_angles": theta}]}
    out = synth(tmp_path, job)
    code = cli.main(["pair", "--source", str(out / "source.safetensors"), "--target", str(out / "target.safetensors"),
                     "--out", str(tmp_path / "p.json")])
    assert code == 3
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["unmatched_sources"] == ["m"]
    assert abs(doc["scores"]["combined"][0][0] - 0.6) < 1e-8


def test_missing_file_exits_2(tmp_path):
    assert cli.main(["pair", "--source", str(tmp_path / "nope"), "--target", str(tmp_path / "nope")]) == 2


def test_bad_arguments_exit_2(tmp_path):
    assert cli.main(["transfer", "--threshold", "2"]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["transfer", "--mode", "bogus"]) == 2


def _transfer(tmp_path, out, *extra, target=None, name="out"):
    dest = tmp_path / f"{name}.safetensors"
    report = tmp_path / f"{name}.json"
    argv = [
        "transfer",
        "--source", str(out / "source.safetensors"),
        "--target", str(target or out / "target.safetensors"),
        "--adapter", str(out / "adapter.safetensors"),
        "--out", str(dest),
        "--report", str(report),
        "--dtype", "f64",
        *extra,
    ]
    return cli.main(argv), dest, report


def test_transfer_identity(tmp_path):
    out = synth(tmp_path, simple_job(kind="general"))
    code, dest, report = _transfer(tmp_path, out, "--rank", "12", target=out / "source.safetensors")
    assert code == 0
    src = load_archive(out / "source.safetensors")
    adapter = load_adapter(out / "adapter.safetensors")
    moved = load_adapter(dest)
    for name, mod in adapter.modules.items():
        d = decompose_adapter(mod.delta(), spectral_bases(src.get(name + ".weight")))
        assert np.abs(moved.modules[name].delta() - (d.par + d.perp)).max() < 1e-6
    doc = json.loads(report.read_text())
    assert doc["schema"] == "report/1"
    assert moved.metadata["prolora.mode"] == "full"


def test_transfer_mode_additivity(tmp_path):
    out = synth(tmp_path, simple_job(angle=0.3, kind="general"))
    deltas = {}
    for mode in ("full", "subspace_only", "nullspace_only"):
        code, dest, _ = _transfer(tmp_path, out, "--mode", mode, "--rank", "12", "--threshold", "0", name=mode)
        assert code == 0
        deltas[mode] = load_adapter(dest)
    for name, mod in deltas["full"].modules.items():
        total = deltas["subspace_only"].modules[name].delta() + deltas["nullspace_only"].modules[name].delta()
        assert np.abs(total - mod.delta()).max() < 1e-8


def test_transfer_threshold_one_on_noisy_pair(tmp_path):
    out = synth(tmp_path, simple_job(angle=0.2))
    code, dest, _ = _transfer(tmp_path, out, "--threshold", "1.0")
    assert code == 3
    assert not dest.exists()


def test_transfer_default_rank_and_csv_report(tmp_path):
    out = synth(tmp_path, simple_job(angle=0.1))
    dest = tmp_path / "o.safetensors"
    report = tmp_path / "r.csv"
    code = cli.main(["transfer", "--source", str(out / "source.safetensors"), "--target",
                     str(out / "target.safetensors"), "--adapter", str(out / "adapter.safetensors"),
                     "--out", str(dest), "--report", str(report)])
    assert code == 0
    arc = load_archive(dest)
    assert arc.entries["blk0.proj.lora_down.weight"].dtype == "F32"
    assert arc.entries["blk0.proj.lora_down.weight"].shape == (4, 12)
    rows = list(csv.reader(io.StringIO(report.read_text())))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert len(rows) == 3


def test_overrides_first_match_wins(tmp_path):
    out = synth(tmp_path, simple_job(kind="general"))
    src = out / "source.safetensors"
    code, dest, _ = _transfer(
        tmp_path, out, "--rank", "12", "--override", "blk0.*=subspace_only", "--override", "blk*=nullspace_only",
        target=src,
    )
    assert code == 0
    s = load_archive(src)
    adapter = load_adapter(out / "adapter.safetensors")
    moved = load_adapter(dest)
    d0 = decompose_adapter(adapter.modules["blk0.proj"].delta(), spectral_bases(s.get("blk0.proj.weight")))
    d1 = decompose_adapter(adapter.modules["blk1.proj"].delta(), spectral_bases(s.get("blk1.proj.weight")))
    assert np.abs(moved.modules["blk0.proj"].delta() - d0.par).max() < 1e-8
    assert np.abs(moved.modules["blk1.proj"].delta() - d1.perp).max() < 1e-8
    assert moved.metadata["prolora.overrides"] == "blk0.*=subspace_only,blk*=nullspace_only"


def test_config_file_and_flag_precedence(tmp_path):
    out = synth(tmp_path, simple_job(kind="general"))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "source": str(out / "source.safetensors"),
        "target": str(out / "source.safetensors"),
        "adapter": str(out / "adapter.safetensors"),
        "out": str(tmp_path / "o.safetensors"),
        "mode": "nullspace_only",
        "rank": 12,
        "dtype": "f64",
        "override": {"blk1.*": "subspace_only"},
    }))
    assert cli.main(["transfer", "--config", str(cfg), "--mode", "subspace_only"]) == 0
    moved = load_adapter(tmp_path / "o.safetensors")
    assert moved.metadata["prolora.mode"] == "subspace_only"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "blue"}))
    assert cli.main(["transfer", "--config", str(bad)]) == 2


def _analyze(tmp_path, out, name="a.csv"):
    dest = tmp_path / name
    code = cli.main(["analyze", "--source", str(out / "source.safetensors"), "--adapter",
                     str(out / "adapter.safetensors"), "--out", str(dest)])
    assert code == 0
    return list(csv.DictReader(io.StringIO(dest.read_text())))


def test_analyze_residual_free(tmp_path):
    rows = _analyze(tmp_path, synth(tmp_path, simple_job(kind="residual_free")))
    assert len(rows) == 2
    for r in rows:
        assert float(r["residual_norm"]) < 1e-8 * float(r["delta_norm"])
        assert float(r["par_norm"]) > 0 and float(r["perp_norm"]) > 0


def test_analyze_pure_cross(tmp_path):
    rows = _analyze(tmp_path, synth(tmp_path, simple_job(kind="pure_cross")))
    for r in rows:
        assert float(r["par_norm"]) < 1e-8 * float(r["delta_norm"])
        assert float(r["perp_norm"]) < 1e-8 * float(r["delta_norm"])
        assert abs(float(r["residual_norm"]) - float(r["delta_norm"])) < 1e-8 * float(r["delta_norm"])


def test_analyze_full_rank_has_no_nullspace(tmp_path, rng):
    src = tmp_path / "s.safetensors"
    save_archive(src, {"m.weight": rng.standard_normal((6, 6))}, dtype="f64")
    ad = tmp_path / "ad.safetensors"
    save_adapter(AdapterSet({"m": AdapterModule("m", rng.standard_normal((2, 6)), rng.standard_normal((6, 2)))}), ad)
    dest = tmp_path / "a.json"
    assert cli.main(["analyze", "--source", str(src), "--adapter", str(ad), "--report", str(dest)]) == 0
    doc = json.loads(dest.read_text())
    assert doc["modules"][0]["perp_norm"] == 0.0


def test_conv_module_round_trip(tmp_path):
    job = {
        "seed": 4,
        "modules": [{"name": "conv", "shape": [8, 18], "rank_s": 3, "principal_angles": 0.0, "conv_kernel": [3, 3]}],
        "adapter": {"kind": "residual_free", "rank_par": 1, "rank_perp": 1},
    }
    out = synth(tmp_path, job)
    code, dest, _ = _transfer(tmp_path, out)
    assert code == 0
    arc = load_archive(dest)
    assert arc.entries["conv.lora_down.weight"].shape == (2, 2, 3, 3)
    assert arc.entries["conv.lora_up.weight"].shape == (8, 2, 1, 1)


def test_cache_reused_across_runs(tmp_path):
    out = synth(tmp_path, simple_job())
    cache = tmp_path / "cache"
    for name in ("r1", "r2"):
        code, dest, _ = _transfer(tmp_path, out, "--cache-dir", str(cache), name=name)
        assert code == 0
    assert any(cache.iterdir())
    assert (tmp_path / "r1.safetensors").read_bytes() == (tmp_path / "r2.safetensors").read_bytes()


@pytest.mark.parametrize("jobs", ["1", "3"])
def test_no_cache_writes_nothing_beside_checkpoint(tmp_path, jobs):
    out = synth(tmp_path, simple_job())
    code, _, _ = _transfer(tmp_path, out, "--no-cache", "--jobs", jobs)
    assert code == 0
    assert not any(p.name.endswith(".spectral") for p in out.iterdir())
