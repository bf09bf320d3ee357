# The command line end to end: synth, pair, transfer, analyze.
import csv
import json
import tempfile
from pathlib import Path

from prolora.cli import main

tmp = Path(tempfile.mkdtemp())
job = {
    "seed": 5,
    "modules": [
        {"name": "blocks.0.q", "shape": [64, 64], "rank_s": 16, "principal_angles": 0.1},
        {"name": "blocks.0.k", "shape": [64, 64], "rank_s": 16, "principal_angles": 0.2},
        {"name": "blocks.0.mlp", "shape": [128, 64], "rank_s": 24, "principal_angles": 0.0},
    ],
    "adapter": {"kind": "general", "rank_par": 4, "rank_perp": 4},
}
(tmp / "job.json").write_text(json.dumps(job))
main(["synth", str(tmp / "job.json"), "--out", str(tmp / "data")])

src, tgt, ad = (str(tmp / "data" / f) for f in ("source.safetensors", "target.safetensors", "adapter.safetensors"))
main(["pair", "--source", src, "--target", tgt, "--adapter", ad, "--out", str(tmp / "pairing.json")])
for p in json.loads((tmp / "pairing.json").read_text())["pairs"]:
    print(f"  {p['source']:>14} -> {p['target']:<14} combined {p['combined']:.3f}")

main(["transfer", "--source", src, "--target", tgt, "--adapter", ad, "--out", str(tmp / "moved.safetensors"),
      "--report", str(tmp / "report.csv"), "--override", "*.mlp=subspace_only"])
with open(tmp / "report.csv") as fh:
    for row in csv.DictReader(fh):
        print(f"  {row['source_module']:>14} {row['mode']:>14} |dW| {float(row['delta_norm']):.3f} "
              f"-> {float(row['transferred_norm']):.3f}")

main(["analyze", "--source", src, "--adapter", ad, "--out", str(tmp / "analysis.csv")])
print((tmp / "analysis.csv").read_text())
