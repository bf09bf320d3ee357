# Reading and writing tensor archives and adapter files.
import tempfile
from pathlib import Path

import numpy as np

from prolora.archive import (
    AdapterModule,
    AdapterSet,
    Checkpoint,
    SpectralCache,
    load_adapter,
    load_archive,
    save_adapter,
    save_archive,
)
from prolora.errors import FormatError

rng = np.random.default_rng(4)
tmp = Path(tempfile.mkdtemp())

save_archive(tmp / "model.safetensors", {
    "layers.0.attn.weight": rng.standard_normal((16, 12)),
    "layers.0.attn.bias": rng.standard_normal(16),
    "layers.1.conv.weight": rng.standard_normal((8, 4, 3, 3)),
}, {"note": "demo"}, dtype="f32")

arc = load_archive(tmp / "model.safetensors")
for name in arc.names:
    e = arc.entries[name]
    print(f"{name:24s} {e.dtype} {e.shape}")
print("metadata:", arc.metadata)

ck = Checkpoint.open(tmp / "model.safetensors")
print("weight modules:", ck.modules(), "conv matrix shape:", ck.matrix_shape("layers.1.conv"))

# adapters: down (r x n), up (m x r), alpha = scale * r
ad = AdapterSet({"layers.0.attn": AdapterModule(
    "layers.0.attn", rng.standard_normal((4, 12)), rng.standard_normal((16, 4)), scale=0.5)})
save_adapter(ad, tmp / "adapter.safetensors")
print(sorted(load_archive(tmp / "adapter.safetensors").names))
back = load_adapter(tmp / "adapter.safetensors")
print("scale after reload:", back.modules["layers.0.attn"].scale)

# spectral bases are cached per content hash, module and tolerance
cache = SpectralCache(tmp / "cache")
cache.get_or_compute(ck, "layers.0.attn")
cache.get_or_compute(ck, "layers.0.attn")
print("computed:", cache.computed, "cache files:", len(list((tmp / "cache").iterdir())))

# a corrupted header is refused
bad = tmp / "bad.safetensors"
bad.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{oops")
try:
    load_archive(bad)
except FormatError as exc:
    print("rejected:", exc)
