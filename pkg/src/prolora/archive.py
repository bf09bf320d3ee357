"""Tensor archives in the safetensors layout, adapter sets, checkpoints and the spectral cache.

Layout: an 8-byte little-endian header length, a JSON header mapping tensor
names to ``{"dtype", "shape", "data_offsets"}`` (plus an optional
``"__metadata__"`` string map), then the raw little-endian tensor bytes.
Writers here are deterministic: names sorted, fixed key order, header padded
with spaces to a multiple of 8 bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import FormatError, IoError
from .linalg import DEFAULT_RANK_TOL, SpectralBases, split_bases, svd_full

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
MAX_HEADER_BYTES = 100 * 1024 * 1024

_NP_DTYPES = {"F16": np.dtype("<f2"), "F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
DTYPE_SIZES = {"F16": 2, "BF16": 2, "F32": 4, "F64": 8}
_ALIASES = {"f16": "F16", "float16": "F16", "bf16": "BF16", "bfloat16": "BF16",
            "f32": "F32", "float32": "F32", "f64": "F64", "float64": "F64"}


def canonical_dtype(name: str) -> str:
    key = name.strip()
    if key.upper() in DTYPE_SIZES:
        return key.upper()
    try:
        return _ALIASES[key.lower()]
    except KeyError:
        raise ValueError(f"unsupported dtype {name!r}") from None


def _bf16_decode(raw: bytes, count: int) -> np.ndarray:
    bits = np.frombuffer(raw, dtype="<u2", count=count).astype(np.uint32) << 16
    return bits.view(np.float32)


def _bf16_encode(values: np.ndarray) -> bytes:
    f = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    # round to nearest, ties to even; NaN keeps a quiet mantissa bit
    rounded = (f + np.uint32(0x7FFF) + ((f >> 16) & np.uint32(1))) >> 16
    nan = np.isnan(values.astype(np.float32, copy=False))
    rounded = np.where(nan, (f >> 16) | np.uint32(0x40), rounded)
    return rounded.astype("<u2").tobytes()


def encode_tensor(values, dtype: str) -> bytes:
    a = np.asarray(values)
    if dtype == "BF16":
        return _bf16_encode(a.astype(np.float64, copy=False))
    return np.ascontiguousarray(a, dtype=_NP_DTYPES[dtype]).tobytes()


def decode_tensor(raw: bytes, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    count = math.prod(shape)
    if dtype == "BF16":
        flat = _bf16_decode(raw, count)
    else:
        flat = np.frombuffer(raw, dtype=_NP_DTYPES[dtype], count=count)
    return flat.reshape(shape)


@dataclass(frozen=True)
class TensorEntry:
    dtype: str
    shape: tuple[int, ...]
    start: int
    end: int

    @property
    def nbytes(self) -> int:
        return self.end - self.start


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise FormatError(f"duplicate key {k!r} in header")
        out[k] = v
    return out


def parse_header(header: bytes, data_size: int) -> tuple[dict[str, TensorEntry], dict[str, str]]:
    """Validate a raw JSON header against a data segment of ``data_size`` bytes."""
    try:
        text = header.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not UTF-8: {exc}") from None
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("header must be a JSON object")

    metadata = doc.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError("__metadata__ must map strings to strings")

    entries: dict[str, TensorEntry] = {}
    for name, info in doc.items():
        if not isinstance(info, dict):
            raise FormatError(f"{name}: entry must be an object")
        missing = {"dtype", "shape", "data_offsets"} - info.keys()
        if missing:
            raise FormatError(f"{name}: missing fields {sorted(missing)}")
        dtype = info["dtype"]
        if dtype not in DTYPE_SIZES:
            raise FormatError(f"{name}: unsupported dtype {dtype!r}")
        shape = info["shape"]
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
        ):
            raise FormatError(f"{name}: shape must be a list of non-negative integers")
        offsets = info["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        ):
            raise FormatError(f"{name}: data_offsets must be two integers")
        start, end = offsets
        if start < 0 or end < start:
            raise FormatError(f"{name}: invalid byte range {offsets}")
        if end > data_size:
            raise FormatError(f"{name}: byte range {offsets} beyond end of data ({data_size} bytes)")
        expected = math.prod(shape) * DTYPE_SIZES[dtype]
        if end - start != expected:
            raise FormatError(f"{name}: byte length {end - start} != {expected} for {dtype}{shape}")
        entries[name] = TensorEntry(dtype, tuple(shape), start, end)

    cursor = 0
    for name, e in sorted(entries.items(), key=lambda kv: (kv[1].start, kv[1].end)):
        if e.start < cursor:
            raise FormatError(f"{name}: byte range overlaps a previous tensor")
        if e.start > cursor:
            raise FormatError(f"{name}: gap before byte {e.start}; ranges must be contiguous")
        cursor = e.end
    if cursor != data_size:
        raise FormatError(f"data segment has {data_size - cursor} trailing bytes not owned by any tensor")
    return entries, metadata


class TensorArchive:
    """Read-only, lazily loaded tensor archive.

    ``get`` converts to float64; ``raw`` returns the stored dtype (bf16 as float32).
    """

    def __init__(self, path, entries: dict[str, TensorEntry], metadata: dict[str, str], data_start: int):
        self.path = Path(path)
        self.entries = entries
        self.metadata = metadata
        self._data_start = data_start
        self._hash: str | None = None

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return sorted(self.entries)

    def _read(self, name: str) -> bytes:
        e = self.entries[name]
        try:
            with open(self.path, "rb") as fh:
                fh.seek(self._data_start + e.start)
                raw = fh.read(e.nbytes)
        except OSError as exc:
            raise IoError(f"cannot read {self.path}: {exc}") from exc
        if len(raw) != e.nbytes:
            raise IoError(f"{self.path} truncated while reading {name}")
        return raw

    def raw(self, name: str) -> np.ndarray:
        e = self.entries[name]
        return decode_tensor(self._read(name), e.dtype, e.shape)

    def get(self, name: str) -> np.ndarray:
        return self.raw(name).astype(np.float64)

    def content_hash(self) -> str:
        """sha256 of the whole file, computed once."""
        if self._hash is None:
            h = hashlib.sha256()
            with open(self.path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
            self._hash = h.hexdigest()
        return self._hash


def load_archive(path) -> TensorArchive:
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            prefix = fh.read(8)
            if len(prefix) < 8:
                raise IoError(f"{path}: truncated file ({size} bytes)")
            (hlen,) = struct.unpack("<Q", prefix)
            if hlen > MAX_HEADER_BYTES:
                raise FormatError(f"{path}: header length {hlen} exceeds limit")
            if 8 + hlen > size:
                raise IoError(f"{path}: truncated header ({size - 8} of {hlen} bytes)")
            header = fh.read(hlen)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    entries, metadata = parse_header(header, size - 8 - hlen)
    return TensorArchive(path, entries, metadata, 8 + hlen)


def serialize_archive(
    tensors: Mapping[str, np.ndarray],
    metadata: Mapping[str, str] | None = None,
    dtype: str | Mapping[str, str] | None = None,
) -> bytes:
    """Deterministic archive bytes. ``dtype`` is one name for all tensors or a per-name map."""
    names = sorted(tensors)
    header: dict = {}
    if metadata:
        header["__metadata__"] = {k: str(metadata[k]) for k in sorted(metadata)}
    chunks = []
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name])
        if isinstance(dtype, Mapping):
            dt = canonical_dtype(dtype.get(name, "f32"))
        elif dtype is not None:
            dt = canonical_dtype(dtype)
        elif arr.dtype.kind == "f" and arr.dtype.itemsize in (2, 4, 8):
            dt = {2: "F16", 4: "F32", 8: "F64"}[arr.dtype.itemsize]
        else:
            raise ValueError(f"{name}: cannot infer storage dtype from {arr.dtype}")
        blob = encode_tensor(arr, dt)
        header[name] = {"dtype": dt, "shape": list(arr.shape), "data_offsets": [offset, offset + len(blob)]}
        chunks.append(blob)
        offset += len(blob)
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def atomic_write(path, payload: bytes) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise IoError(f"cannot write {path}: {exc}") from exc


def save_archive(path, tensors, metadata=None, dtype=None) -> None:
    atomic_write(path, serialize_archive(tensors, metadata, dtype))


# --------------------------------------------------------------------------- adapters

_ADAPTER_SUFFIXES = {
    "lora_down.weight": "down",
    "lora_A.weight": "down",
    "lora_up.weight": "up",
    "lora_B.weight": "up",
    "alpha": "alpha",
}


@dataclass(eq=False)
class AdapterModule:
    """One factored adapter: ``delta = scale * up @ down``.

    ``up``/``down`` are kept 2D; conv adapters remember their 4D on-disk shapes.
    """

    module_path: str
    down: np.ndarray
    up: np.ndarray
    scale: float = 1.0
    down_shape: tuple[int, ...] | None = None
    up_shape: tuple[int, ...] | None = None

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def delta(self) -> np.ndarray:
        return self.scale * (self.up @ self.down)

    def validate(self) -> None:
        if self.up.ndim != 2 or self.down.ndim != 2 or self.up.shape[1] != self.down.shape[0]:
            raise FormatError(
                f"{self.module_path}: up {self.up.shape} and down {self.down.shape} disagree on rank"
            )
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise FormatError(f"{self.module_path}: scale must be finite and positive, got {self.scale}")


@dataclass(eq=False)
class AdapterSet:
    modules: dict[str, AdapterModule] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    # tensors carried through untouched, e.g. DoRA magnitude vectors
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.modules)

    @property
    def rank(self) -> int:
        return max((m.rank for m in self.modules.values()), default=0)


def _split_adapter_name(name: str) -> tuple[str, str] | None:
    for suffix, role in _ADAPTER_SUFFIXES.items():
        if name.endswith("." + suffix):
            return name[: -len(suffix) - 1], role
    return None


def load_adapter(path) -> AdapterSet:
    """Read an adapter archive; ``lora_A``/``lora_B`` names are accepted as aliases."""
    arch = load_archive(path)
    parts: dict[str, dict[str, np.ndarray]] = {}
    extras: dict[str, np.ndarray] = {}
    for name in arch.names:
        split = _split_adapter_name(name)
        if split is None:
            extras[name] = arch.get(name)
            continue
        module, role = split
        if role in parts.setdefault(module, {}):
            raise FormatError(f"{module}: more than one {role} tensor")
        parts[module][role] = arch.get(name)

    modules = {}
    for module, p in sorted(parts.items()):
        if "down" not in p or "up" not in p:
            raise FormatError(f"{module}: adapter needs both down and up tensors")
        down, up = p["down"], p["up"]
        down_shape = up_shape = None
        if down.ndim == 4:
            down_shape = down.shape
            down = down.reshape(down.shape[0], -1)
        if up.ndim == 4:
            up_shape = up.shape
            if up.shape[2:] != (1, 1):
                raise FormatError(f"{module}: conv up tensor must be 1x1, got {up.shape}")
            up = up.reshape(up.shape[0], up.shape[1])
        rank = down.shape[0]
        scale = 1.0
        if "alpha" in p:
            alpha = float(np.asarray(p["alpha"]).reshape(-1)[0])
            scale = alpha / rank if rank else 1.0
        mod = AdapterModule(module, down, up, scale, down_shape, up_shape)
        mod.validate()
        modules[module] = mod
    return AdapterSet(modules, dict(arch.metadata), extras)


def adapter_tensors(adapters: AdapterSet) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = dict(adapters.extras)
    for path, mod in adapters.modules.items():
        mod.validate()
        down = mod.down.reshape(mod.down_shape) if mod.down_shape else mod.down
        up = mod.up.reshape(mod.up_shape) if mod.up_shape else mod.up
        out[f"{path}.lora_down.weight"] = down
        out[f"{path}.lora_up.weight"] = up
        out[f"{path}.alpha"] = np.asarray(mod.scale * mod.rank, dtype=np.float64)
    return out


def save_adapter(adapters: AdapterSet, path, dtype: str = "f32") -> None:
    """Write ``<module>.lora_down.weight``, ``<module>.lora_up.weight`` and ``<module>.alpha``.

    ``alpha`` is stored as ``scale * rank`` so the usual ``alpha / rank``
    convention reproduces ``scale``.
    """
    metadata = {"format_version": FORMAT_VERSION, **adapters.metadata}
    save_archive(path, adapter_tensors(adapters), metadata, dtype)


# --------------------------------------------------------------------------- checkpoints


class Checkpoint:
    """Base-model weights addressed by module path (tensor name minus ``.weight``).

    Only 2D and 4D ``.weight`` tensors count as modules; 4D kernels are
    flattened to (out, in*kh*kw).
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None, archive: TensorArchive | None = None):
        if (tensors is None) == (archive is None):
            raise ValueError("give exactly one of tensors or archive")
        self._tensors = dict(tensors) if tensors is not None else None
        self.archive = archive
        self._hash: str | None = None

    @classmethod
    def open(cls, path) -> "Checkpoint":
        return cls(archive=load_archive(path))

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "Checkpoint":
        return cls(tensors={k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()})

    @property
    def path(self) -> Path | None:
        return self.archive.path if self.archive is not None else None

    def _shape(self, name: str) -> tuple[int, ...]:
        if self.archive is not None:
            return self.archive.entries[name].shape
        return self._tensors[name].shape

    def _names(self) -> Iterable[str]:
        return self.archive.names if self.archive is not None else sorted(self._tensors)

    def modules(self) -> list[str]:
        return [
            n[: -len(".weight")]
            for n in self._names()
            if n.endswith(".weight") and len(self._shape(n)) in (2, 4) and all(self._shape(n))
        ]

    def __contains__(self, module: str) -> bool:
        name = module + ".weight"
        return name in set(self._names()) and len(self._shape(name)) in (2, 4)

    def weight_shape(self, module: str) -> tuple[int, ...]:
        if module not in self:
            raise KeyError(module)
        return self._shape(module + ".weight")

    def matrix_shape(self, module: str) -> tuple[int, int]:
        s = self.weight_shape(module)
        return (s[0], math.prod(s[1:]))

    def weight(self, module: str) -> np.ndarray:
        if module not in self:
            raise KeyError(module)
        name = module + ".weight"
        w = self.archive.get(name) if self.archive is not None else self._tensors[name]
        return w.reshape(w.shape[0], -1)

    @property
    def content_hash(self) -> str:
        if self._hash is None:
            if self.archive is not None:
                self._hash = self.archive.content_hash()
            else:
                self._hash = hashlib.sha256(serialize_archive(self._tensors, dtype="f64")).hexdigest()
        return self._hash


# --------------------------------------------------------------------------- spectral cache


class SpectralCache:
    """Memoized :class:`SpectralBases` keyed by (model hash, module, rank tolerance).

    With ``directory`` set, entries are also persisted as float64 archives,
    one file per key, written by atomic rename.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._memory: dict[tuple[str, str, float], SpectralBases] = {}
        self._lock = threading.Lock()
        self.computed = 0
        self.disk_hits = 0

    @staticmethod
    def key(model: Checkpoint, module: str, rel_tol: float) -> tuple[str, str, float]:
        return (model.content_hash, module, float(rel_tol))

    def _file(self, key) -> Path:
        digest = hashlib.sha256(f"{key[0]}|{key[1]}|{key[2]!r}".encode()).hexdigest()[:32]
        return self.directory / f"{digest}.safetensors"

    def _load(self, key) -> SpectralBases | None:
        path = self._file(key)
        if not path.exists():
            return None
        try:
            arch = load_archive(path)
            meta = arch.metadata
            if (meta.get("model_hash"), meta.get("module"), meta.get("rel_tol")) != (key[0], key[1], repr(key[2])):
                return None
            u, v, sigma = arch.get("u"), arch.get("v"), arch.get("sigma")
        except (FormatError, IoError) as exc:
            logger.warning("ignoring unreadable spectral cache entry %s: %s", path, exc)
            return None
        return split_bases(u, v, sigma, key[2])

    def _store(self, key, u, v, sigma) -> None:
        meta = {"model_hash": key[0], "module": key[1], "rel_tol": repr(key[2])}
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            save_archive(self._file(key), {"u": u, "v": v, "sigma": sigma}, meta, "f64")
        except (IoError, OSError) as exc:
            logger.warning("could not persist spectral cache entry for %s: %s", key[1], exc)

    def get_or_compute(self, model: Checkpoint, module: str, rel_tol: float = DEFAULT_RANK_TOL) -> SpectralBases:
        if module not in model:
            raise KeyError(module)
        key = self.key(model, module, rel_tol)
        with self._lock:
            hit = self._memory.get(key)
        if hit is not None:
            return hit
        bases = self._load(key) if self.directory is not None else None
        if bases is not None:
            with self._lock:
                self.disk_hits += 1
        else:
            u, sigma, v = svd_full(model.weight(module))
            bases = split_bases(u, v, sigma, rel_tol)
            with self._lock:
                self.computed += 1
            if self.directory is not None:
                self._store(key, u, v, sigma)
        with self._lock:
            return self._memory.setdefault(key, bases)


_default_cache = SpectralCache()


def spectral_cache_get_or_compute(
    model: Checkpoint, module_path: str, rel_tol: float = DEFAULT_RANK_TOL, cache: SpectralCache | None = None
) -> SpectralBases:
    return (cache or _default_cache).get_or_compute(model, module_path, rel_tol)


def default_cache_dir(model_path) -> Path:
    """Directory beside a checkpoint file where its spectral cache lives."""
    p = Path(model_path)
    return p.with_name(p.name + ".spectral")
