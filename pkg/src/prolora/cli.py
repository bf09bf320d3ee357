"""``prolora`` command line: pair, transfer, analyze, synth.

Exit codes: 0 success, 2 unreadable input / invalid arguments or spec,
3 unmatched modules (pair) or nothing matched (transfer), 4 numerical failure.
Warnings go to stderr; stdout carries one summary line.
"""

from __future__ import annotations

import argparse
import fnmatch
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import archive as ar
from .decompose import decompose_adapter
from .diagnostics import ModuleResult, build_report, decomposition_csv, dumps_json, emit, pairing_dict
from .errors import (
    EmptyModel,
    FormatError,
    InvalidMatrix,
    IoError,
    NumericalFailure,
    ProLoRAError,
    RankError,
    ShapeError,
    SpecError,
)
from .linalg import DEFAULT_RANK_TOL, SpectralBases
from .similarity import ModulePairing, pair_modules
from .synth import SynthJob, build_synthetic_job
from .transfer import (
    TransferMode,
    copy_transfer,
    factorwise_delta,
    recompress,
    transfer_adapter,
)

logger = logging.getLogger("prolora")

EXIT_OK, EXIT_IO, EXIT_UNMATCHED, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


@dataclass
class JobConfig:
    source_model: str | None = None
    target_model: str | None = None
    adapter: str | None = None
    output: str | None = None
    threshold: float = 0.8
    mode: TransferMode = TransferMode.FULL
    output_rank: int | None = None
    rank_tolerance: float = DEFAULT_RANK_TOL
    combine: str = "mean"
    report: str | None = None
    overrides: list[tuple[str, TransferMode]] = field(default_factory=list)
    jobs: int = 1
    pairing: str = "greedy"
    dtype: str = "f32"
    cache: bool = True
    cache_dir: str | None = None
    timing: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise CliError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.output_rank is not None and self.output_rank < 0:
            raise CliError(f"output rank must be >= 0, got {self.output_rank}")
        if self.combine not in ("mean", "min"):
            raise CliError(f"combine must be mean or min, got {self.combine!r}")
        if self.pairing not in ("greedy", "optimal"):
            raise CliError(f"pairing must be greedy or optimal, got {self.pairing!r}")
        if self.jobs < 1:
            raise CliError("--jobs must be at least 1")
        if not (self.rank_tolerance > 0 and math.isfinite(self.rank_tolerance)):
            raise CliError("rank tolerance must be a positive number")

    def mode_for(self, module: str) -> TransferMode:
        for pattern, mode in self.overrides:
            if fnmatch.fnmatchcase(module, pattern):
                return mode
        return self.mode


def _parse_mode(text: str) -> TransferMode:
    try:
        return TransferMode(text.strip())
    except ValueError:
        choices = ", ".join(m.value for m in TransferMode)
        raise CliError(f"unknown mode {text!r} (choose from {choices})") from None


def _parse_override(text: str) -> tuple[str, TransferMode]:
    pattern, sep, mode = text.rpartition("=")
    if not sep or not pattern:
        raise CliError(f"override must look like <glob>=<mode>, got {text!r}")
    return pattern, _parse_mode(mode)


# config-file key -> (JobConfig attribute, converter)
_CONFIG_KEYS: dict[str, tuple[str, Callable[[Any], Any]]] = {
    "source": ("source_model", str),
    "target": ("target_model", str),
    "adapter": ("adapter", str),
    "out": ("output", str),
    "threshold": ("threshold", float),
    "mode": ("mode", _parse_mode),
    "rank": ("output_rank", int),
    "rank_tol": ("rank_tolerance", float),
    "combine": ("combine", str),
    "report": ("report", str),
    "jobs": ("jobs", int),
    "pairing": ("pairing", str),
    "dtype": ("dtype", str),
    "cache_dir": ("cache_dir", str),
}


def _overrides_from(value: Any) -> list[tuple[str, TransferMode]]:
    if isinstance(value, dict):
        return [(str(k), _parse_mode(str(v))) for k, v in value.items()]
    if isinstance(value, list):
        return [_parse_override(str(v)) for v in value]
    raise CliError("config 'override' must be a list of '<glob>=<mode>' strings or a mapping")


def build_config(args: argparse.Namespace) -> JobConfig:
    """Merge defaults, the optional JSON config file, then command-line flags (flags win)."""
    cfg = JobConfig(jobs=os.cpu_count() or 1)
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise CliError("config file must hold a JSON object")
        for key, value in doc.items():
            key = key.replace("-", "_")
            if key == "override":
                cfg.overrides = _overrides_from(value)
            elif key in ("cache", "timing"):
                setattr(cfg, key, bool(value))
            elif key in _CONFIG_KEYS:
                attr, conv = _CONFIG_KEYS[key]
                try:
                    setattr(cfg, attr, conv(value))
                except (TypeError, ValueError) as exc:
                    raise CliError(f"config key {key!r}: {exc}") from None
            else:
                raise CliError(f"unknown config key {key!r}")
    for key, (attr, conv) in _CONFIG_KEYS.items():
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, attr, conv(value))
    if getattr(args, "override", None):
        cfg.overrides = [_parse_override(v) for v in args.override]
    if getattr(args, "no_cache", False):
        cfg.cache = False
    if getattr(args, "timing", False):
        cfg.timing = True
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------- shared plumbing


class _Session:
    """Models, adapter and spectral caches for one command invocation."""

    def __init__(self, cfg: JobConfig):
        self.cfg = cfg
        self._caches: dict[str, ar.SpectralCache] = {}
        self._pool = ThreadPoolExecutor(max_workers=cfg.jobs) if cfg.jobs > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def map(self, fn, items: Sequence) -> list:
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def open_model(self, path: str | None, label: str) -> ar.Checkpoint:
        if not path:
            raise CliError(f"--{label} is required")
        return ar.Checkpoint.open(path)

    def cache_for(self, model: ar.Checkpoint) -> ar.SpectralCache:
        key = str(model.path)
        if key not in self._caches:
            directory = None
            if self.cfg.cache:
                directory = self.cfg.cache_dir or ar.default_cache_dir(model.path)
            self._caches[key] = ar.SpectralCache(directory)
        return self._caches[key]

    def bases(self, model: ar.Checkpoint, modules: Sequence[str]) -> list[SpectralBases]:
        cache = self.cache_for(model)
        tol = self.cfg.rank_tolerance
        return self.map(lambda mod: cache.get_or_compute(model, mod, tol), list(modules))


def _adapter_sources(adapter: ar.AdapterSet, source: ar.Checkpoint) -> list[str]:
    mods = sorted(adapter.modules)
    for mod in mods:
        if mod not in source:
            raise CliError(f"adapter module {mod!r} has no weight in the source model")
        m, n = source.matrix_shape(mod)
        a = adapter.modules[mod]
        if a.up.shape[0] != m or a.down.shape[1] != n:
            raise CliError(
                f"adapter module {mod!r} has shape {(a.up.shape[0], a.down.shape[1])}, source weight is {(m, n)}"
            )
    return mods


def _pair(session: _Session, source: ar.Checkpoint, target: ar.Checkpoint, source_modules: list[str]):
    cfg = session.cfg
    if not source_modules:
        raise EmptyModel("no source modules to pair")
    target_modules = target.modules()
    sb = session.bases(source, source_modules)
    tb = session.bases(target, target_modules)
    pairing = pair_modules(
        list(zip(source_modules, sb)),
        list(zip(target_modules, tb)),
        threshold=cfg.threshold,
        combine=cfg.combine,
        method=cfg.pairing,
    )
    return pairing, dict(zip(source_modules, sb)), dict(zip(target_modules, tb))


def _write(path: str | None, payload: bytes) -> None:
    if path:
        ar.atomic_write(path, payload)


def _report_format(path: str) -> str:
    return "csv" if path.lower().endswith(".csv") else "json"


# --------------------------------------------------------------------------- commands


def cmd_pair(cfg: JobConfig) -> int:
    session = _Session(cfg)
    try:
        source = session.open_model(cfg.source_model, "source")
        target = session.open_model(cfg.target_model, "target")
        if cfg.adapter:
            modules = _adapter_sources(ar.load_adapter(cfg.adapter), source)
        else:
            modules = source.modules()
        pairing, _, _ = _pair(session, source, target, modules)
    finally:
        session.close()
    payload = dumps_json(pairing_dict(pairing))
    _write(cfg.output or cfg.report, payload)
    for mod in pairing.unmatched_sources:
        logger.warning("source module %s has no target above threshold %.3g", mod, cfg.threshold)
    print(f"paired {len(pairing.pairs)} of {len(modules)} source modules (threshold {cfg.threshold:g})")
    return EXIT_UNMATCHED if pairing.unmatched_sources else EXIT_OK


def _transfer_one(
    cfg: JobConfig,
    mod: ar.AdapterModule,
    target_id: str,
    sb: SpectralBases,
    tb: SpectralBases,
    target_shape: tuple[int, ...],
):
    mode = cfg.mode_for(target_id)
    delta = mod.delta()
    decomposed = decompose_adapter(delta, sb)
    m, n = tb.source_shape
    rank = mod.rank if cfg.output_rank is None else cfg.output_rank
    if rank > min(m, n):
        logger.warning("%s: output rank %d clipped to %d", target_id, rank, min(m, n))
        rank = min(m, n)

    if mode is TransferMode.FACTORWISE:
        transferred = factorwise_delta(mod.up, mod.down, mod.scale, sb, tb, mod.module_path, target_id)
    elif mode in (TransferMode.COPY, TransferMode.COPY_PROJECTED):
        transferred = copy_transfer(delta, mode, tb, mod.module_path, target_id)
    else:
        transferred = transfer_adapter(decomposed, tb, mode, mod.module_path, target_id)

    if mode is TransferMode.FACTORWISE and rank == mod.rank:
        up, down = transferred.factors
        residual = 0.0
    else:
        up, down, residual = recompress(transferred, rank)

    down_shape = up_shape = None
    if len(target_shape) == 4:
        down_shape = (rank,) + tuple(target_shape[1:])
        up_shape = (target_shape[0], rank, 1, 1)
    out = ar.AdapterModule(target_id, down, up, 1.0, down_shape, up_shape)
    return ModuleResult(decomposed, transferred, residual), out


def _carry_extras(adapter: ar.AdapterSet, rename: dict[str, str]) -> dict[str, np.ndarray]:
    out = {}
    for name, value in adapter.extras.items():
        owner = next((s for s in sorted(adapter.modules, key=len, reverse=True) if name.startswith(s + ".")), None)
        if owner is None:
            out[name] = value
        elif owner in rename:
            out[rename[owner] + name[len(owner):]] = value
        else:
            logger.warning("dropping auxiliary tensor %s of unmatched module %s", name, owner)
    return out


def cmd_transfer(cfg: JobConfig) -> int:
    if not cfg.adapter:
        raise CliError("--adapter is required")
    if not cfg.output:
        raise CliError("--out is required")
    started = time.perf_counter()
    session = _Session(cfg)
    try:
        source = session.open_model(cfg.source_model, "source")
        target = session.open_model(cfg.target_model, "target")
        adapter = ar.load_adapter(cfg.adapter)
        modules = _adapter_sources(adapter, source)
        pairing, sbases, tbases = _pair(session, source, target, modules)
        for mod in pairing.unmatched_sources:
            logger.warning("adapter module %s has no target above threshold %.3g; omitted", mod, cfg.threshold)
        if not pairing.pairs:
            raise CliError("no adapter module matched a target module", EXIT_UNMATCHED)
        paired_at = time.perf_counter()
        work = [
            (adapter.modules[s], t, sbases[s], tbases[t], target.weight_shape(t))
            for s, t, _ in sorted(pairing.pairs, key=lambda p: p[0])
        ]
        outputs = session.map(lambda w: _transfer_one(cfg, *w), work)
    finally:
        session.close()
    done = time.perf_counter()

    results = [r for r, _ in outputs]
    new_modules = {o.module_path: o for _, o in outputs}
    rename = {s: t for s, t, _ in pairing.pairs}
    metadata = {
        "prolora.mode": cfg.mode.value,
        "prolora.rank": "input" if cfg.output_rank is None else str(cfg.output_rank),
        "prolora.source_hash": source.content_hash,
        "prolora.threshold": repr(cfg.threshold),
    }
    if cfg.overrides:
        metadata["prolora.overrides"] = ",".join(f"{p}={m.value}" for p, m in cfg.overrides)
    out_set = ar.AdapterSet(dict(sorted(new_modules.items())), metadata, _carry_extras(adapter, rename))
    ar.save_adapter(out_set, cfg.output, cfg.dtype)

    timing = None
    if cfg.timing:
        timing = {"pairing_s": paired_at - started, "transfer_s": done - paired_at, "total_s": done - started}
    report = build_report(results, pairing, timing)
    if cfg.report:
        _write(cfg.report, emit(report, _report_format(cfg.report)))
    print(
        f"transferred {len(results)} modules ({len(pairing.unmatched_sources)} unmatched) "
        f"-> {cfg.output} in {done - started:.2f}s"
    )
    return EXIT_OK


def cmd_analyze(cfg: JobConfig) -> int:
    if not cfg.adapter:
        raise CliError("--adapter is required")
    session = _Session(cfg)
    try:
        source = session.open_model(cfg.source_model, "source")
        adapter = ar.load_adapter(cfg.adapter)
        modules = _adapter_sources(adapter, source)
        bases = session.bases(source, modules)
        decomposed = session.map(
            lambda mb: decompose_adapter(adapter.modules[mb[0]].delta(), mb[1]), list(zip(modules, bases))
        )
    finally:
        session.close()
    items = [(mod, adapter.modules[mod].rank, d) for mod, d in zip(modules, decomposed)]
    dest = cfg.report or cfg.output
    if dest and _report_format(dest) == "json":
        doc = {
            "schema": "analysis/1",
            "modules": [
                {"module": name, "rank": rank, "delta_norm": d.delta_norm, "par_norm": d.par_norm,
                 "perp_norm": d.perp_norm, "residual_norm": d.residual_norm}
                for name, rank, d in items
            ],
        }
        _write(dest, dumps_json(doc))
    else:
        _write(dest, decomposition_csv(items))
    total = sum(d.delta_norm ** 2 for _, _, d in items)
    kept = sum(d.par_norm ** 2 + d.perp_norm ** 2 for _, _, d in items)
    share = kept / total if total > 0 else 1.0
    print(f"analyzed {len(items)} modules; subspace+nullspace blocks hold {share:.4f} of adapter energy")
    return EXIT_OK


def cmd_synth(spec_path: str, out_dir: str, dtype: str = "f32") -> int:
    try:
        doc = json.loads(Path(spec_path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read synth spec {spec_path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"synth spec is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SpecError("synth spec must be a JSON object")
    job = SynthJob.from_dict(doc)
    result = build_synthetic_job(job)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}") from None
    ar.save_archive(out / "source.safetensors", result.source, {"format_version": ar.FORMAT_VERSION}, dtype)
    ar.save_archive(out / "target.safetensors", result.target, {"format_version": ar.FORMAT_VERSION}, dtype)
    if result.adapter is not None:
        ar.save_adapter(result.adapter, out / "adapter.safetensors", dtype)
    ar.atomic_write(out / "truth.json", dumps_json(result.truth))
    print(f"wrote {len(job.modules)}-module synthetic pair to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- argument parsing


def _add_job_flags(p: argparse.ArgumentParser, *, transfer: bool = False) -> None:
    p.add_argument("--config", help="JSON file whose keys mirror the flags; flags take precedence")
    p.add_argument("--source", help="source model checkpoint")
    p.add_argument("--target", help="target model checkpoint")
    p.add_argument("--adapter", help="adapter archive trained on the source model")
    p.add_argument("--out", help="output path")
    p.add_argument("--report", help="report path (.json or .csv)")
    p.add_argument("--threshold", type=float, help="minimum combined similarity (default 0.8)")
    p.add_argument("--combine", choices=["mean", "min"], help="left/right score combination (default mean)")
    p.add_argument("--pairing", choices=["greedy", "optimal"], help="pair selection rule (default greedy)")
    p.add_argument("--rank-tol", dest="rank_tol", type=float, help="relative rank tolerance (default 1e-8)")
    p.add_argument("--jobs", type=int, help="worker threads (default: CPU count)")
    p.add_argument("--no-cache", action="store_true", help="do not persist spectral bases beside checkpoints")
    p.add_argument("--cache-dir", dest="cache_dir", help="directory for persisted spectral bases")
    if transfer:
        p.add_argument("--mode", choices=[m.value for m in TransferMode], help="transfer mode (default full)")
        p.add_argument("--rank", type=int, help="output adapter rank (default: input rank)")
        p.add_argument("--override", action="append", metavar="GLOB=MODE",
                       help="per-target-module mode, first match wins; repeatable")
        p.add_argument("--dtype", choices=["f16", "bf16", "f32", "f64"], help="output dtype (default f32)")
        p.add_argument("--timing", action="store_true", help="include wall-clock timings in the report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prolora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_job_flags(sub.add_parser("pair", help="score and pair source/target modules"))
    _add_job_flags(sub.add_parser("transfer", help="transfer an adapter to the target model"), transfer=True)
    _add_job_flags(sub.add_parser("analyze", help="decompose an adapter against its source model"))
    sp = sub.add_parser("synth", help="generate a synthetic model pair, adapter and ground truth")
    sp.add_argument("spec", help="JSON synth spec")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--dtype", choices=["f16", "bf16", "f32", "f64"], default="f64")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "synth":
            return cmd_synth(args.spec, args.out, args.dtype)
        cfg = build_config(args)
        if args.command == "pair":
            return cmd_pair(cfg)
        if args.command == "transfer":
            return cmd_transfer(cfg)
        return cmd_analyze(cfg)
    except CliError as exc:
        print(f"prolora: {exc}", file=sys.stderr)
        return exc.code
    except (NumericalFailure, InvalidMatrix) as exc:
        print(f"prolora: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EmptyModel as exc:
        print(f"prolora: {exc}", file=sys.stderr)
        return EXIT_UNMATCHED
    except (IoError, FormatError, SpecError, KeyError, ShapeError, RankError, ProLoRAError, OSError) as exc:
        print(f"prolora: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
