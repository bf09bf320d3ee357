"""Per-module norm bookkeeping, source/transferred norm correlations, and report emission.

CSV rows follow ``REPORT_COLUMNS``; JSON documents carry ``"schema": "report/1"``.
Floats are written with ``repr`` so parsing returns the exact same doubles.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Literal, Sequence

import numpy as np

from .decompose import DecomposedDelta
from .errors import EmptyReport
from .similarity import ModulePairing
from .transfer import TransferredDelta

SCHEMA = "report/1"

REPORT_COLUMNS = (
    "source_module",
    "target_module",
    "mode",
    "sim_left",
    "sim_right",
    "sim_combined",
    "delta_norm",
    "par_norm",
    "perp_norm",
    "residual_norm",
    "transferred_norm",
    "transferred_par_norm",
    "transferred_perp_norm",
    "recompression_residual",
)

DECOMPOSITION_COLUMNS = ("module", "rank", "delta_norm", "par_norm", "perp_norm", "residual_norm")


@dataclass
class ModuleResult:
    decomposed: DecomposedDelta
    transferred: TransferredDelta
    recompression_residual: float | None = None


@dataclass
class ModuleRecord:
    source_module: str
    target_module: str
    mode: str
    sim_left: float | None
    sim_right: float | None
    sim_combined: float | None
    delta_norm: float
    par_norm: float
    perp_norm: float
    residual_norm: float
    transferred_norm: float
    transferred_par_norm: float
    transferred_perp_norm: float
    recompression_residual: float | None = None


@dataclass
class TransferReport:
    records: list[ModuleRecord]
    correlations: dict[str, float | None]
    threshold: float | None = None
    combine: str | None = None
    unmatched_sources: list[str] = field(default_factory=list)
    timing: dict[str, float] | None = None
    correlation_statistic: str = "pearson"


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson correlation, or ``None`` when either series is (numerically) constant."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.size < 2 or a.size != b.size:
        return None
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.linalg.norm(da))
    nb = float(np.linalg.norm(db))
    if na <= 1e-12 * max(1.0, float(np.linalg.norm(a))) or nb <= 1e-12 * max(1.0, float(np.linalg.norm(b))):
        return None
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def _norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a))


def build_report(
    results: Iterable[ModuleResult | tuple],
    pairing: ModulePairing | None = None,
    timing: dict[str, float] | None = None,
) -> TransferReport:
    """Collect one record per transferred module; records are ordered by source module id."""
    items = [r if isinstance(r, ModuleResult) else ModuleResult(*_order(r)) for r in results]
    if not items:
        raise EmptyReport("no transferred modules to report")
    scores = {}
    if pairing is not None:
        scores = {(s, t): sc for s, t, sc in pairing.pairs}
    records = []
    for item in items:
        d, t = item.decomposed, item.transferred
        sc = scores.get((t.source_module, t.target_module))
        records.append(
            ModuleRecord(
                source_module=t.source_module,
                target_module=t.target_module,
                mode=str(t.mode.value if hasattr(t.mode, "value") else t.mode),
                sim_left=sc.left if sc else None,
                sim_right=sc.right if sc else None,
                sim_combined=sc.combined if sc else None,
                delta_norm=d.delta_norm,
                par_norm=d.par_norm,
                perp_norm=d.perp_norm,
                residual_norm=d.residual_norm,
                transferred_norm=_norm(t.dense),
                transferred_par_norm=_norm(t.par_component),
                transferred_perp_norm=_norm(t.perp_component),
                recompression_residual=item.recompression_residual,
            )
        )
    records.sort(key=lambda r: (r.source_module, r.target_module))
    corr = {
        "overall": pearson([r.delta_norm for r in records], [r.transferred_norm for r in records]),
        "subspace": pearson([r.par_norm for r in records], [r.transferred_par_norm for r in records]),
        "nullspace": pearson([r.perp_norm for r in records], [r.transferred_perp_norm for r in records]),
    }
    return TransferReport(
        records=records,
        correlations=corr,
        threshold=pairing.threshold if pairing else None,
        combine=pairing.combine if pairing else None,
        unmatched_sources=list(pairing.unmatched_sources) if pairing else [],
        timing=timing,
    )


def _order(t: tuple) -> tuple:
    """Accept (transferred, decomposed[, residual]) as well as (decomposed, transferred[, residual])."""
    if isinstance(t[0], TransferredDelta):
        return (t[1], t[0]) + tuple(t[2:])
    return tuple(t)


def _clean(v: Any) -> Any:
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, np.floating):
        return _clean(float(v))
    return v


def report_dict(report: TransferReport) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "schema": SCHEMA,
        "threshold": report.threshold,
        "combine": report.combine,
        "correlation_statistic": report.correlation_statistic,
        "correlations": {k: _clean(v) for k, v in report.correlations.items()},
        "unmatched_sources": list(report.unmatched_sources),
        "modules": [{k: _clean(v) for k, v in asdict(r).items()} for r in report.records],
    }
    if report.timing is not None:
        doc["timing"] = dict(report.timing)
    return doc


def _csv_value(v: Any) -> str:
    v = _clean(v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_csv_value(v) for v in row])
    return buf.getvalue().encode("utf-8")


def dumps_json(doc: Any) -> bytes:
    return (json.dumps(doc, indent=2, allow_nan=False, ensure_ascii=False) + "\n").encode("utf-8")


def emit(report: TransferReport, fmt: Literal["json", "csv"] = "json") -> bytes:
    if fmt == "json":
        return dumps_json(report_dict(report))
    if fmt == "csv":
        rows = ([getattr(r, c) for c in REPORT_COLUMNS] for r in report.records)
        return write_csv(REPORT_COLUMNS, rows)
    raise ValueError(f"unknown report format {fmt!r}")


def empty_report() -> TransferReport:
    return TransferReport(records=[], correlations={"overall": None, "subspace": None, "nullspace": None})


def pairing_dict(pairing: ModulePairing) -> dict[str, Any]:
    """Score matrices (null for shape-incompatible cells) and the selected pairs."""

    def matrix(a):
        if a is None:
            return None
        return [[_clean(float(x)) for x in row] for row in np.asarray(a)]

    return {
        "schema": "pairing/1",
        "threshold": pairing.threshold,
        "combine": pairing.combine,
        "source_ids": list(pairing.source_ids),
        "target_ids": list(pairing.target_ids),
        "scores": {
            "left": matrix(pairing.left_scores),
            "right": matrix(pairing.right_scores),
            "combined": matrix(pairing.combined_scores),
        },
        "pairs": [
            {"source": s, "target": t, "left": sc.left, "right": sc.right, "combined": sc.combined}
            for s, t, sc in pairing.pairs
        ],
        "unmatched_sources": list(pairing.unmatched_sources),
    }


def decomposition_csv(items: Iterable[tuple[str, int, DecomposedDelta]]) -> bytes:
    """One row per module: adapter rank and the four Frobenius norms of its decomposition."""
    rows = (
        (name, rank, d.delta_norm, d.par_norm, d.perp_norm, d.residual_norm)
        for name, rank, d in sorted(items, key=lambda it: it[0])
    )
    return write_csv(DECOMPOSITION_COLUMNS, rows)
