"""Stage reports, aggregation over seeds, and significance testing.

CSV output is deterministic: fixed column order, reals at 6 decimals, empty
string for missing values, so identical runs produce byte-identical files.
The JSON emitter mirrors the same records.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .scoring import OOD_LABEL
from .search import metric_value

REPORT_COLUMNS = ("seed", "stage", "n_id_classes", "method", "acc_id", "acc_ood", "total", "gmean", "eta")
METRIC_FIELDS = ("acc_id", "acc_ood", "total", "gmean")
AGGREGATE_COLUMNS = ("stage", "n_id_classes", "method", "metric", "mean", "std", "n_seeds", "p_value", "p_adjusted")


@dataclass
class StageReport:
    """One evaluation point: a (seed, stage, method) cell of the study."""

    seed: int
    stage: int
    n_id_classes: int
    method: str
    acc_id: float
    acc_ood: float | None
    total: float | None
    gmean: float | None
    eta: float


def make_stage_report(
    seed: int,
    stage: int,
    n_id_classes: int,
    method: str,
    acc_id: float,
    acc_ood: float | None,
    eta: float,
) -> StageReport:
    """Build a report, filling in the combined metrics when both sides exist."""
    total = gmean = None
    if acc_ood is not None:
        total = metric_value("total", acc_id, acc_ood)
        gmean = metric_value("gmean", acc_id, acc_ood)
    return StageReport(seed, stage, n_id_classes, method, acc_id, acc_ood, total, gmean, eta)


def evaluate_stage(detector, X_id, y_id, X_ood) -> tuple[float, float | None]:
    """Accuracy pair for one stage.

    ID accuracy counts a point only when it is both accepted and assigned its
    true label (a rejection is an error); OOD accuracy is the rejected
    fraction of the novel data. X_ood None or empty leaves acc_ood as None.
    """
    preds = detector.predict(X_id)
    acc_id = float(np.mean(preds == np.asarray(y_id)))
    if X_ood is None or len(X_ood) == 0:
        return acc_id, None
    acc_ood = float(np.mean(detector.predict(X_ood) == OOD_LABEL))
    return acc_id, acc_ood


def students_t(a, b) -> tuple[float, float]:
    """Two-sample pooled-variance t-test, two-tailed p.

    Degenerate convention when the pooled variance is zero: identical means
    give (0, 1); different means give (signed inf, 0).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"both samples need at least 2 values, got {len(a)} and {len(b)}")
    n1, n2 = len(a), len(b)
    m1, m2 = a.mean(), b.mean()
    df = n1 + n2 - 2
    sp2 = ((n1 - 1) * a.var(ddof=1) + (n2 - 1) * b.var(ddof=1)) / df
    denom = math.sqrt(sp2 * (1.0 / n1 + 1.0 / n2))
    if denom == 0.0:
        if m1 == m2:
            return 0.0, 1.0
        return math.copysign(math.inf, m1 - m2), 0.0
    t = (m1 - m2) / denom
    p = 2.0 * float(special.stdtr(df, -abs(t)))
    return float(t), p


def holm_bonferroni(pvalues) -> np.ndarray:
    """Holm's step-down adjustment, returned in the input order.

    adj_(i) = min(1, max_{j <= i} (m - j + 1) * p_(j)) over the sorted
    p-values, which keeps the adjusted sequence monotone.
    """
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    if p.size == 0:
        return p
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, (m - rank) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted


@dataclass
class AggregateRow:
    stage: int
    n_id_classes: int
    method: str
    metric: str
    mean: float
    std: float
    n_seeds: int
    p_value: float | None
    p_adjusted: float | None


def aggregate(reports: list[StageReport], baseline: str = "fixed") -> list[AggregateRow]:
    """Mean/std over seeds per (stage, method, metric), with significance.

    Each non-baseline cell is t-tested against the baseline method's per-seed
    values at the same stage; within a method, all of its p-values (across
    stages and metrics) form one Holm family. Cells with fewer than 2 seeds
    on either side carry no p-value.
    """
    cells: dict[tuple[int, str], dict[str, list[float]]] = {}
    n_id: dict[tuple[int, str], int] = {}
    for r in reports:
        key = (r.stage, r.method)
        cell = cells.setdefault(key, {f: [] for f in METRIC_FIELDS})
        n_id.setdefault(key, r.n_id_classes)
        for f in METRIC_FIELDS:
            v = getattr(r, f)
            if v is not None:
                cell[f].append(v)

    stages = sorted({s for s, _ in cells})
    methods = sorted({m for _, m in cells})
    rows: list[AggregateRow] = []
    pending: dict[str, list[tuple[int, float]]] = {m: [] for m in methods}
    for method in methods:
        for stage in stages:
            key = (stage, method)
            if key not in cells:
                continue
            for f in METRIC_FIELDS:
                vals = cells[key][f]
                if not vals:
                    continue
                arr = np.asarray(vals)
                p = None
                base = cells.get((stage, baseline), {}).get(f, [])
                if method != baseline and len(vals) >= 2 and len(base) >= 2:
                    _, p = students_t(arr, np.asarray(base))
                row = AggregateRow(
                    stage, n_id[key], method, f,
                    float(arr.mean()),
                    float(arr.std(ddof=1)) if len(vals) >= 2 else 0.0,
                    len(vals), p, None,
                )
                if p is not None:
                    pending[method].append((len(rows), p))
                rows.append(row)
    for method, entries in pending.items():
        if not entries:
            continue
        adjusted = holm_bonferroni([p for _, p in entries])
        for (idx, _), adj in zip(entries, adjusted):
            rows[idx].p_adjusted = float(adj)
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _round(v):
    return round(v, 6) if isinstance(v, float) else v


def emit(reports: list[StageReport], path, fmt: str = "csv") -> None:
    """Write stage reports; fmt is "csv" or "json"."""
    _emit_records([asdict(r) for r in reports], REPORT_COLUMNS, path, fmt)


def emit_aggregate(rows: list[AggregateRow], path, fmt: str = "csv") -> None:
    _emit_records([asdict(r) for r in rows], AGGREGATE_COLUMNS, path, fmt)


def _emit_records(records, columns, path, fmt) -> None:
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for rec in records:
                writer.writerow([_fmt(rec[c]) for c in columns])
    elif fmt == "json":
        payload = [{c: _round(rec[c]) for c in columns} for rec in records]
        with path.open("w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}, expected csv or json")


def _parse_report(rec: dict) -> StageReport:
    def opt(v):
        if v is None or v == "":
            return None
        return float(v)

    return StageReport(
        seed=int(rec["seed"]),
        stage=int(rec["stage"]),
        n_id_classes=int(rec["n_id_classes"]),
        method=str(rec["method"]),
        acc_id=float(rec["acc_id"]),
        acc_ood=opt(rec["acc_ood"]),
        total=opt(rec["total"]),
        gmean=opt(rec["gmean"]),
        eta=float(rec["eta"]),
    )


def load_reports(path) -> list[StageReport]:
    """Read stage reports back from a csv or json file (by extension)."""
    path = Path(path)
    if path.suffix == ".json":
        with path.open() as fh:
            return [_parse_report(rec) for rec in json.load(fh)]
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(REPORT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"report file lacks columns: {sorted(missing)}")
        return [_parse_report(rec) for rec in reader]
