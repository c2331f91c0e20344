"""Look-ahead linear search for the threshold multiplier eta.

Given similarity-score tables for ID data and for a batch of genuinely
novel data, the search enumerates candidate eta values and keeps the one
maximizing a selection metric. Both accuracies are step functions of eta
that only change at observed Z' values, so candidates are the midpoints of
adjacent distinct pooled Z' values plus one value below the minimum and one
above the maximum; this realizes every achievable (ID accuracy, OOD
accuracy) pair without evaluating exactly at an observed score, where the
strict inequalities on both sides would misclassify that point under both
rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scoring import ClassStats, ScoreTable

METRICS = ("total", "gmean")


def metric_value(kind: str, acc_id: float, acc_ood: float) -> float:
    """total = (acc_id + acc_ood) / 2; gmean = sqrt(acc_id * acc_ood)."""
    if not (0.0 <= acc_id <= 1.0 and 0.0 <= acc_ood <= 1.0):
        raise ValueError(f"accuracies must lie in [0, 1], got {acc_id}, {acc_ood}")
    if kind == "total":
        return (acc_id + acc_ood) / 2.0
    if kind == "gmean":
        return float(np.sqrt(acc_id * acc_ood))
    raise ValueError(f"unknown metric {kind!r}, expected one of {METRICS}")


@dataclass
class SearchResult:
    eta_star: float
    metric_value: float
    acc_id: float
    acc_ood: float
    n_candidates: int


def id_neg_z_values(table: ScoreTable, stats: ClassStats) -> np.ndarray:
    """Z' of the true class, over correctly classified ID rows only."""
    mask = table.correct
    cls = table.true_labels[mask]
    s = table.scores[mask, cls]
    return (stats.mu[cls] - s) / stats.sigma[cls]


def ood_neg_z_values(table: ScoreTable, stats: ClassStats) -> np.ndarray:
    """Z' of the argmax class, one per OOD row (the class that would govern
    the decision rule)."""
    cls = table.argmax
    s = table.scores[np.arange(len(table)), cls] if len(table) else np.empty(0)
    return (stats.mu[cls] - s) / stats.sigma[cls]


def candidate_etas(id_z: np.ndarray, ood_z: np.ndarray) -> np.ndarray:
    """Strictly increasing candidates: midpoints of adjacent distinct pooled
    Z' values, plus (min - 1) and (max + 1)."""
    pooled = np.concatenate([np.asarray(id_z, float).ravel(), np.asarray(ood_z, float).ravel()])
    if pooled.size == 0:
        raise ValueError("need at least one Z' value to build candidates")
    distinct = np.unique(pooled)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate([[distinct[0] - 1.0], mids, [distinct[-1] + 1.0]])


def accuracies_at(id_z: np.ndarray, ood_z: np.ndarray, etas: np.ndarray):
    """Vectorized acc_id (fraction of id_z < eta) and acc_ood (fraction of
    ood_z > eta) at each eta."""
    etas = np.asarray(etas, dtype=np.float64)
    acc_id = (id_z[None, :] < etas[:, None]).mean(axis=1)
    acc_ood = (ood_z[None, :] > etas[:, None]).mean(axis=1)
    return acc_id, acc_ood


def search_eta(id_z: np.ndarray, ood_z: np.ndarray, metric: str) -> SearchResult:
    """Best eta over the midpoint candidates; metric ties break toward the
    smallest eta (favoring OOD detection)."""
    id_z = np.asarray(id_z, dtype=np.float64).ravel()
    ood_z = np.asarray(ood_z, dtype=np.float64).ravel()
    if id_z.size == 0 or ood_z.size == 0:
        raise ValueError("need non-empty ID and OOD Z' sets")
    etas = candidate_etas(id_z, ood_z)
    acc_id, acc_ood = accuracies_at(id_z, ood_z, etas)
    if metric == "total":
        values = (acc_id + acc_ood) / 2.0
    elif metric == "gmean":
        values = np.sqrt(acc_id * acc_ood)
    else:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")
    best = int(np.argmax(values))  # first max = smallest eta
    return SearchResult(
        eta_star=float(etas[best]),
        metric_value=float(values[best]),
        acc_id=float(acc_id[best]),
        acc_ood=float(acc_ood[best]),
        n_candidates=len(etas),
    )


def cheat_search(
    id_table: ScoreTable, ood_table: ScoreTable, stats: ClassStats, metric: str = "gmean"
) -> SearchResult:
    """The cheating search: look ahead at a genuine OOD sample batch and pick
    the eta that maximizes the metric over it and the correctly classified
    ID rows."""
    if np.any(stats.sigma <= 0):
        raise ValueError("all class sigmas must be positive for Z' scores")
    id_z = id_neg_z_values(id_table, stats)
    ood_z = ood_neg_z_values(ood_table, stats)
    if id_z.size == 0:
        raise ValueError("id_table has no correctly classified rows")
    if ood_z.size == 0:
        raise ValueError("ood_table is empty")
    return search_eta(id_z, ood_z, metric)


def grid_search_eta(
    id_z: np.ndarray, ood_z: np.ndarray, metric: str, n_points: int = 100_000
) -> tuple[float, float]:
    """Dense-grid reference: evaluate the metric at n_points evenly spaced
    eta values spanning [min Z' - 1, max Z' + 1] and return (eta, value).

    Counting uses sorted insertion indices rather than the candidate
    enumeration above, so this is an independent evaluation path.
    """
    id_z = np.sort(np.asarray(id_z, dtype=np.float64).ravel())
    ood_z = np.sort(np.asarray(ood_z, dtype=np.float64).ravel())
    pooled_min = min(id_z[0], ood_z[0])
    pooled_max = max(id_z[-1], ood_z[-1])
    grid = np.linspace(pooled_min - 1.0, pooled_max + 1.0, n_points)
    acc_id = np.searchsorted(id_z, grid, side="left") / id_z.size
    acc_ood = (ood_z.size - np.searchsorted(ood_z, grid, side="right")) / ood_z.size
    if metric == "total":
        values = (acc_id + acc_ood) / 2.0
    elif metric == "gmean":
        values = np.sqrt(acc_id * acc_ood)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    best = int(np.argmax(values))
    return float(grid[best]), float(values[best])
