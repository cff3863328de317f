"""Cross-modal retrieval metrics, CMC curves and bootstrap intervals.

Ranks are 1-based. A query's rank is one plus the number of candidates
scoring strictly higher than the true match, plus the number of tied
candidates with a lower column index.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

TEXT_TO_MOL = "text_to_mol"
MOL_TO_TEXT = "mol_to_text"
DIRECTIONS = (TEXT_TO_MOL, MOL_TO_TEXT)
DEFAULT_MIN_GROUP = 3


class NoGroupedQueriesError(DataError):
    pass


def similarity_matrix(B_T: np.ndarray, B_M: np.ndarray) -> np.ndarray:
    return B_T @ B_M.T


def _oriented(S: np.ndarray, direction: str) -> np.ndarray:
    if direction == TEXT_TO_MOL:
        return S
    if direction == MOL_TO_TEXT:
        return S.T
    raise ValueError(f"unknown direction {direction!r}")


def _rank_from_mask(M: np.ndarray, allowed: np.ndarray | None) -> np.ndarray:
    n = M.shape[0]
    diag = np.diag(M)[:, None]
    higher = M > diag
    tied_before = (M == diag) & np.tri(n, k=-1, dtype=bool)
    if allowed is not None:
        higher &= allowed
        tied_before &= allowed
    return 1 + higher.sum(axis=1) + tied_before.sum(axis=1)


def ranks(S: np.ndarray, direction: str = TEXT_TO_MOL) -> np.ndarray:
    """Rank of the true match for every query."""
    return _rank_from_mask(_oriented(S, direction), None)


def _groups(target_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    codes: dict[str, int] = {}
    labels = np.fromiter((codes.setdefault(t, len(codes)) for t in target_ids),
                         dtype=np.int64, count=len(target_ids))
    same = labels[:, None] == labels[None, :]
    return same, same.sum(axis=1)


def grouped_ranks(S: np.ndarray, target_ids: Sequence[str], direction: str = TEXT_TO_MOL,
                  min_group: int = DEFAULT_MIN_GROUP) -> tuple[np.ndarray, np.ndarray]:
    """Within-target ranks. Returns ``(ranks, qualifies)`` where ``qualifies``
    marks queries whose target group has at least ``min_group`` members."""
    if len(target_ids) != S.shape[0]:
        raise ValueError("target_ids not aligned with S")
    same, sizes = _groups(target_ids)
    return _rank_from_mask(_oriented(S, direction), same), sizes >= min_group


def recall_at_k(S: np.ndarray, k: int, direction: str = TEXT_TO_MOL) -> float:
    if not 1 <= k <= S.shape[0]:
        raise ValueError(f"k={k} outside [1, {S.shape[0]}]")
    return float(np.mean(ranks(S, direction) <= k))


def mrr(S: np.ndarray, direction: str = TEXT_TO_MOL) -> float:
    return float(np.mean(1.0 / ranks(S, direction)))


def grouped_recall_at_1(S: np.ndarray, target_ids: Sequence[str],
                        min_group: int = DEFAULT_MIN_GROUP,
                        direction: str = TEXT_TO_MOL) -> float:
    r, ok = grouped_ranks(S, target_ids, direction, min_group)
    if not ok.any():
        raise NoGroupedQueriesError(f"no grouped queries: no target has >= {min_group} records")
    return float(np.mean(r[ok] == 1))


def cmc_curve(S: np.ndarray, k_max: int, target_ids: Sequence[str] | None = None,
              direction: str = TEXT_TO_MOL, min_group: int = DEFAULT_MIN_GROUP) -> list[float]:
    """``[recall@1, ..., recall@k_max]``; candidates are restricted to the
    query's target group when ``target_ids`` is given."""
    if target_ids is None:
        if not 1 <= k_max <= S.shape[0]:
            raise ValueError(f"k_max={k_max} outside [1, {S.shape[0]}]")
        r = ranks(S, direction)
    else:
        r, ok = grouped_ranks(S, target_ids, direction, min_group)
        if not ok.any():
            raise NoGroupedQueriesError(f"no grouped queries: no target has >= {min_group} records")
        largest = int(_groups(target_ids)[1].max())
        if not 1 <= k_max <= largest:
            raise ValueError(f"k_max={k_max} outside [1, {largest}] for grouped curve")
        r = r[ok]
    counts = np.bincount(r, minlength=k_max + 1)[1:k_max + 1]
    return (np.cumsum(counts) / len(r)).tolist()


def per_query_values(metric: str, S: np.ndarray, target_ids: Sequence[str] | None = None,
                     direction: str = TEXT_TO_MOL,
                     min_group: int = DEFAULT_MIN_GROUP) -> np.ndarray:
    """Per-query contributions whose mean is ``metric``; NaN marks queries
    that do not count (grouped metrics only).

    Metric names: ``recall@K``, ``mrr``, ``grouped_recall@1``.
    """
    if metric == "mrr":
        return 1.0 / ranks(S, direction)
    if metric == "grouped_recall@1":
        if target_ids is None:
            raise ValueError("grouped_recall@1 needs target_ids")
        r, ok = grouped_ranks(S, target_ids, direction, min_group)
        return np.where(ok, (r == 1).astype(float), np.nan)
    if metric.startswith("recall@"):
        k = int(metric.split("@", 1)[1])
        return (ranks(S, direction) <= k).astype(float)
    raise ValueError(f"unknown metric {metric!r}")


def bootstrap_ci(metric: str, S: np.ndarray, target_ids: Sequence[str] | None = None,
                 B: int = 1000, level: float = 0.95, seed: int = 0,
                 direction: str = TEXT_TO_MOL,
                 min_group: int = DEFAULT_MIN_GROUP) -> tuple[float, float]:
    """Percentile bootstrap over queries; the candidate set stays fixed.

    Replicate ``b`` draws from a generator seeded with ``seed + b``. A
    replicate where the metric is undefined is redrawn, up to ``10 * B``
    draws in total.
    """
    if B < 100:
        raise ValueError("B must be >= 100")
    values = per_query_values(metric, S, target_ids, direction, min_group)
    n = values.shape[0]
    valid = ~np.isnan(values)
    if not valid.any():
        raise NoGroupedQueriesError(f"{metric} is undefined on this matrix")
    stats = np.empty(B)
    attempts = 0
    for b in range(B):
        rng = np.random.default_rng(seed + b)
        while True:
            attempts += 1
            if attempts > 10 * B:
                raise DataError(f"bootstrap of {metric}: too many undefined replicates")
            sample = rng.integers(0, n, size=n)
            picked = values[sample]
            ok = valid[sample]
            if ok.any():
                stats[b] = picked[ok].mean()
                break
    alpha = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [alpha, 100.0 - alpha])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    direction: str
    recall_at: dict[int, float]
    mrr: float
    grouped_recall1: float | None
    n_queries: int
    n_grouped_queries: int
    bootstrap: dict[str, dict] = field(default_factory=dict)
    cmc_global: list[float] = field(default_factory=list)
    cmc_grouped: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        return d


def evaluate(S: np.ndarray, target_ids: Sequence[str], direction: str = TEXT_TO_MOL,
             ks: Sequence[int] = (1, 5, 10), k_max: int = 10, n_boot: int = 1000,
             seed: int = 0, level: float = 0.95,
             min_group: int = DEFAULT_MIN_GROUP) -> EvalReport:
    n = S.shape[0]
    recall = {k: recall_at_k(S, k, direction) for k in ks if k <= n}
    r, ok = grouped_ranks(S, target_ids, direction, min_group)
    grouped = float(np.mean(r[ok] == 1)) if ok.any() else None
    report = EvalReport(
        direction=direction,
        recall_at=recall,
        mrr=mrr(S, direction),
        grouped_recall1=grouped,
        n_queries=n,
        n_grouped_queries=int(ok.sum()),
        cmc_global=cmc_curve(S, min(k_max, n), None, direction),
    )
    if grouped is not None:
        largest = int(_groups(target_ids)[1][ok].max())
        report.cmc_grouped = cmc_curve(S, min(k_max, largest), target_ids, direction, min_group)
    if n_boot:
        metrics = ["recall@1", "mrr"] + (["grouped_recall@1"] if grouped is not None else [])
        for name in metrics:
            lo, hi = bootstrap_ci(name, S, target_ids, n_boot, level, seed, direction, min_group)
            report.bootstrap[name] = {"lo": lo, "hi": hi, "B": n_boot, "seed": seed, "level": level}
    return report


def export_simmatrix(S: np.ndarray, K: int, path: str | Path,
                     row_ids: Sequence[str] | None = None,
                     col_ids: Sequence[str] | None = None) -> None:
    """Write the top-left ``K x K`` block of ``S`` with 6-decimal values."""
    if not 1 <= K <= min(S.shape):
        raise ValueError(f"K={K} outside [1, {min(S.shape)}]")
    row_ids = list(row_ids) if row_ids is not None else [str(i) for i in range(S.shape[0])]
    col_ids = list(col_ids) if col_ids is not None else [str(j) for j in range(S.shape[1])]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["text\\mol", *col_ids[:K]])
        for i in range(K):
            w.writerow([row_ids[i], *(f"{S[i, j]:.6f}" for j in range(K))])


_METRIC = {"type": "number", "minimum": 0, "maximum": 1}
_INTERVAL = {
    "type": "object",
    "required": ["lo", "hi", "B", "seed"],
    "properties": {"lo": _METRIC, "hi": _METRIC, "B": {"type": "integer", "minimum": 100},
                   "seed": {"type": "integer"}, "level": _METRIC},
}
_DIRECTION_REPORT = {
    "type": "object",
    "required": ["direction", "recall_at", "mrr", "grouped_recall1", "n_queries",
                 "n_grouped_queries", "bootstrap", "cmc_global", "cmc_grouped"],
    "properties": {
        "direction": {"enum": list(DIRECTIONS)},
        "recall_at": {"type": "object", "additionalProperties": _METRIC},
        "mrr": _METRIC,
        "grouped_recall1": {"anyOf": [_METRIC, {"type": "null"}]},
        "n_queries": {"type": "integer", "minimum": 1},
        "n_grouped_queries": {"type": "integer", "minimum": 0},
        "bootstrap": {"type": "object", "additionalProperties": _INTERVAL},
        "cmc_global": {"type": "array", "items": _METRIC},
        "cmc_grouped": {"type": "array", "items": _METRIC},
    },
}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["primary_direction", "reports"],
    "properties": {
        "primary_direction": {"enum": list(DIRECTIONS)},
        "reports": {
            "type": "object",
            "required": list(DIRECTIONS),
            "additionalProperties": _DIRECTION_REPORT,
        },
        "n_test": {"type": "integer"},
    },
}
