"""Single-target ranking metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

CUTOFFS = (5, 10)
CONVENTIONS = ("fallback-inclusive", "fallback-excluded")


def recall_at_k(ranked: Sequence[str], gt: str, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if gt in ranked[:k] else 0.0


def ndcg_at_k(ranked: Sequence[str], gt: str, k: int) -> float:
    # one relevant item, so the ideal DCG is 1 and NDCG is the DCG itself
    if k < 1:
        raise ValueError("k must be >= 1")
    head = list(ranked[:k])
    if gt not in head:
        return 0.0
    return 1.0 / math.log2(head.index(gt) + 2)


@dataclass(frozen=True)
class MetricReport:
    recall_at_5: float | None
    ndcg_at_5: float | None
    recall_at_10: float | None
    ndcg_at_10: float | None
    n_users: int
    convention: str = "fallback-inclusive"

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> tuple:
        return (self.recall_at_5, self.ndcg_at_5, self.recall_at_10, self.ndcg_at_10)


def user_metrics(ranked: Sequence[str], gt: str) -> dict[str, float]:
    out = {}
    for k in CUTOFFS:
        out[f"recall_at_{k}"] = recall_at_k(ranked, gt, k)
        out[f"ndcg_at_{k}"] = ndcg_at_k(ranked, gt, k)
    return out


def mean_report(per_user: Sequence[dict[str, float]], convention: str = "fallback-inclusive") -> MetricReport:
    """Average per-user metric dicts, summing in the order given."""
    n = len(per_user)
    if n == 0:
        return MetricReport(None, None, None, None, 0, convention)
    keys = ("recall_at_5", "ndcg_at_5", "recall_at_10", "ndcg_at_10")
    means = {}
    for key in keys:
        total = 0.0
        for m in per_user:
            total += m[key]
        means[key] = total / n
    return MetricReport(**means, n_users=n, convention=convention)
