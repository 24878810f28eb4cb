"""All-rank top-K evaluation with sparsity-bucket breakdowns."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DEFAULT_BUCKET_BOUNDARIES, bucket_labels, sparsity_buckets

__all__ = [
    "EvalConfig",
    "RankingReport",
    "rank_items",
    "recall_at_k",
    "precision_at_k",
    "ndcg_at_k",
    "evaluate_scores",
]


@dataclass
class EvalConfig:
    k: int = 20
    threads: int = 1
    buckets: tuple[int, ...] = DEFAULT_BUCKET_BOUNDARIES


def rank_items(scores: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
    """Item ids ordered by descending score over the full catalog.

    Excluded items (a user's training interactions) are pushed to the very
    end; equal scores break toward the lower item id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if exclude is not None and len(exclude):
        scores = scores.copy()
        scores[exclude] = -np.inf
    ids = np.arange(scores.shape[0])
    return np.lexsort((ids, -scores))


def recall_at_k(top_k: np.ndarray, relevant: set, k: int) -> float:
    if not relevant:
        raise ValueError("recall undefined for an empty relevant set")
    hits = sum(1 for i in top_k[:k] if i in relevant)
    return hits / len(relevant)


def precision_at_k(top_k: np.ndarray, relevant: set, k: int) -> float:
    hits = sum(1 for i in top_k[:k] if i in relevant)
    return hits / k


def ndcg_at_k(top_k: np.ndarray, relevant: set, k: int) -> float:
    """Binary-relevance NDCG: DCG over the ranked list divided by the DCG
    of the ideal list (all relevant items first)."""
    if not relevant:
        raise ValueError("ndcg undefined for an empty relevant set")
    dcg = 0.0
    for rank, item in enumerate(top_k[:k], start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(relevant), k) + 1))
    return dcg / ideal


@dataclass
class RankingReport:
    k: int
    num_users: int
    overall: dict[str, float]
    buckets: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "num_users": self.num_users,
                "overall": self.overall,
                "buckets": self.buckets,
            },
            sort_keys=True,
            indent=2,
        )

    def to_text(self) -> str:
        lines = [
            f"users evaluated: {self.num_users}   K={self.k}",
            f"recall@{self.k}    {self.overall['recall']:.5f}",
            f"precision@{self.k} {self.overall['precision']:.5f}",
            f"ndcg@{self.k}      {self.overall['ndcg']:.5f}",
        ]
        if self.buckets:
            lines.append("")
            lines.append(f"{'bucket':>10} {'users':>7} {'recall':>9} {'precision':>10} {'ndcg':>9}")
            for label, row in self.buckets.items():
                lines.append(
                    f"{label:>10} {int(row['users']):>7} {row['recall']:>9.5f} "
                    f"{row['precision']:>10.5f} {row['ndcg']:>9.5f}"
                )
        return "\n".join(lines)


def _user_metrics(args) -> tuple[int, float, float, float]:
    u, row, exclude, relevant, k = args
    ranked = rank_items(row, exclude)
    rel = set(relevant.tolist())
    return (
        u,
        recall_at_k(ranked, rel, k),
        precision_at_k(ranked, rel, k),
        ndcg_at_k(ranked, rel, k),
    )


def evaluate_scores(
    scores: np.ndarray,
    train_items: list[np.ndarray],
    relevant: list[np.ndarray],
    k: int = 20,
    boundaries=DEFAULT_BUCKET_BOUNDARIES,
    threads: int = 1,
) -> RankingReport:
    """Rank every item for every user and aggregate top-K metrics.

    Users whose relevant set is empty are skipped.  Bucket rows group users
    by *training* interaction count; macro averages throughout.  The work
    is read-only per user, so it parallelizes over user chunks without
    changing any result.
    """
    num_users = scores.shape[0]
    tasks = [
        (u, scores[u], train_items[u], relevant[u], k)
        for u in range(num_users)
        if len(relevant[u])
    ]
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_user_metrics, tasks))
    else:
        rows = [_user_metrics(t) for t in tasks]
    per_user = {u: (r, p, n) for u, r, p, n in rows}
    if per_user:
        arr = np.array([per_user[u] for u in sorted(per_user)])
        overall = {
            "recall": float(arr[:, 0].mean()),
            "precision": float(arr[:, 1].mean()),
            "ndcg": float(arr[:, 2].mean()),
        }
    else:
        overall = {"recall": 0.0, "precision": 0.0, "ndcg": 0.0}
    degrees = np.array([len(v) for v in train_items], dtype=np.int64)
    groups = sparsity_buckets(degrees, boundaries)
    buckets = {}
    for label in bucket_labels(boundaries):
        members = [u for u in groups[label] if u in per_user]
        if members:
            arr = np.array([per_user[u] for u in members])
            buckets[label] = {
                "users": float(len(members)),
                "recall": float(arr[:, 0].mean()),
                "precision": float(arr[:, 1].mean()),
                "ndcg": float(arr[:, 2].mean()),
            }
        else:
            buckets[label] = {"users": 0.0, "recall": 0.0, "precision": 0.0, "ndcg": 0.0}
    return RankingReport(k=k, num_users=len(per_user), overall=overall, buckets=buckets)
