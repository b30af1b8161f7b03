"""Score fusion and top-N candidate retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Catalog
from .errors import ConfigError


@dataclass(frozen=True)
class HybridConfig:
    lam: float = 0.5
    n_candidates: int = 20
    mask_history: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")


@dataclass(frozen=True)
class CandidateSet:
    user_id: str
    ranked_items: tuple[str, ...]
    scores: tuple[float, ...] = field(default=())
    truncated: bool = False

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "items": list(self.ranked_items), "scores": list(self.scores)}

    @classmethod
    def from_dict(cls, row: dict) -> "CandidateSet":
        return cls(str(row["user_id"]), tuple(row["items"]), tuple(float(s) for s in row.get("scores", ())))


def softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def hybrid_scores(id_logits: np.ndarray, text_logits: np.ndarray, lam: float) -> np.ndarray:
    """``lam * softmax(id) + (1 - lam) * softmax(text)``; works row-wise on 2-D input."""
    id_logits = np.asarray(id_logits)
    text_logits = np.asarray(text_logits)
    if id_logits.shape != text_logits.shape:
        raise ValueError(f"shape mismatch: {id_logits.shape} vs {text_logits.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * softmax(id_logits) + (1.0 - lam) * softmax(text_logits)


def rank_indices(scores: np.ndarray, exclude: Iterable[int] = ()) -> np.ndarray:
    """Catalog indices by descending score; ties go to the smaller index, i.e. the smaller item id."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    excluded = set(exclude)
    if excluded:
        order = order[~np.isin(order, list(excluded))]
    return order


def retrieve_top_n(
    scores: np.ndarray,
    cfg: HybridConfig,
    catalog: Catalog,
    history: Sequence[str] = (),
    user_id: str = "",
) -> CandidateSet:
    exclude = catalog.indices(list(history)) if cfg.mask_history and history else ()
    order = rank_indices(scores, exclude)
    top = order[: cfg.n_candidates]
    return CandidateSet(
        user_id,
        tuple(catalog.item_ids[i] for i in top),
        tuple(float(scores[i]) for i in top),
        truncated=False,
    )


def write_candidates(path: str | Path, candidates: Iterable[CandidateSet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in candidates:
            fh.write(json.dumps(c.to_dict()) + "\n")


def read_candidates(path: str | Path) -> list[CandidateSet]:
    with open(path, encoding="utf-8") as fh:
        return [CandidateSet.from_dict(json.loads(line)) for line in fh if line.strip()]
