"""Ranking metrics (hit@k, NDCG, one-vs-rest AUC) and the evaluation report."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInput, InvalidRanking
from .training import Prediction

METRICS = ("hit@1", "hit@3", "hit@10", "AUC", "NDCG")


def _check_aligned(predictions, gold):
    if len(predictions) != len(gold):
        raise InvalidInput(f"{len(predictions)} predictions but {len(gold)} gold labels")


def hit_at_k(predictions: Sequence[Prediction], gold: Sequence[str], k: int) -> float:
    _check_aligned(predictions, gold)
    if k < 1:
        raise InvalidInput("k must be at least 1")
    if not predictions:
        raise InvalidInput("no predictions")
    return sum(g in p.ranked_labels[:k] for p, g in zip(predictions, gold)) / len(predictions)


def ndcg(predictions: Sequence[Prediction], gold: Sequence[str]) -> float:
    """Single relevant item per case, no cutoff: mean of 1 / log2(rank + 1)."""
    _check_aligned(predictions, gold)
    if not predictions:
        raise InvalidInput("no predictions")
    total = 0.0
    for p, g in zip(predictions, gold):
        try:
            rank = p.ranked_labels.index(g) + 1
        except ValueError:
            raise InvalidRanking(f"gold label {g!r} missing from ranking") from None
        total += 1.0 / np.log2(rank + 1)
    return total / len(predictions)


def mann_whitney_auc(positive: Sequence[float], negative: Sequence[float]) -> float | None:
    """P(pos > neg) + 0.5 P(pos == neg); None when either side is empty."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        return None
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auc_one_vs_rest(scores: np.ndarray, gold: Sequence[str], category: str, labels: Sequence[str],
                    category_of: Callable[[str], str]) -> float | None:
    """One-vs-rest AUC for one category.

    A positive case (gold label in ``category``) is scored by its gold label's
    similarity; a negative case by its highest similarity to any label of the
    category. Returns None when the category has no positive or no negative case.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(gold), len(labels)):
        raise InvalidInput("score matrix must be cases x labels")
    col = {l: j for j, l in enumerate(labels)}
    members = [j for j, l in enumerate(labels) if category_of(l) == category]
    if not members:
        return None
    pos, neg = [], []
    for i, g in enumerate(gold):
        if category_of(g) == category:
            pos.append(scores[i, col[g]])
        else:
            neg.append(scores[i, members].max())
    return mann_whitney_auc(pos, neg)


@dataclass
class EvalReport:
    per_category: dict[str, dict[str, float | None]]
    overall: dict[str, float | None]
    seed: int | None = None
    dataset_hash: str = ""
    checkpoint_id: str = ""
    setting: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_category": self.per_category, "overall": self.overall, "seed": self.seed,
                "dataset_hash": self.dataset_hash, "checkpoint_id": self.checkpoint_id,
                "setting": self.setting}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["per_category"], d["overall"], d.get("seed"), d.get("dataset_hash", ""),
                   d.get("checkpoint_id", ""), d.get("setting", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def table_rows(self) -> list[tuple[str, str, str]]:
        rows = []
        for cat in sorted(self.per_category):
            for m in METRICS:
                rows.append((cat, m, _fmt(self.per_category[cat].get(m))))
        for m in METRICS:
            rows.append(("overall", m, _fmt(self.overall.get(m))))
        return rows

    def table(self) -> str:
        return "category\tmetric\tvalue\n" + "".join(f"{c}\t{m}\t{v}\n" for c, m, v in self.table_rows())

    def save(self, path: str | os.PathLike) -> None:
        path = os.fspath(path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
        with open(os.path.splitext(path)[0] + ".tsv", "w", encoding="utf-8") as fh:
            fh.write(self.table())


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.6f}"


def _metric_block(preds, gold, auc) -> dict[str, float | None]:
    return {"hit@1": hit_at_k(preds, gold, 1), "hit@3": hit_at_k(preds, gold, 3),
            "hit@10": hit_at_k(preds, gold, 10), "AUC": auc, "NDCG": ndcg(preds, gold)}


def evaluate_predictions(predictions: Sequence[Prediction], scores: np.ndarray, gold: Sequence[str],
                         labels: Sequence[str], category_of: Callable[[str], str],
                         **meta) -> EvalReport:
    """Per-category metrics; every label is a candidate for every case."""
    _check_aligned(predictions, gold)
    cats = sorted({category_of(g) for g in gold})
    per = {}
    aucs = []
    for cat in cats:
        idx = [i for i, g in enumerate(gold) if category_of(g) == cat]
        auc = auc_one_vs_rest(scores, gold, cat, labels, category_of)
        if auc is not None:
            aucs.append(auc)
        per[cat] = _metric_block([predictions[i] for i in idx], [gold[i] for i in idx], auc)
    overall = _metric_block(predictions, gold, float(np.mean(aucs)) if aucs else None)
    return EvalReport(per, overall, **meta)
