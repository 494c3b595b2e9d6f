"""Ranking and clustering metrics: AP, per-category/overall mAP, top-1 accuracy, clustering accuracy.

Only numpy/scipy are imported here so evaluation never pulls in model code.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .taxonomy import CATEGORIES, Taxonomy


def average_precision(scores, relevance) -> float:
    """Non-interpolated AP of one label; NaN when there are no positives.

    Items are ranked by descending score, ties by ascending index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance).astype(bool)
    if scores.ndim != 1 or scores.shape != rel.shape:
        raise ValueError(f"scores {scores.shape} and relevance {rel.shape} must be matching 1-D arrays")
    if scores.size == 0:
        raise ValueError("need at least one item")
    if np.isnan(scores).any():
        raise ValueError("NaN score")
    n_pos = int(rel.sum())
    if n_pos == 0:
        return math.nan
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = rel[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hits.mean())


def overall_map(per_category: Sequence[float]) -> float:
    """Unweighted mean of the defined category mAPs."""
    vals = [v for v in per_category if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class MapReport:
    per_label: list[tuple[int, float]]
    per_category: dict[str, float]
    overall: float
    excluded_labels: list[int]

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or math.isnan(v) else v

        return {
            "overall": clean(self.overall),
            "per_category": {c: clean(v) for c, v in self.per_category.items()},
            "per_label": {str(i): clean(ap) for i, ap in self.per_label},
            "excluded_labels": list(self.excluded_labels),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def map_report(scores, relevance, taxonomy: Taxonomy | Sequence[str]) -> MapReport:
    """Per-label AP, per-category mAP and their unweighted overall mean.

    ``taxonomy`` may be a Taxonomy or the per-label category sequence.
    """
    cats = taxonomy.label_categories if isinstance(taxonomy, Taxonomy) else tuple(taxonomy)
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance)
    if scores.ndim != 2 or scores.shape != rel.shape:
        raise ValueError(f"scores {scores.shape} and relevance {rel.shape} must be matching (N, L) arrays")
    if scores.shape[1] != len(cats):
        raise ValueError(f"prediction width {scores.shape[1]} does not match taxonomy size {len(cats)}")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not np.isin(rel, (0, 1)).all():
        raise ValueError("relevance must be binary")

    per_label = [(j, average_precision(scores[:, j], rel[:, j])) for j in range(len(cats))]
    excluded = [j for j, ap in per_label if math.isnan(ap)]
    per_category = {}
    for c in CATEGORIES:
        aps = [ap for j, ap in per_label if cats[j] == c and not math.isnan(ap)]
        per_category[c] = float(np.mean(aps)) if aps else math.nan
    return MapReport(per_label, per_category, overall_map(per_category.values()), excluded)


def top1_accuracy(scores, labels) -> float:
    """Fraction of rows whose argmax (lowest id on ties) equals the label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError("scores must be (N, L) with one label per row")
    if len(labels) == 0:
        return math.nan
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def contingency(assignments, labels, k: int | None = None) -> np.ndarray:
    assignments = np.asarray(assignments, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if assignments.shape != labels.shape:
        raise ValueError(f"length mismatch: {assignments.shape} vs {labels.shape}")
    k = int(assignments.max()) + 1 if k is None else k
    if assignments.size and (assignments.min() < 0 or assignments.max() >= k):
        raise ValueError(f"assignments must lie in [0, {k})")
    if labels.size and labels.min() < 0:
        raise ValueError("class labels must be non-negative")
    n_classes = int(labels.max()) + 1 if labels.size else 0
    table = np.zeros((k, n_classes), dtype=np.int64)
    np.add.at(table, (assignments, labels), 1)
    return table


def clustering_accuracy(assignments, labels, k: int | None = None) -> float:
    """Best one-to-one cluster-to-class matching accuracy (Hungarian assignment)."""
    table = contingency(assignments, labels, k)
    n = table.sum()
    if n == 0:
        raise ValueError("no items")
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / n)


def load_predictions(path: str | Path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    seen = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            vid, scores = doc["video_id"], doc["scores"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"line {lineno}: malformed prediction record ({exc})") from None
        if vid in seen:
            raise ValueError(f"line {lineno}: duplicate video_id {vid!r}")
        if rows and len(scores) != len(rows[0]):
            raise ValueError(f"line {lineno}: expected {len(rows[0])} scores, got {len(scores)}")
        seen.add(vid)
        ids.append(vid)
        rows.append([float(s) for s in scores])
    if not rows:
        raise ValueError(f"{path} contains no predictions")
    return ids, np.asarray(rows, dtype=np.float64)


def predictions_to_jsonl(video_ids: Sequence[str], scores: np.ndarray) -> str:
    return "".join(
        json.dumps({"scores": [float(s) for s in row], "video_id": vid}, sort_keys=True) + "\n"
        for vid, row in zip(video_ids, np.asarray(scores))
    )
