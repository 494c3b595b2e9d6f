"""Label space: six semantic categories, CSV loading, dataset-construction filters and statistics."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .manifest import AnnotationRecord, Manifest, ManifestError


class Category(str, Enum):
    SCENE = "scene"
    OBJECT = "object"
    ACTION = "action"
    EVENT = "event"
    ATTRIBUTE = "attribute"
    CONCEPT = "concept"


CATEGORIES: tuple[str, ...] = tuple(c.value for c in Category)

# label counts per category of the HVU training set
HVU_CATEGORY_COUNTS: dict[str, int] = {
    "scene": 248,
    "object": 1678,
    "action": 739,
    "event": 69,
    "attribute": 117,
    "concept": 291,
}

CSV_HEADER = ("label_id", "name", "category")


class TaxonomyError(ValueError):
    """Raised when a taxonomy file or construction violates an invariant."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Label:
    label_id: int
    name: str
    category: str


@dataclass(frozen=True)
class Taxonomy:
    labels: tuple[Label, ...]

    def __post_init__(self):
        seen_names: set[tuple[str, str]] = set()
        for i, lab in enumerate(self.labels):
            if lab.label_id != i:
                raise TaxonomyError(f"label ids must be contiguous from 0, found {lab.label_id} at position {i}")
            if lab.category not in CATEGORIES:
                raise TaxonomyError(f"unknown category {lab.category!r}")
            key = (lab.category, lab.name)
            if key in seen_names:
                raise TaxonomyError(f"duplicate name {lab.name!r} in category {lab.category}")
            seen_names.add(key)

    @classmethod
    def from_labels(cls, items: Iterable[tuple[str, str]]) -> "Taxonomy":
        """Build from (name, category) pairs; ids follow iteration order."""
        return cls(tuple(Label(i, name, str(cat)) for i, (name, cat) in enumerate(items)))

    @classmethod
    def from_counts(cls, counts: dict[str, int]) -> "Taxonomy":
        items = []
        for cat in CATEGORIES:
            items.extend((f"{cat}_{j:04d}", cat) for j in range(counts.get(cat, 0)))
        return cls.from_labels(items)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def names(self) -> list[str]:
        return [lab.name for lab in self.labels]

    @property
    def label_categories(self) -> tuple[str, ...]:
        return tuple(lab.category for lab in self.labels)

    def category_counts(self) -> dict[str, int]:
        counts = Counter(self.label_categories)
        return {cat: counts.get(cat, 0) for cat in CATEGORIES}

    def ids_in(self, category: str) -> list[int]:
        return [lab.label_id for lab in self.labels if lab.category == category]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for lab in self.labels:
            writer.writerow((lab.label_id, lab.name, lab.category))
        return buf.getvalue()

    def fingerprint(self) -> str:
        """SHA-256 of the canonical CSV bytes."""
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()


def parse_taxonomy(text: str) -> Taxonomy:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TaxonomyError("empty taxonomy file") from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise TaxonomyError(f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}", row=1)

    rows: dict[int, Label] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise TaxonomyError(f"expected 3 fields, got {len(row)}", row=lineno)
        raw_id, name, cat = (x.strip() for x in row)
        try:
            label_id = int(raw_id)
        except ValueError:
            raise TaxonomyError(f"label_id {raw_id!r} is not an integer", row=lineno) from None
        if label_id < 0:
            raise TaxonomyError(f"negative label_id {label_id}", row=lineno)
        if cat not in CATEGORIES:
            raise TaxonomyError(f"unknown category {cat!r}", row=lineno)
        if label_id in rows:
            raise TaxonomyError(f"duplicate label_id {label_id}", row=lineno)
        rows[label_id] = Label(label_id, name, cat)

    ids = sorted(rows)
    if ids != list(range(len(ids))):
        missing = sorted(set(range(max(ids) + 1)) - set(ids))
        raise TaxonomyError(f"label ids are not contiguous; missing {missing[:5]}")
    return Taxonomy(tuple(rows[i] for i in ids))


def load_taxonomy(path: str | Path) -> Taxonomy:
    return parse_taxonomy(Path(path).read_text(encoding="utf-8"))


def write_taxonomy(tax: Taxonomy, path: str | Path) -> None:
    Path(path).write_text(tax.to_csv(), encoding="utf-8")


def filter_machine_tags(
    raw: Sequence[tuple[str, float]], threshold: float = 0.30, max_tags: int = 30
) -> list[tuple[str, float]]:
    """Keep tags with confidence >= threshold, best first, at most ``max_tags``.

    Ties in confidence are broken by ascending tag name.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if max_tags < 0:
        raise ValueError(f"max_tags must be >= 0, got {max_tags}")
    for name, conf in raw:
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence of {name!r} outside [0, 1]: {conf}")
    kept = [(name, conf) for name, conf in raw if conf >= threshold]
    kept.sort(key=lambda t: (-t[1], t[0]))
    return kept[:max_tags]


def _check_references(tax: Taxonomy, manifest: Manifest) -> None:
    n = len(tax)
    for rec in manifest.records:
        bad = [i for i in rec.labels if not 0 <= i < n]
        if bad:
            raise ManifestError(f"video {rec.video_id} references unknown label ids {bad}")


def prune_by_min_samples(
    tax: Taxonomy, manifest: Manifest, min_samples: int = 50
) -> tuple[Taxonomy, Manifest]:
    """Drop labels with fewer than ``min_samples`` training videos and reindex.

    Surviving labels keep their relative order and get contiguous ids. Records
    left without any label are dropped.
    """
    _check_references(tax, manifest)
    counts = Counter(i for rec in manifest.records if rec.split == "train" for i in rec.labels)
    keep = [lab for lab in tax.labels if counts.get(lab.label_id, 0) >= min_samples]
    remap = {lab.label_id: new for new, lab in enumerate(keep)}
    new_tax = Taxonomy(tuple(Label(remap[lab.label_id], lab.name, lab.category) for lab in keep))

    records = []
    for rec in manifest.records:
        labels = frozenset(remap[i] for i in rec.labels if i in remap)
        if not labels:
            continue
        conf = None
        if rec.confidences is not None:
            conf = {remap[i]: c for i, c in rec.confidences.items() if i in remap}
        records.append(AnnotationRecord(rec.video_id, rec.split, labels, conf))
    return new_tax, Manifest(tuple(records), taxonomy_id=new_tax.fingerprint())


@dataclass(frozen=True)
class CategoryStats:
    label_count: int
    annotation_count: int
    video_count: int

    @property
    def annotations_per_label(self) -> float:
        return self.annotation_count / self.label_count if self.label_count else 0.0


def category_stats(tax: Taxonomy, manifest: Manifest) -> dict[str, CategoryStats]:
    _check_references(tax, manifest)
    cats = tax.label_categories
    label_counts = tax.category_counts()
    annotations: Counter[str] = Counter()
    videos: Counter[str] = Counter()
    for rec in manifest.records:
        present = [cats[i] for i in rec.labels]
        annotations.update(present)
        videos.update(set(present))
    return {
        cat: CategoryStats(label_counts[cat], annotations.get(cat, 0), videos.get(cat, 0))
        for cat in CATEGORIES
    }


def stats_to_json(stats: dict[str, CategoryStats]) -> str:
    total_labels = sum(s.label_count for s in stats.values())
    total_ann = sum(s.annotation_count for s in stats.values())
    doc = {
        cat: {
            "label_count": s.label_count,
            "annotation_count": s.annotation_count,
            "video_count": s.video_count,
            "annotations_per_label": s.annotations_per_label,
        }
        for cat, s in stats.items()
    }
    doc["total"] = {
        "label_count": total_labels,
        "annotation_count": total_ann,
        "annotations_per_label": total_ann / total_labels if total_labels else 0.0,
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def subset_key(categories: Iterable[str]) -> str:
    """Canonical name of a category subset, e.g. ``scene+action``."""
    present = set(categories)
    return "+".join(c for c in CATEGORIES if c in present)


def coverage_partition(tax: Taxonomy, manifest: Manifest) -> dict[frozenset[str], float]:
    """Fraction of videos per exact set of categories they are labeled in."""
    if not manifest.records:
        raise ManifestError("no videos")
    _check_references(tax, manifest)
    cats = tax.label_categories
    counts = Counter(frozenset(cats[i] for i in rec.labels) for rec in manifest.records)
    n = len(manifest.records)
    return {key: c / n for key, c in counts.items()}
