"""Per-video annotation records and their JSONL serialization."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class AnnotationRecord:
    video_id: str
    split: str
    labels: frozenset[int]
    confidences: Mapping[int, float] | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r} for video {self.video_id}")
        if not self.labels:
            raise ManifestError(f"empty label set for video {self.video_id}")
        if self.confidences is not None:
            if set(self.confidences) != set(self.labels):
                raise ManifestError(f"confidences of video {self.video_id} do not cover exactly its labels")
            for c in self.confidences.values():
                if not 0.0 <= c <= 1.0:
                    raise ManifestError(f"confidence {c} of video {self.video_id} outside [0, 1]")

    def to_json(self) -> str:
        doc = {"video_id": self.video_id, "split": self.split, "labels": sorted(self.labels)}
        if self.confidences is not None:
            doc["confidences"] = {str(i): self.confidences[i] for i in sorted(self.labels)}
        return json.dumps(doc, sort_keys=True)


@dataclass(frozen=True)
class Manifest:
    records: tuple[AnnotationRecord, ...]
    taxonomy_id: str | None = None

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.records:
            if rec.video_id in seen:
                raise ManifestError(f"duplicate video_id {rec.video_id!r}")
            seen.add(rec.video_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[AnnotationRecord]:
        return iter(self.records)

    def split(self, name: str) -> "Manifest":
        return Manifest(tuple(r for r in self.records if r.split == name), self.taxonomy_id)

    def by_id(self) -> dict[str, AnnotationRecord]:
        return {r.video_id: r for r in self.records}

    def to_jsonl(self) -> str:
        return "".join(rec.to_json() + "\n" for rec in self.records)


def _parse_record(doc: object, lineno: int) -> AnnotationRecord:
    if not isinstance(doc, dict):
        raise ManifestError("record is not a JSON object", lineno)
    unknown = set(doc) - {"video_id", "split", "labels", "confidences"}
    if unknown:
        raise ManifestError(f"unknown keys {sorted(unknown)}", lineno)
    try:
        video_id, split, labels = doc["video_id"], doc["split"], doc["labels"]
    except KeyError as exc:
        raise ManifestError(f"missing key {exc.args[0]!r}", lineno) from None
    if not isinstance(video_id, str):
        raise ManifestError("video_id must be a string", lineno)
    if not isinstance(labels, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in labels):
        raise ManifestError("labels must be a list of integers", lineno)
    if len(set(labels)) != len(labels):
        raise ManifestError(f"repeated label id in video {video_id}", lineno)
    conf = doc.get("confidences")
    conf_map = None
    if conf is not None:
        if not isinstance(conf, dict):
            raise ManifestError("confidences must be an object keyed by label id", lineno)
        try:
            conf_map = {int(k): float(v) for k, v in conf.items()}
        except (TypeError, ValueError):
            raise ManifestError("confidences must map integer label ids to reals", lineno) from None
    try:
        return AnnotationRecord(video_id, split, frozenset(labels), conf_map)
    except ManifestError as exc:
        raise ManifestError(str(exc), lineno) from None


def parse_manifest(text: str, taxonomy_id: str | None = None) -> Manifest:
    records = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"malformed JSON: {exc.msg}", lineno) from None
        rec = _parse_record(doc, lineno)
        if rec.video_id in seen:
            raise ManifestError(f"duplicate video_id {rec.video_id!r} (first seen on line {seen[rec.video_id]})", lineno)
        seen[rec.video_id] = lineno
        records.append(rec)
    return Manifest(tuple(records), taxonomy_id)


def load_manifest(path: str | Path, taxonomy_id: str | None = None) -> Manifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"), taxonomy_id)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text(manifest.to_jsonl(), encoding="utf-8")
