import json

import pytest

from holivid.manifest import AnnotationRecord, Manifest, ManifestError, load_manifest, parse_manifest, write_manifest


def test_two_lines():
    text = (
        '{"video_id": "a", "split": "train", "labels": [0, 2]}\n'
        '{"video_id": "b", "split": "test", "labels": [1], "confidences": {"1": 0.7}}\n'
    )
    m = parse_manifest(text)
    assert len(m) == 2
    assert m.records[0].labels == frozenset({0, 2})
    assert m.records[1].confidences == {1: 0.7}


def test_duplicate_video_id():
    text = '{"video_id": "a", "split": "train", "labels": [0]}\n' * 2
    with pytest.raises(ManifestError, match="duplicate video_id 'a'") as exc:
        parse_manifest(text)
    assert exc.value.line == 2


@pytest.mark.parametrize(
    "line, message",
    [
        ('{"video_id": "a", "split": "train", "labels": []}', "empty label set"),
        ('{"video_id": "a", "split": "dev", "labels": [0]}', "unknown split"),
        ('{"video_id": "a", "split": "train"', "malformed JSON"),
        ('{"video_id": "a", "split": "train", "labels": [0], "extra": 1}', "unknown keys"),
        ('{"video_id": "a", "split": "train", "labels": [0], "confidences": {"1": 0.5}}', "cover exactly"),
        ('{"video_id": "a", "split": "train", "labels": [0], "confidences": {"0": 1.5}}', "outside"),
        ('{"video_id": "a", "labels": [0]}', "missing key 'split'"),
    ],
)
def test_bad_records(line, message):
    with pytest.raises(ManifestError, match=message) as exc:
        parse_manifest('{"video_id": "z", "split": "val", "labels": [1]}\n' + line + "\n")
    assert exc.value.line == 2


def test_roundtrip(tmp_path):
    m = Manifest((
        AnnotationRecord("x", "train", frozenset({3, 1})),
        AnnotationRecord("y", "val", frozenset({0}), {0: 0.25}),
    ))
    p = tmp_path / "m.jsonl"
    write_manifest(m, p)
    assert load_manifest(p).records == m.records
    first = json.loads(p.read_text().splitlines()[0])
    assert first["labels"] == [1, 3]


def test_split_view():
    m = Manifest((AnnotationRecord("x", "train", frozenset({0})), AnnotationRecord("y", "val", frozenset({0}))))
    assert [r.video_id for r in m.split("val")] == ["y"]
