from dataclasses import replace

import numpy as np
import pytest

from holivid.dataset import (
    BACKGROUND,
    SyntheticCorpus,
    SyntheticSpec,
    SyntheticSpecError,
    batch_iter,
    dot_velocity,
    draw_clip,
    generate_synthetic,
    load_spec,
    read_tensor,
    render_clip,
    save_spec,
    target_matrix,
    write_tensor,
)
from holivid.manifest import AnnotationRecord, Manifest
from holivid.taxonomy import CATEGORIES


def test_generation_is_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=7))
    b = generate_synthetic(SyntheticSpec(seed=7))
    assert a[0] == b[0]
    assert a[1].to_jsonl() == b[1].to_jsonl()
    assert generate_synthetic(SyntheticSpec(seed=8))[1].to_jsonl() != a[1].to_jsonl()


def test_taxonomy_shape():
    tax, manifest = generate_synthetic(SyntheticSpec(n_static=4, n_dynamic=4))
    assert len(tax) == 8
    cats = set(tax.label_categories)
    assert len(cats) >= 2
    assert set(tax.label_categories[:4]) <= {"scene", "object", "attribute", "concept"}
    assert set(tax.label_categories[4:]) <= {"action", "event"}
    assert len(manifest) == 64 + 32 + 32
    for rec in manifest:
        assert 1 <= len(rec.labels) <= 3


def test_too_small_frame_rejected():
    with pytest.raises(SyntheticSpecError, match="at most"):
        SyntheticSpec(size=32, n_static=17)


@pytest.mark.parametrize("kw", [{"frames": 12}, {"n_static": 0}, {"noise_std": -1.0}, {"labels_per_video": (3, 2)}])
def test_invalid_specs(kw):
    with pytest.raises(SyntheticSpecError):
        SyntheticSpec(**kw)


def test_render_deterministic_and_bounded():
    spec = SyntheticSpec(seed=3)
    a = render_clip("train_00005", spec)
    b = render_clip("train_00005", spec)
    assert a.dtype == np.float32 and a.shape == (3, 8, 32, 32)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_render_unknown_id():
    spec = SyntheticSpec(n_train=2)
    with pytest.raises(KeyError):
        render_clip("train_00002", spec)
    with pytest.raises(KeyError):
        render_clip("bogus", spec)


def test_render_returns_a_copy():
    spec = SyntheticSpec()
    a = render_clip("val_00064", spec)
    a[:] = 0
    assert render_clip("val_00064", spec).max() > 0


def test_empty_clip_is_constant_background():
    spec = SyntheticSpec(noise_std=0.0, still_dots=False)
    clip = draw_clip(spec, [], np.zeros((spec.n_dynamic, 2), dtype=int))
    assert np.all(clip == np.float32(BACKGROUND))


def test_static_frames_equal_outside_dots():
    spec = SyntheticSpec(noise_std=0.0)
    rng = np.random.default_rng(0)
    starts = rng.integers(0, spec.size, size=(spec.n_dynamic, 2))
    labels = [1, spec.n_static + 2]
    clip = draw_clip(spec, labels, starts)
    # dot pixels: anything that differs from the clip drawn without dots
    no_dots = draw_clip(replace(spec, still_dots=False), [1], starts)
    dot_px = (clip != no_dots).any(axis=(0, 1))
    diff = (clip[:, 0] != clip[:, -1]).any(axis=0)
    assert diff.any()
    assert not (diff & ~dot_px).any()


def test_static_label_visible_in_single_frame():
    spec = SyntheticSpec(noise_std=0.0, still_dots=False)
    starts = np.zeros((spec.n_dynamic, 2), dtype=int)
    frames = [draw_clip(spec, [s], starts)[:, 0] for s in range(spec.n_static)]
    for i in range(len(frames)):
        for j in range(i + 1, len(frames)):
            assert not np.array_equal(frames[i], frames[j])


@pytest.mark.parametrize("d", range(4))
def test_dynamic_label_decidable_from_frame_pairs(d):
    spec = SyntheticSpec(noise_std=0.0, still_dots=False)
    starts = np.random.default_rng(d).integers(0, spec.size, size=(spec.n_dynamic, 2))
    clip = draw_clip(spec, [spec.n_static + d], starts)
    vy, vx = dot_velocity(d)
    for t in range(spec.frames - 1):
        assert np.array_equal(clip[:, t + 1], np.roll(clip[:, t], (vy, vx), axis=(1, 2)))


def test_velocities_are_distinct():
    v = [dot_velocity(j) for j in range(16)]
    assert len(set(v)) == 16


def test_single_frame_statistics_match_across_motions():
    """Per-frame mean and variance of motion-only clips do not depend on which motion it is."""
    spec = SyntheticSpec(noise_std=0.03)
    n = 100
    stats = {}
    for d in range(spec.n_dynamic):
        rng = np.random.default_rng(100 + d)
        means, variances = [], []
        for _ in range(n):
            starts = rng.integers(0, spec.size, size=(spec.n_dynamic, 2))
            clip = draw_clip(spec, [spec.n_static + d], starts, rng)
            t = int(rng.integers(spec.frames))
            means.append(clip[:, t].mean())
            variances.append(clip[:, t].var())
        stats[d] = (np.array(means), np.array(variances))

    pooled_mean = np.concatenate([m for m, _ in stats.values()])
    pooled_var = np.concatenate([v for _, v in stats.values()])
    for m, v in stats.values():
        # within four standard errors of the pooled statistic
        assert abs(m.mean() - pooled_mean.mean()) <= 4 * pooled_mean.std() / np.sqrt(n) + 1e-7
        assert abs(v.mean() - pooled_var.mean()) <= 4 * pooled_var.std() / np.sqrt(n) + 1e-7


def test_batches_and_targets():
    manifest = Manifest(tuple(AnnotationRecord(f"train_{i:05d}", "train", frozenset({i % 3})) for i in range(5)))
    spec = SyntheticSpec(n_train=5, n_val=0, n_test=0)
    sizes = [len(x) for x, _ in batch_iter(manifest, spec, 2)]
    assert sizes == [2, 2, 1]
    first = [y.tolist() for _, y in batch_iter(manifest, spec, 2, shuffle_seed=4)]
    again = [y.tolist() for _, y in batch_iter(manifest, spec, 2, shuffle_seed=4)]
    assert first == again


def test_batch_size_validation():
    with pytest.raises(ValueError):
        next(batch_iter(Manifest(()), SyntheticSpec(), 0))


def test_target_row_union():
    m = Manifest((AnnotationRecord("a", "train", frozenset({0, 3})),))
    assert target_matrix(m, 5).tolist() == [[1, 0, 0, 1, 0]]


def test_corpus_targets_are_binary_and_nonempty():
    corpus = SyntheticCorpus(SyntheticSpec(n_train=16, n_val=4, n_test=4))
    x, y = corpus.arrays("train")
    assert x.shape == (16, 3, 8, 32, 32)
    assert set(np.unique(y)) <= {0.0, 1.0}
    assert (y.sum(1) >= 1).all()


def test_spec_roundtrip(tmp_path):
    spec = SyntheticSpec(seed=11, n_static=3, labels_per_video=(2, 2))
    save_spec(spec, tmp_path / "s.json")
    assert load_spec(tmp_path / "s.json") == spec


def test_spec_rejects_unknown_keys():
    with pytest.raises(SyntheticSpecError, match="unknown"):
        SyntheticSpec.from_dict({"n_train": 1, "colour": "red"})


def test_tensor_roundtrip(tmp_path):
    a = np.random.default_rng(0).random((3, 8, 4, 4)).astype(np.float32)
    write_tensor(a, tmp_path / "a.bin")
    raw = (tmp_path / "a.bin").read_bytes()
    assert np.frombuffer(raw[:16], "<i4").tolist() == [3, 8, 4, 4]
    assert np.array_equal(read_tensor(tmp_path / "a.bin"), a)
    write_tensor(np.ones((2, 5)), tmp_path / "b.bin")
    assert read_tensor(tmp_path / "b.bin").shape == (2, 5, 1, 1)


def test_tensor_truncated(tmp_path):
    (tmp_path / "t.bin").write_bytes(np.asarray([2, 2, 1, 1], "<i4").tobytes() + b"\0" * 4)
    with pytest.raises(ValueError, match="payload"):
        read_tensor(tmp_path / "t.bin")


def test_categories_constant_order():
    assert CATEGORIES == ("scene", "object", "action", "event", "attribute", "concept")
