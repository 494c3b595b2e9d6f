"""Deterministic synthetic video corpus, batching and flat-binary tensor export.

Static labels are drawn as colored shapes at fixed, label-specific positions and
are visible in every frame. Every dynamic label owns one white dot on a wrapping
canvas: the dot moves with a label-specific velocity when the label is present
and stays still otherwise. A single frame therefore always shows the same number
of identical dots and says nothing about which dynamic labels are present; only
frame-to-frame displacement does.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from .manifest import SPLITS, AnnotationRecord, Manifest
from .taxonomy import Taxonomy

STATIC_CATEGORIES = ("scene", "object", "attribute", "concept")
DYNAMIC_CATEGORIES = ("action", "event")
ALLOWED_FRAMES = (8, 16, 32)
BACKGROUND = 0.1
DOT_VALUE = 1.0

# (dy, dx) unit steps in label order; dots move 2 px per frame, faster every 8 labels
_DIRECTIONS = ((0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1))


class SyntheticSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 64
    n_val: int = 32
    n_test: int = 32
    frames: int = 8
    size: int = 32
    n_static: int = 4
    n_dynamic: int = 4
    labels_per_video: tuple[int, int] = (1, 3)
    noise_std: float = 0.03
    seed: int = 0
    still_dots: bool = True

    def __post_init__(self):
        object.__setattr__(self, "labels_per_video", tuple(int(v) for v in self.labels_per_video))
        if self.frames not in ALLOWED_FRAMES:
            raise SyntheticSpecError(f"frames must be one of {ALLOWED_FRAMES}, got {self.frames}")
        if self.n_static < 1 or self.n_dynamic < 1:
            raise SyntheticSpecError("need at least one static and one dynamic label")
        lo, hi = self.labels_per_video
        if not 1 <= lo <= hi <= self.n_static + self.n_dynamic:
            raise SyntheticSpecError(f"invalid labels_per_video range {self.labels_per_video}")
        if self.noise_std < 0:
            raise SyntheticSpecError("noise_std must be >= 0")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise SyntheticSpecError("split sizes must be >= 0")
        if self.n_static > self.grid_cells ** 2:
            raise SyntheticSpecError(
                f"a {self.size}x{self.size} frame holds at most {self.grid_cells ** 2} static templates, "
                f"{self.n_static} requested"
            )

    @property
    def template_size(self) -> int:
        return max(3, self.size // 8)

    @property
    def grid_cells(self) -> int:
        return self.size // (2 * self.template_size)

    @property
    def dot_size(self) -> int:
        return max(3, self.size // 10)

    @property
    def n_labels(self) -> int:
        return self.n_static + self.n_dynamic

    @property
    def static_ids(self) -> list[int]:
        return list(range(self.n_static))

    @property
    def dynamic_ids(self) -> list[int]:
        return list(range(self.n_static, self.n_labels))

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["labels_per_video"] = list(self.labels_per_video)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise SyntheticSpecError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**doc)


def synthetic_taxonomy(spec: SyntheticSpec) -> Taxonomy:
    items = [(f"shape_{i:02d}", STATIC_CATEGORIES[i % len(STATIC_CATEGORIES)]) for i in range(spec.n_static)]
    items += [(f"motion_{j:02d}", DYNAMIC_CATEGORIES[j % len(DYNAMIC_CATEGORIES)]) for j in range(spec.n_dynamic)]
    return Taxonomy.from_labels(items)


def _video_ids(spec: SyntheticSpec) -> list[tuple[str, str, int]]:
    out = []
    index = 0
    for split in SPLITS:
        for _ in range(spec.split_sizes()[split]):
            out.append((f"{split}_{index:05d}", split, index))
            index += 1
    return out


def _video_rng(spec: SyntheticSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index])


def _sample_video(spec: SyntheticSpec, index: int):
    """Labels and dot start positions of one video, then the rng for its noise."""
    rng = _video_rng(spec, index)
    lo, hi = spec.labels_per_video
    n = int(rng.integers(lo, hi + 1))
    labels = sorted(int(i) for i in rng.choice(spec.n_labels, size=n, replace=False))
    starts = rng.integers(0, spec.size, size=(spec.n_dynamic, 2))
    return labels, starts, rng


def _parse_index(video_id: str, spec: SyntheticSpec) -> int:
    split, _, num = video_id.partition("_")
    sizes = spec.split_sizes()
    if split not in SPLITS or not num.isdigit():
        raise KeyError(f"unknown video_id {video_id!r}")
    index = int(num)
    offset = 0
    for s in SPLITS:
        if s == split:
            if not offset <= index < offset + sizes[s]:
                raise KeyError(f"unknown video_id {video_id!r}")
            return index
        offset += sizes[s]
    raise KeyError(video_id)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Taxonomy, Manifest]:
    tax = synthetic_taxonomy(spec)
    records = []
    for video_id, split, index in _video_ids(spec):
        labels, _, _ = _sample_video(spec, index)
        records.append(AnnotationRecord(video_id, split, frozenset(labels)))
    return tax, Manifest(tuple(records), taxonomy_id=tax.fingerprint())


def _static_color(i: int) -> tuple[float, float, float]:
    hue = (i * 0.618033988749895) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.85, 0.8)


def _draw_template(frame: np.ndarray, i: int, spec: SyntheticSpec) -> None:
    t = spec.template_size
    g = spec.grid_cells
    cell = 2 * t
    row, col = divmod(i, g)
    y0 = row * cell + t // 2
    x0 = col * cell + t // 2
    color = np.asarray(_static_color(i), dtype=frame.dtype)[:, None, None]
    kind = i % 3
    patch = np.zeros((t, t), dtype=bool)
    if kind == 0:
        patch[:] = True
    elif kind == 1:
        patch[[0, -1], :] = True
        patch[:, [0, -1]] = True
    else:
        patch[t // 2, :] = True
        patch[:, t // 2] = True
    region = frame[:, y0:y0 + t, x0:x0 + t]
    region[:, patch] = np.broadcast_to(color, (3, t, t))[:, patch]


def dot_velocity(j: int) -> tuple[int, int]:
    """(dy, dx) displacement per frame of the j-th dynamic label."""
    dy, dx = _DIRECTIONS[j % len(_DIRECTIONS)]
    speed = 2 * (1 + j // len(_DIRECTIONS))
    return dy * speed, dx * speed


def draw_clip(spec: SyntheticSpec, labels, starts: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw a clip for an explicit label set; ``starts`` holds one (y, x) dot origin per dynamic label."""
    T, S = spec.frames, spec.size
    base = np.full((3, S, S), BACKGROUND, dtype=np.float32)
    present = set(labels)
    for i in sorted(present):
        if i < spec.n_static:
            _draw_template(base, i, spec)
    clip = np.repeat(base[:, None], T, axis=1)

    offs = np.arange(spec.dot_size)
    for j in range(spec.n_dynamic):
        if spec.n_static + j in present:
            vy, vx = dot_velocity(j)
        elif spec.still_dots:
            # absent dynamic labels keep a still dot so every frame shows the same number of dots
            vy, vx = 0, 0
        else:
            continue
        y0, x0 = starts[j]
        for t in range(T):
            ys = (y0 + vy * t + offs) % S
            xs = (x0 + vx * t + offs) % S
            clip[:, t, ys[:, None], xs[None, :]] = DOT_VALUE

    if spec.noise_std > 0 and rng is not None:
        clip += rng.normal(0.0, spec.noise_std, size=clip.shape).astype(np.float32)
        np.clip(clip, 0.0, 1.0, out=clip)
    return clip


def _render(spec: SyntheticSpec, index: int) -> np.ndarray:
    labels, starts, rng = _sample_video(spec, index)
    return draw_clip(spec, labels, starts, rng)


@lru_cache(maxsize=4096)
def _render_cached(spec: SyntheticSpec, index: int) -> np.ndarray:
    clip = _render(spec, index)
    clip.setflags(write=False)
    return clip


def render_clip(video_id: str, spec: SyntheticSpec) -> np.ndarray:
    """Render one clip as a float32 array shaped (3, T, H, W) with values in [0, 1]."""
    return _render_cached(spec, _parse_index(video_id, spec)).copy()


def target_matrix(manifest: Manifest, n_labels: int) -> np.ndarray:
    y = np.zeros((len(manifest), n_labels), dtype=np.float32)
    for row, rec in enumerate(manifest.records):
        y[row, sorted(rec.labels)] = 1.0
    return y


def load_arrays(manifest: Manifest, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """All clips and targets of ``manifest`` stacked in manifest order."""
    if not len(manifest):
        shape = (0, 3, spec.frames, spec.size, spec.size)
        return np.zeros(shape, np.float32), np.zeros((0, spec.n_labels), np.float32)
    x = np.stack([_render_cached(spec, _parse_index(r.video_id, spec)) for r in manifest.records])
    return x, target_matrix(manifest, spec.n_labels)


def batch_order(n: int, shuffle_seed: int | None) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng(shuffle_seed).permutation(n)


def batch_iter(
    manifest: Manifest, spec: SyntheticSpec, batch_size: int, shuffle_seed: int | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (clips, targets) batches; the last batch may be smaller."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = batch_order(len(manifest), shuffle_seed)
    targets = target_matrix(manifest, spec.n_labels)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        clips = np.stack([render_clip(manifest.records[i].video_id, spec) for i in idx])
        yield clips, targets[idx]


@dataclass
class SyntheticCorpus:
    """A generated corpus bundled with its spec so clips can be rendered on demand."""

    spec: SyntheticSpec
    taxonomy: Taxonomy = field(init=False)
    manifest: Manifest = field(init=False)

    def __post_init__(self):
        self.taxonomy, self.manifest = generate_synthetic(self.spec)

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        return load_arrays(self.manifest.split(split), self.spec)

    def render(self, video_id: str) -> np.ndarray:
        return render_clip(video_id, self.spec)


def save_spec(spec: SyntheticSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_spec(path: str | Path) -> SyntheticSpec:
    return SyntheticSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_tensor(array: np.ndarray, path: str | Path) -> None:
    """Write a flat binary tensor: four little-endian int32 dims, then float32 data in C order.

    Arrays with fewer than four dims are padded with trailing 1s.
    """
    array = np.asarray(array)
    if array.ndim > 4:
        raise ValueError(f"at most 4 dims supported, got {array.ndim}")
    dims = list(array.shape) + [1] * (4 - array.ndim)
    with open(path, "wb") as fh:
        fh.write(np.asarray(dims, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError("truncated tensor header")
    dims = np.frombuffer(raw[:16], dtype="<i4")
    data = np.frombuffer(raw[16:], dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"payload has {data.size} floats, header {tuple(dims)} needs {int(np.prod(dims))}")
    return data.reshape(tuple(int(d) for d in dims)).astype(np.float32)
