"""HATNet: a per-frame 2D branch and a 3D branch fused by merge-and-reduction blocks.

The same module also provides the plain 3D-ResNet baseline and the single-branch
ablations, selected through ``ModelConfig.mode``. Feature maps are always laid
out as (batch, channels, time, height, width).
"""
from __future__ import annotations

import io
import json
import os
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .taxonomy import CATEGORIES

BACKBONES = {"r18": ((2, 2, 2, 2), 1), "r50": ((3, 4, 6, 3), 4)}
MODES = ("hatnet", "resnet3d", "branch2d_only", "branch3d_only")
HEAD_MODES = ("single", "multitask")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    label_categories: tuple[str, ...]
    backbone: str = "r18"
    mode: str = "hatnet"
    frames: int = 16
    input_size: int = 112
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    head_mode: str = "single"
    mr_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "label_categories", tuple(self.label_categories))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if self.input_size < 32 or self.input_size % 16:
            raise ConfigError(f"input_size must be >= 32 and divisible by 16, got {self.input_size}")
        if self.frames < 4 or self.frames % 2:
            raise ConfigError(f"frames must be >= 4 and even, got {self.frames}")
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ConfigError(f"need four positive stage widths, got {self.stage_channels}")
        bad = set(self.label_categories) - set(CATEGORIES)
        if bad:
            raise ConfigError(f"unknown categories {sorted(bad)}")
        if not self.label_categories:
            raise ConfigError("taxonomy binding has no labels")

    @property
    def n_labels(self) -> int:
        return len(self.label_categories)

    @property
    def category_counts(self) -> dict[str, int]:
        c = Counter(self.label_categories)
        return {cat: c.get(cat, 0) for cat in CATEGORIES}

    @property
    def blocks(self) -> tuple[int, ...]:
        return BACKBONES[self.backbone][0]

    @property
    def expansion(self) -> int:
        return BACKBONES[self.backbone][1]

    @property
    def stage_out_channels(self) -> tuple[int, ...]:
        return tuple(c * self.expansion for c in self.stage_channels)

    @property
    def feature_dim(self) -> int:
        return self.stage_out_channels[-1]

    def replace(self, **changes) -> "ModelConfig":
        doc = asdict(self)
        doc.update(changes)
        return ModelConfig(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["label_categories"] = list(self.label_categories)
        doc["stage_channels"] = list(self.stage_channels)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


def _conv(dim: int, cin: int, cout: int, kernel: int, stride: int = 1) -> nn.Module:
    if dim == 2:
        return nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False)
    return nn.Conv3d(cin, cout, kernel, stride=(1, stride, stride), padding=kernel // 2, bias=False)


def _norm(dim: int, c: int) -> nn.Module:
    return nn.BatchNorm2d(c) if dim == 2 else nn.BatchNorm3d(c)


class BasicBlock(nn.Module):
    def __init__(self, dim: int, cin: int, width: int, stride: int = 1):
        super().__init__()
        self.conv1 = _conv(dim, cin, width, 3, stride)
        self.bn1 = _norm(dim, width)
        self.conv2 = _conv(dim, width, width, 3)
        self.bn2 = _norm(dim, width)
        self.shortcut = None
        if stride != 1 or cin != width:
            self.shortcut = nn.Sequential(_conv(dim, cin, width, 1, stride), _norm(dim, width))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    def __init__(self, dim: int, cin: int, width: int, stride: int = 1, expansion: int = 4):
        super().__init__()
        cout = width * expansion
        self.conv1 = _conv(dim, cin, width, 1)
        self.bn1 = _norm(dim, width)
        self.conv2 = _conv(dim, width, width, 3, stride)
        self.bn2 = _norm(dim, width)
        self.conv3 = _conv(dim, width, cout, 1)
        self.bn3 = _norm(dim, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(_conv(dim, cin, cout, 1, stride), _norm(dim, cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def _make_blocks(dim: int, cin: int, width: int, n_blocks: int, stride: int, backbone: str) -> nn.Sequential:
    layers = []
    if backbone == "r50":
        for b in range(n_blocks):
            layers.append(Bottleneck(dim, cin if b == 0 else width * 4, width, stride if b == 0 else 1))
    else:
        for b in range(n_blocks):
            layers.append(BasicBlock(dim, cin if b == 0 else width, width, stride if b == 0 else 1))
    return nn.Sequential(*layers)


def _check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() != 5:
        raise ValueError(f"{what} expects a 5-D (B, C, T, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ValueError(f"{what} expects {expected} input channels, got {x.shape[1]}")


class Conv3dStage(nn.Module):
    """Residual 3D blocks with 3x3x3 kernels; temporal stride is always 1."""

    def __init__(self, cin: int, width: int, n_blocks: int, stride: int, backbone: str = "r18"):
        super().__init__()
        self.in_channels = cin
        self.blocks = _make_blocks(3, cin, width, n_blocks, stride, backbone)

    def forward(self, x):
        _check_channels(x, self.in_channels, "Conv3dStage")
        return self.blocks(x)


class Conv2dStage(nn.Module):
    """Residual 2D blocks applied to every frame with shared weights."""

    def __init__(self, cin: int, width: int, n_blocks: int, stride: int, backbone: str = "r18"):
        super().__init__()
        self.in_channels = cin
        self.blocks = _make_blocks(2, cin, width, n_blocks, stride, backbone)

    def forward(self, x):
        _check_channels(x, self.in_channels, "Conv2dStage")
        return per_frame(self.blocks, x)


def per_frame(fn, x: torch.Tensor) -> torch.Tensor:
    b, c, t, h, w = x.shape
    y = fn(x.transpose(1, 2).reshape(b * t, c, h, w))
    return y.reshape(b, t, *y.shape[1:]).transpose(1, 2)


def conv2d_stage(x: torch.Tensor, stage: Conv2dStage) -> torch.Tensor:
    return stage(x)


def conv3d_stage(x: torch.Tensor, stage: Conv3dStage) -> torch.Tensor:
    return stage(x)


class MergeReduce(nn.Module):
    """Concatenate a 2D-branch map and a 3D-branch map, then 1x1x1-conv back to one branch's width."""

    def __init__(self, channels: int, norm: bool = True):
        super().__init__()
        self.channels = channels
        self.reduce = nn.Conv3d(2 * channels, channels, kernel_size=1, bias=True)
        self.bn = nn.BatchNorm3d(channels) if norm else None

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        _check_channels(a, self.channels, "MergeReduce")
        _check_channels(b, self.channels, "MergeReduce")
        if a.shape[-2:] != b.shape[-2:]:
            raise ValueError(f"spatial shapes differ: {tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}")
        ta, tb = a.shape[2], b.shape[2]
        if ta > tb:
            a = F.adaptive_avg_pool3d(a, (tb, *a.shape[-2:]))
        elif tb > ta:
            b = F.adaptive_avg_pool3d(b, (ta, *b.shape[-2:]))
        out = self.reduce(torch.cat([a, b], dim=1))
        if self.bn is None:
            return out
        return F.relu(self.bn(out))


def merge_reduce(a: torch.Tensor, b: torch.Tensor, block: MergeReduce) -> torch.Tensor:
    return block(a, b)


class Stem3d(nn.Module):
    def __init__(self, cout: int):
        super().__init__()
        self.conv = nn.Conv3d(3, cout, (3, 7, 7), stride=(1, 2, 2), padding=(1, 3, 3), bias=False)
        self.bn = nn.BatchNorm3d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class Stem2d(nn.Module):
    # no pooling after this conv, so both branches reach stage 1 at the same resolution
    def __init__(self, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(3, cout, 7, stride=2, padding=3, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return per_frame(lambda z: F.relu(self.bn(self.conv(z))), x)


@dataclass
class HeadOutput:
    logits: torch.Tensor
    blocks: dict[str, torch.Tensor] | None = None
    features: torch.Tensor | None = None


class Heads(nn.Module):
    """Affine heads on pooled features; one per category in multitask mode."""

    def __init__(self, in_dim: int, label_categories: tuple[str, ...], mode: str):
        super().__init__()
        self.mode = mode
        self.label_categories = label_categories
        if mode == "single":
            self.fc = nn.Linear(in_dim, len(label_categories))
        else:
            counts = Counter(label_categories)
            self.fcs = nn.ModuleDict({c: nn.Linear(in_dim, counts[c]) for c in CATEGORIES if counts[c]})
            order = [i for c in CATEGORIES for i, lc in enumerate(label_categories) if lc == c]
            inverse = np.argsort(order)
            self.register_buffer("inverse", torch.as_tensor(inverse, dtype=torch.long), persistent=False)

    def forward(self, feats: torch.Tensor) -> HeadOutput:
        if self.mode == "single":
            return HeadOutput(self.fc(feats), None, feats)
        blocks = {}
        for c in CATEGORIES:
            if c in self.fcs:
                blocks[c] = self.fcs[c](feats)
            else:
                blocks[c] = feats.new_zeros((feats.shape[0], 0))
        cat = torch.cat([blocks[c] for c in CATEGORIES], dim=1)
        return HeadOutput(cat[:, self.inverse], blocks, feats)


class HATNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.stage_channels
        outs = config.stage_out_channels
        use2d = config.mode in ("hatnet", "branch2d_only")
        use3d = config.mode in ("hatnet", "resnet3d", "branch3d_only")
        self.stem2d = Stem2d(widths[0]) if use2d else None
        self.stem3d = Stem3d(widths[0]) if use3d else None
        cins = (widths[0],) + outs[:-1]
        strides = (1, 2, 2, 2)
        self.stages2d = self.stages3d = self.merges = None
        if use2d:
            self.stages2d = nn.ModuleList(
                Conv2dStage(ci, w, n, s, config.backbone)
                for ci, w, n, s in zip(cins, widths, config.blocks, strides)
            )
        if use3d:
            self.stages3d = nn.ModuleList(
                Conv3dStage(ci, w, n, s, config.backbone)
                for ci, w, n, s in zip(cins, widths, config.blocks, strides)
            )
        if use2d and use3d:
            self.merges = nn.ModuleList(MergeReduce(c, norm=config.mr_norm) for c in outs)
        self.head = Heads(config.feature_dim, config.label_categories, config.head_mode)

    def forward_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage output maps (fused maps in hatnet mode)."""
        cfg = self.config
        if x.dim() != 5 or x.shape[1] != 3 or x.shape[-1] != x.shape[-2] or x.shape[-1] != cfg.input_size:
            raise ValueError(
                f"expected clips shaped (B, 3, T, {cfg.input_size}, {cfg.input_size}), got {tuple(x.shape)}"
            )
        maps = []
        if self.merges is not None:
            a, b = self.stem2d(x), self.stem3d(x)
            for s2, s3, mr in zip(self.stages2d, self.stages3d, self.merges):
                fused = mr(s2(a), s3(b))
                a = b = fused
                maps.append(fused)
        elif self.stages2d is not None:
            a = self.stem2d(x)
            for s2 in self.stages2d:
                a = s2(a)
                maps.append(a)
        else:
            b = self.stem3d(x)
            for s3 in self.stages3d:
                b = s3(b)
                maps.append(b)
        return maps

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_maps(x)[-1].mean(dim=(2, 3, 4))

    def forward(self, x: torch.Tensor) -> HeadOutput:
        return self.head(self.forward_features(x))


def infer_shapes(config: ModelConfig, batch: int = 1) -> list[tuple[int, ...]]:
    """Per-stage output shapes computed from the config alone."""
    size = -(-config.input_size // 2)
    shapes = []
    for i, c in enumerate(config.stage_out_channels):
        if i > 0:
            size = -(-size // 2)
        shapes.append((batch, c, config.frames, size, size))
    return shapes


def init_parameters(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=1.0 / np.sqrt(m.in_features))
            nn.init.zeros_(m.bias)


def build_model(config: ModelConfig, seed: int = 0, device: str | torch.device | None = None) -> HATNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if device is not None and str(device) == "meta":
            with torch.device("meta"):
                model = HATNet(config)
        else:
            model = HATNet(config)
            init_parameters(model)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def is_head_param(name: str) -> bool:
    return name.startswith("head.")


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    taxonomy_fingerprint: str | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: HATNet, fingerprint: str | None = None, step: int = 0, **extra) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.config, params, fingerprint, step, dict(extra))

    def trunk(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if not is_head_param(k)}

    def to_model(self) -> HATNet:
        model = build_model(self.config)
        load_params(model, self.params)
        return model


def load_params(model: nn.Module, params: dict[str, np.ndarray], strict: bool = True) -> None:
    state = model.state_dict()
    mismatched = [
        k for k, v in params.items() if k in state and tuple(state[k].shape) != tuple(v.shape)
    ]
    missing = [k for k in state if k not in params] if strict else []
    unexpected = [k for k in params if k not in state]
    if mismatched or missing or unexpected:
        parts = []
        if mismatched:
            parts.append(f"shape mismatch: {mismatched}")
        if missing:
            parts.append(f"missing: {missing}")
        if unexpected:
            parts.append(f"unexpected: {unexpected}")
        raise CheckpointError("incompatible parameters; " + "; ".join(parts))
    with torch.no_grad():
        for k, v in params.items():
            state[k].copy_(torch.from_numpy(np.asarray(v)))


_META_KEY = "__meta__"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write the checkpoint as a single .npz archive; the write is atomic."""
    meta = {
        "config": ckpt.config.to_dict(),
        "taxonomy_fingerprint": ckpt.taxonomy_fingerprint,
        "step": ckpt.step,
        "extra": ckpt.extra,
    }
    arrays = {_META_KEY: np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    arrays.update(ckpt.params)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        if _META_KEY not in data:
            raise CheckpointError(f"{path} is not a checkpoint (no metadata block)")
        meta = json.loads(bytes(data[_META_KEY]).decode("utf-8"))
        params = {k: data[k] for k in data.files if k != _META_KEY}
    return Checkpoint(
        ModelConfig.from_dict(meta["config"]),
        params,
        meta.get("taxonomy_fingerprint"),
        int(meta.get("step", 0)),
        meta.get("extra", {}),
    )
