"""Multi-label BCE losses, category masking, the SGD training loop and finetuning."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .metrics import map_report
from .model import Checkpoint, CheckpointError, HATNet, ModelConfig, build_model, is_head_param, load_params
from .taxonomy import CATEGORIES, Taxonomy

log = logging.getLogger(__name__)

DETERMINISTIC_ENV = "HOLIVID_DETERMINISTIC"


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, max_abs_logit: float):
        self.epoch, self.batch, self.max_abs_logit = epoch, batch, max_abs_logit
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (max |logit| = {max_abs_logit:.4g})")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: tuple[float, ...] = (0.5, 0.75)
    lr_factor: float = 0.1
    seed: int = 0
    active_categories: tuple[str, ...] = CATEGORIES
    loss_weights: tuple[float, ...] = (1.0,) * 6

    def __post_init__(self):
        object.__setattr__(self, "active_categories", tuple(self.active_categories))
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        object.__setattr__(self, "lr_steps", tuple(float(s) for s in self.lr_steps))
        if self.lr <= 0:
            raise TrainConfigError("learning rate must be > 0")
        if not self.active_categories:
            raise TrainConfigError("active_categories must be nonempty")
        bad = set(self.active_categories) - set(CATEGORIES)
        if bad:
            raise TrainConfigError(f"unknown categories {sorted(bad)}")
        if len(self.loss_weights) != 6:
            raise TrainConfigError("loss_weights needs one weight per category (6)")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainConfigError("epochs must be >= 0 and batch_size >= 1")

    def milestones(self) -> list[int]:
        return sorted({int(round(f * self.epochs)) for f in self.lr_steps if 0 < f < 1})

    def head_weights(self) -> tuple[float, ...]:
        return tuple(w if c in self.active_categories else 0.0 for c, w in zip(CATEGORIES, self.loss_weights))

    def replace(self, **changes) -> "TrainConfig":
        doc = asdict(self)
        doc.update(changes)
        return TrainConfig(**doc)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


def bce_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of softplus(z) - y*z over positions where mask is 1; 0 if nothing is masked in."""
    if logits.shape != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ in shape")
    if mask is not None and mask.shape != logits.shape:
        raise ValueError(f"mask {tuple(mask.shape)} does not match logits {tuple(logits.shape)}")
    targets = targets.to(logits.dtype)
    per_elem = logits.clamp(min=0) - logits * targets + torch.log1p(torch.exp(-logits.abs()))
    if mask is None:
        if per_elem.numel() == 0:
            return logits.new_zeros(())
        return per_elem.mean()
    mask = mask.to(logits.dtype)
    denom = mask.sum()
    if denom == 0:
        return logits.new_zeros(()) + 0.0 * logits.sum()
    return (per_elem * mask).sum() / denom


def category_columns(label_categories: Sequence[str]) -> dict[str, list[int]]:
    return {c: [i for i, lc in enumerate(label_categories) if lc == c] for c in CATEGORIES}


def category_mask(label_categories: Sequence[str], active: Sequence[str]) -> np.ndarray:
    """Per-label {0,1} vector selecting labels whose category is active."""
    active = set(active)
    return np.array([1.0 if c in active else 0.0 for c in label_categories], dtype=np.float32)


def head_losses(
    head_logits: Sequence[torch.Tensor],
    head_targets: Sequence[torch.Tensor],
    head_masks: Sequence[torch.Tensor | None] | None = None,
) -> list[torch.Tensor]:
    if head_masks is None:
        head_masks = [None] * len(head_logits)
    return [bce_loss(z, y, m) for z, y, m in zip(head_logits, head_targets, head_masks)]


def multi_task_loss(
    head_logits: Sequence[torch.Tensor],
    head_targets: Sequence[torch.Tensor],
    weights: Sequence[float] = (1.0,) * 6,
    head_masks: Sequence[torch.Tensor | None] | None = None,
) -> torch.Tensor:
    """Weighted mean of the six per-head BCE losses (heads in category order).

    Heads with weight 0 or no columns do not enter the mean.
    """
    if len(weights) != 6:
        raise ValueError(f"expected 6 head weights, got {len(weights)}")
    if len(head_logits) != 6 or len(head_targets) != 6:
        raise ValueError("expected six head blocks in category order")
    losses = head_losses(head_logits, head_targets, head_masks)
    total = head_logits[0].new_zeros(())
    wsum = 0.0
    for loss, w, z in zip(losses, weights, head_logits):
        if w == 0 or z.shape[-1] == 0:
            continue
        total = total + w * loss
        wsum += w
    if wsum == 0:
        return total
    return total / wsum


def model_loss(
    model: HATNet, output, targets: torch.Tensor, config: TrainConfig, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Loss of one model output against full-width targets under the config's category masking."""
    cats = model.config.label_categories
    if model.config.head_mode == "multitask":
        cols = category_columns(cats)
        blocks = [output.blocks[c] for c in CATEGORIES]
        tblocks = [targets[:, cols[c]] for c in CATEGORIES]
        mblocks = None if mask is None else [mask[:, cols[c]] for c in CATEGORIES]
        return multi_task_loss(blocks, tblocks, config.head_weights(), mblocks)
    active = torch.as_tensor(category_mask(cats, config.active_categories), dtype=output.logits.dtype)
    full = active.expand_as(output.logits)
    if mask is not None:
        full = full * mask
    return bce_loss(output.logits, targets, full)


@dataclass
class ArrayData:
    """In-memory train/val clips (N, 3, T, H, W) and {0,1} targets (N, L)."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray | None = None
    val_y: np.ndarray | None = None
    taxonomy: Taxonomy | None = None

    @classmethod
    def from_corpus(cls, corpus, train_split: str = "train", val_split: str = "val") -> "ArrayData":
        tx, ty = corpus.arrays(train_split)
        vx, vy = corpus.arrays(val_split)
        return cls(tx, ty, vx, vy, corpus.taxonomy)


@torch.no_grad()
def predict_logits(model: HATNet, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    for start in range(0, len(x), batch_size):
        xb = torch.as_tensor(x[start:start + batch_size], dtype=dtype)
        outs.append(model(xb).logits.double().numpy())
    if not outs:
        return np.zeros((0, model.config.n_labels))
    return np.concatenate(outs)


@torch.no_grad()
def evaluate(model: HATNet, x: np.ndarray, y: np.ndarray, config: TrainConfig, batch_size: int = 32) -> dict:
    """Loss and mAP report of ``model`` on (x, y)."""
    logits = predict_logits(model, x, batch_size)
    out_loss = _eval_loss(model, logits, y, config)
    report = map_report(logits, y, model.config.label_categories)
    return {"loss": out_loss, "report": report, "logits": logits}


def _eval_loss(model: HATNet, logits: np.ndarray, y: np.ndarray, config: TrainConfig) -> float:
    z = torch.as_tensor(logits)
    t = torch.as_tensor(y, dtype=z.dtype)
    cats = model.config.label_categories
    if model.config.head_mode == "multitask":
        cols = category_columns(cats)
        return float(multi_task_loss([z[:, cols[c]] for c in CATEGORIES], [t[:, cols[c]] for c in CATEGORIES],
                                     config.head_weights()))
    active = torch.as_tensor(category_mask(cats, config.active_categories), dtype=z.dtype)
    return float(bce_loss(z, t, active.expand_as(z)))


def _history_entry(epoch: int, train_loss: float, val: dict | None) -> dict:
    entry = {"epoch": epoch, "train_loss": train_loss, "val_loss": None, "val_map": None, "val_map_per_category": None}
    if val is not None:
        rep = val["report"]
        entry["val_loss"] = val["loss"]
        entry["val_map"] = _none_if_nan(rep.overall)
        entry["val_map_per_category"] = {c: _none_if_nan(v) for c, v in rep.per_category.items()}
    return entry


def _none_if_nan(v: float) -> float | None:
    return None if v is None or math.isnan(v) else float(v)


def history_to_jsonl(history: Sequence[dict]) -> str:
    return "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)


def make_optimizer(model: HATNet, config: TrainConfig):
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=config.milestones(), gamma=config.lr_factor)
    return opt, sched


def fit_model(
    model: HATNet,
    config: TrainConfig,
    data: ArrayData,
    history_path: str | Path | None = None,
    callback=None,
) -> list[dict]:
    """Train ``model`` in place for ``config.epochs`` epochs and return the per-epoch history."""
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)
    history: list[dict] = []
    if history_path is not None:
        Path(history_path).write_text("", encoding="utf-8")
    if config.epochs == 0:
        return history

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        opt, sched = make_optimizer(model, config)
        dtype = next(model.parameters()).dtype
        n = len(data.train_x)
        targets = torch.as_tensor(data.train_y, dtype=dtype)
        step = 0
        for epoch in range(config.epochs):
            model.train()
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            total, seen = 0.0, 0
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                xb = torch.as_tensor(data.train_x[idx], dtype=dtype)
                out = model(xb)
                loss = model_loss(model, out, targets[idx], config)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(epoch, b, float(out.logits.detach().abs().max()))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                total += float(loss.detach()) * len(idx)
                seen += len(idx)
            sched.step()
            val = None
            if data.val_x is not None and len(data.val_x):
                val = evaluate(model, data.val_x, data.val_y, config)
            entry = _history_entry(epoch, total / seen, val)
            history.append(entry)
            log.info("epoch %d train_loss %.4f val_map %s", epoch, entry["train_loss"], entry["val_map"])
            if history_path is not None:
                with open(history_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
            if callback is not None and callback(epoch, model, entry):
                break
        model.steps_trained = getattr(model, "steps_trained", 0) + step
    return history


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data: ArrayData,
    history_path: str | Path | None = None,
    callback=None,
) -> tuple[Checkpoint, list[dict]]:
    model = build_model(model_config, seed=train_config.seed)
    history = fit_model(model, train_config, data, history_path, callback)
    fp = data.taxonomy.fingerprint() if data.taxonomy is not None else None
    return Checkpoint.from_model(model, fp, getattr(model, "steps_trained", 0)), history


def transfer_trunk(checkpoint: Checkpoint, label_categories: Sequence[str], seed: int = 0) -> HATNet:
    """Model for a new label space with the checkpoint's trunk and freshly initialized heads."""
    config = checkpoint.config.replace(label_categories=tuple(label_categories))
    model = build_model(config, seed=seed)
    state = model.state_dict()
    trunk = checkpoint.trunk()
    incompatible = sorted(
        k for k in state if not is_head_param(k) and (k not in trunk or tuple(trunk[k].shape) != tuple(state[k].shape))
    )
    incompatible += sorted(k for k in trunk if k not in state)
    if incompatible:
        raise CheckpointError(f"trunk parameters incompatible with the target model: {incompatible}")
    load_params(model, trunk, strict=False)
    return model


def finetune(
    checkpoint: Checkpoint,
    taxonomy: Taxonomy,
    train_config: TrainConfig,
    data: ArrayData,
    history_path: str | Path | None = None,
) -> tuple[Checkpoint, list[dict]]:
    model = transfer_trunk(checkpoint, taxonomy.label_categories, seed=train_config.seed)
    model.steps_trained = 0
    history = fit_model(model, train_config, data, history_path)
    return Checkpoint.from_model(model, taxonomy.fingerprint(), model.steps_trained), history
