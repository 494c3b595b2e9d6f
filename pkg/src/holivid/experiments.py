"""Desk-scale training protocols on the synthetic corpus.

Each protocol returns a JSON-ready dict with the seeds it ran and the raw
per-seed numbers, so a caller can check directional claims on medians.
"""
from __future__ import annotations

import logging
import statistics
from dataclasses import replace

import numpy as np

from .clustering import extract_features, is_monotone, kmeans, single_class_rows
from .dataset import SyntheticCorpus, SyntheticSpec
from .metrics import clustering_accuracy
from .model import ModelConfig, build_model, count_parameters
from .training import ArrayData, TrainConfig, evaluate, finetune, train

log = logging.getLogger(__name__)

TINY_CHANNELS = (8, 16, 16, 16)
FUSION_MODES = ("hatnet", "branch2d_only", "branch3d_only")
STATIC_ACTIVE = ("scene", "object", "attribute", "concept")

# two shapes and two motions, one to three labels per clip
MIXED_SPEC = SyntheticSpec(n_train=128, n_val=128, n_test=64, n_static=2, n_dynamic=2, labels_per_video=(1, 3))
MIXED_TRAIN = TrainConfig(epochs=20, batch_size=4, lr=0.02)


def _model_config(corpus: SyntheticCorpus, mode: str = "hatnet", head_mode: str = "multitask", **kw) -> ModelConfig:
    return ModelConfig(
        corpus.taxonomy.label_categories, mode=mode, frames=corpus.spec.frames, input_size=corpus.spec.size,
        stage_channels=kw.pop("stage_channels", TINY_CHANNELS), head_mode=head_mode, **kw,
    )


def _median(values):
    clean = [v for v in values if v is not None and not np.isnan(v)]
    return statistics.median(clean) if clean else None


def overfit(seed: int = 0, max_epochs: int = 200, target: float = 0.95, check_every: int = 5) -> dict:
    """Train tiny HATNet on 64 clips until train mAP reaches ``target``."""
    corpus = SyntheticCorpus(SyntheticSpec(n_train=64, n_val=0, n_test=0, seed=seed))
    data = ArrayData(*corpus.arrays("train"), taxonomy=corpus.taxonomy)
    train_x, train_y = data.train_x, data.train_y
    cfg = _model_config(corpus)
    tcfg = TrainConfig(epochs=max_epochs, batch_size=8, lr=0.05, seed=seed, lr_steps=())
    trace = []

    def stop(epoch, model, entry):
        if (epoch + 1) % check_every:
            return False
        score = evaluate(model, train_x, train_y, tcfg)["report"].overall
        trace.append((epoch + 1, score))
        return score >= target

    ckpt, history = train(cfg, tcfg, data, callback=stop)
    final = evaluate(ckpt.to_model(), train_x, train_y, tcfg)["report"].overall
    return {"seed": seed, "epochs": len(history), "train_map": final, "trace": trace,
            "parameters": count_parameters(ckpt.to_model())}


def fusion(seeds=range(5), spec: SyntheticSpec = MIXED_SPEC, tcfg: TrainConfig = MIXED_TRAIN,
           modes=FUSION_MODES) -> dict:
    """Validation mAP of the fused network against each single branch at the same stage widths."""
    runs = {m: [] for m in modes}
    params = {}
    for seed in seeds:
        corpus = SyntheticCorpus(replace(spec, seed=seed))
        data = ArrayData.from_corpus(corpus)
        for mode in modes:
            cfg = _model_config(corpus, mode)
            params[mode] = count_parameters(build_model(cfg, device="meta"))
            _, history = train(cfg, tcfg.replace(seed=seed), data)
            last = history[-1]
            runs[mode].append({"seed": seed, "val_map": last["val_map"],
                               "val_map_per_category": last["val_map_per_category"]})
            log.info("fusion seed %d %s val_map %.4f", seed, mode, last["val_map"])
    return {
        "seeds": list(seeds),
        "parameters": params,
        "runs": runs,
        "median_val_map": {m: _median([r["val_map"] for r in runs[m]]) for m in modes},
    }


def incremental(seeds=range(5), spec: SyntheticSpec = MIXED_SPEC, tcfg: TrainConfig = MIXED_TRAIN,
                mode: str = "resnet3d") -> dict:
    """Action-category val mAP when training on actions alone versus actions plus static categories."""
    settings = {"action_only": ("action",), "action_static": ("action",) + STATIC_ACTIVE}
    runs = {k: [] for k in settings}
    for seed in seeds:
        corpus = SyntheticCorpus(replace(spec, seed=seed))
        data = ArrayData.from_corpus(corpus)
        cfg = _model_config(corpus, mode)
        for name, active in settings.items():
            _, history = train(cfg, tcfg.replace(seed=seed, active_categories=active), data)
            value = history[-1]["val_map_per_category"]["action"]
            runs[name].append({"seed": seed, "action_map": value})
            log.info("incremental seed %d %s action mAP %s", seed, name, value)
    return {
        "seeds": list(seeds),
        "mode": mode,
        "active_categories": {k: list(v) for k, v in settings.items()},
        "runs": runs,
        "median_action_map": {k: _median([r["action_map"] for r in runs[k]]) for k in settings},
    }


def transfer(seeds=range(5), pretrain_epochs: int = 20, finetune_epochs: int = 10) -> dict:
    """Finetune a pretrained trunk on a small corpus of new motions versus training it from scratch."""
    source_spec = SyntheticSpec(n_train=256, n_val=0, n_test=0, n_static=2, n_dynamic=4, labels_per_video=(1, 3))
    target_spec = SyntheticSpec(n_train=32, n_val=128, n_test=0, n_static=1, n_dynamic=4, labels_per_video=(1, 2))
    runs = {"finetune": [], "scratch": []}
    for seed in seeds:
        source = SyntheticCorpus(replace(source_spec, seed=seed))
        target = SyntheticCorpus(replace(target_spec, seed=1000 + seed))
        src_cfg = _model_config(source, "hatnet")
        ckpt, _ = train(src_cfg, MIXED_TRAIN.replace(seed=seed, epochs=pretrain_epochs),
                        ArrayData(*source.arrays("train"), taxonomy=source.taxonomy))
        data = ArrayData.from_corpus(target)
        tcfg = MIXED_TRAIN.replace(seed=seed, epochs=finetune_epochs)
        _, ft = finetune(ckpt, target.taxonomy, tcfg, data)
        _, sc = train(_model_config(target, "hatnet"), tcfg, data)
        runs["finetune"].append({"seed": seed, "val_map": ft[-1]["val_map"]})
        runs["scratch"].append({"seed": seed, "val_map": sc[-1]["val_map"]})
    return {
        "seeds": list(seeds),
        "runs": runs,
        "median_val_map": {k: _median([r["val_map"] for r in v]) for k, v in runs.items()},
    }


def clustering(seeds=range(5), spec: SyntheticSpec = MIXED_SPEC, tcfg: TrainConfig = MIXED_TRAIN) -> dict:
    """k-means on trunk features of test clips, trained versus randomly initialized trunk."""
    runs = {"trained": [], "random": []}
    monotone = True
    for seed in seeds:
        corpus = SyntheticCorpus(replace(spec, seed=seed))
        cfg = _model_config(corpus, "hatnet")
        trained, _ = train(cfg, tcfg.replace(seed=seed), ArrayData.from_corpus(corpus))
        untrained, _ = train(cfg, tcfg.replace(seed=seed, epochs=0), ArrayData.from_corpus(corpus))
        x, _ = corpus.arrays("test")
        rows, classes = single_class_rows(corpus.manifest.split("test"), corpus.spec.dynamic_ids)
        k = corpus.spec.n_dynamic
        for name, ckpt in (("trained", trained), ("random", untrained)):
            feats = extract_features(ckpt, x[rows])
            res = kmeans(feats, k, seed=seed)
            ok = all(is_monotone(h) for h in res.inertia_history)
            monotone &= ok
            runs[name].append({"seed": seed, "accuracy": clustering_accuracy(res.assignments, classes, k),
                               "inertia": res.inertia, "videos": int(len(rows)), "monotone": ok})
    return {
        "seeds": list(seeds),
        "runs": runs,
        "inertia_monotone": monotone,
        "median_accuracy": {k: _median([r["accuracy"] for r in v]) for k, v in runs.items()},
    }


def run(name: str, seeds=range(5), base_seed: int = 0) -> dict:
    seeds = [base_seed + s for s in seeds]
    if name == "overfit":
        return {"runs": [overfit(seed) for seed in seeds]}
    protocols = {"fusion": fusion, "incremental": incremental, "transfer": transfer, "clustering": clustering}
    if name not in protocols:
        raise ValueError(f"unknown experiment {name!r}")
    return protocols[name](seeds)
