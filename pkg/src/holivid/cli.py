"""Command line entry point: ``holivid <command> ...``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Heavy modules are imported inside the handlers so ``eval`` never loads model code.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

MODEL_KEYS = {"backbone", "mode", "stage_channels", "head_mode", "mr_norm", "frames", "input_size"}
RUN_SECTIONS = {"model", "train", "data", "paths"}
PATH_KEYS = {"out_dir", "pretrained"}

RUN_CONFIG_HELP = """\
run config (JSON, unknown keys rejected):
  model: backbone (r18), mode (hatnet), stage_channels ([64,128,256,512]),
         head_mode (single), mr_norm (true); frames/input_size follow the data
  train: epochs (10), batch_size (8), lr (0.05), momentum (0.9),
         weight_decay (1e-4), lr_steps ([0.5,0.75]), lr_factor (0.1), seed (0),
         active_categories (all six), loss_weights ([1,1,1,1,1,1])
  data:  either {"dir": <output of `dataset synth`>} or synthetic spec fields:
         n_train (64), n_val (32), n_test (32), frames (8), size (32),
         n_static (4), n_dynamic (4), labels_per_video ([1,3]),
         noise_std (0.03), seed (0), still_dots (true)
  paths: out_dir (required), pretrained (checkpoint to finetune from)
set HOLIVID_DETERMINISTIC=1 for bitwise reproducible training.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_text(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


# ------------------------------------------------------------------ taxonomy


def cmd_taxonomy_stats(args) -> int:
    from .manifest import load_manifest
    from .taxonomy import category_stats, load_taxonomy, stats_to_json

    tax = load_taxonomy(args.taxonomy)
    manifest = load_manifest(args.manifest)
    if args.split:
        manifest = manifest.split(args.split)
    _write_text(stats_to_json(category_stats(tax, manifest)), args.out)
    return EXIT_OK


def cmd_taxonomy_coverage(args) -> int:
    from .manifest import load_manifest
    from .taxonomy import coverage_partition, load_taxonomy, subset_key

    cov = coverage_partition(load_taxonomy(args.taxonomy), load_manifest(args.manifest))
    _write_text(json.dumps({subset_key(k): v for k, v in cov.items()}, sort_keys=True, indent=2), args.out)
    return EXIT_OK


def cmd_taxonomy_prune(args) -> int:
    from .manifest import load_manifest, write_manifest
    from .taxonomy import load_taxonomy, prune_by_min_samples, write_taxonomy

    tax, manifest = prune_by_min_samples(load_taxonomy(args.taxonomy), load_manifest(args.manifest), args.min_samples)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_taxonomy(tax, out / "taxonomy.csv")
    write_manifest(manifest, out / "manifest.jsonl")
    print(json.dumps({"labels": len(tax), "videos": len(manifest)}, sort_keys=True))
    return EXIT_OK


def cmd_taxonomy_filter(args) -> int:
    from .taxonomy import filter_machine_tags

    raw = json.loads(Path(args.tags).read_text(encoding="utf-8"))
    tags = [(str(name), float(conf)) for name, conf in raw]
    kept = filter_machine_tags(tags, args.threshold, args.max_tags)
    _write_text(json.dumps([[n, c] for n, c in kept]), args.out)
    return EXIT_OK


# ------------------------------------------------------------------ dataset

SPEC_FLAGS = ("n_train", "n_val", "n_test", "frames", "size", "n_static", "n_dynamic")


def cmd_dataset_synth(args) -> int:
    from .dataset import SyntheticSpec, generate_synthetic, save_spec
    from .manifest import write_manifest
    from .taxonomy import write_taxonomy

    doc = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    for name in SPEC_FLAGS:
        value = getattr(args, name)
        if value is not None:
            doc[name] = value
    if args.noise_std is not None:
        doc["noise_std"] = args.noise_std
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SyntheticSpec.from_dict(doc)
    tax, manifest = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_spec(spec, out / "synthetic.json")
    write_taxonomy(tax, out / "taxonomy.csv")
    write_manifest(manifest, out / "manifest.jsonl")
    print(json.dumps({"labels": len(tax), "videos": len(manifest), "out": str(out)}, sort_keys=True))
    return EXIT_OK


def _load_data_dir(path):
    from .dataset import SyntheticCorpus, load_spec

    return SyntheticCorpus(load_spec(Path(path) / "synthetic.json"))


def cmd_dataset_export(args) -> int:
    from .dataset import render_clip, write_tensor

    corpus = _load_data_dir(args.data)
    try:
        clip = render_clip(args.video_id, corpus.spec)
    except KeyError as exc:
        raise ValueError(str(exc.args[0])) from None
    write_tensor(clip, args.out)
    return EXIT_OK


# ------------------------------------------------------------------ training


def _parse_run_config(doc: dict):
    from .dataset import SyntheticSpec, load_spec
    from .training import TrainConfig

    if not isinstance(doc, dict):
        raise ValueError("run config must be a JSON object")
    unknown = set(doc) - RUN_SECTIONS
    if unknown:
        raise ValueError(f"unknown config key(s): {sorted(unknown)}")
    model = dict(doc.get("model", {}))
    bad = set(model) - MODEL_KEYS
    if bad:
        raise ValueError(f"unknown config key(s) in model: {sorted(bad)}")
    train_cfg = TrainConfig.from_dict(dict(doc.get("train", {})))
    data = dict(doc.get("data", {}))
    if "dir" in data:
        if set(data) != {"dir"}:
            raise ValueError(f"unknown config key(s) in data: {sorted(set(data) - {'dir'})}")
        spec = load_spec(Path(data["dir"]) / "synthetic.json")
    else:
        spec = SyntheticSpec.from_dict(data)
    paths = dict(doc.get("paths", {}))
    bad = set(paths) - PATH_KEYS
    if bad:
        raise ValueError(f"unknown config key(s) in paths: {sorted(bad)}")
    if "out_dir" not in paths:
        raise ValueError("paths.out_dir is required")
    for key, value in (("frames", spec.frames), ("input_size", spec.size)):
        if model.get(key, value) != value:
            raise ValueError(f"model.{key}={model[key]} disagrees with the data ({value})")
        model[key] = value
    return model, train_cfg, spec, paths


def cmd_train(args) -> int:
    from .dataset import SyntheticCorpus
    from .model import ModelConfig, load_checkpoint, save_checkpoint
    from .taxonomy import write_taxonomy
    from .training import ArrayData, finetune, history_to_jsonl, train

    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model_doc, train_cfg, spec, paths = _parse_run_config(doc)
    if args.seed is not None:
        train_cfg = train_cfg.replace(seed=args.seed)
    out = Path(args.out_dir or paths["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    corpus = SyntheticCorpus(spec)
    data = ArrayData.from_corpus(corpus)
    history_path = out / "history.jsonl"
    if "pretrained" in paths:
        source = load_checkpoint(paths["pretrained"])
        ckpt, history = finetune(source, corpus.taxonomy, train_cfg, data, history_path)
    else:
        mcfg = ModelConfig(label_categories=corpus.taxonomy.label_categories, **model_doc)
        ckpt, history = train(mcfg, train_cfg, data, history_path)
    save_checkpoint(ckpt, out / "checkpoint.npz")
    write_taxonomy(corpus.taxonomy, out / "taxonomy.csv")
    last = history[-1] if history else {}
    print(json.dumps({"epochs": len(history), "val_map": last.get("val_map"), "out": str(out)}, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .metrics import predictions_to_jsonl
    from .model import load_checkpoint
    from .training import predict_logits

    ckpt = load_checkpoint(args.checkpoint)
    corpus = _load_data_dir(args.data)
    manifest = corpus.manifest.split(args.split)
    x, _ = corpus.arrays(args.split)
    logits = predict_logits(ckpt.to_model(), x)
    _write_text(predictions_to_jsonl([r.video_id for r in manifest], logits), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from .manifest import load_manifest
    from .metrics import load_predictions, map_report
    from .taxonomy import load_taxonomy

    tax = load_taxonomy(args.taxonomy)
    records = load_manifest(args.manifest).by_id()
    ids, scores = load_predictions(args.predictions)
    missing = [v for v in ids if v not in records]
    if missing:
        raise ValueError(f"predictions for videos absent from the manifest: {missing[:5]}")
    relevance = np.zeros(scores.shape, dtype=np.int64)
    for row, vid in enumerate(ids):
        labels = sorted(records[vid].labels)
        if labels and labels[-1] >= scores.shape[1]:
            raise ValueError(f"video {vid} has label {labels[-1]} outside the prediction width {scores.shape[1]}")
        relevance[row, labels] = 1
    _write_text(map_report(scores, relevance, tax).to_json(), args.out)
    return EXIT_OK


# ------------------------------------------------------------------ features / clustering


def cmd_features(args) -> int:
    from .clustering import extract_features
    from .dataset import write_tensor
    from .model import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    corpus = _load_data_dir(args.data)
    x, _ = corpus.arrays(args.split)
    feats = extract_features(ckpt, x, fingerprint=corpus.taxonomy.fingerprint())
    write_tensor(feats, args.out)
    print(json.dumps({"rows": int(feats.shape[0]), "dim": int(feats.shape[1])}, sort_keys=True))
    return EXIT_OK


def cmd_cluster(args) -> int:
    from .clustering import cluster_report, report_to_json, single_class_rows
    from .dataset import read_tensor

    feats = read_tensor(args.features)
    feats = feats.reshape(feats.shape[0], -1)
    classes = None
    if args.data:
        corpus = _load_data_dir(args.data)
        manifest = corpus.manifest.split(args.split)
        if len(manifest) != len(feats):
            raise ValueError(f"{len(feats)} feature rows but {len(manifest)} videos in split {args.split}")
        label_ids = (
            [int(i) for i in args.label_ids.split(",")] if args.label_ids else corpus.spec.dynamic_ids
        )
        rows, classes = single_class_rows(manifest, label_ids)
        feats = feats[rows]
    report = cluster_report(feats, classes, args.k, seed=args.seed)
    _write_text(report_to_json(report), args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from . import experiments

    result = experiments.run(args.name, seeds=list(range(args.seeds)), base_seed=args.seed)
    _write_text(json.dumps(result, sort_keys=True, indent=2), args.out)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="holivid", description="Holistic video understanding toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tax = sub.add_parser("taxonomy", help="taxonomy statistics and filters")
    tsub = tax.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = tsub.add_parser("stats", help="per-category label/annotation/video counts")
    s.add_argument("--taxonomy", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_taxonomy_stats)
    s = tsub.add_parser("coverage", help="fraction of videos per exact category subset")
    s.add_argument("--taxonomy", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_taxonomy_coverage)
    s = tsub.add_parser("prune", help="drop labels with too few training videos")
    s.add_argument("--taxonomy", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--min-samples", type=int, default=50)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_taxonomy_prune)
    s = tsub.add_parser("filter", help="filter machine tags: JSON list of [name, confidence]")
    s.add_argument("--tags", required=True)
    s.add_argument("--threshold", type=float, default=0.30)
    s.add_argument("--max-tags", type=int, default=30)
    s.add_argument("--out")
    s.set_defaults(func=cmd_taxonomy_filter)

    ds = sub.add_parser("dataset", help="synthetic corpus tools")
    dsub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = dsub.add_parser("synth", help="generate taxonomy.csv, manifest.jsonl and synthetic.json")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON file with synthetic spec fields")
    s.add_argument("--seed", type=int)
    for name in SPEC_FLAGS:
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    s.add_argument("--noise-std", type=float)
    s.set_defaults(func=cmd_dataset_synth)
    s = dsub.add_parser("export", help="write one rendered clip as a flat binary tensor")
    s.add_argument("--data", required=True)
    s.add_argument("--video-id", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset_export)

    s = sub.add_parser("train", help="train or finetune from a run config",
                       epilog=RUN_CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, help="overrides train.seed")
    s.add_argument("--out-dir", help="overrides paths.out_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="write per-video scores as predictions JSONL")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val", choices=("train", "val", "test"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="mAP report from predictions, manifest and taxonomy")
    s.add_argument("--predictions", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--taxonomy", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("features", help="export pooled trunk features as a flat binary tensor")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("cluster", help="k-means on exported features")
    s.add_argument("--features", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data", help="corpus directory providing ground-truth classes")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--label-ids", help="comma-separated label ids that define the classes "
                                       "(default: the corpus's dynamic labels)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("experiment", help="run a desk-scale protocol and print its JSON summary")
    s.add_argument("name", choices=("overfit", "fusion", "incremental", "transfer", "clustering"))
    s.add_argument("--seeds", type=int, default=5, help="number of seeds")
    s.add_argument("--seed", type=int, default=0, help="offset added to every seed")
    s.add_argument("--out")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
