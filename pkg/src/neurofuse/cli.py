"""Command-line pipeline driver.

One executable, eight subcommands covering the full workflow:

    synth     generate a planted benchmark (dataset + knowledge + truth)
    pretrain  train the multimodal model end to end
    explain   learn per-group importance masks against a frozen checkpoint
    finetune  mask-guided augmentation fine-tuning
    eval      metrics (acc/auc/f1) for a checkpoint on a split
    saliency  per-group node-importance tables from a mask file
    kdist     per-group knowledge-importance histograms
    ksub      subsample a knowledge archive
    recovery  compare a mask file against generator ground truth

Machine-readable JSON goes to stdout; logs go to stderr. Every run with an
``--out`` destination writes a run manifest recording config, seeds, input
hashes, and metric outputs. Exit codes: 0 ok, 1 invalid input, 2 runtime or
numeric failure, 64 usage errors.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import augment as aug
from . import bench, dataio, masks
from . import model as mdl
from .tensor import NumericDomainError, Tensor, no_grad

log = logging.getLogger("neurofuse")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2
EXIT_USAGE = 64

FORMAT_VERSIONS = {"cnx": "cnx-v1", "kemb": 1, "checkpoint": 1, "masks": 1}


class _UsageExit(Exception):
    def __init__(self, code: int):
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise _UsageExit(EXIT_USAGE)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, config: dict, inputs: dict,
                    metrics: dict, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {path: _sha256(path) for path in inputs.values() if path},
        "versions": FORMAT_VERSIONS,
        "wall_clock_s": round(time.time() - started, 3),
        "metrics": metrics,
    }
    os.makedirs(out_dir, exist_ok=True)
    tmp = os.path.join(out_dir, ".run_manifest.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "run_manifest.json"))


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _load_inputs(data: str, kemb: str, feature_mode: str):
    ds = dataio.load_dataset(data, feature_mode=feature_mode)
    kb = dataio.load_knowledge(kemb)
    return ds, kb


def _synth(args) -> int:
    started = time.time()
    spec = bench.SynthSpec(
        subjects_per_class=args.subjects_per_class,
        num_nodes=args.num_nodes,
        num_knowledge=args.num_knowledge,
        planted_edges=args.planted_edges,
        planted_knowledge=args.planted_knowledge,
        signal_strength=args.delta,
        noise_scale=args.noise_scale,
        knowledge_dim=args.knowledge_dim,
        knowledge_gain=args.knowledge_gain,
        groups=tuple(args.groups.split(",")),
        seed=args.seed,
    )
    ds, kb, truth = bench.generate(spec)
    os.makedirs(args.out, exist_ok=True)
    ds_path = os.path.join(args.out, "ds.jsonl")
    kb_path = os.path.join(args.out, "kb.kemb")
    truth_path = os.path.join(args.out, "truth.json")
    dataio.save_dataset(ds, ds_path)
    dataio.save_knowledge(kb, kb_path)
    bench.save_truth(truth, truth_path)
    _write_manifest(args.out, "synth", dataclasses.asdict(spec), {}, {}, started)
    _emit({"dataset": ds_path, "kemb": kb_path, "truth": truth_path,
           "subjects": len(ds.subjects), "knowledge": kb.count})
    return EXIT_OK


def _pretrain(args) -> int:
    started = time.time()
    ds, kb = _load_inputs(args.data, args.kemb, args.feature_mode)
    split = dataio.split_dataset(
        ds, (args.train_ratio, args.val_ratio, args.test_ratio), seed=args.seed,
        stratify_by=args.stratify_by,
    )
    config = mdl.ModelConfig(
        arch=args.arch,
        num_nodes=ds.num_nodes,
        num_classes=ds.num_classes,
        knowledge_dim=kb.dim,
        d_hidden=args.d_hidden,
        d_fusion=args.d_fusion,
        backbone_layers=args.backbone_layers,
        fusion_layers=args.fusion_layers,
        gat_heads=args.gat_heads,
        feature_mode=args.feature_mode,
    )
    model = mdl.build_model(config, seed=args.seed)
    train_cfg = mdl.TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        weight_decay=args.weight_decay,
        optimizer=args.optimizer,
    )
    log.info("pretraining %s on %d subjects", args.arch, len(split.train))
    model, history = mdl.pretrain(model, ds, kb, split, train_cfg,
                                  knowledge_enabled=not args.severed)
    run_config = {
        "data": os.path.abspath(args.data),
        "kemb": os.path.abspath(args.kemb),
        "split": {"ratios": [args.train_ratio, args.val_ratio, args.test_ratio],
                  "seed": args.seed, "stratify_by": args.stratify_by},
        "train": dataclasses.asdict(train_cfg),
        "severed": args.severed,
    }
    mdl.save_checkpoint(model, args.out, config=run_config, seed=args.seed)
    dataio.save_split(split, os.path.join(args.out, "split.json"))
    with open(os.path.join(args.out, "history.json"), "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    best = max(history, key=lambda h: (h["val_acc"], -h["epoch"])) if history else None
    metrics = {"best_epoch": best["epoch"], "val_acc": best["val_acc"]} if best else {}
    _write_manifest(args.out, "pretrain", run_config,
                    {"data": args.data, "kemb": args.kemb}, metrics, started)
    _emit({"checkpoint": args.out, **metrics})
    return EXIT_OK


def _resolve_ckpt_inputs(args, manifest: dict) -> tuple[str, str, dataio.Split]:
    cfg = manifest.get("config", {})
    data = args.data or cfg.get("data")
    kemb = args.kemb or cfg.get("kemb")
    if not data or not kemb:
        raise dataio.ValidationError(
            "checkpoint manifest lacks data paths; pass --data and --kemb"
        )
    split_path = args.split_file or os.path.join(args.ckpt, "split.json")
    split = dataio.load_split(split_path)
    return data, kemb, split


def _explain(args) -> int:
    started = time.time()
    model, manifest = mdl.load_checkpoint(args.ckpt)
    data, kemb, split = _resolve_ckpt_inputs(args, manifest)
    ds, kb = _load_inputs(data, kemb, model.config.feature_mode)
    if ds.num_nodes != model.config.num_nodes:
        raise dataio.ValidationError(
            f"dataset has {ds.num_nodes} nodes but checkpoint expects "
            f"{model.config.num_nodes}"
        )
    if kb.dim != model.config.knowledge_dim:
        raise dataio.ValidationError(
            f"knowledge dim {kb.dim} does not match checkpoint "
            f"{model.config.knowledge_dim}"
        )
    cfg = masks.ExplainConfig(
        lambdas=tuple(args.lambdas),
        tau=args.tau,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=args.seed,
    )
    log.info("learning masks for groups %s", ds.groups)
    maskset = masks.learn_masks(model, ds, kb, split.train, cfg)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    masks.save_masks(maskset, args.out, num_knowledge=kb.count)
    history_path = os.path.splitext(args.out)[0] + "_history.json"
    with open(history_path, "w", encoding="utf-8") as fh:
        json.dump(maskset.history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run_config = {"ckpt": os.path.abspath(args.ckpt), "explain": dataclasses.asdict(cfg)}
    _write_manifest(out_dir, "explain", run_config,
                    {"data": data, "kemb": kemb}, {}, started)
    _emit({"masks": args.out, "groups": sorted(maskset.pairs)})
    return EXIT_OK


def _finetune(args) -> int:
    started = time.time()
    model, manifest = mdl.load_checkpoint(args.ckpt)
    data, kemb, split = _resolve_ckpt_inputs(args, manifest)
    ds, kb = _load_inputs(data, kemb, model.config.feature_mode)
    maskset = masks.load_masks(args.masks)
    cfg = aug.AugmentConfig(
        threshold=args.threshold,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    log.info("fine-tuning with threshold %.2f", args.threshold)
    model, history = aug.finetune(model, maskset, ds, kb, split, cfg)
    run_config = {
        "ckpt": os.path.abspath(args.ckpt),
        "masks": os.path.abspath(args.masks),
        "data": os.path.abspath(data),
        "kemb": os.path.abspath(kemb),
        "augment": dataclasses.asdict(cfg),
    }
    mdl.save_checkpoint(model, args.out, config=run_config, seed=args.seed)
    dataio.save_split(split, os.path.join(args.out, "split.json"))
    with open(os.path.join(args.out, "history.json"), "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    best = max(history, key=lambda h: (h["val_acc"], -h["epoch"])) if history else None
    metrics = {"best_epoch": best["epoch"], "val_acc": best["val_acc"]} if best else {}
    _write_manifest(args.out, "finetune", run_config,
                    {"data": data, "kemb": kemb, "masks": args.masks}, metrics, started)
    _emit({"checkpoint": args.out, **metrics})
    return EXIT_OK


def _eval(args) -> int:
    started = time.time()
    model, manifest = mdl.load_checkpoint(args.ckpt)
    data, kemb, split = _resolve_ckpt_inputs(args, manifest)
    ds, kb = _load_inputs(data, kemb, model.config.feature_mode)
    indices = getattr(split, args.split)
    if args.threads > 1:
        metrics = _evaluate_parallel(model, ds, kb, indices, args.threads)
    else:
        metrics = bench.evaluate(model, ds, kb, indices)
    payload = metrics.to_dict()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(args.out, "eval",
                        {"ckpt": os.path.abspath(args.ckpt), "split": args.split},
                        {"data": data, "kemb": kemb}, payload, started)
    _emit(payload)
    return EXIT_OK


def _evaluate_parallel(model, ds, kb, indices, threads: int) -> bench.Metrics:
    # read-only model; per-subject forwards are independent
    logits = np.zeros((len(indices), ds.num_classes))
    labels = np.zeros(len(indices), dtype=np.int64)

    def work(row_i):
        row, i = row_i
        g = ds.subjects[i]
        with no_grad():
            out = mdl.forward(model, g, kb)
        return row, out.data, g.label

    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        for row, data, label in pool.map(work, enumerate(indices)):
            logits[row] = data
            labels[row] = label
    probs = bench._softmax_rows(logits)
    preds = probs.argmax(axis=1)
    return bench.Metrics(
        acc=float((preds == labels).mean()),
        auc=bench.rank_auc(probs[:, 1], labels),
        f1=bench.macro_f1(labels, preds, ds.num_classes),
    )


def _saliency(args) -> int:
    started = time.time()
    maskset = masks.load_masks(args.masks)
    atlas = None
    if args.data:
        atlas = dataio.load_dataset(args.data).node_atlas
    os.makedirs(args.out, exist_ok=True)
    files = {}
    for tag in sorted(maskset.pairs):
        pair = maskset.pairs[tag]
        jp = os.path.join(args.out, f"saliency_{tag}.json")
        cp = os.path.join(args.out, f"saliency_{tag}.csv")
        masks.write_saliency(pair, atlas, jp, cp)
        files[tag] = {"json": jp, "csv": cp}
    _write_manifest(args.out, "saliency", {"masks": os.path.abspath(args.masks)},
                    {"masks": args.masks}, {}, started)
    _emit({"saliency": files})
    return EXIT_OK


def _kdist(args) -> int:
    started = time.time()
    maskset = masks.load_masks(args.masks)
    os.makedirs(args.out, exist_ok=True)
    files = {}
    for tag in sorted(maskset.pairs):
        pair = maskset.pairs[tag]
        jp = os.path.join(args.out, f"kdist_{tag}.json")
        cp = os.path.join(args.out, f"kdist_{tag}.csv")
        masks.write_knowledge_histogram(pair, jp, cp)
        files[tag] = {"json": jp, "csv": cp}
    _write_manifest(args.out, "kdist", {"masks": os.path.abspath(args.masks)},
                    {"masks": args.masks}, {}, started)
    _emit({"kdist": files})
    return EXIT_OK


def _ksub(args) -> int:
    started = time.time()
    kb = dataio.load_knowledge(args.kemb)
    sub = dataio.subsample_knowledge(kb, args.fraction, seed=args.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    dataio.save_knowledge(sub, args.out)
    _write_manifest(out_dir, "ksub",
                    {"fraction": args.fraction, "seed": args.seed},
                    {"kemb": args.kemb}, {"rows": sub.count}, started)
    _emit({"kemb": args.out, "rows": sub.count, "dim": sub.dim})
    return EXIT_OK


def _recovery(args) -> int:
    maskset = masks.load_masks(args.masks)
    truth = bench.load_truth(args.truth)
    report = bench.mask_recovery(maskset, truth)
    _emit({"groups": report})
    return EXIT_OK


def _add_common_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=mdl.ARCHS, default="gcn")
    p.add_argument("--d-hidden", type=int, default=64)
    p.add_argument("--d-fusion", type=int, default=64)
    p.add_argument("--backbone-layers", type=int, default=2)
    p.add_argument("--fusion-layers", type=int, default=1)
    p.add_argument("--gat-heads", type=int, default=1)
    p.add_argument("--feature-mode", choices=dataio.FEATURE_MODES, default="identity")


def build_parser() -> _Parser:
    parser = _Parser(prog="neurofuse", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects-per-class", type=int, default=40)
    p.add_argument("--num-nodes", type=int, default=16)
    p.add_argument("--num-knowledge", type=int, default=64)
    p.add_argument("--planted-edges", type=int, default=8)
    p.add_argument("--planted-knowledge", type=int, default=8)
    p.add_argument("--delta", type=float, default=0.4)
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.add_argument("--knowledge-dim", type=int, default=16)
    p.add_argument("--knowledge-gain", type=float, default=3.0)
    p.add_argument("--groups", default="female,male")
    p.set_defaults(func=_synth)

    p = sub.add_parser("pretrain", help="train the multimodal model")
    p.add_argument("--data", required=True)
    p.add_argument("--kemb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--optimizer", choices=("adam", "sgd_momentum"), default="adam")
    p.add_argument("--train-ratio", type=float, default=0.7)
    p.add_argument("--val-ratio", type=float, default=0.1)
    p.add_argument("--test-ratio", type=float, default=0.2)
    p.add_argument("--stratify-by", choices=("label", "group"), default="label")
    p.add_argument("--severed", action="store_true",
                   help="train with all fusion edges removed (backbone only)")
    _add_common_model_flags(p)
    p.set_defaults(func=_pretrain)

    p = sub.add_parser("explain", help="learn importance masks on a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="masks.json destination")
    p.add_argument("--data")
    p.add_argument("--kemb")
    p.add_argument("--split-file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--lambdas", type=float, nargs=4, default=[2.0, 2.0, 0.1, 0.05],
                   metavar=("AGREE", "LABEL", "SPARSE", "DISCRETE"))
    p.set_defaults(func=_explain)

    p = sub.add_parser("finetune", help="augmentation fine-tuning guided by masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--kemb")
    p.add_argument("--split-file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--data")
    p.add_argument("--kemb")
    p.add_argument("--split-file")
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_eval)

    p = sub.add_parser("saliency", help="export per-group node importance tables")
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="optional dataset for atlas names")
    p.set_defaults(func=_saliency)

    p = sub.add_parser("kdist", help="export per-group knowledge importance histograms")
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_kdist)

    p = sub.add_parser("ksub", help="subsample a knowledge archive")
    p.add_argument("--kemb", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_ksub)

    p = sub.add_parser("recovery", help="score masks against generator ground truth")
    p.add_argument("--masks", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=_recovery)

    return parser


def _merge_config_file(argv: list[str], parser: _Parser) -> list[str]:
    # --config FILE provides defaults; explicit flags win
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise _UsageExit(EXIT_USAGE)
    path = argv[idx + 1]
    with open(path, "r", encoding="utf-8") as fh:
        defaults = json.load(fh)
    rest = argv[:idx] + argv[idx + 2 :]
    merged = list(rest[:1])
    for key, value in defaults.items():
        flag = "--" + key.replace("_", "-")
        if flag in rest:
            continue
        if isinstance(value, bool):
            if value:
                merged.append(flag)
        elif isinstance(value, list):
            merged.append(flag)
            merged.extend(str(v) for v in value)
        else:
            merged.extend([flag, str(value)])
    merged.extend(rest[1:])
    return merged


def run(argv: list[str]) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        argv = _merge_config_file(list(argv), parser)
        args = parser.parse_args(argv)
    except _UsageExit as e:
        return e.code
    except SystemExit as e:  # --help lands here with code 0
        return int(e.code or 0)
    try:
        return args.func(args)
    except (mdl.TrainingError, NumericDomainError, ArithmeticError, RuntimeError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    except (ValueError, OSError) as e:
        # validation, format, grouping, and file errors are all bad input
        log.error("%s", e)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
