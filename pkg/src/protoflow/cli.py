"""``protoflow`` command line: data generation, the four pipeline stages, benchmarks, explanations.

Every subcommand resolves one RunConfig (JSON file, then flags), writes it to
``<out>/run_config.json`` before doing any work, and writes all results to files.
Re-running ``protoflow <cmd> --config <out>/run_config.json`` reproduces the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .evalx import (distance_trace, evaluate_split, export_embeddings, fewshot_benchmark, nearest_slot,
                    node_outlier_scores, summarize, window_sweep, write_bench, write_metrics, write_sweep)
from .graphs import (DataError, FeatureSpec, GeneratorConfig, Manifest, build_dsg, generate_synthetic,
                     load_dataset, split_windows)
from .model import CheckpointError, EncoderConfig, load_checkpoint, save_checkpoint
from .pipeline import (TrainConfig, calibrate, embed_all, finetune, infer, pretrain,
                       prototypes_from_windows, write_history)

log = logging.getLogger("protoflow")

COMMANDS = ("gen-data", "pretrain", "init-prototypes", "finetune", "evaluate", "fewshot",
            "sweep-window", "explain")
ENCODER_KEYS = ("num_layers", "hidden_dim", "encoding_dim", "heads", "slope", "edge_emb_dim")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    data: str = None
    manifest: str = None
    checkpoint: str = None
    out: str = "runs/latest"
    threads: int = 1
    generator: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def generator_config(self):
        return GeneratorConfig.from_json(self.generator)

    def train_config(self):
        return TrainConfig.from_json(self.train)

    def encoder_config(self, input_dim, num_classes):
        kw = {k: v for k, v in self.encoder.items() if k in ENCODER_KEYS}
        return EncoderConfig.desk(input_dim, num_classes, **kw)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise DataError(f"unknown config keys: {sorted(extra)}")
        return cls(**obj)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--window", type=int)
    common.add_argument("--epochs", type=int, help="sets both pretraining and fine-tuning epochs")
    common.add_argument("--k", type=int, help="prototypes per class")
    common.add_argument("--data", help="graphs.jsonl or a directory holding graphs.jsonl")
    common.add_argument("--manifest", help="manifest.json (default: next to the data)")
    common.add_argument("--checkpoint", help="input checkpoint")
    common.add_argument("--out", help="output directory (PROTOFLOW_OUT overrides)")
    common.add_argument("--threads", type=int, help="BLAS thread cap (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="protoflow", description="Prototype-based surgical workflow recognition on scene graphs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    sub.add_parser("pretrain", parents=[common], help="autoencoder + phase head training")
    sub.add_parser("init-prototypes", parents=[common], help="k-means prototypes from a pretrained encoder")
    sub.add_parser("finetune", parents=[common], help="prototype fine-tuning and calibration")
    ev = sub.add_parser("evaluate", parents=[common], help="per-video metrics and embedding export")
    ev.add_argument("--split", choices=("train", "val", "test"), help="default: test")
    fs = sub.add_parser("fewshot", parents=[common], help="ProtoFlow vs head-only baseline on n videos")
    fs.add_argument("--n", type=int, nargs="+", help="training video counts (default 1 2 5)")
    fs.add_argument("--seeds", type=int, nargs="+", help="default 0 1 2")
    sw = sub.add_parser("sweep-window", parents=[common], help="test metrics per temporal window")
    sw.add_argument("--windows", type=int, nargs="+", help="default 1 5 10 20 30 60")
    sw.add_argument("--seeds", type=int, nargs="+", help="default 0")
    ex = sub.add_parser("explain", parents=[common], help="distance trace and node outliers for one video")
    ex.add_argument("--video", help="video id (default: first test video)")
    ex.add_argument("--frame", type=int, help="frame for node outliers (default: max distance)")
    return p


def resolve_config(args, env=None):
    env = os.environ if env is None else env
    if args.config:
        try:
            rc = RunConfig.from_json(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
    else:
        rc = RunConfig()
    rc.command = args.command
    for name in ("data", "manifest", "checkpoint", "out", "threads"):
        if getattr(args, name) is not None:
            setattr(rc, name, getattr(args, name))
    if env.get("PROTOFLOW_OUT"):
        rc.out = env["PROTOFLOW_OUT"]
    if args.seed is not None:
        rc.generator["seed"] = args.seed
        rc.train["seed"] = args.seed
    if args.window is not None:
        rc.train["window"] = args.window
    if args.epochs is not None:
        rc.train["pretrain_epochs"] = rc.train["finetune_epochs"] = args.epochs
    if args.k is not None:
        rc.train["k"] = args.k
    for name in ("split", "n", "seeds", "windows", "video", "frame"):
        val = getattr(args, name, None)
        if val is not None:
            rc.options[name] = val
    if rc.threads < 1:
        raise UsageError("--threads must be >= 1")
    # resolve fully (and validate) so the echoed config does not depend on code defaults
    rc.train = asdict(rc.train_config())
    bad = set(rc.encoder) - set(ENCODER_KEYS)
    if bad:
        raise DataError(f"unknown encoder keys: {sorted(bad)}")
    if rc.command == "gen-data":
        rc.generator = rc.generator_config().to_json()
    return rc


# ---------------------------------------------------------------- helpers


def _data_paths(rc):
    if rc.data is None:
        raise UsageError("--data is required")
    data = Path(rc.data)
    if data.is_dir():
        data = data / "graphs.jsonl"
    manifest = Path(rc.manifest) if rc.manifest else data.parent / "manifest.json"
    return data, manifest


def _load(rc):
    data, mpath = _data_paths(rc)
    try:
        manifest = Manifest.load(mpath)
    except OSError as exc:
        raise DataError(f"cannot read manifest {mpath}: {exc}") from exc
    try:
        videos = load_dataset(data, manifest.node_classes, manifest.num_classes)
    except OSError as exc:
        raise DataError(f"cannot read data {data}: {exc}") from exc
    manifest.split.check(videos)
    return videos, manifest


def _spec(manifest, cfg):
    return FeatureSpec.from_manifest(manifest, cfg.offset_buckets)


def _checkpoint(rc, need_protos=False):
    if rc.checkpoint is None:
        raise UsageError("--checkpoint is required")
    try:
        ck = load_checkpoint(rc.checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {rc.checkpoint}: {exc}") from exc
    if need_protos and ck.protos is None:
        raise DataError(f"{rc.checkpoint} has no prototypes; run init-prototypes first")
    return ck


def _check_dims(ck, spec, manifest):
    if ck.config.input_dim != spec.dim or ck.config.num_classes != manifest.num_classes:
        raise DataError("checkpoint dimensions do not match the dataset")


def _val_metrics(val, params, enc, cfg, protos=None):
    if not val:
        return [], {"accuracy": float("nan"), "macro_f1": float("nan")}
    return evaluate_split(val, params, enc, cfg, protos)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(rc, out):
    data = generate_synthetic(rc.generator_config())
    data.write(out)
    log.info("wrote %d videos to %s", len(data.videos), out)


def cmd_pretrain(rc, out):
    videos, manifest = _load(rc)
    cfg = rc.train_config()
    spec = _spec(manifest, cfg)
    enc = rc.encoder_config(spec.dim, manifest.num_classes)
    train = split_windows(videos, manifest.split.train, cfg.window, spec)
    val = split_windows(videos, manifest.split.val, cfg.window, spec)
    params, history = pretrain(train, val, enc, cfg)
    write_history(history, out / "pretrain_history.csv")
    save_checkpoint(out / "pretrain.pfl", params, enc, meta={"stage": "pretrain"})
    write_metrics(*_val_metrics(val, params, enc, cfg), out / "metrics_val.csv")


def cmd_init_prototypes(rc, out):
    videos, manifest = _load(rc)
    cfg = rc.train_config()
    spec = _spec(manifest, cfg)
    ck = _checkpoint(rc)
    _check_dims(ck, spec, manifest)
    train = split_windows(videos, manifest.split.train, cfg.window, spec)
    protos = prototypes_from_windows(train, ck.params, ck.config, cfg, manifest.num_classes)
    save_checkpoint(out / "init.pfl", ck.params, ck.config, protos, meta={"stage": "init-prototypes"})
    export_embeddings(embed_all(train, ck.params, ck.config, cfg), protos, out / "embeddings_train.csv")


def cmd_finetune(rc, out):
    videos, manifest = _load(rc)
    cfg = rc.train_config()
    spec = _spec(manifest, cfg)
    ck = _checkpoint(rc, need_protos=True)
    _check_dims(ck, spec, manifest)
    if ck.protos.k != cfg.k:
        raise DataError(f"checkpoint has K={ck.protos.k} prototypes per class but config asks for K={cfg.k}")
    train = split_windows(videos, manifest.split.train, cfg.window, spec)
    val = split_windows(videos, manifest.split.val, cfg.window, spec)
    params, protos, history = finetune(train, val, ck.params, ck.protos, ck.config, cfg)
    calibrate(train, params, protos, ck.config, cfg)
    write_history(history, out / "finetune_history.csv")
    save_checkpoint(out / "model.pfl", params, ck.config, protos, meta={"stage": "finetune"})
    write_metrics(*_val_metrics(val, params, ck.config, cfg, protos), out / "metrics_val.csv")


def cmd_evaluate(rc, out):
    videos, manifest = _load(rc)
    cfg = rc.train_config()
    spec = _spec(manifest, cfg)
    ck = _checkpoint(rc)
    _check_dims(ck, spec, manifest)
    split = rc.options.get("split", "test")
    dsgs = split_windows(videos, getattr(manifest.split, split), cfg.window, spec)
    if not dsgs:
        raise DataError(f"{split} split is empty")
    rows, agg = evaluate_split(dsgs, ck.params, ck.config, cfg, ck.protos)
    write_metrics(rows, agg, out / f"metrics_{split}.csv")
    if ck.protos is not None:
        export_embeddings(embed_all(dsgs, ck.params, ck.config, cfg), ck.protos, out / f"embeddings_{split}.csv")
    log.info("%s: accuracy %.4f macro-F1 %.4f", split, agg["accuracy"], agg["macro_f1"])


def cmd_fewshot(rc, out):
    videos, manifest = _load(rc)
    cfg = rc.train_config()
    spec = _spec(manifest, cfg)
    enc = rc.encoder_config(spec.dim, manifest.num_classes)
    n_list = tuple(rc.options.get("n", (1, 2, 5)))
    if max(n_list) > len(manifest.split.train) or min(n_list) < 1:
        raise DataError(f"n must lie in 1..{len(manifest.split.train)}")
    rows = fewshot_benchmark(videos, manifest, spec, cfg, n_list, tuple(rc.options.get("seeds", (0, 1, 2))), enc)
    write_bench(rows, out / "fewshot.csv")
    with open(out / "fewshot_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "method", "accuracy", "accuracy_std", "f1", "f1_std", "runs"])
        for s in summarize(rows):
            w.writerow([s["n"], s["method"], repr(float(s["accuracy"])), repr(float(s["accuracy_std"])),
                        repr(float(s["f1"])), repr(float(s["f1_std"])), s["runs"]])


def cmd_sweep_window(rc, out):
    videos, manifest = _load(rc)
    cfg = rc.train_config()
    spec = _spec(manifest, cfg)
    enc = rc.encoder_config(spec.dim, manifest.num_classes)
    windows = tuple(rc.options.get("windows", (1, 5, 10, 20, 30, 60)))
    if min(windows) < 1:
        raise DataError("window sizes must be >= 1")
    rows = window_sweep(videos, manifest, spec, cfg, windows, tuple(rc.options.get("seeds", (0,))), enc)
    write_bench(rows, out / "sweep_runs.csv")
    write_sweep(rows, out / "sweep.csv")


def cmd_explain(rc, out):
    videos, manifest = _load(rc)
    cfg = rc.train_config()
    spec = _spec(manifest, cfg)
    ck = _checkpoint(rc, need_protos=True)
    _check_dims(ck, spec, manifest)
    if ck.protos.calib_mu is None:
        raise DataError("checkpoint prototypes are not calibrated; use the finetune output")
    vid = rc.options.get("video") or (manifest.split.test or sorted(videos))[0]
    if vid not in videos:
        raise DataError(f"unknown video {vid!r}")
    frames = videos[vid]
    result = infer(frames, ck.params, ck.protos, ck.config, cfg.window, spec, cfg)
    report = distance_trace(result, ck.protos, cfg.deviation_lambda)
    report.write_jsonl(out / "deviation.jsonl")
    with open(out / "intervals.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "start", "end"])
        for s, e in report.intervals:
            w.writerow([vid, s, e])
    frame = rc.options.get("frame")
    if frame is None:
        t = int(np.argmax(report.min_dist - report.tau))
    else:
        pos = [i for i, sg in enumerate(frames) if sg.frame_idx == frame]
        if not pos:
            raise DataError(f"{vid} has no frame {frame}")
        t = pos[0]
    dsg = build_dsg(frames, cfg.window, t, spec)
    slot = nearest_slot(dsg, ck.params, ck.protos, ck.config, within_class=int(result.pred[t]))
    nodes = node_outlier_scores(dsg, ck.params, ck.protos, slot, videos, ck.config, cfg.window, spec)
    ref = ck.protos.medoid_ref[slot]
    with open(out / "node_outliers.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame_idx", "slot", "medoid_video", "medoid_frame", "node",
                    "node_id", "class_id", "offset", "score", "matched"])
        for i in nodes.ranking():
            w.writerow([vid, frames[t].frame_idx, slot, ref[0], ref[1], int(i), int(nodes.node_ids[i]),
                        int(nodes.class_id[i]), int(nodes.node_offset[i]), repr(float(nodes.scores[i])),
                        "" if nodes.matched[i] is None else nodes.matched[i]])
    log.info("%s: %d flagged intervals", vid, len(report.intervals))


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "init-prototypes": cmd_init_prototypes,
            "finetune": cmd_finetune, "evaluate": cmd_evaluate, "fewshot": cmd_fewshot,
            "sweep-window": cmd_sweep_window, "explain": cmd_explain}


def main(argv=None, env=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        rc = resolve_config(args, env)
        out = Path(rc.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(rc.to_json(), indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
        with threadpool_limits(rc.threads):
            HANDLERS[rc.command](rc, out)
    except UsageError as exc:
        print(f"protoflow: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"protoflow: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
