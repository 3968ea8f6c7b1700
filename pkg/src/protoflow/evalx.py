"""Per-video metrics, deviation traces, node outlier scores, purity, exports and benchmarks."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .graphs import build_dsg, collate, few_shot_subsample, split_windows
from .model import encode
from .numerics import Tensor, pairwise_distance
from .pipeline import evaluate_windows, pretrain, run_protoflow

log = logging.getLogger(__name__)


@dataclass
class VideoMetrics:
    video_id: str
    accuracy: float
    macro_f1: float
    per_class: dict = field(default_factory=dict)


def video_metrics(video_id, pred, label):
    pred, label = np.asarray(pred), np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"{video_id}: {len(pred)} predictions for {len(label)} labels")
    if not len(label):
        raise ValueError(f"{video_id}: no frames")
    per = {}
    for c in np.unique(label):
        tp = int(np.sum((pred == c) & (label == c)))
        npred = int(np.sum(pred == c))
        ntrue = int(np.sum(label == c))
        prec = tp / npred if npred else 0.0
        rec = tp / ntrue
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per[int(c)] = {"precision": prec, "recall": rec, "f1": f1}
    acc = int(np.sum(pred == label)) / len(label)
    return VideoMetrics(video_id, acc, float(np.mean([v["f1"] for v in per.values()])), per)


def per_video_metrics(preds, labels):
    """``preds``/``labels``: dicts video_id -> per-frame arrays. Videos weigh equally."""
    if set(preds) != set(labels):
        raise ValueError("prediction and label videos differ")
    rows = [video_metrics(v, preds[v], labels[v]) for v in sorted(labels)]
    agg = {"accuracy": float(np.mean([r.accuracy for r in rows])) if rows else float("nan"),
           "macro_f1": float(np.mean([r.macro_f1 for r in rows])) if rows else float("nan")}
    return rows, agg


def group_by_video(dsgs, pred):
    preds, labels = {}, {}
    for g, p in zip(dsgs, pred):
        preds.setdefault(g.video_id, []).append(int(p))
        labels.setdefault(g.video_id, []).append(g.label)
    return preds, labels


def evaluate_split(dsgs, params, enc_cfg, cfg, protos=None):
    ev = evaluate_windows(dsgs, params, enc_cfg, cfg, protos)
    return per_video_metrics(*group_by_video(dsgs, ev["pred"]))


def write_metrics(rows, agg, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "accuracy", "macro_f1"])
        for r in rows:
            w.writerow([r.video_id, repr(r.accuracy), repr(r.macro_f1)])
        w.writerow(["__mean__", repr(agg["accuracy"]), repr(agg["macro_f1"])])


# ---------------------------------------------------------------- deviation analysis


@dataclass
class DeviationReport:
    video_id: str
    frame_idx: np.ndarray
    pred: np.ndarray
    D: np.ndarray
    min_dist: np.ndarray
    tau: np.ndarray
    flags: np.ndarray
    intervals: list

    def rows(self):
        for i in range(len(self.frame_idx)):
            yield {"video_id": self.video_id, "frame_idx": int(self.frame_idx[i]),
                   "pred": int(self.pred[i]), "min_dist": float(self.min_dist[i]),
                   "tau": float(self.tau[i]), "flag": bool(self.flags[i])}

    def write_jsonl(self, path, mode="w"):
        with open(path, mode, encoding="utf-8", newline="\n") as fh:
            for row in self.rows():
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def flagged_intervals(flags, frame_idx=None):
    """Maximal runs of True as inclusive (start, end) frame indices."""
    flags = np.asarray(flags, dtype=bool)
    idx = np.arange(len(flags)) if frame_idx is None else np.asarray(frame_idx)
    out = []
    start = None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        if not f and start is not None:
            out.append((int(idx[start]), int(idx[i - 1])))
            start = None
    if start is not None:
        out.append((int(idx[start]), int(idx[len(flags) - 1])))
    return out


def distance_trace(result, protos, lam=3.0):
    """Flag frames whose distance to the predicted phase's prototypes exceeds mu + lam*sigma."""
    if protos.calib_mu is None:
        raise ValueError("prototypes are not calibrated; run calibration on the training split first")
    D = np.asarray(result.D)
    pred = np.asarray(result.pred)
    own = np.array([D[i, protos.slots_of(int(p))].min() for i, p in enumerate(pred)]) if len(pred) else np.zeros(0)
    tau_c = protos.calib_mu + lam * protos.calib_sigma
    tau = tau_c[pred] if len(pred) else np.zeros(0)
    flags = own > tau
    return DeviationReport(result.video_id, np.asarray(result.frame_idx), pred, D, own, tau,
                           flags, flagged_intervals(flags, result.frame_idx))


@dataclass
class NodeOutlierReport:
    scores: np.ndarray
    class_id: np.ndarray
    node_ids: np.ndarray
    node_offset: np.ndarray
    matched: list
    slot: int = -1

    def ranking(self):
        return np.argsort(-self.scores, kind="stable")


def node_outlier_scores_against(dsg, medoid, params, enc_cfg, slot=-1):
    """Score each input node by its embedding distance to the closest same-class medoid node."""
    H_in, _ = encode(collate([dsg]), params, enc_cfg)
    H_med, _ = encode(collate([medoid]), params, enc_cfg)
    D = pairwise_distance(Tensor(H_in.data), Tensor(H_med.data)).data
    scores = np.zeros(dsg.num_nodes)
    matched = [None] * dsg.num_nodes
    unmatched = []
    for i in range(dsg.num_nodes):
        same = np.flatnonzero(medoid.class_id == dsg.class_id[i])
        if same.size == 0:
            unmatched.append(i)
            continue
        j = same[int(np.argmin(D[i, same]))]
        scores[i] = D[i, j]
        matched[i] = int(j)
    if unmatched:
        finite = scores[[i for i in range(dsg.num_nodes) if matched[i] is not None]]
        scores[unmatched] = finite.max() if finite.size else 0.0
    return NodeOutlierReport(scores, dsg.class_id.copy(), dsg.node_ids.copy(),
                             dsg.node_offset.copy(), matched, slot)


def node_outlier_scores(dsg, params, protos, slot, videos, enc_cfg, window, spec=None):
    """Compare ``dsg`` with the medoid window of prototype ``slot``."""
    ref = protos.medoid_ref[slot]
    if ref is None:
        raise ValueError(f"prototype slot {slot} has no medoid")
    vid, frame = ref
    frames = videos[vid]
    t = next(i for i, sg in enumerate(frames) if sg.frame_idx == frame)
    medoid = build_dsg(frames, window, t, spec)
    return node_outlier_scores_against(dsg, medoid, params, enc_cfg, slot)


def nearest_slot(dsg, params, protos, enc_cfg, within_class=None):
    _, Z = encode(collate([dsg]), params, enc_cfg)
    D = pairwise_distance(Z, Tensor(protos.P.data)).data[0]
    slots = np.arange(protos.num_slots) if within_class is None else protos.slots_of(within_class)
    return int(slots[np.argmin(D[slots])])


# ---------------------------------------------------------------- sub-techniques and export


def subtechnique_purity(protos, class_id, Z, subtech):
    """Cluster purity of one class's embeddings under nearest-own-prototype assignment."""
    Z, subtech = np.asarray(Z, dtype=np.float64), np.asarray(subtech)
    if not len(Z):
        return float("nan")
    slots = protos.slots_of(class_id)
    D = pairwise_distance(Tensor(Z), Tensor(protos.P.data[slots])).data
    assign = np.argmin(D, axis=1)
    total = 0
    for k in range(len(slots)):
        members = subtech[assign == k]
        if members.size:
            total += np.bincount(members).max()
    return total / len(Z)


def export_embeddings(rows, protos, path):
    """``rows``: (z, label, video_id, frame_idx) tuples; prototypes appended after them."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dz = protos.P.shape[1]
        w.writerow(["video_id", "frame_idx", "label", "is_prototype", "class", "slot"]
                   + [f"z{i}" for i in range(dz)])
        for z, label, vid, frame in rows:
            w.writerow([vid, frame, label, 0, label, ""] + [repr(float(v)) for v in z])
        for s in range(protos.num_slots):
            c = int(protos.class_of[s])
            w.writerow(["", "", c, 1, c, s] + [repr(float(v)) for v in protos.P.data[s]])


# ---------------------------------------------------------------- benchmarks


@dataclass
class BenchRow:
    n: int
    seed: int
    method: str
    accuracy: float
    f1: float


def fewshot_benchmark(videos, manifest, spec, cfg, n_list=(1, 2, 5), seeds=(0, 1, 2), enc_cfg=None):
    """Train ProtoFlow and the head-only baseline on ``n`` sampled videos; test on the full test split."""
    rows = []
    test_cache = {}
    for n in n_list:
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed)
            split = few_shot_subsample(manifest.split, n, seed)
            art = run_protoflow(videos, split, manifest.num_classes, spec, run_cfg, enc_cfg,
                                allow_missing=True)
            test = test_cache.setdefault(cfg.window, split_windows(videos, split.test, cfg.window, spec))
            _, agg = evaluate_split(test, art.params, art.encoder, run_cfg, art.protos)
            rows.append(BenchRow(n, seed, "protoflow", agg["accuracy"], agg["macro_f1"]))
            train = split_windows(videos, split.train, cfg.window, spec)
            val = split_windows(videos, split.val, cfg.window, spec)
            base, _ = pretrain(train, val, art.encoder, run_cfg,
                               epochs=run_cfg.pretrain_epochs + run_cfg.finetune_epochs)
            _, agg = evaluate_split(test, base, art.encoder, run_cfg)
            rows.append(BenchRow(n, seed, "baseline", agg["accuracy"], agg["macro_f1"]))
            log.info("few-shot n=%d seed=%d: protoflow %.3f baseline %.3f",
                     n, seed, rows[-2].accuracy, rows[-1].accuracy)
    return rows


def summarize(rows, key=("n", "method")):
    """Mean and std per group, in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in key), []).append(r)
    out = []
    for k, rs in groups.items():
        acc = np.array([r.accuracy for r in rs])
        f1 = np.array([r.f1 for r in rs])
        out.append(dict(zip(key, k), accuracy=acc.mean(), accuracy_std=acc.std(),
                        f1=f1.mean(), f1_std=f1.std(), runs=len(rs)))
    return out


def write_bench(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "seed", "method", "accuracy", "f1"])
        for r in rows:
            w.writerow([r.n, r.seed, r.method, repr(r.accuracy), repr(r.f1)])


SWEEP_WINDOWS = (1, 5, 10, 20, 30, 60)


def window_sweep(videos, manifest, spec, cfg, windows=SWEEP_WINDOWS, seeds=(0,), enc_cfg=None):
    """ProtoFlow test metrics per temporal window size; ``n`` in each row holds the window."""
    rows = []
    for w in windows:
        for seed in seeds:
            run_cfg = cfg.replace(window=w, seed=seed)
            art = run_protoflow(videos, manifest.split, manifest.num_classes, spec, run_cfg, enc_cfg)
            test = split_windows(videos, manifest.split.test, w, spec)
            _, agg = evaluate_split(test, art.params, art.encoder, run_cfg, art.protos)
            rows.append(BenchRow(w, seed, "protoflow", agg["accuracy"], agg["macro_f1"]))
            log.info("window %d seed %d: acc %.3f f1 %.3f", w, seed, agg["accuracy"], agg["macro_f1"])
    return rows


def write_sweep(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "accuracy", "accuracy_std", "f1", "f1_std", "runs"])
        for s in summarize(rows, key=("n",)):
            w.writerow([s["n"], repr(float(s["accuracy"])), repr(float(s["accuracy_std"])),
                        repr(float(s["f1"])), repr(float(s["f1_std"])), s["runs"]])
