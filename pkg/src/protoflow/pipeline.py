"""Pretraining, prototype initialisation, prototype fine-tuning and distance-based inference."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .graphs import FeatureSpec, collate, make_batches, split_windows, video_windows
from .model import (EncoderConfig, copy_params, decode, decoder_params, encode,
                    encoder_params, head_logits, init_params, head_params)
from .numerics import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    pretrain_epochs: int = 50
    finetune_epochs: int = 50
    lr: float = 3e-4
    lr_step_epochs: int = 20
    lr_gamma: float = 0.5
    batch_size: int = 64
    k: int = 3
    patience: int = 10
    lambda_rec: float = 1.0
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    window: int = 5
    offset_buckets: int = 8
    seed: int = 0
    eval_batch_size: int = 512
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-9
    deviation_lambda: float = 3.0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        for f in ("batch_size", "k", "lr", "eval_batch_size", "offset_buckets"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        for f in ("pretrain_epochs", "finetune_epochs", "patience", "lambda_rec",
                  "lambda_cls", "lambda_reg"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be non-negative")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    @classmethod
    def from_json(cls, obj):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


@dataclass
class LossReport:
    epoch: int
    split: str
    l_rec: float
    l_cls: float
    l_reg: float
    total: float
    accuracy: float


HISTORY_FIELDS = ("epoch", "split", "l_rec", "l_cls", "l_reg", "total", "accuracy")


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.epoch, r.split, repr(r.l_rec), repr(r.l_cls), repr(r.l_reg),
                        repr(r.total), repr(r.accuracy)])


def _stage_seed(seed, stage, epoch):
    return int(np.random.SeedSequence([seed, stage, epoch]).generate_state(1)[0])


def video_mean_accuracy(refs, preds, labels):
    """Accuracy averaged over videos with equal weight per video."""
    per = {}
    for (vid, _), p, y in zip(refs, preds, labels):
        c = per.setdefault(vid, [0, 0])
        c[0] += int(p == y)
        c[1] += 1
    if not per:
        return float("nan")
    return float(np.mean([a / n for a, n in per.values()]))


# ---------------------------------------------------------------- prototypes


@dataclass
class PrototypeSet:
    P: Tensor
    P0: np.ndarray
    num_classes: int
    k: int
    medoid_ref: list = field(default_factory=list)
    calib_mu: np.ndarray = None
    calib_sigma: np.ndarray = None

    @property
    def num_slots(self):
        return self.num_classes * self.k

    @property
    def class_of(self):
        return np.repeat(np.arange(self.num_classes), self.k)

    def slots_of(self, c):
        return np.arange(c * self.k, (c + 1) * self.k)

    @property
    def membership(self):
        M = np.zeros((self.num_slots, self.num_classes))
        M[np.arange(self.num_slots), self.class_of] = 1.0
        return M

    def copy(self):
        return PrototypeSet(
            Tensor(self.P.data.copy(), requires_grad=True, name="proto.P"), self.P0.copy(),
            self.num_classes, self.k, list(self.medoid_ref),
            None if self.calib_mu is None else self.calib_mu.copy(),
            None if self.calib_sigma is None else self.calib_sigma.copy(),
        )

    def to_tables(self):
        meta = {"num_classes": self.num_classes, "k": self.k,
                "medoid_ref": [None if r is None else [r[0], int(r[1])] for r in self.medoid_ref],
                "calibrated": self.calib_mu is not None}
        tensors = [("proto.P", self.P.data), ("proto.P0", self.P0)]
        if self.calib_mu is not None:
            tensors += [("proto.calib_mu", self.calib_mu), ("proto.calib_sigma", self.calib_sigma)]
        return meta, tensors

    @classmethod
    def from_tables(cls, meta, tensors):
        calibrated = meta.get("calibrated", False)
        return cls(
            P=Tensor(tensors["proto.P"], requires_grad=True, name="proto.P"),
            P0=tensors["proto.P0"].copy(),
            num_classes=int(meta["num_classes"]), k=int(meta["k"]),
            medoid_ref=[None if r is None else (r[0], int(r[1])) for r in meta["medoid_ref"]],
            calib_mu=tensors["proto.calib_mu"].copy() if calibrated else None,
            calib_sigma=tensors["proto.calib_sigma"].copy() if calibrated else None,
        )


def kmeans_plusplus(X, k, rng):
    n = X.shape[0]
    centers = [X[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
    return np.array(centers)


def kmeans(X, k, rng, max_iter=100, tol=1e-9):
    """Lloyd's algorithm from k-means++ seeds. Returns centroids, labels, inertia per iteration."""
    X = np.asarray(X, dtype=np.float64)
    C = kmeans_plusplus(X, k, rng)
    inertia = []
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        inertia.append(float(d2[np.arange(len(X)), labels].sum()))
        new = C.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
        shift = np.max(np.linalg.norm(new - C, axis=1))
        C = new
        if shift < tol:
            break
    d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    inertia.append(float(d2[np.arange(len(X)), labels].sum()))
    return C, labels, inertia


def init_prototypes(Z, labels, num_classes, k, seed=0, refs=None, allow_missing=False,
                    max_iter=100, tol=1e-9):
    """Cluster each class's embeddings into ``k`` centroids.

    Classes with fewer than ``k`` embeddings use the embeddings themselves and pad with
    their mean. With ``allow_missing`` an unseen class gets prototypes parked far
    outside the data so it never wins the softmax.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    P = np.zeros((num_classes * k, Z.shape[1]))
    medoids = [None] * (num_classes * k)
    missing = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            if not allow_missing:
                raise ValueError(f"class {c} has no training embeddings")
            missing.append(c)
            continue
        Xc = Z[idx]
        rng = np.random.default_rng([seed, c])
        if idx.size >= k:
            cent, _, _ = kmeans(Xc, k, rng, max_iter, tol)
        else:
            cent, _, _ = kmeans(Xc, idx.size, rng, max_iter, tol)
            cent = np.vstack([cent, np.repeat(Xc.mean(axis=0)[None], k - idx.size, axis=0)])
        P[c * k:(c + 1) * k] = cent
        if refs is not None:
            for j in range(k):
                nearest = idx[int(np.argmin(((Xc - cent[j]) ** 2).sum(-1)))]
                medoids[c * k + j] = tuple(refs[nearest])
    if missing:
        center = Z.mean(axis=0)
        radius = 10.0 * (np.max(np.linalg.norm(Z - center, axis=1)) + 1.0)
        rng = np.random.default_rng([seed, num_classes])
        for c in missing:
            for j in range(k):
                u = rng.normal(size=Z.shape[1])
                P[c * k + j] = center + radius * u / np.linalg.norm(u)
        log.info("classes %s absent from training data; prototypes parked", missing)
    return PrototypeSet(Tensor(P, requires_grad=True, name="proto.P"), P.copy(), num_classes, k, medoids)


def prototype_predict(Z, protos):
    """Returns (yhat, D, q): class scores as averaged slot softmax, distances, class mass q = K*yhat."""
    D = nx.pairwise_distance(Z, protos.P)
    s = nx.softmax_rows(nx.neg(D))
    q = nx.matmul(s, Tensor(protos.membership))
    return nx.scale(q, 1.0 / protos.k), D, q


def refresh_medoids(protos, Z, labels, refs):
    Z, labels = np.asarray(Z), np.asarray(labels)
    P = protos.P.data
    for c in range(protos.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        for s in protos.slots_of(c):
            nearest = idx[int(np.argmin(((Z[idx] - P[s]) ** 2).sum(-1)))]
            protos.medoid_ref[s] = tuple(refs[nearest])


# ---------------------------------------------------------------- forward passes


def _losses(batch, params, enc_cfg, protos=None):
    """Component losses for one batch; prototypes replace the head when given."""
    H, Z = encode(batch, params, enc_cfg)
    x = Tensor(batch.x)
    l_rec = nx.mse_loss(decode(H, params), x)
    if protos is None:
        probs = nx.softmax_rows(head_logits(Z, params))
        l_cls = nx.nll_from_probs(probs, batch.labels)
        l_reg = Tensor(0.0)
    else:
        probs, _, q = prototype_predict(Z, protos)
        l_cls = nx.nll_from_probs(q, batch.labels)
        l_reg = nx.sum_squares(nx.sub(protos.P, Tensor(protos.P0)))
    return l_rec, l_cls, l_reg, probs, Z


def evaluate_windows(dsgs, params, enc_cfg, cfg, protos=None):
    """Tape-free pass over ``dsgs`` in input order."""
    sums = np.zeros(3)
    n = 0
    Zs, preds, probs_all = [], [], []
    for batch in make_batches(dsgs, cfg.eval_batch_size, seed=None):
        l_rec, l_cls, l_reg, probs, Z = _losses(batch, params, enc_cfg, protos)
        b = batch.num_graphs
        sums += b * np.array([l_rec.item(), l_cls.item(), l_reg.item()])
        n += b
        Zs.append(Z.data)
        probs_all.append(probs.data)
        preds.append(np.argmax(probs.data, axis=1))
    if n == 0:
        return {"l_rec": float("nan"), "l_cls": float("nan"), "l_reg": float("nan"),
                "Z": np.zeros((0, enc_cfg.encoding_dim)), "pred": np.zeros(0, dtype=int),
                "probs": np.zeros((0, enc_cfg.num_classes)), "accuracy": float("nan")}
    pred = np.concatenate(preds)
    refs = [(g.video_id, g.frame_idx) for g in dsgs]
    labels = np.array([g.label for g in dsgs])
    l_rec, l_cls, l_reg = sums / n
    return {"l_rec": l_rec, "l_cls": l_cls, "l_reg": l_reg, "Z": np.concatenate(Zs),
            "pred": pred, "probs": np.concatenate(probs_all),
            "accuracy": video_mean_accuracy(refs, pred, labels)}


def _report(epoch, split, l_rec, l_cls, l_reg, acc, cfg):
    total = cfg.lambda_rec * l_rec + cfg.lambda_cls * l_cls + cfg.lambda_reg * l_reg
    return LossReport(epoch, split, float(l_rec), float(l_cls), float(l_reg), float(total), float(acc))


def _train_loop(train, val, params, trainable, enc_cfg, cfg, epochs, stage, protos=None):
    if not train:
        raise ValueError("training split is empty")
    state = nx.AdamState(lr=cfg.lr, step_epochs=cfg.lr_step_epochs, gamma=cfg.lr_gamma)
    history = []
    best = (-np.inf, copy_params(params), protos.copy() if protos is not None else None)
    stale = 0
    labels = np.array([g.label for g in train])
    refs = [(g.video_id, g.frame_idx) for g in train]
    for epoch in range(epochs):
        state.epoch = epoch
        sums = np.zeros(3)
        train_pred = np.empty(len(train), dtype=np.int64)
        order = np.random.default_rng(_stage_seed(cfg.seed, stage, epoch)).permutation(len(train))
        for s in range(0, len(train), cfg.batch_size):
            chunk = order[s:s + cfg.batch_size]
            batch = collate([train[i] for i in chunk])
            with Tape() as tape:
                l_rec, l_cls, l_reg, probs, _ = _losses(batch, params, enc_cfg, protos)
                loss = nx.add(nx.add(nx.scale(l_rec, cfg.lambda_rec), nx.scale(l_cls, cfg.lambda_cls)),
                              nx.scale(l_reg, cfg.lambda_reg))
            nx.backward(loss, tape)
            nx.adam_step(trainable, state)
            sums += len(chunk) * np.array([l_rec.item(), l_cls.item(), l_reg.item()])
            train_pred[chunk] = np.argmax(probs.data, axis=1)
        l = sums / len(train)
        history.append(_report(epoch, "train", *l, video_mean_accuracy(refs, train_pred, labels), cfg))
        if val:
            ev = evaluate_windows(val, params, enc_cfg, cfg, protos)
            history.append(_report(epoch, "val", ev["l_rec"], ev["l_cls"], ev["l_reg"], ev["accuracy"], cfg))
            if ev["accuracy"] > best[0]:
                best = (ev["accuracy"], copy_params(params), protos.copy() if protos is not None else None)
                stale = 0
            else:
                stale += 1
            log.info("%s epoch %d: train loss %.4f acc %.3f | val acc %.3f", stage, epoch,
                     history[-2].total, history[-2].accuracy, ev["accuracy"])
            if cfg.patience and stale >= cfg.patience:
                break
        else:
            log.info("%s epoch %d: train loss %.4f acc %.3f", stage, epoch,
                     history[-1].total, history[-1].accuracy)
    if val and np.isfinite(best[0]):
        params, protos = best[1], best[2]
    return params, protos, history


def pretrain(train, val, enc_cfg, cfg, params=None, epochs=None):
    """Autoencoder + phase-head training. ``train``/``val`` are window lists."""
    if params is None:
        params = init_params(enc_cfg, seed=cfg.seed)
    trainable = encoder_params(params) + decoder_params(params) + head_params(params)
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    params, _, history = _train_loop(train, val, params, trainable, enc_cfg, cfg, epochs, 1)
    return params, history


def embed_all(dsgs, params, enc_cfg, cfg=None):
    """Per window: (z, label, video_id, frame_idx), computed without a tape."""
    cfg = cfg or TrainConfig()
    if not dsgs:
        return []
    ev = evaluate_windows(dsgs, params, enc_cfg, cfg)
    return [(ev["Z"][i], g.label, g.video_id, g.frame_idx) for i, g in enumerate(dsgs)]


def prototypes_from_windows(train, params, enc_cfg, cfg, num_classes, allow_missing=False):
    emb = embed_all(train, params, enc_cfg, cfg)
    Z = np.array([e[0] for e in emb])
    labels = np.array([e[1] for e in emb])
    refs = [(e[2], e[3]) for e in emb]
    return init_prototypes(Z, labels, num_classes, cfg.k, cfg.seed, refs, allow_missing,
                           cfg.kmeans_iters, cfg.kmeans_tol)


def finetune(train, val, params, protos, enc_cfg, cfg, epochs=None):
    """Joint update of encoder, decoder and prototypes; the head stays frozen."""
    params = copy_params(params)
    protos = protos.copy()
    trainable = encoder_params(params) + decoder_params(params) + [protos.P]
    epochs = cfg.finetune_epochs if epochs is None else epochs
    params, protos, history = _train_loop(train, val, params, trainable, enc_cfg, cfg, epochs, 2, protos)
    ev = evaluate_windows(train, params, enc_cfg, cfg, protos)
    refresh_medoids(protos, ev["Z"], [g.label for g in train], [(g.video_id, g.frame_idx) for g in train])
    return params, protos, history


def calibrate(train, params, protos, enc_cfg, cfg=None):
    """Per class mean and std of the distance to the nearest own-class prototype."""
    cfg = cfg or TrainConfig()
    ev = evaluate_windows(train, params, enc_cfg, cfg, protos)
    D = nx.pairwise_distance(Tensor(ev["Z"]), Tensor(protos.P.data)).data
    labels = np.array([g.label for g in train])
    mu = np.full(protos.num_classes, np.inf)
    sigma = np.zeros(protos.num_classes)
    for c in range(protos.num_classes):
        rows = labels == c
        if rows.any():
            own = D[rows][:, protos.slots_of(c)].min(axis=1)
            mu[c], sigma[c] = own.mean(), own.std()
    protos.calib_mu, protos.calib_sigma = mu, sigma
    return protos


@dataclass
class InferenceResult:
    video_id: str
    frame_idx: np.ndarray
    labels: np.ndarray
    pred: np.ndarray
    D: np.ndarray
    yhat: np.ndarray

    def __len__(self):
        return len(self.frame_idx)


def infer(frames, params, protos, enc_cfg, window, spec=None, cfg=None):
    cfg = cfg or TrainConfig(window=window)
    dsgs = video_windows(frames, window, spec)
    if not dsgs:
        return InferenceResult("", np.zeros(0, int), np.zeros(0, int), np.zeros(0, int),
                               np.zeros((0, protos.num_slots)), np.zeros((0, protos.num_classes)))
    ev = evaluate_windows(dsgs, params, enc_cfg, cfg, protos)
    D = nx.pairwise_distance(Tensor(ev["Z"]), Tensor(protos.P.data)).data
    return InferenceResult(dsgs[0].video_id, np.array([g.frame_idx for g in dsgs]),
                           np.array([g.label for g in dsgs]), ev["pred"], D, ev["probs"])


# ---------------------------------------------------------------- full pipeline


@dataclass
class Artifacts:
    params: dict
    protos: PrototypeSet
    encoder: EncoderConfig
    spec: FeatureSpec
    config: TrainConfig
    pretrain_history: list
    finetune_history: list
    baseline_params: dict = None


def run_protoflow(videos, split, num_classes, spec, cfg, enc_cfg=None, allow_missing=False):
    """All four stages on one split; returns trained, calibrated artifacts."""
    if enc_cfg is None:
        enc_cfg = EncoderConfig.desk(spec.dim, num_classes)
    train = split_windows(videos, split.train, cfg.window, spec)
    val = split_windows(videos, split.val, cfg.window, spec)
    params, h1 = pretrain(train, val, enc_cfg, cfg)
    protos = prototypes_from_windows(train, params, enc_cfg, cfg, num_classes, allow_missing)
    params, protos, h2 = finetune(train, val, params, protos, enc_cfg, cfg)
    calibrate(train, params, protos, enc_cfg, cfg)
    return Artifacts(params, protos, enc_cfg, spec, cfg, h1, h2)
