"""Scene graphs, dynamic scene graph windows, batching and a synthetic surgery generator."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

NODE_CLASS_NAMES = (
    "pupil", "iris", "lens", "knife", "cystotome",
    "forceps", "cannula", "phaco", "ia_handpiece", "vitrector",
)
PHASE_NAMES = (
    "incision", "viscoelastic", "capsulorhexis",
    "phacoemulsification", "irrigation_aspiration", "vitrectomy",
)
REL_TYPES = ("spatial", "semantic", "temporal", "self")
REL_ID = {name: i for i, name in enumerate(REL_TYPES)}
ANATOMY = frozenset({0, 1, 2})


class DataError(ValueError):
    """Malformed or inconsistent graph data."""


@dataclass(frozen=True)
class Node:
    node_id: int
    class_id: int
    attrs: tuple


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    rel: str


@dataclass
class SceneGraph:
    video_id: str
    frame_idx: int
    timestamp_s: float
    phase_label: int
    nodes: list
    edges: list

    def validate(self, d_attr=None, node_classes=None, num_classes=None):
        if not self.nodes:
            raise DataError(f"{self.video_id}/{self.frame_idx}: frame has no nodes")
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise DataError(f"{self.video_id}/{self.frame_idx}: duplicate node ids")
        known = set(ids)
        for e in self.edges:
            for end in (e.src, e.dst):
                if end not in known:
                    raise DataError(f"{self.video_id}/{self.frame_idx}: dangling edge endpoint node_id={end}")
            if e.rel not in ("spatial", "semantic"):
                raise DataError(f"{self.video_id}/{self.frame_idx}: unknown relation {e.rel!r}")
        if d_attr is None:
            d_attr = len(self.nodes[0].attrs)
        for n in self.nodes:
            if len(n.attrs) != d_attr:
                raise DataError(f"{self.video_id}/{self.frame_idx}: node {n.node_id} has "
                                f"{len(n.attrs)} attrs, expected {d_attr}")
            if node_classes is not None and not 0 <= n.class_id < node_classes:
                raise DataError(f"{self.video_id}/{self.frame_idx}: node class {n.class_id} out of range")
        if num_classes is not None and not 0 <= self.phase_label < num_classes:
            raise DataError(f"{self.video_id}/{self.frame_idx}: phase {self.phase_label} out of range")
        return d_attr

    def to_json(self):
        return {
            "video_id": self.video_id,
            "frame_idx": self.frame_idx,
            "timestamp_s": self.timestamp_s,
            "phase_label": self.phase_label,
            "nodes": [{"id": n.node_id, "class_id": n.class_id, "attrs": list(n.attrs)} for n in self.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "rel": e.rel} for e in self.edges],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            video_id=str(obj["video_id"]),
            frame_idx=int(obj["frame_idx"]),
            timestamp_s=float(obj["timestamp_s"]),
            phase_label=int(obj["phase_label"]),
            nodes=[Node(int(n["id"]), int(n["class_id"]), tuple(float(a) for a in n["attrs"]))
                   for n in obj["nodes"]],
            edges=[Edge(int(e["src"]), int(e["dst"]), str(e["rel"])) for e in obj["edges"]],
        )


def dumps_frame(sg):
    return json.dumps(sg.to_json(), separators=(",", ":"))


def load_dataset(path, node_classes=None, num_classes=None):
    """Read a graph JSONL file into ``{video_id: [SceneGraph, ...]}`` sorted by frame."""
    videos: dict[str, list[SceneGraph]] = {}
    seen = set()
    d_attr = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                sg = SceneGraph.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: malformed frame ({exc})") from exc
            key = (sg.video_id, sg.frame_idx)
            if key in seen:
                raise DataError(f"line {lineno}: duplicate frame {key}")
            seen.add(key)
            try:
                d_attr = sg.validate(d_attr, node_classes, num_classes)
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            videos.setdefault(sg.video_id, []).append(sg)
    return {vid: sorted(videos[vid], key=lambda s: s.frame_idx) for vid in sorted(videos)}


def save_dataset(videos, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for vid in sorted(videos):
            for sg in videos[vid]:
                fh.write(dumps_frame(sg) + "\n")


# ---------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def check(self, all_videos=None):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split sets overlap")
        if all_videos is not None and set().union(*sets) != set(all_videos):
            raise DataError("split does not cover exactly the dataset's videos")


@dataclass
class Manifest:
    split: DatasetSplit
    num_classes: int
    node_classes: int
    d_attr: int

    def to_json(self):
        return {"train": list(self.split.train), "val": list(self.split.val),
                "test": list(self.split.test), "num_classes": self.num_classes,
                "node_classes": self.node_classes, "d_attr": self.d_attr}

    @classmethod
    def from_json(cls, obj):
        split = DatasetSplit(list(obj["train"]), list(obj["val"]), list(obj["test"]))
        split.check()
        return cls(split, int(obj["num_classes"]), int(obj["node_classes"]), int(obj["d_attr"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest ({exc})") from exc


def few_shot_subsample(split, n, seed):
    if n > len(split.train):
        raise ValueError(f"cannot draw {n} training videos from {len(split.train)}")
    rng = np.random.default_rng(seed)
    pick = sorted(rng.choice(len(split.train), size=n, replace=False))
    return DatasetSplit([split.train[i] for i in pick], list(split.val), list(split.test))


# ---------------------------------------------------------------- dynamic scene graphs


@dataclass(frozen=True)
class FeatureSpec:
    """Node features: one-hot class | attrs | one-hot frame offset (0 = target frame)."""
    node_classes: int = len(NODE_CLASS_NAMES)
    d_attr: int = 2
    offset_buckets: int = 8

    @property
    def dim(self):
        return self.node_classes + self.d_attr + self.offset_buckets

    @classmethod
    def from_manifest(cls, manifest, offset_buckets=8):
        return cls(manifest.node_classes, manifest.d_attr, offset_buckets)


@dataclass
class DynamicSceneGraph:
    video_id: str
    frame_idx: int
    label: int
    num_frames: int
    node_frame: np.ndarray      # window position of each node's frame, 0 = oldest
    node_offset: np.ndarray     # target frame index minus node's frame index
    class_id: np.ndarray
    node_ids: np.ndarray        # original per-frame node ids
    attrs: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray             # index into REL_TYPES
    x: np.ndarray

    @property
    def num_nodes(self):
        return len(self.class_id)

    @property
    def num_temporal_edges(self):
        return int(np.sum(self.rel == REL_ID["temporal"]))


def build_dsg(frames, w, t, spec=None):
    """Window ending at frame position ``t`` spanning at most ``w`` frames.

    Same-class nodes in consecutive frames get directed forward temporal edges,
    all pairs when a class repeats.
    """
    if w < 1:
        raise ValueError("window size must be >= 1")
    if not 0 <= t < len(frames):
        raise IndexError(f"target frame {t} outside video of {len(frames)} frames")
    spec = spec or FeatureSpec(d_attr=len(frames[t].nodes[0].attrs))
    window = frames[max(0, t - w + 1): t + 1]
    target = window[-1]

    node_frame, node_offset, class_id, node_ids, attrs = [], [], [], [], []
    src, dst, rel = [], [], []
    starts = []
    for f, sg in enumerate(window):
        base = len(class_id)
        starts.append(base)
        local = {}
        for n in sg.nodes:
            local[n.node_id] = len(class_id)
            node_frame.append(f)
            node_offset.append(target.frame_idx - sg.frame_idx)
            class_id.append(n.class_id)
            node_ids.append(n.node_id)
            attrs.append(n.attrs)
        for e in sg.edges:
            src.append(local[e.src])
            dst.append(local[e.dst])
            rel.append(REL_ID[e.rel])
    starts.append(len(class_id))
    class_arr = np.asarray(class_id, dtype=np.int64)
    for f in range(len(window) - 1):
        a = np.arange(starts[f], starts[f + 1])
        b = np.arange(starts[f + 1], starts[f + 2])
        same = class_arr[a][:, None] == class_arr[b][None, :]
        ia, ib = np.nonzero(same)
        src.extend(a[ia].tolist())
        dst.extend(b[ib].tolist())
        rel.extend([REL_ID["temporal"]] * len(ia))

    n = len(class_arr)
    x = np.zeros((n, spec.dim))
    x[np.arange(n), class_arr] = 1.0
    attr_arr = np.asarray(attrs, dtype=np.float64).reshape(n, spec.d_attr)
    x[:, spec.node_classes: spec.node_classes + spec.d_attr] = attr_arr
    off = np.minimum(np.asarray(node_offset, dtype=np.int64), spec.offset_buckets - 1)
    x[np.arange(n), spec.node_classes + spec.d_attr + off] = 1.0
    return DynamicSceneGraph(
        video_id=target.video_id, frame_idx=target.frame_idx, label=target.phase_label,
        num_frames=len(window), node_frame=np.asarray(node_frame, dtype=np.int64),
        node_offset=np.asarray(node_offset, dtype=np.int64), class_id=class_arr,
        node_ids=np.asarray(node_ids, dtype=np.int64), attrs=attr_arr,
        src=np.asarray(src, dtype=np.int64), dst=np.asarray(dst, dtype=np.int64),
        rel=np.asarray(rel, dtype=np.int64), x=x,
    )


def video_windows(frames, w, spec=None):
    return [build_dsg(frames, w, t, spec) for t in range(len(frames))]


def split_windows(videos, video_ids, w, spec=None):
    out = []
    for vid in video_ids:
        out.extend(video_windows(videos[vid], w, spec))
    return out


@dataclass
class GraphBatch:
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    segments: np.ndarray
    labels: np.ndarray
    num_graphs: int
    refs: list = field(default_factory=list)

    @property
    def num_nodes(self):
        return self.x.shape[0]


def collate(dsgs):
    offsets = np.cumsum([0] + [g.num_nodes for g in dsgs])
    return GraphBatch(
        x=np.concatenate([g.x for g in dsgs]),
        src=np.concatenate([g.src + o for g, o in zip(dsgs, offsets)]),
        dst=np.concatenate([g.dst + o for g, o in zip(dsgs, offsets)]),
        rel=np.concatenate([g.rel for g in dsgs]),
        segments=np.repeat(np.arange(len(dsgs)), [g.num_nodes for g in dsgs]),
        labels=np.array([g.label for g in dsgs], dtype=np.int64),
        num_graphs=len(dsgs),
        refs=[(g.video_id, g.frame_idx) for g in dsgs],
    )


def make_batches(dsgs, batch_size, seed=None):
    """Seeded shuffle then contiguous chunks; ``seed=None`` keeps the input order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dsgs))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(dsgs))
    return [collate([dsgs[i] for i in order[s: s + batch_size]])
            for s in range(0, len(dsgs), batch_size)]


# ---------------------------------------------------------------- synthetic generator


def default_templates():
    """Per phase, a list of sub-technique templates: nodes (class, x, y) and edges (i, j, rel)."""
    def eye(lens=True, iris_at=(0.5, 0.53)):
        nodes = [[0, 0.5, 0.5], [1, *iris_at]]
        edges = [[0, 1, "spatial"]]
        if lens:
            nodes.append([2, 0.5, 0.49])
            edges.append([0, 2, "spatial"])
        return nodes, edges

    def tpl(instruments, lens=True):
        nodes, edges = eye(lens)
        target = 2 if lens else 1
        for cls, x, y in instruments:
            i = len(nodes)
            nodes.append([cls, x, y])
            edges.append([i, 0, "spatial"])
            edges.append([i, target, "semantic"])
        return {"nodes": nodes, "edges": edges}

    return [
        [tpl([(3, 0.82, 0.44)])],
        [tpl([(6, 0.70, 0.58)])],
        [tpl([(4, 0.56, 0.42)]), tpl([(5, 0.42, 0.60)])],
        [tpl([(7, 0.62, 0.47), (6, 0.36, 0.52)])],
        [tpl([(8, 0.60, 0.50)], lens=False)],
        [tpl([(9, 0.58, 0.46), (6, 0.38, 0.55)], lens=False)],
    ]


def default_transition(num_phases=6, rare_phase=5, back_prob=0.05):
    """Jump chain: forward through the normal phases, small chance of stepping back,
    last normal phase absorbing, rare phase returns to the last normal phase."""
    T = np.zeros((num_phases, num_phases))
    last = rare_phase - 1 if rare_phase is not None else num_phases - 1
    for c in range(last):
        if c == 0:
            T[c, c + 1] = 1.0
        else:
            T[c, c + 1] = 1.0 - back_prob
            T[c, c - 1] = back_prob
    T[last, last] = 1.0
    if rare_phase is not None:
        T[rare_phase, last] = 1.0
    return T.tolist()


@dataclass
class GeneratorConfig:
    seed: int = 42
    num_videos: int = 35
    frames_per_video: tuple = (180, 220)
    num_phases: int = 6
    node_classes: int = len(NODE_CLASS_NAMES)
    d_attr: int = 2
    transition: list = None
    phase_duration_s: tuple = (60.0, 45.0, 90.0, 150.0, 90.0, 60.0)
    initial_phase: int = 0
    templates: list = None
    multi_technique_phase: int = 2
    rare_phase: int = 5
    rare_after_phase: int = 3
    rare_prob: float = 0.05
    min_rare_train: int = 1
    prolapse_shift: float = 0.25
    jitter: float = 0.02
    video_shift: float = 0.0
    style_jitter: float = 0.0
    dropout: float = 0.15
    flip_prob: float = 0.02
    period_s: float = 3.0
    min_run_frames: int = 3
    split: tuple = (20, 5, 10)

    def __post_init__(self):
        if self.transition is None:
            self.transition = default_transition(self.num_phases, self.rare_phase)
        if self.templates is None:
            self.templates = default_templates()
        self.frames_per_video = tuple(self.frames_per_video)
        self.phase_duration_s = tuple(self.phase_duration_s)
        self.split = tuple(self.split)
        self.validate()

    def validate(self):
        T = np.asarray(self.transition, dtype=np.float64)
        if T.shape != (self.num_phases, self.num_phases):
            raise ValueError("transition matrix must be num_phases x num_phases")
        if np.any(T < 0) or np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition matrix rows must be non-negative and sum to 1")
        if len(self.templates) != self.num_phases or any(len(t) < 1 for t in self.templates):
            raise ValueError("every phase needs at least one template")
        if len(self.templates[self.multi_technique_phase]) < 2:
            raise ValueError("the multi-technique phase needs at least two templates")
        if sum(self.split) != self.num_videos:
            raise ValueError("split sizes must add up to num_videos")
        if len(self.phase_duration_s) != self.num_phases:
            raise ValueError("phase_duration_s needs one entry per phase")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class SyntheticData:
    videos: dict
    metadata: list
    manifest: Manifest

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(self.videos, out / "graphs.jsonl")
        self.manifest.save(out / "manifest.json")
        with open(out / "metadata.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for row in self.metadata:
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
        return out

    def metadata_by_video(self):
        return metadata_by_video(self.metadata)


def metadata_by_video(rows):
    out: dict[str, dict] = {}
    for row in rows:
        out.setdefault(row["video_id"], {})[row["frame_idx"]] = row
    return out


def load_metadata(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _phase_runs(cfg, rng, inject):
    T = np.asarray(cfg.transition)
    runs = [cfg.initial_phase]
    while T[runs[-1], runs[-1]] < 1.0 and len(runs) < 64:
        runs.append(int(rng.choice(cfg.num_phases, p=T[runs[-1]])))
    if inject and cfg.rare_after_phase in runs:
        runs.insert(runs.index(cfg.rare_after_phase) + 1, cfg.rare_phase)
    return runs


def _run_lengths(cfg, rng, runs, total):
    means = np.array([cfg.phase_duration_s[p] for p in runs])
    secs = rng.gamma(4.0, means / 4.0)
    floor = cfg.min_run_frames * len(runs)
    if total < floor:
        total = floor
    share = secs / secs.sum() * (total - floor)
    bounds = np.round(np.cumsum(share)).astype(int)
    lengths = np.diff(np.concatenate([[0], bounds])) + cfg.min_run_frames
    lengths[-1] += total - lengths.sum()
    return lengths


def _render_frame(cfg, rng, tpl, video_id, frame_idx, phase, prolapse, style):
    keep = []
    for i, (cls, *_pos) in enumerate(tpl["nodes"]):
        if int(cls) in ANATOMY or cfg.dropout <= 0 or rng.random() >= cfg.dropout:
            keep.append(i)
    nodes = []
    for i in keep:
        cls, *pos = tpl["nodes"][i]
        pos = np.asarray(pos[: cfg.d_attr], dtype=np.float64)
        pos = pos + style[int(cls)]
        if cls == 1 and prolapse is not None:
            pos = pos + prolapse
        if cfg.jitter > 0:
            pos = pos + rng.normal(0.0, cfg.jitter, size=pos.shape)
        nodes.append(Node(i, int(cls), tuple(float(v) for v in pos)))
    kept = set(keep)
    edges = []
    for s, d, r in tpl["edges"]:
        if s in kept and d in kept:
            if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
                continue
            edges.append(Edge(int(s), int(d), r))
    if cfg.flip_prob > 0 and len(keep) > 1 and rng.random() < cfg.flip_prob:
        s, d = rng.choice(keep, size=2, replace=False)
        if not any(e.src == s and e.dst == d for e in edges):
            edges.append(Edge(int(s), int(d), "spatial"))
    return SceneGraph(video_id, frame_idx, frame_idx * cfg.period_s, phase, nodes, edges)


def generate_synthetic(cfg):
    """Deterministic synthetic cataract-like workflows from ``cfg.seed``."""
    master = np.random.default_rng(cfg.seed)
    inject = master.random(cfg.num_videos) < cfg.rare_prob
    n_train = cfg.split[0]
    if cfg.min_rare_train > 0 and inject[:n_train].sum() < cfg.min_rare_train:
        inject[:cfg.min_rare_train] = True
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.num_videos)

    videos, metadata = {}, []
    for v in range(cfg.num_videos):
        rng = np.random.default_rng(streams[v])
        vid = f"vid{v:03d}"
        lo, hi = cfg.frames_per_video
        total = int(rng.integers(lo, hi + 1))
        # per-video surgeon/camera style: one global shift plus per-class offsets
        style = rng.normal(0.0, 1.0, size=(cfg.node_classes, cfg.d_attr)) * cfg.style_jitter
        style += rng.normal(0.0, 1.0, size=cfg.d_attr) * cfg.video_shift
        runs = _phase_runs(cfg, rng, bool(inject[v]))
        lengths = _run_lengths(cfg, rng, runs, total)
        frames = []
        for phase, length in zip(runs, lengths):
            sub = int(rng.integers(len(cfg.templates[phase])))
            tpl = cfg.templates[phase][sub]
            prolapse = None
            if phase == cfg.rare_phase:
                angle = rng.uniform(0, 2 * np.pi)
                mag = cfg.prolapse_shift * rng.uniform(0.5, 1.5)
                prolapse = mag * np.array([np.cos(angle), np.sin(angle)])[: cfg.d_attr]
            for _ in range(int(length)):
                f = len(frames)
                frames.append(_render_frame(cfg, rng, tpl, vid, f, phase, prolapse, style))
                metadata.append({"video_id": vid, "frame_idx": f, "subtech_id": sub,
                                 "deviation": bool(phase == cfg.rare_phase)})
        videos[vid] = frames

    ids = list(videos)
    a, b, _ = cfg.split
    split = DatasetSplit(ids[:a], ids[a:a + b], ids[a + b:])
    manifest = Manifest(split, cfg.num_phases, cfg.node_classes, cfg.d_attr)
    return SyntheticData(videos, metadata, manifest)
