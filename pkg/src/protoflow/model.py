"""GATv2-style encoder, MLP decoder, linear phase head and the checkpoint format."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .graphs import REL_ID
from .numerics import Tensor

MAGIC = b"PFLW"
VERSION = 1
SELF_REL = REL_ID["self"]


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_dim: int
    num_classes: int
    num_layers: int = 3
    hidden_dim: int = 1024
    encoding_dim: int = 512
    heads: int = 1
    slope: float = 0.2
    num_edge_types: int = 3
    edge_emb_dim: int = 16

    def __post_init__(self):
        dims = (self.input_dim, self.num_classes, self.num_layers, self.hidden_dim,
                self.encoding_dim, self.heads, self.edge_emb_dim)
        if min(dims) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.encoding_dim > self.hidden_dim:
            raise ValueError("encoding_dim must not exceed hidden_dim")

    @classmethod
    def desk(cls, input_dim, num_classes, **kw):
        kw.setdefault("hidden_dim", 128)
        kw.setdefault("encoding_dim", 64)
        return cls(input_dim, num_classes, **kw)

    @property
    def layer_dims(self):
        return [self.input_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.encoding_dim]

    @property
    def num_types(self):
        return self.num_edge_types + 1   # plus the self-loop type

    def to_json(self):
        return asdict(self)


def param_count(cfg):
    dims = cfg.layer_dims
    total = 0
    for f_in, f_out in zip(dims[:-1], dims[1:]):
        per_head = 2 * f_in * f_out + f_out + cfg.num_types * cfg.edge_emb_dim + cfg.edge_emb_dim * f_out
        total += cfg.heads * per_head + f_out
    h, z, d = cfg.hidden_dim, cfg.encoding_dim, cfg.input_dim
    total += z * h + h + h * h + h + h * d + d
    total += z * cfg.num_classes + cfg.num_classes
    return total


def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_params(cfg, seed=0):
    """Ordered ``{name: Tensor}``; glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True, name=name)

    dims = cfg.layer_dims
    for layer, (f_in, f_out) in enumerate(zip(dims[:-1], dims[1:])):
        for h in range(cfg.heads):
            p = f"enc.{layer}.h{h}."
            add(p + "W_l", _glorot(rng, f_in, f_out))
            add(p + "W_r", _glorot(rng, f_in, f_out))
            add(p + "a", _glorot(rng, f_out, 1))
            add(p + "type_emb", _glorot(rng, cfg.num_types, cfg.edge_emb_dim))
            add(p + "W_e", _glorot(rng, cfg.edge_emb_dim, f_out))
        add(f"enc.{layer}.bias", np.zeros((1, f_out)))
    dec = [cfg.encoding_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.input_dim]
    for i, (a, b) in enumerate(zip(dec[:-1], dec[1:])):
        add(f"dec.{i}.W", _glorot(rng, a, b))
        add(f"dec.{i}.b", np.zeros((1, b)))
    add("head.W", _glorot(rng, cfg.encoding_dim, cfg.num_classes))
    add("head.b", np.zeros((1, cfg.num_classes)))
    return params


def encoder_params(params):
    return [p for k, p in params.items() if k.startswith("enc.")]


def decoder_params(params):
    return [p for k, p in params.items() if k.startswith("dec.")]


def head_params(params):
    return [p for k, p in params.items() if k.startswith("head.")]


def copy_params(params):
    out = {}
    for k, p in params.items():
        out[k] = Tensor(p.data.copy(), requires_grad=p.requires_grad, name=k)
    return out


def add_self_loops(src, dst, rel, num_nodes):
    loops = np.arange(num_nodes)
    return (np.concatenate([src, loops]), np.concatenate([dst, loops]),
            np.concatenate([rel, np.full(num_nodes, SELF_REL)]))


def gat_layer(h, src, dst, rel, params, prefix, heads=1, slope=0.2, return_attention=False):
    """One attention layer over edges ``src -> dst`` (self-loops must be present).

    score_e = a . leaky_relu(W_l h_dst + W_r h_src + E_rel); alpha = softmax over
    each node's incoming edges; out_i = elu(mean_heads sum_e alpha_e (W_r h_src + E_rel) + b).
    """
    n = h.shape[0]
    if np.setdiff1d(np.arange(n), dst).size:
        raise ValueError("every node needs at least one incoming edge (add self-loops)")
    agg = None
    attention = []
    for k in range(heads):
        p = f"{prefix}.h{k}."
        xl = nx.matmul(h, params[p + "W_l"])
        xr = nx.matmul(h, params[p + "W_r"])
        etab = nx.matmul(params[p + "type_emb"], params[p + "W_e"])
        msg = nx.add(nx.gather_rows(xr, src), nx.gather_rows(etab, rel))
        pre = nx.add(nx.gather_rows(xl, dst), msg)
        score = nx.matmul(nx.leaky_relu(pre, slope), params[p + "a"])
        alpha = nx.segment_softmax(score, dst, n)
        out = nx.segment_sum(nx.mul(msg, alpha), dst, n)
        agg = out if agg is None else nx.add(agg, out)
        attention.append(alpha.data.reshape(-1))
    if heads > 1:
        agg = nx.scale(agg, 1.0 / heads)
    res = nx.elu(nx.add(agg, params[f"{prefix}.bias"]))
    if return_attention:
        return res, attention
    return res


def encode(batch, params, cfg):
    """Node embeddings H [N x d_z] and mean-pooled graph embeddings Z [B x d_z]."""
    src, dst, rel = add_self_loops(batch.src, batch.dst, batch.rel, batch.num_nodes)
    h = Tensor(batch.x)
    for layer in range(cfg.num_layers):
        h = gat_layer(h, src, dst, rel, params, f"enc.{layer}", cfg.heads, cfg.slope)
    return h, nx.segment_mean(h, batch.segments, batch.num_graphs)


def decode(H, params):
    x = nx.elu(nx.add(nx.matmul(H, params["dec.0.W"]), params["dec.0.b"]))
    x = nx.elu(nx.add(nx.matmul(x, params["dec.1.W"]), params["dec.1.b"]))
    return nx.add(nx.matmul(x, params["dec.2.W"]), params["dec.2.b"])


def head_logits(Z, params):
    return nx.add(nx.matmul(Z, params["head.W"]), params["head.b"])


# ---------------------------------------------------------------- checkpoints


def _write_tensor(buf, name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes(order="C"))


def checkpoint_bytes(params, cfg, protos=None, meta=None):
    header = {"encoder": cfg.to_json(), "meta": meta or {}, "param_names": list(params)}
    tensors = [(k, p.data) for k, p in params.items()]
    if protos is not None:
        pmeta, ptensors = protos.to_tables()
        header["prototypes"] = pmeta
        tensors += ptensors
    names = [k for k, _ in tensors]
    if len(set(names)) != len(names):
        raise CheckpointError("tensor names must be unique")
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(path, params, cfg, protos=None, meta=None):
    data = checkpoint_bytes(params, cfg, protos, meta)
    with open(path, "wb") as fh:
        fh.write(data)


@dataclass
class Checkpoint:
    params: dict
    config: EncoderConfig
    protos: object
    meta: dict


def _take(buf, n):
    chunk = buf.read(n)
    if len(chunk) != n:
        raise CheckpointError("truncated checkpoint")
    return chunk


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a ProtoFlow checkpoint")
    (version,) = struct.unpack("<I", _take(buf, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", _take(buf, 8))
    header = json.loads(_take(buf, hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", _take(buf, 4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _take(buf, 4))
        name = _take(buf, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _take(buf, 4))
        shape = struct.unpack(f"<{rank}Q", _take(buf, 8 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(_take(buf, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = arr
    if buf.read(1):
        raise CheckpointError("trailing bytes after tensor table")
    cfg = EncoderConfig(**header["encoder"])
    params = {k: Tensor(tensors[k], requires_grad=True, name=k) for k in header["param_names"]}
    protos = None
    if "prototypes" in header:
        from .pipeline import PrototypeSet
        protos = PrototypeSet.from_tables(header["prototypes"], tensors)
    return Checkpoint(params, cfg, protos, header.get("meta", {}))
