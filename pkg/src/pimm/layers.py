"""Building blocks: embedding tables, MLP towers and two-candidate attention.

Parameters live in a flat ``dict[str, np.ndarray]``; the dataclasses here
hold the graph nodes bound from that dict for one forward pass.
"""

from __future__ import annotations

import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ParseError, ShapeError
from .numerics import Graph, Node

CHECKPOINT_MAGIC = "pimm-checkpoint"
CHECKPOINT_VERSION = 1


# -- initialisation -----------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_embeddings(params, rng, field_names, vocab_sizes, dim, prefix="emb"):
    for name, vocab in zip(field_names, vocab_sizes):
        params[f"{prefix}.{name}"] = rng.uniform(-0.01, 0.01, size=(vocab, dim))


def init_dense(params, rng, prefix, in_dim, out_dim, bias=True):
    params[f"{prefix}.w"] = glorot_uniform(rng, in_dim, out_dim)
    if bias:
        params[f"{prefix}.b"] = np.zeros((1, out_dim))


def init_tower(params, rng, prefix, in_dim, layer_dims):
    for i, width in enumerate(layer_dims):
        init_dense(params, rng, f"{prefix}.{i}", in_dim, width)
        in_dim = width


def init_attention(params, rng, prefix, d):
    for proj in ("q", "k", "v"):
        params[f"{prefix}.{proj}"] = glorot_uniform(rng, d, d)


# -- layer types ---------------------------------------------------------------

class OOVCounter:
    """Counts feature ids that fell outside their field's vocabulary."""

    def __init__(self):
        self.count = 0
        self.per_field: dict[str, int] = {}

    def add(self, field_name, n):
        if n:
            self.count += n
            self.per_field[field_name] = self.per_field.get(field_name, 0) + n


@dataclass
class EmbeddingTable:
    name: str
    weights: Node

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class Tower:
    weights: list[Node]
    biases: list[Node]

    @property
    def layer_dims(self) -> list[int]:
        return [w.shape[1] for w in self.weights]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def bind(cls, nodes: dict[str, Node], prefix: str) -> "Tower":
        weights, biases = [], []
        i = 0
        while f"{prefix}.{i}.w" in nodes:
            weights.append(nodes[f"{prefix}.{i}.w"])
            biases.append(nodes.get(f"{prefix}.{i}.b"))
            i += 1
        if not weights:
            raise KeyError(f"no tower parameters under {prefix!r}")
        return cls(weights, biases)


@dataclass
class AttentionUnit:
    q_proj: Node
    k_proj: Node
    v_proj: Node
    owner_task: int = 0
    last_weights: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def bind(cls, nodes, prefix, owner_task=0) -> "AttentionUnit":
        return cls(nodes[f"{prefix}.q"], nodes[f"{prefix}.k"], nodes[f"{prefix}.v"], owner_task)


def bind_params(graph: Graph, params: dict[str, np.ndarray]) -> dict[str, Node]:
    """Register every array of ``params`` as a named parameter node."""
    return {name: graph.param(value, name=name) for name, value in params.items()}


# -- forward ops ---------------------------------------------------------------

def embed_lookup(tables: list[EmbeddingTable], features, oov: OOVCounter | None = None) -> Node:
    """Look up one id per field and concatenate the rows in field order.

    ``features`` is an integer array ``[batch, num_fields]``. Ids outside a
    table's vocabulary map to row 0 and are counted in ``oov``.
    """
    features = np.asarray(features, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] != len(tables):
        raise ShapeError(f"expected features [batch, {len(tables)}], got {features.shape}")
    parts = []
    for j, table in enumerate(tables):
        ids = features[:, j]
        bad = (ids < 0) | (ids >= table.vocab_size)
        if bad.any():
            ids = np.where(bad, 0, ids)
            if oov is not None:
                oov.add(table.name, int(bad.sum()))
        parts.append(nx.gather(table.weights, ids))
    return parts[0] if len(parts) == 1 else nx.concat(parts, axis=1)


def dense(x: Node, w: Node, b: Node | None = None) -> Node:
    out = nx.matmul(x, w)
    return out if b is None else nx.add(out, b)


def tower_forward(tower: Tower, x: Node) -> Node:
    """ReLU on hidden layers, linear last layer."""
    if x.value.ndim != 2 or x.shape[1] != tower.weights[0].shape[0]:
        raise ShapeError(
            f"tower expects input width {tower.weights[0].shape[0]}, got shape {x.shape}"
        )
    h = x
    last = len(tower.weights) - 1
    for i, (w, b) in enumerate(zip(tower.weights, tower.biases)):
        h = dense(h, w, b)
        if i < last:
            h = nx.relu(h)
    return h


def attention_fuse(unit: AttentionUnit, v_t: Node, z_merged: Node) -> Node:
    """Self-attention over the two candidates {v_t, z_merged} plus residual.

    For each candidate ``a`` the logit is ``<a Q, a K> / sqrt(d)``; the two
    logits are softmaxed per sample and the fused output is
    ``v_t + sum_a w_a * (a V)``. The softmax weights of the last call are
    kept on ``unit.last_weights`` (columns: v_t, z_merged).
    """
    d = v_t.shape[1] if v_t.value.ndim == 2 else -1
    if v_t.shape != z_merged.shape or unit.q_proj.shape != (d, d):
        raise ShapeError(
            f"attention: v_t {v_t.shape}, z {z_merged.shape}, projections {unit.q_proj.shape}"
        )
    inv_sqrt_d = 1.0 / math.sqrt(d)
    logits, values = [], []
    for a in (v_t, z_merged):
        q = nx.matmul(a, unit.q_proj)
        k = nx.matmul(a, unit.k_proj)
        logits.append(nx.scale(nx.row_sum(nx.mul(q, k)), inv_sqrt_d))
        values.append(nx.matmul(a, unit.v_proj))
    weights = nx.softmax(nx.concat(logits, axis=1))
    unit.last_weights = weights.value
    mixed = nx.add(
        nx.mul(nx.columns(weights, 0, 1), values[0]),
        nx.mul(nx.columns(weights, 1, 2), values[1]),
    )
    return nx.add(v_t, mixed)


# -- checkpoints ---------------------------------------------------------------
#
# Text header "pimm-checkpoint 1\n<count>\n", then per array, little-endian:
#   u32 name length, utf-8 name, u32 ndim, u64 dims..., float64 data (row-major)

def _atomic_write_bytes(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: dict[str, np.ndarray]):
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{len(params)}\n".encode("ascii"))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    _atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", "replace").split()
        if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint file", line=1)
        if int(header[1]) != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {header[1]}", line=1)
        count = int(fh.readline())
        params = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape, dtype=np.int64))
            data = fh.read(8 * size)
            if len(data) != 8 * size:
                raise ParseError(f"{path}: truncated array {name!r}")
            params[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    return params
