"""Multi-task models for sequentially dependent binary targets.

All four kinds share one entry point, :func:`forward`, so training and
comparison code never branches on the model kind:

* ``pimm``          towers per task, attention fusion with the merged prior
                    message (premise embedding + transferred hidden vector)
* ``aitm``          same as ``pimm`` without the premise path
* ``esmm``          towers per task, probabilities chained by product
* ``shared_bottom`` shared MLP trunk, independent towers
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import check_cascade_labels
from .errors import ConfigError, ContractError, ShapeError
from .layers import (
    AttentionUnit,
    EmbeddingTable,
    OOVCounter,
    Tower,
    attention_fuse,
    bind_params,
    dense,
    embed_lookup,
    init_attention,
    init_dense,
    init_embeddings,
    init_tower,
    tower_forward,
)
from .numerics import Graph, Node
from .pim import (
    PremiseEmbedder,
    ScheduleConfig,
    TaskMessage,
    merge_messages,
    premise_embed,
    premise_mask,
    sampling_probability,
    select_premise,
)

MODEL_KINDS = ("shared_bottom", "esmm", "aitm", "pimm")


@dataclass
class ModelConfig:
    field_names: list[str]
    vocab_sizes: list[int]
    num_tasks: int = 2
    kind: str = "pimm"
    embedding_dim: int = 5
    tower_dims: list[int] = field(default_factory=lambda: [128, 64, 32])
    bottom_dims: list[int] = field(default_factory=lambda: [128])
    schedule: ScheduleConfig | None = None
    task_weights: list[float] | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}", key="model.kind")
        if self.num_tasks < 2:
            raise ConfigError("need at least two tasks", key="data.tasks")
        if len(self.field_names) != len(self.vocab_sizes):
            raise ConfigError("field_names and vocab_sizes differ in length", key="data.vocab_sizes")
        if not self.tower_dims:
            raise ConfigError("tower_dims must not be empty", key="model.tower_dims")
        if self.kind == "pimm" and self.schedule is None:
            self.schedule = ScheduleConfig()
        if self.task_weights is not None and len(self.task_weights) != self.num_tasks:
            raise ConfigError("task_weights must have one entry per task", key="model.task_weights")

    @property
    def d(self) -> int:
        """Width of the transferred representations (last tower width)."""
        return self.tower_dims[-1]

    @property
    def input_dim(self) -> int:
        return len(self.field_names) * self.embedding_dim


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    init_embeddings(params, rng, config.field_names, config.vocab_sizes, config.embedding_dim)
    tower_in = config.input_dim
    if config.kind == "shared_bottom":
        init_tower(params, rng, "bottom", config.input_dim, config.bottom_dims)
        tower_in = config.bottom_dims[-1]
    d = config.d
    for t in range(config.num_tasks):
        init_tower(params, rng, f"tower.{t}", tower_in, config.tower_dims)
        init_dense(params, rng, f"head.{t}", d, 1)
        if config.kind in ("pimm", "aitm"):
            if t < config.num_tasks - 1:
                init_dense(params, rng, f"hproj.{t}", d, d)
            if t >= 1:
                init_attention(params, rng, f"att.{t}", d)
            if t >= 1 and config.kind == "pimm":
                params[f"premise.{t}.w"] = rng.uniform(
                    -np.sqrt(6.0 / (1 + d)), np.sqrt(6.0 / (1 + d)), size=(1, d)
                )
    return params


@dataclass
class TaskOutputs:
    graph: Graph
    predictions: list[Node]
    selections: list[np.ndarray | None] = field(default_factory=list)
    p: float | None = None
    hidden: dict[str, Node] = field(default_factory=dict)
    messages: dict[int, TaskMessage] = field(default_factory=dict)
    oov: OOVCounter | None = None

    @property
    def probabilities(self) -> np.ndarray:
        return np.hstack([node.value for node in self.predictions])


def _tables(config, nodes):
    return [EmbeddingTable(name, nodes[f"emb.{name}"]) for name in config.field_names]


def _head(nodes, t, x):
    return nx.sigmoid(dense(x, nodes[f"head.{t}.w"], nodes[f"head.{t}.b"]))


def _check_features(config, features):
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != len(config.field_names):
        raise ShapeError(
            f"expected features [batch, {len(config.field_names)}], got {features.shape}"
        )
    return features


def _label_columns(config, labels):
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != config.num_tasks:
        raise ShapeError(f"expected labels [batch, {config.num_tasks}], got {labels.shape}")
    return labels


def _transfer_forward(config, nodes, emb, labels, epoch, rng, mode, out):
    """Shared body of PIMM and its premise-free AITM ablation."""
    use_premise = config.kind == "pimm"
    p = None
    if use_premise and mode == "train":
        if labels is None or epoch is None:
            raise ContractError("pimm train mode needs labels and epoch")
        if rng is None:
            raise ContractError("pimm train mode needs an rng")
        p = sampling_probability(config.schedule, epoch)
    out.p = p
    h_prev = None
    for t in range(config.num_tasks):
        v_t = tower_forward(Tower.bind(nodes, f"tower.{t}"), emb)
        if t == 0:
            u_t = v_t
            out.selections.append(None)
        else:
            if use_premise:
                mask = None
                if mode == "train":
                    mask = premise_mask(v_t.shape[0], p, rng)
                y_star = select_premise(
                    None if labels is None else labels[:, t - 1 : t],
                    out.predictions[t - 1], p, rng, mode, mask=mask,
                )
                explicit = premise_embed(PremiseEmbedder(nodes[f"premise.{t}.w"], t), y_star)
                merged = merge_messages(explicit, h_prev)
                out.selections.append(mask)
            else:
                explicit, merged = None, h_prev
                out.selections.append(None)
            out.messages[t] = TaskMessage(h_prev, explicit, merged)
            unit = AttentionUnit.bind(nodes, f"att.{t}", owner_task=t)
            u_t = attention_fuse(unit, v_t, merged)
        out.predictions.append(_head(nodes, t, u_t))
        out.hidden[f"v.{t}"] = v_t
        out.hidden[f"U.{t}"] = u_t
        if t < config.num_tasks - 1:
            h_prev = dense(u_t, nodes[f"hproj.{t}.w"], nodes[f"hproj.{t}.b"])
            out.hidden[f"H.{t}"] = h_prev


def forward(config: ModelConfig, params, features, labels=None, epoch=None,
            rng=None, mode: str = "infer", graph: Graph | None = None) -> TaskOutputs:
    """Run one forward pass and return per-task probability nodes.

    ``labels`` and ``epoch`` are needed only by PIMM in ``"train"`` mode;
    other kinds accept and ignore them.
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    features = _check_features(config, features)
    if labels is not None:
        labels = _label_columns(config, labels)
    graph = graph or Graph()
    nodes = bind_params(graph, params)
    out = TaskOutputs(graph, [], oov=OOVCounter())
    emb = embed_lookup(_tables(config, nodes), features, out.oov)

    if config.kind in ("pimm", "aitm"):
        _transfer_forward(config, nodes, emb, labels, epoch, rng, mode, out)
    elif config.kind == "esmm":
        prev = None
        for t in range(config.num_tasks):
            v_t = tower_forward(Tower.bind(nodes, f"tower.{t}"), emb)
            cond = _head(nodes, t, v_t)
            out.hidden[f"cond.{t}"] = cond
            prev = cond if prev is None else nx.mul(prev, cond)
            out.predictions.append(prev)
    else:
        trunk = nx.relu(tower_forward(Tower.bind(nodes, "bottom"), emb))
        for t in range(config.num_tasks):
            v_t = tower_forward(Tower.bind(nodes, f"tower.{t}"), trunk)
            out.predictions.append(_head(nodes, t, v_t))
    return out


def pimm_forward(config, params, features, labels=None, epoch=None, rng=None, mode="infer"):
    if config.kind != "pimm":
        raise ContractError(f"pimm_forward called with model kind {config.kind!r}")
    return forward(config, params, features, labels, epoch, rng, mode)


def aitm_forward(config, params, features, labels=None, epoch=None, rng=None, mode="infer"):
    if config.kind != "aitm":
        raise ContractError(f"aitm_forward called with model kind {config.kind!r}")
    return forward(config, params, features, labels, epoch, rng, mode)


def esmm_forward(config, params, features, labels=None, epoch=None, rng=None, mode="infer"):
    if config.kind != "esmm":
        raise ContractError(f"esmm_forward called with model kind {config.kind!r}")
    return forward(config, params, features, labels, epoch, rng, mode)


def shared_bottom_forward(config, params, features, labels=None, epoch=None, rng=None, mode="infer"):
    if config.kind != "shared_bottom":
        raise ContractError(f"shared_bottom_forward called with model kind {config.kind!r}")
    return forward(config, params, features, labels, epoch, rng, mode)


def multitask_loss(outputs: TaskOutputs, labels, weights=None) -> Node:
    """Sum of per-task mean BCE on the reported probabilities."""
    labels = np.asarray(labels)
    check_cascade_labels(labels)
    if labels.shape[1] != len(outputs.predictions):
        raise ShapeError(
            f"{labels.shape[1]} label columns for {len(outputs.predictions)} tasks"
        )
    total = None
    for t, pred in enumerate(outputs.predictions):
        term = nx.bce_loss(pred, labels[:, t : t + 1])
        if weights is not None and weights[t] != 1.0:
            term = nx.scale(term, weights[t])
        total = term if total is None else nx.add(total, term)
    return total


def predict(config, params, features, batch_size=4096) -> np.ndarray:
    """Inference-mode probabilities ``[n, num_tasks]`` computed in chunks."""
    features = np.asarray(features)
    chunks = [
        forward(config, params, features[i : i + batch_size]).probabilities
        for i in range(0, len(features), batch_size)
    ]
    if not chunks:
        return np.zeros((0, config.num_tasks))
    return np.vstack(chunks)
