"""Prior information merging.

Each downstream task receives a premise about the task before it: either
the true label or the prior task's predicted probability, drawn per sample.
The chance of handing over the true label decays linearly with the epoch
down to a floor. The chosen premise is embedded to ``d`` dimensions and
added to the hidden representation passed on by the prior task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, ShapeError
from .numerics import Node


@dataclass(frozen=True)
class ScheduleConfig:
    """Curriculum parameters: start value ``alpha``, per-epoch decrease
    ``speed`` and floor ``beta``."""

    alpha: float = 0.5
    speed: float = 0.25
    beta: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.beta <= self.alpha <= 1.0:
            raise ConfigError(
                f"schedule needs 0 <= beta <= alpha <= 1, got alpha={self.alpha}, beta={self.beta}",
                key="pim.beta" if self.beta > self.alpha or self.beta < 0 else "pim.alpha",
            )
        if self.speed < 0:
            raise ConfigError(f"schedule speed must be >= 0, got {self.speed}", key="pim.speed")


# settings reported for the public click/purchase data and the three-task industrial data
PUBLIC_SCHEDULE = ScheduleConfig(alpha=0.5, speed=0.25, beta=0.25)
INDUSTRIAL_SCHEDULE = ScheduleConfig(alpha=2 / 3, speed=1 / 3, beta=0.0)


def sampling_probability(config: ScheduleConfig, epoch: int) -> float:
    """Probability of handing the true label downstream during ``epoch``."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return max(config.alpha - epoch * config.speed, config.beta)


def premise_mask(batch: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Independent per-sample draws: True where the true label is used."""
    return rng.random(batch) < p


def select_premise(y_true, y_hat: Node, p: float, rng, mode: str = "train",
                   mask: np.ndarray | None = None) -> Node:
    """Pick label or prediction per sample, then cut the gradient.

    ``y_hat`` is a ``[batch, 1]`` probability node. In ``"infer"`` mode the
    prediction is always used and ``y_true``/``rng`` are ignored. A
    precomputed ``mask`` (True = label) replaces the random draw.
    """
    if mode == "infer":
        return nx.stop_gradient(y_hat)
    if mode != "train":
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    if y_true is None:
        raise ContractError("train mode needs the prior task's labels")
    y_true = np.asarray(y_true, dtype=np.float64).reshape(y_hat.shape)
    if mask is None:
        mask = premise_mask(y_hat.shape[0], p, rng)
    keep = mask.reshape(y_hat.shape).astype(np.float64)
    graph = y_hat.graph
    mixed = nx.add(
        nx.mul(graph.constant(1.0 - keep), y_hat),
        graph.constant(keep * y_true),
    )
    return nx.stop_gradient(mixed)


@dataclass
class PremiseEmbedder:
    weight: Node  # [1, d]
    owner_task: int = 1

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


def premise_embed(embedder: PremiseEmbedder, y_star: Node) -> Node:
    """Lift the scalar premise to ``sigmoid(y_star * W)``, shape ``[batch, d]``."""
    return nx.sigmoid(nx.matmul(y_star, embedder.weight))


@dataclass
class TaskMessage:
    implicit: Node
    explicit: Node | None
    merged: Node


def merge_messages(explicit: Node, implicit: Node) -> Node:
    if explicit.shape != implicit.shape:
        raise ShapeError(f"merge: explicit {explicit.shape} vs implicit {implicit.shape}")
    return nx.add(explicit, implicit)
