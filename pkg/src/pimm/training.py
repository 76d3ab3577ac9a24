"""Optimisation, evaluation and multi-seed aggregation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .data import CascadeDataset, batch_iter
from .errors import ConfigError, ContractError, NumericError, ValidationError
from .models import ModelConfig, forward, init_params, multitask_loss, predict

logger = logging.getLogger(__name__)

LEARNING_RATE_SWEEP = (0.0005, 0.001, 0.0015, 0.002)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs: int = 10  # epochs run are E = 0, 1, ..., epochs
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be > 0", key="train.lr")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1", key="train.batch_size")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", key="train.epochs")
        if not self.seeds:
            raise ConfigError("need at least one seed", key="train.seeds")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)", key="train.val_fraction")


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


class Adam:
    def __init__(self, lr=0.001, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, params, grads):
        adam_step(params, grads, self.state, self.lr, self.betas, self.eps)


# -- metrics ------------------------------------------------------------------

def compute_auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank-sum; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractError(f"{scores.size} scores for {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class RunMetrics:
    model: str
    seed: int
    task_names: list[str]
    auc: list[float]
    selected_epoch: int
    loss_curve: list[float] = field(default_factory=list)
    val_auc: list[list[float]] = field(default_factory=list)
    sampling_p: list[float | None] = field(default_factory=list)
    label_selection_rate: list[float | None] = field(default_factory=list)


def aggregate_runs(values) -> tuple[float, float]:
    """Mean and population standard deviation of per-seed values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("aggregate_runs needs at least one run")
    return float(arr.mean()), float(arr.std())


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f} ± {std:.4f}"


def evaluate(config: ModelConfig, params, dataset: CascadeDataset) -> list[float]:
    """Per-task AUC in inference mode; NaN where a task has one class only."""
    probs = predict(config, params, dataset.features)
    out = []
    for t in range(config.num_tasks):
        try:
            out.append(compute_auc(probs[:, t], dataset.labels[:, t]))
        except ValidationError:
            out.append(float("nan"))
    return out


# -- training loop ------------------------------------------------------------

def train_loop(config: ModelConfig, train_config: TrainConfig, train: CascadeDataset,
               val: CascadeDataset | None = None, test: CascadeDataset | None = None,
               seed: int | None = None, params=None):
    """Train one model for one seed.

    Epochs ``E = 0..train_config.epochs`` run in order; PIMM's premise
    schedule is evaluated at ``E``. After each epoch the validation AUC is
    measured in inference mode and the parameters of the epoch with the
    best final-task validation AUC are kept (the last epoch if there is no
    validation set). The reported AUC is on ``test`` when given, else on
    ``val``.

    Returns ``(params, RunMetrics)``.
    """
    seed = train_config.seeds[0] if seed is None else seed
    init_seq, premise_seq = np.random.SeedSequence(seed).spawn(2)
    if params is None:
        params = init_params(config, int(init_seq.generate_state(1)[0]))
    premise_rng = np.random.default_rng(premise_seq)
    opt = Adam(train_config.learning_rate)
    weights = config.task_weights
    last = config.num_tasks - 1

    metrics = RunMetrics(config.kind, seed, list(train.schema.task_names), [], 0)
    best_score, best_params = -np.inf, None
    for epoch in range(train_config.epochs + 1):
        losses, picked, drawn, p = [], 0, 0, None
        for b, (feats, labels) in enumerate(
            batch_iter(train, train_config.batch_size, shuffle_seed=seed, epoch=epoch)
        ):
            out = forward(config, params, feats, labels, epoch, premise_rng, mode="train")
            try:
                loss = multitask_loss(out, labels, weights)
                nx.backward(loss)
            except NumericError as exc:
                raise NumericError(f"{config.kind} seed {seed} epoch {epoch} batch {b}: {exc}") from exc
            if not np.isfinite(loss.value):
                raise NumericError(f"{config.kind} seed {seed} epoch {epoch} batch {b}: loss is NaN")
            opt.step(params, nx.param_grads(out.graph))
            losses.append(float(loss.value))
            p = out.p
            for mask in out.selections:
                if mask is not None:
                    picked += int(mask.sum())
                    drawn += mask.size
        metrics.loss_curve.append(float(np.mean(losses)) if losses else float("nan"))
        metrics.sampling_p.append(p)
        metrics.label_selection_rate.append(picked / drawn if drawn else None)

        if val is not None and len(val):
            scores = evaluate(config, params, val)
            metrics.val_auc.append(scores)
            score = scores[last]
            logger.info("%s seed=%d epoch=%d loss=%.5f val_auc=%s", config.kind, seed, epoch,
                        metrics.loss_curve[-1], ["%.4f" % s for s in scores])
            if np.isfinite(score) and score > best_score:
                best_score = score
                best_params = {k: v.copy() for k, v in params.items()}
                metrics.selected_epoch = epoch
        else:
            metrics.selected_epoch = epoch
    if best_params is not None:
        params = best_params

    report = test if test is not None else val
    metrics.auc = evaluate(config, params, report) if report is not None else []
    return params, metrics
