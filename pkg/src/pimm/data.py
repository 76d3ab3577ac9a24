"""Cascade datasets: synthetic generation, CSV I/O and batching.

Labels follow a funnel: task ``t+1`` can only be positive when task ``t``
is. Every entry point that accepts labels checks this.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import ConfigError, ParseError, ValidationError


@dataclass(frozen=True)
class DatasetSchema:
    field_names: tuple[str, ...]
    vocab_sizes: tuple[int, ...]
    task_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "field_names", tuple(self.field_names))
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        object.__setattr__(self, "task_names", tuple(self.task_names))
        if len(self.task_names) < 2:
            raise ConfigError("schema needs at least two tasks", key="data.tasks")
        if len(self.field_names) != len(self.vocab_sizes):
            raise ConfigError(
                f"{len(self.field_names)} fields but {len(self.vocab_sizes)} vocab sizes",
                key="data.vocab_sizes",
            )
        if any(v < 2 for v in self.vocab_sizes):
            raise ConfigError("vocab sizes must be >= 2", key="data.vocab_sizes")

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    @property
    def header(self) -> list[str]:
        return [f"f_{n}" for n in self.field_names] + [f"y_{t}" for t in self.task_names]


@dataclass
class CascadeDataset:
    schema: DatasetSchema
    features: np.ndarray  # int64 [n, num_fields]
    labels: np.ndarray  # int8 [n, num_tasks]
    oov_count: int = 0

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "CascadeDataset":
        return CascadeDataset(self.schema, self.features[index], self.labels[index])

    def positive_rates(self) -> list[float]:
        if len(self) == 0:
            return [0.0] * self.schema.num_tasks
        return [float(r) for r in self.labels.mean(axis=0)]

    def summary(self) -> dict:
        return {
            "num_samples": len(self),
            "tasks": list(self.schema.task_names),
            "positive_counts": [int(c) for c in self.labels.sum(axis=0)],
            "positive_rates": self.positive_rates(),
        }


def invalid_cascade_rows(labels) -> np.ndarray:
    """0-based indices of rows with some adjacent pair (0, 1)."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] < 2:
        return np.zeros(0, dtype=np.int64)
    bad = (labels[:, 1:] > labels[:, :-1]).any(axis=1)
    return np.flatnonzero(bad)


def check_cascade_labels(labels):
    """Raise :class:`ValidationError` unless every row is a valid funnel."""
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    bad = invalid_cascade_rows(labels)
    if bad.size:
        shown = ", ".join(str(i + 1) for i in bad[:10])
        more = f" (+{bad.size - 10} more)" if bad.size > 10 else ""
        raise ValidationError(
            f"label rows violate the cascade constraint (a positive after a negative): rows {shown}{more}",
            rows=bad + 1,
        )


# -- synthetic generation -----------------------------------------------------

@dataclass
class SyntheticConfig:
    """Parameters of the synthetic funnel.

    ``rates[t]`` is the target positive rate of task ``t`` among samples
    positive on task ``t-1`` (unconditional for task 0). ``dependence``
    scales how much of the prior task's latent logit enters the next one.
    """

    num_samples: int = 60_000
    num_fields: int = 8
    vocab_sizes: list[int] | int = 100
    weight_scale: float = 2.0
    rates: list[float] = field(default_factory=lambda: [0.3, 0.1])
    dependence: float = 0.0
    seed: int = 0
    task_names: list[str] | None = None

    def __post_init__(self):
        if isinstance(self.vocab_sizes, int):
            self.vocab_sizes = [self.vocab_sizes] * self.num_fields
        self.vocab_sizes = [int(v) for v in self.vocab_sizes]
        self.rates = [float(r) for r in self.rates]
        if self.task_names is None:
            self.task_names = default_task_names(len(self.rates))
        if self.num_samples < 0:
            raise ConfigError("num_samples must be >= 0", key="data.num_samples")
        if len(self.vocab_sizes) != self.num_fields:
            raise ConfigError("need one vocab size per field", key="data.vocab_sizes")
        if len(self.rates) < 2:
            raise ConfigError("need rates for at least two tasks", key="data.rates")
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ConfigError("rates must lie in [0, 1]", key="data.rates")
        if len(self.task_names) != len(self.rates):
            raise ConfigError("need one task name per rate", key="data.tasks")

    def schema(self) -> DatasetSchema:
        names = [f"c{j}" for j in range(self.num_fields)]
        return DatasetSchema(names, self.vocab_sizes, self.task_names)


def default_task_names(m: int) -> list[str]:
    if m == 2:
        return ["click", "purchase"]
    if m == 3:
        return ["click", "conversion", "core"]
    return [f"task{t}" for t in range(m)]


def _calibrated_probability(logit: np.ndarray, rate: float) -> np.ndarray:
    """``sigmoid(logit + b)`` with ``b`` chosen so the mean equals ``rate``."""
    if rate <= 0.0:
        return np.zeros_like(logit)
    if rate >= 1.0 or logit.size == 0:
        return np.full_like(logit, rate)
    shift = brentq(lambda b: expit(logit + b).mean() - rate, -60.0, 60.0, xtol=1e-12)
    return expit(logit + shift)


def generate_cascade(config: SyntheticConfig) -> CascadeDataset:
    """Sample a funnel dataset, bitwise reproducible for a given seed.

    Each field id draws a random weight per task; a task's latent logit is
    the sum of its weights over the sample's ids plus ``dependence`` times
    the previous task's latent logit. Task ``t`` is sampled only where task
    ``t-1`` is positive, with an intercept calibrated so the conditional
    positive rate matches ``rates[t]``.
    """
    rng = np.random.default_rng(config.seed)
    n, m = config.num_samples, len(config.rates)
    features = np.column_stack(
        [rng.integers(0, v, size=n) for v in config.vocab_sizes]
    ).astype(np.int64).reshape(n, config.num_fields)
    per_weight = config.weight_scale / np.sqrt(config.num_fields)
    tables = [[rng.normal(0.0, per_weight, size=v) for v in config.vocab_sizes] for _ in range(m)]

    labels = np.zeros((n, m), dtype=np.int8)
    reachable = np.ones(n, dtype=bool)
    latent_prev = np.zeros(n)
    for t in range(m):
        latent = sum(tables[t][j][features[:, j]] for j in range(config.num_fields))
        latent = latent + config.dependence * latent_prev
        prob = np.zeros(n)
        prob[reachable] = _calibrated_probability(latent[reachable], config.rates[t])
        draw = rng.random(n)
        labels[:, t] = reachable & (draw < prob)
        reachable = labels[:, t].astype(bool)
        latent_prev = latent
    return CascadeDataset(config.schema(), features, labels)


def train_test_split(dataset: CascadeDataset, test_size: int):
    """Last ``test_size`` rows become the test set (generation is i.i.d.)."""
    cut = len(dataset) - test_size
    return dataset.subset(slice(0, cut)), dataset.subset(slice(cut, None))


def split_validation(dataset: CascadeDataset, fraction: float, seed: int):
    """Random hold-out of ``fraction`` of the rows."""
    n_val = int(round(len(dataset) * fraction))
    if n_val == 0:
        return dataset, None
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def batch_iter(dataset: CascadeDataset, batch_size: int, shuffle_seed: int, epoch: int = 0):
    """Yield ``(features, labels)`` batches in a seeded order.

    The permutation is drawn from ``shuffle_seed + epoch`` so every epoch
    reshuffles; the last batch may be short.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(shuffle_seed + epoch).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]


# -- CSV ----------------------------------------------------------------------

def atomic_write_text(path, text: str):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_csv(dataset: CascadeDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(dataset.schema.header)
    for feats, labs in zip(dataset.features.tolist(), dataset.labels.tolist()):
        writer.writerow(feats + labs)
    return buf.getvalue()


def write_csv_dataset(path, dataset: CascadeDataset):
    atomic_write_text(path, dataset_to_csv(dataset))


def read_csv_header(path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh), [])


def schema_from_header(header, vocab_sizes) -> DatasetSchema:
    fields = [h[2:] for h in header if h.startswith("f_")]
    tasks = [h[2:] for h in header if h.startswith("y_")]
    return DatasetSchema(fields, vocab_sizes, tasks)


def load_csv_dataset(path, schema: DatasetSchema) -> CascadeDataset:
    """Read and validate a cascade CSV.

    Out-of-vocabulary ids map to 0 and are tallied in ``oov_count``.
    Cascade violations are collected over the whole file and reported
    together, by 1-based data row (the header is line 1, row 1 is line 2).
    """
    n_fields, n_tasks = len(schema.field_names), schema.num_tasks
    width = n_fields + n_tasks
    vocab = np.asarray(schema.vocab_sizes)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file, expected header", line=1)
        if [h.strip() for h in header] != schema.header:
            raise ParseError(
                f"{path}: header {header} does not match schema {schema.header}", line=1
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"{path}:{line_no}: expected {width} columns, got {len(row)}", line=line_no)
            try:
                values = [int(v) for v in row]
            except ValueError:
                raise ParseError(f"{path}:{line_no}: non-integer value in {row}", line=line_no) from None
            if any(v < 0 for v in values[:n_fields]):
                raise ParseError(f"{path}:{line_no}: negative feature id", line=line_no)
            if any(v not in (0, 1) for v in values[n_fields:]):
                raise ParseError(f"{path}:{line_no}: labels must be 0 or 1", line=line_no)
            rows.append(values)

    data = np.asarray(rows, dtype=np.int64).reshape(len(rows), width)
    features, labels = data[:, :n_fields].copy(), data[:, n_fields:].astype(np.int8)
    bad = invalid_cascade_rows(labels)
    if bad.size:
        pairs = []
        for i in bad[:20]:
            for t in range(n_tasks - 1):
                if labels[i, t] == 0 and labels[i, t + 1] == 1:
                    pairs.append(
                        f"row {i + 1} (line {i + 2}): y_{schema.task_names[t]}=0, y_{schema.task_names[t + 1]}=1"
                    )
        raise ValidationError(f"{path}: cascade constraint violated: " + "; ".join(pairs), rows=bad + 1)
    oov = features >= vocab
    features[oov] = 0
    return CascadeDataset(schema, features, labels, oov_count=int(oov.sum()))
