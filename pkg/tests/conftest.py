import numpy as np
import pytest

from pimm.models import ModelConfig, init_params
from pimm.pim import ScheduleConfig


def make_config(kind="pimm", num_tasks=2, schedule=None, tower_dims=(4, 3)):
    return ModelConfig(
        field_names=["a", "b"],
        vocab_sizes=[4, 3],
        num_tasks=num_tasks,
        kind=kind,
        embedding_dim=2,
        tower_dims=list(tower_dims),
        bottom_dims=[5],
        schedule=schedule,
    )


def random_batch(n, seed=0, num_tasks=2):
    r = np.random.default_rng(seed)
    feats = np.column_stack([r.integers(0, 4, n), r.integers(0, 3, n)])
    labels = np.zeros((n, num_tasks), dtype=np.int8)
    alive = np.ones(n, dtype=bool)
    for t in range(num_tasks):
        labels[:, t] = alive & (r.random(n) < 0.6)
        alive = labels[:, t].astype(bool)
    return feats, labels


def perturbed_params(config, seed):
    """Initialised parameters with non-zero biases and larger embeddings."""
    params = init_params(config, seed)
    r = np.random.default_rng(seed + 1000)
    for k, v in params.items():
        if k.startswith("emb.") or k.endswith(".b"):
            params[k] = r.normal(scale=0.5, size=v.shape)
    return params


@pytest.fixture
def schedule():
    return ScheduleConfig(0.5, 0.25, 0.25)


# acceptance criteria report one line each; printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
