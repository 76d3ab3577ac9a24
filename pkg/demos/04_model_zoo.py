"""
Four multi-task architectures, one forward pass each
====================================================

``shared_bottom`` shares an MLP trunk, ``esmm`` multiplies conditional
probabilities along the funnel, ``aitm`` passes a learned representation
from each task to the next through attention, and ``pimm`` adds an
embedded premise (label or prediction of the previous task) to that
representation.
"""

import numpy as np

from pimm.models import MODEL_KINDS, ModelConfig, forward, init_params
from pimm.pim import PUBLIC_SCHEDULE

rng = np.random.default_rng(3)
features = np.column_stack([rng.integers(0, 20, 6), rng.integers(0, 8, 6)])
labels = np.array([[1, 1, 0], [1, 0, 0], [0, 0, 0], [1, 1, 1], [0, 0, 0], [1, 0, 0]])

for kind in MODEL_KINDS:
    cfg = ModelConfig(["user", "item"], [20, 8], num_tasks=3, kind=kind, embedding_dim=4,
                      tower_dims=[16, 8], bottom_dims=[16],
                      schedule=PUBLIC_SCHEDULE if kind == "pimm" else None)
    params = init_params(cfg, seed=0)
    out = forward(cfg, params, features)
    print(f"{kind:>13}: {sum(v.size for v in params.values()):5d} parameters")
    print(np.round(out.probabilities, 4))

# ESMM probabilities can only shrink along the funnel
cfg = ModelConfig(["user", "item"], [20, 8], num_tasks=3, kind="esmm", embedding_dim=4, tower_dims=[16, 8])
probs = forward(cfg, init_params(cfg, 5), features).probabilities
print("esmm non-increasing:", bool(np.all(np.diff(probs, axis=1) <= 0)))

# in training mode PIMM can be handed labels as premises
cfg = ModelConfig(["user", "item"], [20, 8], num_tasks=3, kind="pimm", embedding_dim=4,
                  tower_dims=[16, 8], schedule=PUBLIC_SCHEDULE)
params = init_params(cfg, 0)
train = forward(cfg, params, features, labels, epoch=0, rng=np.random.default_rng(0), mode="train")
for t, mask in enumerate(train.selections):
    if mask is not None:
        print(f"task {t} premise came from the label:", mask.astype(int))
