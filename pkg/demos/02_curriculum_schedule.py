"""
The label-premise curriculum
============================

During training, each downstream task is told whether the previous step
happened. Early on that premise is usually the true label; as epochs pass
it is increasingly the model's own prediction, down to a floor. At
inference it is always the prediction.
"""

import numpy as np

from pimm import numerics as nx
from pimm.pim import INDUSTRIAL_SCHEDULE, PUBLIC_SCHEDULE, ScheduleConfig, sampling_probability, select_premise

for name, sched in [("public", PUBLIC_SCHEDULE), ("industrial", INDUSTRIAL_SCHEDULE)]:
    ps = [sampling_probability(sched, e) for e in range(6)]
    print(f"{name:>10}: alpha={sched.alpha:.3f} speed={sched.speed:.3f} beta={sched.beta:.3f}")
    print("            p per epoch", np.round(ps, 4))

# per-sample draws: with p = 0.5 about half the rows see their true label
n = 20
y_true = np.array([1, 0] * (n // 2))
g = nx.Graph()
y_hat = g.param(np.linspace(0.05, 0.95, n).reshape(-1, 1))
chosen = select_premise(y_true, y_hat, 0.5, np.random.default_rng(1))
print("\nlabel    ", y_true)
print("predicted", np.round(y_hat.value.ravel(), 2))
print("premise  ", np.round(chosen.value.ravel(), 2))

# whichever value is chosen, no gradient reaches the upstream prediction
nx.backward(nx.mean(chosen))
print("gradient reaching y_hat:", y_hat.grad.ravel().max())

# a schedule that never hands out labels makes training look like inference
never = ScheduleConfig(alpha=0.0, speed=0.0, beta=0.0)
print("\np at epoch 0 with alpha=0:", sampling_probability(never, 0))
