"""
A synthetic conversion funnel
=============================

Labels form a cascade: a purchase can only follow a click. The generator
draws one latent logit per stage from per-id weights, carries part of the
previous stage's logit forward, and calibrates each stage so that its
positive rate among eligible rows matches the request.
"""

import tempfile
from pathlib import Path

import numpy as np

from pimm.data import DatasetSchema, SyntheticConfig, generate_cascade, load_csv_dataset, write_csv_dataset
from pimm.errors import ValidationError

cfg = SyntheticConfig(num_samples=20_000, num_fields=4, vocab_sizes=50, rates=[0.3, 0.2, 0.5], seed=7)
ds = generate_cascade(cfg)
print("tasks", ds.schema.task_names)
print("marginal positive rates", np.round(ds.positive_rates(), 4))

y = ds.labels
print("click given impression  ", round(float(y[:, 0].mean()), 4))
print("conversion given click  ", round(float(y[y[:, 0] == 1, 1].mean()), 4))
print("core given conversion   ", round(float(y[y[:, 1] == 1, 2].mean()), 4))

patterns, counts = np.unique(y, axis=0, return_counts=True)
print("\nlabel patterns that occur:")
for pat, c in zip(patterns, counts):
    print("  ", pat, c)

# CSV files follow the same rule; a purchase without a click is refused
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "funnel.csv"
    write_csv_dataset(path, ds.subset(np.arange(5)))
    print("\n" + path.read_text())

    bad = Path(tmp) / "bad.csv"
    bad.write_text("f_u,y_click,y_buy\n3,1,1\n4,0,1\n", encoding="utf-8")
    try:
        load_csv_dataset(bad, DatasetSchema(["u"], [10], ["click", "buy"]))
    except ValidationError as exc:
        print("rejected:", exc)
