"""
Training and comparing on a small funnel
========================================

A reduced version of the benchmark comparison: every model is trained on
the same data and seeds, the epoch with the best validation AUC on the
final task is kept, and test AUC is reported as mean and population
standard deviation. Runs in well under a minute.
"""

from pimm.data import SyntheticConfig, generate_cascade, split_validation, train_test_split
from pimm.models import ModelConfig
from pimm.pim import PUBLIC_SCHEDULE
from pimm.training import TrainConfig, aggregate_runs, format_mean_std, train_loop

data = generate_cascade(SyntheticConfig(num_samples=8000, num_fields=4, vocab_sizes=30,
                                        rates=[0.3, 0.3], dependence=0.5, weight_scale=2.0, seed=1))
train, test = train_test_split(data, 2000)
tc = TrainConfig(learning_rate=0.002, batch_size=128, epochs=4, seeds=[1, 2, 3])

print(f"{'model':>13}  {'click':>16}  {'purchase':>16}")
for kind in ("shared_bottom", "esmm", "aitm", "pimm"):
    cfg = ModelConfig(list(data.schema.field_names), list(data.schema.vocab_sizes), kind=kind,
                      embedding_dim=5, tower_dims=[32, 16], bottom_dims=[32],
                      schedule=PUBLIC_SCHEDULE if kind == "pimm" else None)
    runs = []
    for seed in tc.seeds:
        fit, val = split_validation(train, tc.val_fraction, seed)
        _, metrics = train_loop(cfg, tc, fit, val=val, test=test, seed=seed)
        runs.append(metrics)
    cells = [format_mean_std(*aggregate_runs([m.auc[t] for m in runs])) for t in range(2)]
    print(f"{kind:>13}  {cells[0]:>16}  {cells[1]:>16}")

last = runs[-1]
print("\nPIMM seed", last.seed, "premise probability per epoch:", last.sampling_p)
print("observed label share per epoch:", [round(r, 3) for r in last.label_selection_rate])
print("selected epoch:", last.selected_epoch)
