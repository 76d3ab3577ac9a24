"""Command line: ``pimm gen-data | train | compare``.

Configuration is a sectioned ``key = value`` file (INI style)::

    [data]
    rates = 0.1, 0.1

    [model]
    kind = pimm

    [pim]
    alpha = 0.5
    speed = 0.25
    beta = 0.25

Any key can be overridden with ``--set section.key=value``. Unknown keys
are rejected. Exit codes: 0 ok, 1 I/O failure, 2 config error, 3 data
validation error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass


from .data import (
    DatasetSchema,
    SyntheticConfig,
    atomic_write_text,
    default_task_names,
    generate_cascade,
    load_csv_dataset,
    read_csv_header,
    split_validation,
    train_test_split,
    write_csv_dataset,
)
from .errors import ConfigError, NumericError, ParseError, ValidationError
from .layers import save_checkpoint
from .models import MODEL_KINDS, ModelConfig
from .pim import ScheduleConfig
from .training import TrainConfig, aggregate_runs, format_mean_std, train_loop

logger = logging.getLogger("pimm")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

PUBLISHED, CHOSEN = "published setting", "implementation choice"
REQUIRED = object()


@dataclass(frozen=True)
class Key:
    kind: str  # str | int | float | ints | floats | strs
    default: object
    source: str
    help: str


# the default synthetic benchmark is SyntheticConfig's defaults plus a 10k test split
_SYN = SyntheticConfig()

KEYS: dict[str, Key] = {
    "data.train_path": Key("str", "", CHOSEN, "training CSV; empty = generate the synthetic benchmark"),
    "data.test_path": Key("str", "", CHOSEN, "test CSV (CSV mode); empty = report validation AUC"),
    "data.fields": Key("strs", "", CHOSEN, "feature field names (CSV mode; default c0..c{n-1})"),
    "data.vocab_sizes": Key("ints", _SYN.vocab_sizes[0], CHOSEN, "vocabulary size per field, or one value for all"),
    "data.tasks": Key("strs", "", CHOSEN, "task names in funnel order (default from number of rates)"),
    "data.num_fields": Key("int", _SYN.num_fields, CHOSEN, "synthetic: number of categorical fields"),
    "data.num_samples": Key("int", _SYN.num_samples, CHOSEN, "synthetic: rows generated (train + test)"),
    "data.test_size": Key("int", 10000, CHOSEN, "synthetic: rows held out as test set"),
    "data.rates": Key("floats", ", ".join(map(str, _SYN.rates)), CHOSEN,
                      "synthetic: positive rate per stage among rows positive on the previous stage"),
    "data.dependence": Key("float", _SYN.dependence, CHOSEN,
                           "synthetic: weight of the previous stage's latent logit in the next one"),
    "data.weight_scale": Key("float", _SYN.weight_scale, CHOSEN, "synthetic: scale of the per-id latent weights"),
    "data.seed": Key("int", _SYN.seed, CHOSEN, "synthetic: generator seed"),
    "model.kind": Key("str", "pimm", CHOSEN, "one of " + ", ".join(MODEL_KINDS)),
    "model.embedding_dim": Key("int", "5", PUBLISHED, "embedding width per field (24 for the industrial setting)"),
    "model.tower_dims": Key("ints", "128, 64, 32", PUBLISHED, "task tower widths; the last one is the transfer width d"),
    "model.bottom_dims": Key("ints", "128", CHOSEN, "shared trunk widths (shared_bottom only)"),
    "model.task_weights": Key("floats", "", CHOSEN, "per-task loss weights; empty = all 1"),
    "pim.alpha": Key("float", REQUIRED, PUBLISHED, "initial label-premise probability (published: 0.5; industrial 2/3)"),
    "pim.speed": Key("float", REQUIRED, PUBLISHED, "decrease per epoch (published: 0.25; industrial 1/3)"),
    "pim.beta": Key("float", REQUIRED, PUBLISHED, "lower limit (published: 0.25; industrial 0)"),
    "train.lr": Key("float", "0.001", PUBLISHED, "Adam learning rate (published sweep: 0.0005, 0.001, 0.0015, 0.002)"),
    "train.batch_size": Key("int", "256", CHOSEN, "mini-batch size"),
    "train.epochs": Key("int", "10", CHOSEN, "last epoch index K; epochs 0..K are run"),
    "train.seeds": Key("ints", "1, 2, 3, 4, 5", PUBLISHED, "one run per seed (published: five runs)"),
    "train.val_fraction": Key("float", "0.1", PUBLISHED, "share of training rows held out for model selection"),
    "compare.models": Key("strs", "shared_bottom, esmm, aitm, pimm", CHOSEN, "model kinds to compare"),
}

PIM_KEYS = ("pim.alpha", "pim.speed", "pim.beta")


def keys_help() -> str:
    lines = ["configuration keys (default; provenance):"]
    for name, key in KEYS.items():
        default = "required for model pimm" if key.default is REQUIRED else repr(key.default)
        lines.append(f"  {name:<20} {default}; {key.source}. {key.help}")
    return "\n".join(lines)


# -- config -------------------------------------------------------------------

def _convert(name, raw):
    kind = KEYS[name].kind
    raw = str(raw).strip()
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            if "/" in raw:
                num, den = raw.split("/")
                return float(num) / float(den)
            return float(raw)
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if kind == "ints":
            return [int(x) for x in items]
        if kind == "floats":
            return [float(x) for x in items]
        return items
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}", key=name) from None


class RunConfig:
    """Parsed and validated key/value configuration."""

    def __init__(self, raw: dict[str, str]):
        for name in raw:
            if name not in KEYS:
                raise ConfigError(f"unknown configuration key {name!r}", key=name)
        self.raw = dict(raw)

    @classmethod
    def load(cls, path=None, overrides=()):
        raw: dict[str, str] = {}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                for key, value in parser.items(section):
                    raw[f"{section}.{key}"] = value
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            name, value = item.split("=", 1)
            raw[name.strip()] = value
        return cls(raw)

    def has(self, name):
        return name in self.raw

    def get(self, name):
        if name in self.raw:
            return _convert(name, self.raw[name])
        default = KEYS[name].default
        if default is REQUIRED:
            raise ConfigError(f"missing required key {name}", key=name)
        return _convert(name, default)

    # builders

    def synthetic(self) -> SyntheticConfig:
        rates = self.get("data.rates")
        num_fields = self.get("data.num_fields")
        vocab = self.get("data.vocab_sizes")
        if len(vocab) == 1:
            vocab = vocab * num_fields
        tasks = self.get("data.tasks") or default_task_names(len(rates))
        return SyntheticConfig(
            num_samples=self.get("data.num_samples"),
            num_fields=num_fields,
            vocab_sizes=vocab,
            weight_scale=self.get("data.weight_scale"),
            rates=rates,
            dependence=self.get("data.dependence"),
            seed=self.get("data.seed"),
            task_names=tasks,
        )

    def schedule(self, kind) -> ScheduleConfig | None:
        if kind != "pimm":
            return None
        alpha, speed, beta = (self.get(k) for k in PIM_KEYS)
        return ScheduleConfig(alpha, speed, beta)

    def model(self, kind: str, schema: DatasetSchema) -> ModelConfig:
        weights = self.get("model.task_weights") or None
        return ModelConfig(
            field_names=list(schema.field_names),
            vocab_sizes=list(schema.vocab_sizes),
            num_tasks=schema.num_tasks,
            kind=kind,
            embedding_dim=self.get("model.embedding_dim"),
            tower_dims=self.get("model.tower_dims"),
            bottom_dims=self.get("model.bottom_dims"),
            schedule=self.schedule(kind),
            task_weights=weights,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.get("train.lr"),
            batch_size=self.get("train.batch_size"),
            epochs=self.get("train.epochs"),
            seeds=self.get("train.seeds"),
            val_fraction=self.get("train.val_fraction"),
        )


# -- data -----------------------------------------------------------------------

def load_datasets(cfg: RunConfig):
    """``(train, test_or_None)`` from CSV paths, or the synthetic benchmark."""
    train_path = cfg.get("data.train_path")
    if not train_path:
        full = generate_cascade(cfg.synthetic())
        test_size = cfg.get("data.test_size")
        if not 0 <= test_size < len(full):
            raise ConfigError("data.test_size must be smaller than data.num_samples", key="data.test_size")
        if test_size == 0:
            return full, None
        return train_test_split(full, test_size)

    header = read_csv_header(train_path)
    fields = cfg.get("data.fields") or [h[2:] for h in header if h.startswith("f_")]
    tasks = cfg.get("data.tasks") or [h[2:] for h in header if h.startswith("y_")]
    vocab = cfg.get("data.vocab_sizes")
    if len(vocab) == 1:
        vocab = vocab * len(fields)
    schema = DatasetSchema(fields, vocab, tasks)
    if header != schema.header:
        raise ParseError(
            f"{train_path}: header {header} does not match configured schema {schema.header}", line=1
        )
    train = load_csv_dataset(train_path, schema)
    test_path = cfg.get("data.test_path")
    test = load_csv_dataset(test_path, schema) if test_path else None
    for name, ds in (("train", train), ("test", test)):
        if ds is not None and ds.oov_count:
            logger.warning("%s data: %d out-of-vocabulary ids mapped to 0", name, ds.oov_count)
    return train, test


# -- runs ---------------------------------------------------------------------

def run_one(cfg_raw: dict, kind: str, seed: int, out_dir: str, save: bool):
    """Train one (model, seed) pair; module-level so worker processes can call it."""
    cfg = RunConfig(cfg_raw)
    train, test = load_datasets(cfg)
    tc = cfg.train()
    mc = cfg.model(kind, train.schema)
    fit, val = split_validation(train, tc.val_fraction, seed)
    params, metrics = train_loop(mc, tc, fit, val=val, test=test, seed=seed)
    if save:
        save_checkpoint(os.path.join(out_dir, f"{kind}-seed{seed}.ckpt"), params)
        write_loss_curve(os.path.join(out_dir, f"loss-{kind}-seed{seed}.csv"), metrics)
    return metrics


def write_loss_curve(path, metrics):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    tasks = metrics.task_names
    w.writerow(["epoch", "loss", "p", "label_rate"] + [f"val_auc_{t}" for t in tasks])
    for e, loss in enumerate(metrics.loss_curve):
        val = metrics.val_auc[e] if e < len(metrics.val_auc) else [""] * len(tasks)
        p = metrics.sampling_p[e]
        rate = metrics.label_selection_rate[e]
        w.writerow([e, repr(loss), "" if p is None else repr(p), "" if rate is None else repr(rate)]
                   + [repr(v) if v != "" else "" for v in val])
    atomic_write_text(path, buf.getvalue())


def metrics_csv(all_metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "task", "seed", "auc"])
    for m in all_metrics:
        for task, auc in zip(m.task_names, m.auc):
            w.writerow([m.model, task, m.seed, repr(float(auc))])
    return buf.getvalue()


def summarize(all_metrics, models):
    """Rows ``(model, task, mean, std)`` in the order of ``models``."""
    rows = []
    for kind in models:
        runs = [m for m in all_metrics if m.model == kind]
        for t, task in enumerate(runs[0].task_names):
            mean, std = aggregate_runs([m.auc[t] for m in runs])
            rows.append((kind, task, mean, std))
    return rows


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "task", "mean", "std"])
    for kind, task, mean, std in rows:
        w.writerow([kind, task, repr(mean), repr(std)])
    return buf.getvalue()


def summary_table(rows, seeds) -> str:
    width = max(len(r[0]) for r in rows)
    twidth = max(len(r[1]) for r in rows)
    lines = [f"AUC over seeds {list(seeds)} (mean ± population std)",
             f"{'model':<{width}}  {'task':<{twidth}}  auc"]
    for kind, task, mean, std in rows:
        lines.append(f"{kind:<{width}}  {task:<{twidth}}  {format_mean_std(mean, std)}")
    return "\n".join(lines) + "\n"


def _run_all(cfg, kinds, seeds, out_dir, jobs, save):
    tasks = [(kind, seed) for kind in kinds for seed in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_one, cfg.raw, k, s, out_dir, save) for k, s in tasks]
            return [f.result() for f in futures]
    return [run_one(cfg.raw, k, s, out_dir, save) for k, s in tasks]


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, output: str) -> int:
    ds = generate_cascade(cfg.synthetic())
    write_csv_dataset(output, ds)
    summary_path = os.path.splitext(output)[0] + ".summary.json"
    summary = ds.summary()
    atomic_write_text(summary_path, json.dumps(summary, indent=2) + "\n")
    print(f"wrote {output} ({len(ds)} rows)")
    print(f"wrote {summary_path}")
    print("positive rates: " + ", ".join(f"{t}={r:.4f}" for t, r in zip(summary["tasks"], summary["positive_rates"])))
    return EXIT_OK


def _seeds(cfg, args):
    return [args.seed] if args.seed is not None else cfg.train().seeds


def cmd_train(cfg: RunConfig, args) -> int:
    kind = cfg.get("model.kind")
    if kind == "pimm":
        cfg.schedule(kind)  # fail fast on missing pim.* keys
    seeds = _seeds(cfg, args)
    os.makedirs(args.out, exist_ok=True)
    results = _run_all(cfg, [kind], seeds, args.out, args.jobs, save=True)
    path = os.path.join(args.out, "metrics.csv")
    atomic_write_text(path, metrics_csv(results))
    for seed in seeds:
        print(f"checkpoint: {os.path.join(args.out, f'{kind}-seed{seed}.ckpt')}")
    print(f"metrics: {path}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    kinds = list(dict.fromkeys(cfg.get("compare.models")))
    for kind in kinds:
        if kind not in MODEL_KINDS:
            raise ConfigError(f"compare.models: unknown model {kind!r}", key="compare.models")
        if kind == "pimm":
            cfg.schedule(kind)
    seeds = _seeds(cfg, args)
    os.makedirs(args.out, exist_ok=True)
    results = _run_all(cfg, kinds, seeds, args.out, args.jobs, save=False)
    rows = summarize(results, kinds)
    atomic_write_text(os.path.join(args.out, "metrics.csv"), metrics_csv(results))
    atomic_write_text(os.path.join(args.out, "summary.csv"), summary_csv(rows))
    table = summary_table(rows, seeds)
    atomic_write_text(os.path.join(args.out, "summary.txt"), table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="run this single seed instead of train.seeds")
    common.add_argument("--jobs", type=int, default=1, help="parallel training runs (default 1)")
    common.add_argument("--out", default="runs", help="output directory (default ./runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = argparse.ArgumentParser(
        prog="pimm",
        description="Train and compare multi-task models on funnel-shaped binary targets.",
        epilog=keys_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter
    gen = sub.add_parser("gen-data", parents=[common], help="write a synthetic cascade CSV",
                         epilog=keys_help(), formatter_class=fmt)
    gen.add_argument("--output", required=True, help="CSV path; a .summary.json is written next to it")
    sub.add_parser("train", parents=[common], help="train model.kind for each seed",
                   epilog=keys_help(), formatter_class=fmt)
    sub.add_parser("compare", parents=[common], help="train every compare.models kind on shared seeds",
                   epilog=keys_help(), formatter_class=fmt)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.output)
        if args.command == "train":
            return cmd_train(cfg, args)
        return cmd_compare(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationError, ParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
