"""Command line front end: synth, train, eval, and experiment suites.

All outputs are deterministic under a fixed seed; the only timestamp lives in
the first line of a training log. Reports and tables are JSON with sorted
keys, training logs are append-only JSON lines.
"""

import argparse
import datetime
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import SyntheticSpec, generate_with_stats, load_dataset, save_dataset
from .errors import ConfigError, ScenarioCtrError
from .features import RecordEncoder
from .metrics import (MutualTrace, auc, per_scenario_eval, predict_all,
                      read_metrics_report, rela_impr, write_metrics_report)
from .model import ScenarioModel
from .training import Trainer

TRAINLOG_FORMAT = "scenarioctr.trainlog.v1"
SUITE_FORMAT = "scenarioctr.suite.v1"
ABLATION_KINDS = ("full", "no_gate", "no_aux", "no_gate_mut", "unified_baseline")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _hidden_arg(text):
    try:
        return tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad hidden widths {text!r}, expected e.g. 128,64")


def _model_schema(cfg, data_schema):
    """The dataset owns fields and vocabularies; the config owns dimensions."""
    return replace(data_schema, global_dim=cfg.global_dim,
                   specific_dim=cfg.specific_dim, max_seq_len=cfg.max_seq_len)


def _build_model(cfg, schema, variant=None):
    return ScenarioModel(schema, variant or cfg.variant,
                         np.random.default_rng(cfg.seed), hidden=cfg.hidden,
                         heads=cfg.heads, mutual_layer=cfg.mutual_layer,
                         gate_bias_init=cfg.gate_bias_init)


def _schema_mismatch(model_schema, data_schema):
    """Name the first field-level incompatibility, or return None."""
    if model_schema.num_scenarios != data_schema.num_scenarios:
        return (f"num_scenarios: checkpoint has {model_schema.num_scenarios}, "
                f"data has {data_schema.num_scenarios}")
    if model_schema.scenario_field != data_schema.scenario_field:
        return (f"scenario_field: checkpoint has {model_schema.scenario_field!r}, "
                f"data has {data_schema.scenario_field!r}")
    mine = {f.name: f for f in model_schema.fields}
    theirs = {f.name: f for f in data_schema.fields}
    for name in sorted(set(mine) | set(theirs)):
        if name not in theirs:
            return f"field {name!r}: present in checkpoint, missing from data"
        if name not in mine:
            return f"field {name!r}: present in data, missing from checkpoint"
        a, b = mine[name], theirs[name]
        for attr in ("category", "kind", "vocab_size"):
            if getattr(a, attr) != getattr(b, attr):
                return (f"field {name!r}: {attr} differs "
                        f"(checkpoint {getattr(a, attr)!r}, data {getattr(b, attr)!r})")
    return None


def _encode_splits(schema, dataset, scenario_filter=None):
    train_records = dataset.train_records()
    test_records = dataset.test_records()
    if scenario_filter is not None:
        if scenario_filter >= schema.num_scenarios:
            raise ConfigError(
                f"scenario_filter {scenario_filter} outside [0, {schema.num_scenarios})")
        train_records = [r for r in train_records if r.scenario_id == scenario_filter]
        test_records = [r for r in test_records if r.scenario_id == scenario_filter]
    encoder = RecordEncoder(schema).fit(train_records)
    return encoder, encoder.encode_all(train_records), encoder.encode_all(test_records)


def _evaluable(encoded):
    return encoded.n > 0 and 0 < encoded.label.sum() < encoded.n


def _collect_trace(model, encoded, chunk_size=512):
    trace = MutualTrace(model.schema.num_scenarios)
    for lo in range(0, encoded.n, chunk_size):
        batch = encoded.take(np.arange(lo, min(lo + chunk_size, encoded.n)))
        out = model.forward(batch)
        trace.accumulate(out.alpha, out.gates, owners=batch.scenario)
    return trace


def cmd_synth(args):
    spec = SyntheticSpec.from_file(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    dataset, stats = generate_with_stats(spec)
    save_dataset(dataset, args.out)
    print(f"wrote {stats['total']} records to {args.out}")
    print(f"overall positive rate {stats['positive_rate']:.4f}")
    for s in range(spec.num_scenarios):
        print(f"scenario {s}: {stats['per_scenario_counts'][s]} records, "
              f"positive rate {stats['per_scenario_positive_rate'][s]:.4f}")
    return 0


def _train_one(cfg, schema, dataset, variant=None, scenario_filter=None,
               log=None, eval_each_epoch=True):
    encoder, train, test = _encode_splits(schema, dataset, scenario_filter)
    model = _build_model(cfg, schema, variant)
    trainer = Trainer(model, learning_rate=cfg.learning_rate)
    eval_set = test if eval_each_epoch and _evaluable(test) else None
    history = trainer.fit(train, epochs=cfg.epochs, batch_size=cfg.batch_size,
                          shuffle_seed=cfg.seed, eval_set=eval_set, log=log)
    return model, history, encoder, test


def cmd_train(args):
    cfg = load_config(args.config, **_config_overrides(args))
    data_path = args.data or cfg.data
    if not data_path:
        raise ConfigError("no dataset given: set 'data' in the config or pass --data")
    dataset = load_dataset(data_path)
    data_hash = _sha256(data_path)
    schema = _model_schema(cfg, dataset.schema)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        header = {"format": TRAINLOG_FORMAT,
                  "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                  "config": cfg.to_dict(), "data_sha256": data_hash}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.flush()

        def log(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            line = (f"epoch {entry['epoch']}: L_target {entry['l_target']:.6f} "
                    f"L_aux {entry['l_aux']:.6f}")
            if "auc" in entry:
                line += f" test AUC {entry['auc']:.6f}"
            print(line)

        model, history, encoder, _ = _train_one(
            cfg, schema, dataset, scenario_filter=cfg.scenario_filter, log=log)

    ckpt_path = out / "checkpoint.npz"
    model.save(ckpt_path, norm_stats=encoder.stats,
               extra={"config": cfg.to_dict(), "data_sha256": data_hash,
                      "final": history[-1]})
    print(f"checkpoint written to {ckpt_path}")
    return 0


def cmd_eval(args):
    model, stats = ScenarioModel.load(args.checkpoint)
    dataset = load_dataset(args.data)
    mismatch = _schema_mismatch(model.schema, dataset.schema)
    if mismatch:
        raise ConfigError(f"checkpoint does not fit this dataset: {mismatch}")
    encoder = RecordEncoder(model.schema, stats)
    test = encoder.encode_all(dataset.test_records())
    if test.n == 0:
        raise ConfigError("dataset has no held-out records to evaluate")
    table = per_scenario_eval(model, test)

    rela = None
    if args.baseline_report:
        base = read_metrics_report(args.baseline_report)["overall"]["auc"]
        rela = {"baseline_auc": base,
                "percent": rela_impr(table["overall"]["auc"], base)}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    write_metrics_report(report_path, table, rela=rela,
                         extra={"variant": model.flags.kind,
                                "data_sha256": _sha256(args.data)})
    print(f"overall AUC {table['overall']['auc']:.6f} "
          f"({table['overall']['count']} records)")
    for row in table["scenarios"]:
        if row["single_class"]:
            print(f"scenario {row['scenario']}: single-class "
                  f"({row['count']} records), AUC skipped")
        else:
            print(f"scenario {row['scenario']}: AUC {row['auc']:.6f} "
                  f"({row['count']} records)")
    if rela:
        print(f"RelaImpr vs baseline: {rela['percent']:.2f}%")

    if model.mutual is not None:
        trace_path = out / "trace.json"
        _collect_trace(model, test).export(trace_path)
        print(f"mutual trace written to {trace_path}")
    print(f"report written to {report_path}")
    return 0


def _suite_ablation(cfg, dataset, data_hash):
    schema = _model_schema(cfg, dataset.schema)
    rows = []
    for kind in ABLATION_KINDS:
        model, _, _, test = _train_one(cfg, schema, dataset, variant=kind,
                                       scenario_filter=None, eval_each_epoch=False)
        rows.append({"variant": kind,
                     "auc": auc(predict_all(model, test), test.label),
                     "data_sha256": data_hash})
    base = next(r["auc"] for r in rows if r["variant"] == "unified_baseline")
    for row in rows:
        row["rela_impr_vs_unified"] = (None if base == 0.5
                                       else rela_impr(row["auc"], base))
    return rows


def _suite_per_scenario(cfg, dataset, data_hash):
    schema = _model_schema(cfg, dataset.schema)
    jobs = [(f"individual_{s}", "individual_baseline", s)
            for s in range(schema.num_scenarios)]
    jobs += [("unified_baseline", "unified_baseline", None), ("full", "full", None)]
    rows = []
    for name, kind, scen in jobs:
        model, _, encoder, _ = _train_one(cfg, schema, dataset, variant=kind,
                                          scenario_filter=scen, eval_each_epoch=False)
        # score every model on the full held-out split, under its own normalization
        table = per_scenario_eval(model, encoder.encode_all(dataset.test_records()))
        rows.append({
            "model": name,
            "variant": kind,
            "trained_on_scenario": scen,
            "data_sha256": data_hash,
            "auc_by_scenario": {f"scenario_{r['scenario']}": r["auc"]
                                for r in table["scenarios"]},
        })
    return rows


def cmd_suite(args):
    cfg = load_config(args.config, **_config_overrides(args))
    data_path = args.data or cfg.data
    if not data_path:
        raise ConfigError("no dataset given: set 'data' in the config or pass --data")
    dataset = load_dataset(data_path)
    data_hash = _sha256(data_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.suite == "ablation":
        rows = _suite_ablation(cfg, dataset, data_hash)
    else:
        rows = _suite_per_scenario(cfg, dataset, data_hash)
    payload = {"format": SUITE_FORMAT, "suite": args.suite,
               "data_sha256": data_hash, "config": cfg.to_dict(), "rows": rows}
    path = out / f"suite_{args.suite}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")

    for row in rows:
        if args.suite == "ablation":
            rela = row["rela_impr_vs_unified"]
            extra = "" if rela is None else f"  RelaImpr {rela:+.2f}%"
            print(f"{row['variant']:<20} AUC {row['auc']:.6f}{extra}")
        else:
            cols = "  ".join(f"{k} {v:.4f}" if v is not None else f"{k} n/a"
                             for k, v in sorted(row["auc_by_scenario"].items()))
            print(f"{row['model']:<20} {cols}")
    print(f"table written to {path}")
    return 0


def _config_overrides(args):
    keys = ("variant", "epochs", "batch_size", "learning_rate", "hidden", "heads",
            "global_dim", "specific_dim", "max_seq_len", "mutual_layer",
            "gate_bias_init", "seed", "scenario_filter")
    return {k: getattr(args, k) for k in keys if hasattr(args, k)}


def _add_config_flags(p, with_variant=True):
    if with_variant:
        p.add_argument("--variant", help="model variant to train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--hidden", type=_hidden_arg, help="tower widths, e.g. 128,64")
    p.add_argument("--heads", type=int)
    p.add_argument("--global-dim", dest="global_dim", type=int)
    p.add_argument("--specific-dim", dest="specific_dim", type=int)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    p.add_argument("--mutual-layer", dest="mutual_layer", type=int)
    p.add_argument("--gate-bias-init", dest="gate_bias_init", type=float)
    p.add_argument("--scenario-filter", dest="scenario_filter", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scenarioctr",
        description="Multi-scenario CTR models: synthesize, train, evaluate, compare.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="generator settings file (JSON)")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--config", help="run configuration file (JSON)")
    p.add_argument("--data", help="dataset file (overrides the config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline-report", dest="baseline_report",
                   help="metrics report to compute RelaImpr against")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("suite", help="train and compare a family of variants")
    p.add_argument("suite", choices=("ablation", "per_scenario"))
    p.add_argument("--config", help="run configuration file (JSON)")
    p.add_argument("--data", help="dataset file (overrides the config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    _add_config_flags(p, with_variant=False)
    p.set_defaults(func=cmd_suite)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioCtrError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
