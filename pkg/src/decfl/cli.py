"""Command-line surface: config ingestion, experiment execution and
results persistence.

Config files are a single JSON document with sections {topology,
dataset, allocation, strategy, training, run}. Unknown keys anywhere
are hard errors so hyperparameter typos cannot silently change a run.
All emitted JSON uses sorted keys; rounds.csv floats are written with
repr so re-running an identical config reproduces the bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from . import __version__
from . import data as data_mod
from . import graph as graph_mod
from . import metrics as metrics_mod
from . import nn
from . import simulator as sim
from . import strategies as strat
from .metrics import RoundRecord

CSV_HEADER = [
    "replica", "round", "node", "strategy",
    "accuracy", "test_ce_loss", "comm_floats_sent", "gini",
]

CHARACTERISTIC_FRACTIONS = (0.5, 0.8, 0.9, 0.95)


class ConfigError(ValueError):
    """Config validation failure, message includes the offending field path."""


def _section(doc: dict, name: str, allowed: set[str], required: set[str] = frozenset()) -> dict:
    sec = doc.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing section '{name}'")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{name}' must be an object")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {sorted(unknown)}")
    missing = required - set(sec)
    if missing:
        raise ConfigError(f"missing key(s) in '{name}': {sorted(missing)}")
    return sec


def parse_config(doc: dict) -> tuple[sim.SimConfig, dict]:
    """Validate a config document and build the typed SimConfig.

    Returns (config, extras) where extras holds run-level settings the
    simulator itself does not consume (threads, centralized reference).
    """
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    unknown = set(doc) - {"topology", "dataset", "allocation", "strategy", "training", "run"}
    if unknown:
        raise ConfigError(f"unknown top-level section(s): {sorted(unknown)}")

    topo_doc = _section(doc, "topology", {"kind", "n", "p", "m", "seed", "per_replica"},
                        {"kind", "n"})
    ds_doc = _section(
        doc, "dataset",
        {"kind", "n_per_class", "num_classes", "feature_dim", "spread",
         "test_n_per_class", "seed", "train_images", "train_labels",
         "test_images", "test_labels", "per_class_cap"},
        {"kind"},
    )
    alloc_doc = _section(doc, "allocation", {"alpha", "min_per_class", "seed"})
    strat_doc = _section(doc, "strategy", {"kind", "s", "epsilon", "beta", "ge_eta"}, {"kind"})
    train_doc = _section(
        doc, "training",
        {"rounds", "local_epochs", "batch_size", "eta", "mu", "hidden",
         "reset_velocity_on_aggregate"},
    )
    run_doc = _section(
        doc, "run",
        {"replicas", "master_seed", "eval_every", "centralized_accuracy",
         "checkpoint_dir", "threads"},
    )

    hidden = train_doc.get("hidden", "tiny")
    if isinstance(hidden, str):
        if hidden not in nn.HIDDEN_PRESETS:
            raise ConfigError(
                f"training.hidden: unknown preset {hidden!r}; "
                f"available: {sorted(nn.HIDDEN_PRESETS)}"
            )
        hidden_dims = nn.HIDDEN_PRESETS[hidden]
    else:
        hidden_dims = tuple(int(h) for h in hidden)

    try:
        config = sim.SimConfig(
            topology=sim.TopologySpec(
                kind=topo_doc["kind"],
                n=int(topo_doc["n"]),
                p=topo_doc.get("p"),
                m=topo_doc.get("m"),
                seed=int(topo_doc.get("seed", 0)),
                per_replica=bool(topo_doc.get("per_replica", False)),
            ),
            dataset=sim.DatasetSpec(
                kind=ds_doc["kind"],
                n_per_class=int(ds_doc.get("n_per_class", 100)),
                num_classes=int(ds_doc.get("num_classes", 10)),
                feature_dim=int(ds_doc.get("feature_dim", 16)),
                spread=float(ds_doc.get("spread", 0.1)),
                test_n_per_class=int(ds_doc.get("test_n_per_class", 50)),
                seed=int(ds_doc.get("seed", 0)),
                train_images=ds_doc.get("train_images"),
                train_labels=ds_doc.get("train_labels"),
                test_images=ds_doc.get("test_images"),
                test_labels=ds_doc.get("test_labels"),
                per_class_cap=ds_doc.get("per_class_cap"),
            ),
            allocation=sim.AllocationSpec(
                alpha=float(alloc_doc.get("alpha", 1.26)),
                min_per_class=int(alloc_doc.get("min_per_class", 1)),
                seed=alloc_doc.get("seed"),
            ),
            strategy=strat.StrategyConfig(
                kind=strat_doc["kind"],
                s=float(strat_doc.get("s", 1.0)),
                epsilon=strat_doc.get("epsilon"),
                beta=float(strat_doc.get("beta", 0.9)),
                ge_eta=strat_doc.get("ge_eta"),
            ),
            rounds=int(train_doc.get("rounds", 200)),
            local_epochs=int(train_doc.get("local_epochs", 1)),
            batch_size=int(train_doc.get("batch_size", 32)),
            sgd=nn.SgdConfig(
                eta=float(train_doc.get("eta", 0.001)),
                mu=float(train_doc.get("mu", 0.5)),
            ),
            hidden_dims=hidden_dims,
            replicas=int(run_doc.get("replicas", 1)),
            master_seed=int(run_doc.get("master_seed", 0)),
            eval_every=int(run_doc.get("eval_every", 1)),
            reset_velocity_on_aggregate=bool(
                train_doc.get("reset_velocity_on_aggregate", False)
            ),
            checkpoint_dir=run_doc.get("checkpoint_dir"),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    if config.dataset.kind == "idx":
        missing = [
            k for k in ("train_images", "train_labels", "test_images", "test_labels")
            if getattr(config.dataset, k) is None
        ]
        if missing:
            raise ConfigError(f"dataset: idx kind requires {missing}")
    if config.topology.kind == "erdos_renyi" and config.topology.p is None:
        raise ConfigError("topology: erdos_renyi requires 'p'")
    if config.topology.kind == "barabasi_albert" and config.topology.m is None:
        raise ConfigError("topology: barabasi_albert requires 'm'")

    extras = {
        "threads": int(run_doc.get("threads", 1)),
        "centralized_accuracy": run_doc.get("centralized_accuracy"),
    }
    return config, extras


def config_to_doc(config: sim.SimConfig, extras: dict) -> dict:
    """Effective config as a plain document (echoed into outputs)."""
    return {
        "topology": {
            "kind": config.topology.kind,
            "n": config.topology.n,
            "p": config.topology.p,
            "m": config.topology.m,
            "seed": config.topology.seed,
            "per_replica": config.topology.per_replica,
        },
        "dataset": {
            "kind": config.dataset.kind,
            "n_per_class": config.dataset.n_per_class,
            "num_classes": config.dataset.num_classes,
            "feature_dim": config.dataset.feature_dim,
            "spread": config.dataset.spread,
            "test_n_per_class": config.dataset.test_n_per_class,
            "seed": config.dataset.seed,
            "train_images": config.dataset.train_images,
            "train_labels": config.dataset.train_labels,
            "test_images": config.dataset.test_images,
            "test_labels": config.dataset.test_labels,
            "per_class_cap": config.dataset.per_class_cap,
        },
        "allocation": {
            "alpha": config.allocation.alpha,
            "min_per_class": config.allocation.min_per_class,
            "seed": config.allocation.seed,
        },
        "strategy": {
            "kind": config.strategy.kind,
            "s": config.strategy.s,
            "epsilon": config.strategy.epsilon,
            "beta": config.strategy.beta,
            "ge_eta": config.strategy.ge_eta,
        },
        "training": {
            "rounds": config.rounds,
            "local_epochs": config.local_epochs,
            "batch_size": config.batch_size,
            "eta": config.sgd.eta,
            "mu": config.sgd.mu,
            "hidden": list(config.hidden_dims),
            "reset_velocity_on_aggregate": config.reset_velocity_on_aggregate,
        },
        "run": {
            "replicas": config.replicas,
            "master_seed": config.master_seed,
            "eval_every": config.eval_every,
            "centralized_accuracy": extras.get("centralized_accuracy"),
            "checkpoint_dir": config.checkpoint_dir,
            "threads": extras.get("threads", 1),
        },
    }


def write_rounds_csv(records: list[RoundRecord], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for r in sorted(records, key=lambda r: (r.replica, r.round, r.node_id)):
            writer.writerow([
                r.replica, r.round, r.node_id, r.strategy,
                repr(r.accuracy), repr(r.test_ce_loss),
                r.comm_floats_sent, repr(r.gini_of_allocation),
            ])


def read_rounds_csv(path: Path) -> list[RoundRecord]:
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(RoundRecord(
                replica=int(row["replica"]),
                round=int(row["round"]),
                node_id=int(row["node"]),
                accuracy=float(row["accuracy"]),
                test_ce_loss=float(row["test_ce_loss"]),
                strategy=row["strategy"],
                gini_of_allocation=float(row["gini"]),
                comm_floats_sent=int(row["comm_floats_sent"]),
            ))
    return records


def summarize(records: list[RoundRecord], config_doc: dict | None,
              centralized_accuracy: float | None) -> dict:
    """Per-strategy final accuracy, CI, characteristic times and
    final-round node quantiles."""
    by_strategy: dict[str, list[RoundRecord]] = {}
    for r in records:
        by_strategy.setdefault(r.strategy, []).append(r)

    strategies_out = {}
    for kind, recs in sorted(by_strategy.items()):
        replicas = sorted({r.replica for r in recs})
        last_round = max(r.round for r in recs)
        rounds = sorted({r.round for r in recs})
        replica_finals = []
        per_replica_series = []
        for rep in replicas:
            rep_recs = [r for r in recs if r.replica == rep]
            series = [
                metrics_mod.avg_accuracy([r for r in rep_recs if r.round == t])
                for t in rounds
            ]
            per_replica_series.append(series)
            replica_finals.append(
                metrics_mod.avg_accuracy([r for r in rep_recs if r.round == last_round])
            )
        entry = {
            "final_avg_accuracy": float(sum(replica_finals) / len(replica_finals)),
            "ci_half_width": (
                metrics_mod.confidence_interval(replica_finals)
                if len(replica_finals) >= 2 else None
            ),
            "characteristic_times": {},
            "final_round": last_round,
            "node_quantiles_last_round": metrics_mod.node_quantiles(
                [r for r in recs if r.round == last_round]
            ),
            "replica_final_accuracies": replica_finals,
        }
        for frac in CHARACTERISTIC_FRACTIONS:
            key = f"{int(frac * 100)}"
            if centralized_accuracy is None:
                entry["characteristic_times"][key] = None
            else:
                entry["characteristic_times"][key] = metrics_mod.avg_characteristic_time(
                    per_replica_series, centralized_accuracy, frac
                )
        strategies_out[kind] = entry

    out = {"strategies": strategies_out, "version": __version__}
    if config_doc is not None:
        out["config"] = config_doc
    return out


def _write_json(doc: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def cmd_run(args) -> int:
    config_path = Path(args.config)
    out_dir = Path(args.out_dir)
    try:
        doc = json.loads(config_path.read_text())
        config, extras = parse_config(doc)
    except FileNotFoundError:
        print(f"error: config not found: {config_path}", file=sys.stderr)
        return 2
    except (json.JSONDecodeError, ConfigError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    if args.seed_override is not None:
        config = sim.SimConfig(**{**config.__dict__, "master_seed": args.seed_override})
    threads = args.threads if args.threads is not None else extras["threads"]

    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[RoundRecord] = []
    replica_ginis = {}
    failures = []
    for replica in range(config.replicas):
        try:
            rep_records = sim.run_replica(config, replica, threads=threads)
            records.extend(rep_records)
            if rep_records:
                replica_ginis[str(replica)] = rep_records[0].gini_of_allocation
        except (OSError, ValueError, data_mod.IdxFormatError) as exc:
            failures.append({"replica": replica, "error": str(exc)})
            print(f"error: replica {replica} failed: {exc}", file=sys.stderr)

    config_doc = config_to_doc(config, {**extras, "threads": threads})
    paths = {
        "rounds": str(out_dir / "rounds.csv"),
        "summary": str(out_dir / "summary.json"),
        "manifest": str(out_dir / "manifest.json"),
    }
    if records:
        write_rounds_csv(records, out_dir / "rounds.csv")
        _write_json(
            summarize(records, config_doc, extras["centralized_accuracy"]),
            out_dir / "summary.json",
        )
    manifest = {
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": config_doc,
        "replica_ginis": replica_ginis,
        "outputs": paths,
        "failures": failures,
    }
    _write_json(manifest, out_dir / "manifest.json")
    return 1 if failures else 0


def cmd_gen_graph(args) -> int:
    try:
        if args.kind == "er":
            topo = graph_mod.gen_erdos_renyi(args.n, args.p_or_m, args.seed)
        elif args.kind == "ba":
            topo = graph_mod.gen_barabasi_albert(args.n, int(args.p_or_m), args.seed)
        else:
            print(f"error: unknown graph kind {args.kind!r}", file=sys.stderr)
            return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    Path(args.out).write_text(topo.to_json() + "\n")
    degrees = [topo.degree(i) for i in range(topo.node_count)]
    print(f"nodes: {topo.node_count}")
    print(f"edges: {len(topo.edges)}")
    print(f"connected: {topo.is_connected()}")
    print(f"degree min/max: {min(degrees)}/{max(degrees)}")
    return 0


def cmd_allocate(args) -> int:
    ds = data_mod.synth_blobs(args.n_per_class, args.num_classes, 2, 0.1, args.dataset_seed)
    try:
        alloc = data_mod.zipf_allocate(ds, args.n, args.alpha, args.min_per_class, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    Path(args.out).write_text(alloc.to_json() + "\n")
    totals = data_mod.per_node_totals(alloc)
    print("per-node totals:", " ".join(str(int(t)) for t in totals))
    print(f"gini: {data_mod.gini(totals):.4f}")
    return 0


def cmd_eval(args) -> int:
    out_dir = Path(args.out_dir)
    rounds_path = out_dir / "rounds.csv"
    if not rounds_path.exists():
        print(f"error: {rounds_path} not found", file=sys.stderr)
        return 2
    records = read_rounds_csv(rounds_path)
    config_doc = None
    centralized = args.centralized_accuracy
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        config_doc = manifest.get("config")
        if centralized is None and config_doc:
            centralized = config_doc.get("run", {}).get("centralized_accuracy")
    _write_json(summarize(records, config_doc, centralized), out_dir / "summary.json")
    print(f"wrote {out_dir / 'summary.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decfl",
        description="Deterministic decentralized federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a simulation from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out-dir", required=True)
    p_run.add_argument("--threads", type=int, default=None)
    p_run.add_argument("--seed-override", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_graph = sub.add_parser("gen-graph", help="generate a topology JSON file")
    p_graph.add_argument("kind", choices=["er", "ba"])
    p_graph.add_argument("n", type=int)
    p_graph.add_argument("p_or_m", type=float)
    p_graph.add_argument("seed", type=int)
    p_graph.add_argument("out")
    p_graph.set_defaults(func=cmd_gen_graph)

    p_alloc = sub.add_parser("allocate", help="partition a synthetic dataset across nodes")
    p_alloc.add_argument("--n", type=int, required=True)
    p_alloc.add_argument("--alpha", type=float, default=1.26)
    p_alloc.add_argument("--min-per-class", type=int, default=1)
    p_alloc.add_argument("--seed", type=int, default=0)
    p_alloc.add_argument("--n-per-class", type=int, default=500)
    p_alloc.add_argument("--num-classes", type=int, default=10)
    p_alloc.add_argument("--dataset-seed", type=int, default=0)
    p_alloc.add_argument("--out", required=True)
    p_alloc.set_defaults(func=cmd_allocate)

    p_eval = sub.add_parser("eval", help="re-derive summary.json from rounds.csv")
    p_eval.add_argument("--out-dir", required=True)
    p_eval.add_argument("--centralized-accuracy", type=float, default=None)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
