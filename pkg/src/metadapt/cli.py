"""Command-line entry point.

Subcommands: gen-corpus, pretrain, meta-train, baseline, adapt, evaluate,
sweep, report. Every run is driven by a JSON config file (schema documented
in the README) plus repeatable --set dotted-key overrides; all seeds are
explicit config values. Exit codes: 0 success, 2 config error, 3 data or I/O
error, 4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .corpus import Registry, SyntheticWorldSpec, Vocab, generate_world, load_registry
from .errors import ConfigError, DataIntegrityError, InputError, MetadaptError, NumericError
from .metrics import aggregate, corpus_bleu, chrf, read_records, write_records, write_report
from .model import AdapterConfig, ModelConfig
from .optim import OptimizerSettings
from .pipeline import (
    AdaptBudget,
    TrainedStrategies,
    adapt_and_evaluate,
    backbone_dev_bleu,
    hyperparam_sweep,
    pretrain_backbone,
    role_datasets,
    train_strategies,
    write_manifest,
    write_sweep,
    write_training_log,
)
from .training import (
    BaselineArtifact,
    BaselineStrategy,
    MetaConfig,
    STRATEGY_BACKBONE,
    STRATEGY_META_ADAPTER,
    STRATEGY_RANDOM_ADAPTER,
)

DEFAULT_CONFIG: dict = {
    "corpus_dir": "runs/corpus",
    "out_dir": "runs/exp",
    "seed": 0,
    "world": {},
    "model": {"model_dim": 64, "num_layers": 2, "num_heads": 4, "ffn_dim": 128,
              "max_seq_len": 48, "dropout": 0.1},
    "adapter": {"bottleneck_dim": 16, "ln_epsilon": 1e-5},
    "pretrain": {"epochs": 6, "lr": 2e-3, "batch_size": 32, "weight_decay": 0.0,
                 "max_steps": None},
    "meta": {"m": 8, "n": 8, "q": 8, "k": 3, "beta": 1.0, "tau": 1.0, "epochs": 3,
             "inner_lr": 1e-3, "max_meta_batches": None},
    "adapt": {"epochs": 1, "batch_size": 16, "lr": 1e-3, "max_steps": None},
    "eval": {"max_len": 32, "strategies": [STRATEGY_BACKBONE, STRATEGY_META_ADAPTER]},
    "caps": {"train": None, "adapt": None, "valid": None, "test": None},
    "strategy": STRATEGY_META_ADAPTER,
    "sweep": {"points": []},
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    if text == "inf":
        return math.inf
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc
        config = _deep_merge(config, user)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: '{part}' is not a table")
        node[parts[-1]] = _parse_value(value)
    return config


def _out_dir(config: dict) -> Path:
    out = Path(config["out_dir"])
    root = os.environ.get("METADAPT_OUT_ROOT")
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _caps(config: dict) -> dict[str, int] | None:
    caps = {k: v for k, v in config["caps"].items() if v is not None}
    return caps or None


def _model_configs(config: dict, vocab: Vocab) -> tuple[ModelConfig, AdapterConfig]:
    try:
        mc = ModelConfig(vocab_size=len(vocab), **config["model"])
        ac = AdapterConfig(**config["adapter"])
    except TypeError as exc:
        raise ConfigError(f"model/adapter config: {exc}") from exc
    ac.validate(mc.model_dim)
    return mc, ac


def _meta_config(config: dict) -> MetaConfig:
    meta = dict(config["meta"])
    inner = OptimizerSettings(lr=meta.pop("inner_lr", 1e-3))
    tau = meta.get("tau", 1.0)
    if tau == "inf":
        meta["tau"] = math.inf
    try:
        return MetaConfig(seed=config["seed"], inner=inner, **meta)
    except TypeError as exc:
        raise ConfigError(f"meta config: {exc}") from exc


def _budget(config: dict) -> AdaptBudget:
    adapt = config["adapt"]
    return AdaptBudget(epochs=adapt["epochs"], batch_size=adapt["batch_size"],
                       settings=OptimizerSettings(lr=adapt["lr"]),
                       max_steps=adapt.get("max_steps"))


def _load_world(config: dict) -> tuple[Registry, Vocab]:
    registry = load_registry(config["corpus_dir"])
    vocab = Vocab.load(registry.root / "vocab.json")
    return registry, vocab


def _backbone_path(config: dict) -> Path:
    return _out_dir(config) / "backbone.ckpt"


def _load_backbone(config: dict) -> dict[str, np.ndarray]:
    path = _backbone_path(config)
    if not path.exists():
        raise DataIntegrityError(f"backbone checkpoint not found at {path}; run `pretrain` first")
    return checkpoint.load_params(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(config: dict) -> int:
    if not config["world"]:
        raise ConfigError("gen-corpus: config must define a 'world' table")
    world = config["world"]
    for key in ("languages", "domains", "heldout_domains", "heldout_languages"):
        if key in world:
            world[key] = tuple(world[key])
    for key in ("neutral_len", "specialist_len"):
        if key in world:
            world[key] = tuple(world[key])
    try:
        spec = SyntheticWorldSpec(**world)
    except TypeError as exc:
        raise ConfigError(f"world config: {exc}") from exc
    registry = generate_world(spec, config["corpus_dir"])
    print(f"generated {len(registry.rows)} DLPs under {registry.root}")
    return 0


def cmd_pretrain(config: dict) -> int:
    registry, vocab = _load_world(config)
    mc, ac = _model_configs(config, vocab)
    pre = config["pretrain"]
    out = _out_dir(config)
    write_manifest(out, config, config["seed"])
    model, losses = pretrain_backbone(
        registry, vocab, mc, ac,
        OptimizerSettings(lr=pre["lr"], weight_decay=pre["weight_decay"]),
        epochs=pre["epochs"], batch_size=pre["batch_size"], seed=config["seed"],
        caps=_caps(config), max_steps=pre.get("max_steps"))
    checkpoint.save_params(out / "backbone.ckpt", {n: model.params[n].data for n in model.params})
    part = model.partition()
    meta = {"model": config["model"], "adapter": config["adapter"],
            "partition": {"backbone": sorted(part.backbone), "adapters": sorted(part.adapters)},
            "backbone_checksum": model.backbone_checksum()}
    (out / "backbone.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    write_training_log([{"step": i, "loss": v} for i, v in enumerate(losses)],
                       out / "pretrain_log.jsonl")
    dev = backbone_dev_bleu(model, vocab, registry, max_len=config["eval"]["max_len"])
    print(f"pretrained backbone: final loss {losses[-1]:.4f}, dev BLEU {dev:.2f}")
    return 0


def cmd_meta_train(config: dict) -> int:
    registry, vocab = _load_world(config)
    mc, ac = _model_configs(config, vocab)
    backbone = _load_backbone(config)
    datasets = role_datasets(registry, "meta_train", _caps(config))
    cfg = _meta_config(config)
    out = _out_dir(config)
    write_manifest(out, config, config["seed"])
    trained = train_strategies([STRATEGY_META_ADAPTER], mc, ac, vocab, backbone, datasets, cfg)
    checkpoint.save_params(out / "meta_adapter.ckpt", trained.meta_adapter)
    write_training_log(trained.meta_log, out / "training_log.jsonl")
    print(f"meta-trained adapter over {len(datasets)} DLPs "
          f"({sum(1 for r in trained.meta_log if 'meta_batch_loss' in r)} meta-batches)")
    return 0


def cmd_baseline(config: dict) -> int:
    strategy = config["strategy"]
    try:
        base = BaselineStrategy(strategy)
    except ValueError as exc:
        raise ConfigError(f"baseline: unknown strategy '{strategy}'") from exc
    registry, vocab = _load_world(config)
    mc, ac = _model_configs(config, vocab)
    backbone = _load_backbone(config)
    datasets = role_datasets(registry, "meta_train", _caps(config))
    cfg = _meta_config(config)
    out = _out_dir(config)
    write_manifest(out, config, config["seed"])
    trained = train_strategies([base.value], mc, ac, vocab, backbone, datasets, cfg)
    artifact = trained.baselines[base.value]
    art_dir = out / f"baseline_{base.value}"
    art_dir.mkdir(parents=True, exist_ok=True)
    for component, params in artifact.params.items():
        checkpoint.save_params(art_dir / f"{component.replace(':', '_')}.ckpt", params)
    (art_dir / "artifact.json").write_text(json.dumps(
        {"strategy": base.value, "components": sorted(artifact.params), "note": artifact.note},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"trained baseline {base.value} ({len(artifact.params)} component(s))")
    return 0


def _load_trained(config: dict, strategies: list[str]) -> TrainedStrategies:
    out = _out_dir(config)
    trained = TrainedStrategies()
    for strategy in strategies:
        if strategy in (STRATEGY_BACKBONE, STRATEGY_RANDOM_ADAPTER):
            continue
        if strategy == STRATEGY_META_ADAPTER:
            path = out / "meta_adapter.ckpt"
            if not path.exists():
                raise DataIntegrityError(f"{path} missing; run `meta-train` first")
            trained.meta_adapter = checkpoint.load_params(path)
            continue
        art_dir = out / f"baseline_{strategy}"
        index = art_dir / "artifact.json"
        if not index.exists():
            raise DataIntegrityError(f"{index} missing; run `baseline` for '{strategy}' first")
        info = json.loads(index.read_text(encoding="utf-8"))
        params = {c: checkpoint.load_params(art_dir / f"{c.replace(':', '_')}.ckpt")
                  for c in info["components"]}
        trained.baselines[strategy] = BaselineArtifact(
            BaselineStrategy(strategy), params, note=info.get("note", ""))
    return trained


def cmd_adapt_evaluate(config: dict) -> int:
    registry, vocab = _load_world(config)
    mc, ac = _model_configs(config, vocab)
    backbone = _load_backbone(config)
    strategies = config["eval"]["strategies"]
    trained = _load_trained(config, strategies)
    heldout = role_datasets(registry, "heldout", _caps(config))
    if not heldout:
        raise DataIntegrityError("no held-out DLPs in the registry")
    budget = _budget(config)
    records = []
    for dlp in sorted(heldout):
        for strategy in strategies:
            records.append(adapt_and_evaluate(
                strategy, dlp, heldout[dlp], mc=mc, ac=ac, vocab=vocab, backbone=backbone,
                trained=trained, budget=budget, run_seed=config["seed"],
                max_len=config["eval"]["max_len"]))
    out = _out_dir(config)
    write_manifest(out, config, config["seed"])
    write_records(records, out / "metrics.csv")
    for rec in records:
        print(f"{rec.dlp.key():30s} {rec.strategy:18s} BLEU {rec.bleu:6.2f} chrF {rec.chrf:6.2f}")
    return 0


def cmd_evaluate_files(hyp_path: str, ref_path: str) -> int:
    hyps = Path(hyp_path).read_text(encoding="utf-8").splitlines()
    refs = Path(ref_path).read_text(encoding="utf-8").splitlines()
    print(f"BLEU {corpus_bleu(hyps, refs):.2f}")
    print(f"chrF {chrf(hyps, refs):.2f}")
    return 0


def cmd_sweep(config: dict) -> int:
    points = config["sweep"]["points"]
    if not points:
        raise ConfigError("sweep: config must list sweep.points")
    points = [{k: (math.inf if v == "inf" else v) for k, v in p.items()} for p in points]
    registry, vocab = _load_world(config)
    mc, ac = _model_configs(config, vocab)
    backbone = _load_backbone(config)
    meta_datasets = role_datasets(registry, "meta_train", _caps(config))
    heldout = role_datasets(registry, "heldout", _caps(config))
    rows = hyperparam_sweep(points, _meta_config(config), mc=mc, ac=ac, vocab=vocab,
                            backbone=backbone, meta_datasets=meta_datasets, heldout=heldout,
                            budget=_budget(config), max_len=config["eval"]["max_len"])
    out = _out_dir(config)
    write_manifest(out, config, config["seed"])
    write_sweep(rows, out / "sweep.csv")
    best = next(r for r in rows if r["best"])
    print(f"swept {len(rows)} grid points; best mean BLEU {best['mean_bleu']:.2f}")
    return 0


def cmd_report(run_dirs: list[str], reference: str, out_dir: str) -> int:
    records = []
    logs = []
    for run in run_dirs:
        metrics = Path(run) / "metrics.csv"
        if not metrics.exists():
            raise DataIntegrityError(f"report: {metrics} not found")
        records.extend(read_records(metrics))
        for log_name in ("training_log.jsonl", "pretrain_log.jsonl"):
            log_path = Path(run) / log_name
            if log_path.exists():
                for line in log_path.read_text(encoding="utf-8").splitlines():
                    rec = json.loads(line)
                    if "meta_batch_loss" in rec or "loss" in rec:
                        logs.append({"run": Path(run).name, "log": log_name,
                                     "step": rec["step"],
                                     "loss": rec.get("meta_batch_loss", rec.get("loss"))})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(aggregate(records, "domain", reference), out / "table_by_domain.csv")
    write_report(aggregate(records, "language_pair", reference), out / "table_by_language_pair.csv")
    write_report(aggregate(records, "strategy", reference), out / "table_overall.csv")
    ordered = sorted(records, key=lambda r: (r.dlp, r.strategy))
    write_records(ordered, out / "details_by_dlp.csv")
    _write_efficiency(records, out / "efficiency.csv")
    _write_loss_curves(logs, out / "loss_curves.csv")
    print(f"report written to {out} ({len(records)} records, {len(logs)} loss points)")
    return 0


def _write_efficiency(records, path: Path) -> None:
    import csv

    rows = {}
    for rec in records:
        rows.setdefault(rec.strategy, (rec.trainable_params, rec.trainable_ratio, rec.note))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["strategy", "trainable_params", "trainable_ratio", "note"])
        for strategy in sorted(rows):
            count, ratio, note = rows[strategy]
            writer.writerow([strategy, count, f"{ratio:.6f}", note])


def _write_loss_curves(logs: list[dict], path: Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "log", "step", "loss"])
        for rec in logs:
            writer.writerow([rec["run"], rec["log"], rec["step"], f"{rec['loss']:.6f}"])


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metadapt",
        description="Meta-learned bottleneck adapters for multilingual multi-domain "
                    "translation on synthetic corpora.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON config file (defaults applied underneath)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, dotted keys (repeatable)")
        return p

    with_config(sub.add_parser("gen-corpus", help="generate the synthetic corpus tree"))
    with_config(sub.add_parser("pretrain", help="pretrain the frozen backbone"))
    with_config(sub.add_parser("meta-train", help="meta-train the shared adapter"))
    with_config(sub.add_parser("baseline", help="train the baseline named by config.strategy"))
    with_config(sub.add_parser("adapt", help="adapt every strategy to each held-out DLP "
                                             "and score it (writes metrics.csv)"))
    ev = with_config(sub.add_parser("evaluate", help="score adapted strategies, or score "
                                                     "a hypotheses file against references"))
    ev.add_argument("--hyp-file", help="hypotheses, one per line")
    ev.add_argument("--ref-file", help="references, one per line")
    with_config(sub.add_parser("sweep", help="run the hyperparameter sweep grid"))
    rep = sub.add_parser("report", help="aggregate metrics from completed runs")
    rep.add_argument("--runs", nargs="+", required=True, help="run directories with metrics.csv")
    rep.add_argument("--reference", default=STRATEGY_BACKBONE, help="reference strategy for deltas")
    rep.add_argument("--out", required=True, help="report output directory")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.runs, args.reference, args.out)
        if args.command == "evaluate" and args.hyp_file:
            if not args.ref_file:
                raise ConfigError("evaluate: --hyp-file requires --ref-file")
            return cmd_evaluate_files(args.hyp_file, args.ref_file)
        config = load_config(args.config, args.set)
        if args.command == "gen-corpus":
            return cmd_gen_corpus(config)
        if args.command == "pretrain":
            return cmd_pretrain(config)
        if args.command == "meta-train":
            return cmd_meta_train(config)
        if args.command == "baseline":
            return cmd_baseline(config)
        if args.command in ("adapt", "evaluate"):
            return cmd_adapt_evaluate(config)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataIntegrityError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except MetadaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
