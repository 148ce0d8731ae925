"""End-to-end stage orchestration: backbone pretraining, strategy training,
meta-adaptation, evaluation, and the hyperparameter sweep harness.

The two-stage protocol: strategies are first trained on the meta-training
DLPs (or not at all, for the zero-shot backbone and the random-init adapter),
then every strategy receives the *same* adaptation budget on each held-out
DLP's adapt split before being scored on its test split.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import Registry, Vocab, load_datasets
from .errors import InputError
from .metrics import MetricsRecord, corpus_bleu, chrf, count_trainable
from .model import (
    AdapterConfig,
    ModelConfig,
    TranslationModel,
    build_model,
    forward_loss,
    greedy_decode,
    hash_seed,
    make_batch,
)
from .optim import OptimizerSettings
from .tasks import DlpDataset, DlpId
from .training import (
    BaselineArtifact,
    BaselineStrategy,
    MetaConfig,
    STRATEGY_BACKBONE,
    STRATEGY_META_ADAPTER,
    STRATEGY_RANDOM_ADAPTER,
    install_stack,
    meta_adapt,
    meta_train,
    pooled_rows,
    restore_params,
    snapshot_params,
    supervised_train,
    train_baseline,
)

ADAPTER_STRATEGIES = (STRATEGY_META_ADAPTER, STRATEGY_RANDOM_ADAPTER,
                      BaselineStrategy.AGNOSTIC_ADAPTER.value)
FULL_STRATEGIES = (BaselineStrategy.FULL_FT.value, BaselineStrategy.TAG_FT.value,
                   BaselineStrategy.FULL_MODEL_META.value)


@dataclass(frozen=True)
class AdaptBudget:
    """Meta-adaptation stage budget, shared identically by every strategy."""

    epochs: int = 1
    batch_size: int = 16
    settings: OptimizerSettings = field(default_factory=lambda: OptimizerSettings(lr=1e-3))
    max_steps: int | None = None


def role_datasets(registry: Registry, role: str, caps: dict[str, int] | None = None,
                  ) -> dict[DlpId, DlpDataset]:
    ids = [r.dlp for r in registry.by_role(role)]
    return load_datasets(registry, ids, caps)


# ---------------------------------------------------------------------------
# backbone pretraining
# ---------------------------------------------------------------------------

def pretrain_backbone(registry: Registry, vocab: Vocab, mc: ModelConfig, ac: AdapterConfig,
                      settings: OptimizerSettings, epochs: int, batch_size: int, seed: int,
                      caps: dict[str, int] | None = None, max_steps: int | None = None,
                      ) -> tuple[TranslationModel, list[float]]:
    """Train a fresh backbone (no adapters) on the pretrain-domain DLPs, which
    cover every language of the world in the neutral domain."""
    datasets = role_datasets(registry, "pretrain", caps)
    if not datasets:
        raise InputError("pretrain_backbone: registry has no pretrain-role DLPs")
    model = build_model(mc, ac, seed=seed, adapter_groups=())
    losses = supervised_train(model, vocab, pooled_rows(datasets), settings, epochs,
                              batch_size, seed, trainable=list(model.params),
                              max_steps=max_steps)
    model.set_trainable([])
    return model, losses


def backbone_dev_bleu(model: TranslationModel, vocab: Vocab, registry: Registry,
                      sample_per_dlp: int = 8, max_len: int = 32) -> float:
    """Greedy-decode BLEU on the backbone's own pretraining dev set (the
    learnability gate for every downstream claim)."""
    hyps: list[str] = []
    refs: list[str] = []
    for row in registry.by_role("pretrain"):
        ds = load_datasets(registry, [row.dlp], caps={"valid": sample_per_dlp})[row.dlp]
        sources = [s for s, _ in ds.valid]
        refs.extend(t for _, t in ds.valid)
        hyps.extend(greedy_decode(model, vocab, sources, row.dlp.src_lang, row.dlp.tgt_lang, max_len))
    return corpus_bleu(hyps, refs)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_dlp(model: TranslationModel, vocab: Vocab, dlp: DlpId,
                 test_pairs, strategy: str, max_len: int,
                 with_domain_tag: bool = False,
                 counts: tuple[int, float] | None = None,
                 wall_time: float = 0.0, note: str = "") -> MetricsRecord:
    if not test_pairs:
        raise InputError(f"evaluate_dlp: no test pairs for {dlp.key()}")
    sources = [s for s, _ in test_pairs]
    refs = [t for _, t in test_pairs]
    hyps = greedy_decode(model, vocab, sources, dlp.src_lang, dlp.tgt_lang, max_len,
                         domain=dlp.domain if with_domain_tag else None)
    with T.no_grad():
        loss = float(forward_loss(model, make_batch(list(test_pairs), vocab, dlp,
                                                    with_domain_tag=with_domain_tag)).data)
    if counts is None:
        # the pretrained backbone counts as fully trained once (ratio 1)
        counts = (model.param_count(), 1.0)
    record = MetricsRecord(dlp=dlp, strategy=strategy, bleu=corpus_bleu(hyps, refs),
                           chrf=chrf(hyps, refs), loss=loss,
                           trainable_params=counts[0], trainable_ratio=counts[1],
                           wall_time=wall_time, note=note)
    record.validate()
    return record


# ---------------------------------------------------------------------------
# strategy training + adaptation runs
# ---------------------------------------------------------------------------

@dataclass
class TrainedStrategies:
    """Stage-one artifacts keyed by strategy name."""

    meta_adapter: dict[str, np.ndarray] | None = None
    baselines: dict[str, BaselineArtifact] = field(default_factory=dict)
    meta_log: list[dict] = field(default_factory=list)


def train_strategies(strategies: list[str], mc: ModelConfig, ac: AdapterConfig,
                     vocab: Vocab, backbone: dict[str, np.ndarray],
                     datasets: dict[DlpId, DlpDataset], cfg: MetaConfig,
                     batch_size: int = 16, max_steps: int | None = None) -> TrainedStrategies:
    """Run the meta-training stage for each strategy that needs one."""
    out = TrainedStrategies()
    for strategy in strategies:
        if strategy == STRATEGY_META_ADAPTER:
            model = build_model(mc, ac, seed=hash_seed(cfg.seed, 50), adapter_groups=("main",))
            restore_params(model, backbone)
            snap, log = meta_train(model, vocab, datasets, cfg)
            out.meta_adapter = snap.tensors
            out.meta_log = log
        elif strategy in (STRATEGY_BACKBONE, STRATEGY_RANDOM_ADAPTER):
            continue  # nothing to train
        else:
            base = BaselineStrategy(strategy)
            groups = ("main",) if base is BaselineStrategy.AGNOSTIC_ADAPTER else ()
            model = build_model(mc, ac, seed=hash_seed(cfg.seed, 50), adapter_groups=groups)
            restore_params(model, backbone)
            out.baselines[strategy] = train_baseline(base, model, vocab, datasets, cfg,
                                                     batch_size=batch_size, max_steps=max_steps)
    return out


def adapt_and_evaluate(strategy: str, dlp: DlpId, dataset: DlpDataset, *,
                       mc: ModelConfig, ac: AdapterConfig, vocab: Vocab,
                       backbone: dict[str, np.ndarray], trained: TrainedStrategies,
                       budget: AdaptBudget, run_seed: int, max_len: int,
                       registry_shape: tuple[int, int] | None = None) -> MetricsRecord:
    """Adapt one strategy to one held-out DLP under the shared budget, then
    score it on the DLP's test split."""
    t0 = time.perf_counter()
    with_domain_tag = strategy == BaselineStrategy.TAG_FT.value
    counts: tuple[int, float] | None = None
    note = ""

    if strategy == STRATEGY_BACKBONE:
        model = build_model(mc, ac, seed=hash_seed(run_seed, 51), adapter_groups=())
        restore_params(model, backbone)
        model.set_trainable([])
    elif strategy in ADAPTER_STRATEGIES:
        model = build_model(mc, ac, seed=hash_seed(run_seed, 51), adapter_groups=("main",))
        restore_params(model, backbone)
        if strategy == STRATEGY_META_ADAPTER:
            if trained.meta_adapter is None:
                raise InputError("adapt_and_evaluate: meta_adapter snapshot missing")
            restore_params(model, trained.meta_adapter)
        elif strategy == BaselineStrategy.AGNOSTIC_ADAPTER.value:
            restore_params(model, trained.baselines[strategy].params["adapter"])
        trainable = model.adapter_names()
        adapted, _ = meta_adapt(model, vocab, snapshot_params(model, trainable), dlp,
                                dataset.adapt, budget.settings, epochs=budget.epochs,
                                batch_size=budget.batch_size, seed=run_seed,
                                trainable=trainable, max_steps=budget.max_steps)
        restore_params(model, adapted)
        counts = count_trainable(model, strategy)
    elif strategy in FULL_STRATEGIES:
        model = build_model(mc, ac, seed=hash_seed(run_seed, 51), adapter_groups=())
        restore_params(model, trained.baselines[strategy].params["model"])
        trainable = list(model.params)
        adapted, _ = meta_adapt(model, vocab, snapshot_params(model, trainable), dlp,
                                dataset.adapt, budget.settings, epochs=budget.epochs,
                                batch_size=budget.batch_size, seed=run_seed,
                                trainable=trainable, with_domain_tag=with_domain_tag,
                                max_steps=budget.max_steps)
        restore_params(model, adapted)
        model.set_trainable(trainable)
        counts = count_trainable(model, strategy)
        note = trained.baselines[strategy].note
    elif strategy == BaselineStrategy.STACK_ADAPTER.value:
        model = build_model(mc, ac, seed=hash_seed(run_seed, 51), adapter_groups=())
        restore_params(model, backbone)
        artifact = trained.baselines[strategy]
        trainable = install_stack(model, artifact, dlp, seed=run_seed)
        adapted, _ = meta_adapt(model, vocab, snapshot_params(model, trainable), dlp,
                                dataset.adapt, budget.settings, epochs=budget.epochs,
                                batch_size=budget.batch_size, seed=run_seed,
                                trainable=trainable, max_steps=budget.max_steps)
        restore_params(model, adapted)
        model.set_trainable(trainable)
        if registry_shape is None:
            lps = {k.split(":", 1)[1] for k in artifact.params if k.startswith("lp:")}
            doms = {k.split(":", 1)[1] for k in artifact.params if k.startswith("dom:")}
            registry_shape = (len(lps), len(doms))
        counts = count_trainable(model, strategy, n_language_pairs=registry_shape[0],
                                 n_domains=registry_shape[1])
        note = artifact.note
    else:
        raise InputError(f"adapt_and_evaluate: unknown strategy '{strategy}'")

    return evaluate_dlp(model, vocab, dlp, dataset.test, strategy, max_len,
                        with_domain_tag=with_domain_tag, counts=counts,
                        wall_time=time.perf_counter() - t0, note=note)


def run_comparison(strategies: list[str], registry: Registry, vocab: Vocab,
                   mc: ModelConfig, ac: AdapterConfig, backbone: dict[str, np.ndarray],
                   meta_datasets: dict[DlpId, DlpDataset],
                   heldout: dict[DlpId, DlpDataset], cfg: MetaConfig,
                   budget: AdaptBudget, max_len: int,
                   train_batch_size: int = 16, train_max_steps: int | None = None,
                   ) -> tuple[list[MetricsRecord], TrainedStrategies]:
    """Stage one (train every strategy) then stage two (adapt + evaluate each
    strategy on every held-out DLP) under one config and seed."""
    trained = train_strategies(strategies, mc, ac, vocab, backbone, meta_datasets, cfg,
                               batch_size=train_batch_size, max_steps=train_max_steps)
    records = []
    for dlp in sorted(heldout):
        for strategy in strategies:
            records.append(adapt_and_evaluate(
                strategy, dlp, heldout[dlp], mc=mc, ac=ac, vocab=vocab,
                backbone=backbone, trained=trained, budget=budget,
                run_seed=cfg.seed, max_len=max_len))
    return records, trained


# ---------------------------------------------------------------------------
# hyperparameter sweep harness
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ["m", "k", "beta", "tau", "n", "mean_bleu", "best"]


def hyperparam_sweep(grid: list[dict], base_cfg: MetaConfig, *, mc: ModelConfig,
                     ac: AdapterConfig, vocab: Vocab, backbone: dict[str, np.ndarray],
                     meta_datasets: dict[DlpId, DlpDataset],
                     heldout: dict[DlpId, DlpDataset], budget: AdaptBudget,
                     max_len: int) -> list[dict]:
    """One meta-train + adapt + evaluate run per grid point; returns rows with
    the varied values, the mean held-out BLEU, and a best-row flag."""
    if not grid:
        raise InputError("hyperparam_sweep: empty grid")
    rows = []
    for point in grid:
        try:
            cfg = replace(base_cfg, **point)
        except TypeError as exc:
            raise InputError(f"hyperparam_sweep: invalid grid key in {point} ({exc})") from exc
        rows.append(_sweep_run(point, cfg, mc, ac, vocab, backbone,
                               meta_datasets, heldout, budget, max_len))
    best = max(range(len(rows)), key=lambda i: rows[i]["mean_bleu"])
    for i, row in enumerate(rows):
        row["best"] = i == best
    return rows


def _sweep_run(point: dict, cfg: MetaConfig, mc, ac, vocab, backbone,
               meta_datasets, heldout, budget, max_len) -> dict:
    trained = train_strategies([STRATEGY_META_ADAPTER], mc, ac, vocab, backbone,
                               meta_datasets, cfg)
    bleus = []
    for dlp in sorted(heldout):
        rec = adapt_and_evaluate(STRATEGY_META_ADAPTER, dlp, heldout[dlp], mc=mc, ac=ac,
                                 vocab=vocab, backbone=backbone, trained=trained,
                                 budget=budget, run_seed=cfg.seed, max_len=max_len)
        bleus.append(rec.bleu)
    row = {"m": cfg.m, "k": cfg.k, "beta": cfg.beta, "tau": cfg.tau, "n": cfg.n,
           "mean_bleu": sum(bleus) / len(bleus), "best": False}
    row.update({k: v for k, v in point.items() if k not in row})
    return row


def write_sweep(rows: list[dict], path: str | Path) -> None:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([row["m"], row["k"], row["beta"],
                             "inf" if row["tau"] == float("inf") else row["tau"],
                             row["n"], f"{row['mean_bleu']:.4f}", str(row["best"]).lower()])


# ---------------------------------------------------------------------------
# run manifests and training logs
# ---------------------------------------------------------------------------

def write_manifest(out_dir: str | Path, config: dict, seed: int) -> None:
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config": config, "seed": seed, "code_version": __version__}
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def write_training_log(records: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
