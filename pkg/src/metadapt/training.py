"""Reptile meta-training, meta-adaptation, and the baseline strategies.

Inner loops always run from a copy of the current shared parameters with a
fresh optimizer per task (the optimizer *settings* are shared, its moment
state is not). All rng streams are derived from (seed, meta-batch, task), so
runs are reproducible and the inner loops are order-independent.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .corpus import Vocab
from .errors import InputError, NumericError, StateError
from .model import TranslationModel, forward_loss, make_batch, make_mixed_batch
from .optim import AdamW, OptimizerSettings
from .tasks import DlpDataset, DlpId, SamplingPlan, SentencePair, build_episode, sample_dlps


@dataclass(frozen=True)
class MetaConfig:
    """Meta-training knobs; defaults follow the tuned setting m=8, k=3,
    beta=1.0, tau=1 with 3 meta-epochs and 1 adaptation epoch."""

    m: int = 8
    n: int = 8
    q: int = 8
    k: int = 3
    beta: float = 1.0
    tau: float = 1.0
    epochs: int = 3
    seed: int = 0
    inner: OptimizerSettings = field(default_factory=OptimizerSettings)
    adapt_epochs: int = 1
    adapt_batch_size: int = 16
    early_stop_patience: int = 3
    max_meta_batches: int | None = None
    sample_with_replacement: bool = False

    def __post_init__(self):
        if self.m < 1 or self.k < 1 or self.n < 1 or self.q < 0:
            raise InputError("meta config: need m, k, n >= 1 and q >= 0")
        if not 0.0 < self.beta <= 1.0:
            raise InputError("meta config: beta must lie in (0, 1]")
        if self.epochs < 1:
            raise InputError("meta config: epochs must be >= 1")


@dataclass
class AdapterSnapshot:
    """Named tensor map matching a model's adapter layout, plus provenance."""

    tensors: dict[str, np.ndarray]
    run_id: str = ""
    step: int = 0

    def copy(self) -> "AdapterSnapshot":
        return AdapterSnapshot({k: v.copy() for k, v in self.tensors.items()},
                               run_id=self.run_id, step=self.step)


class BaselineStrategy(str, Enum):
    FULL_FT = "full_ft"
    TAG_FT = "tag_ft"
    AGNOSTIC_ADAPTER = "agnostic_adapter"
    STACK_ADAPTER = "stack_adapter"
    FULL_MODEL_META = "full_model_meta"


# strategy-name strings used in metrics records for non-baseline runs
STRATEGY_BACKBONE = "backbone"
STRATEGY_META_ADAPTER = "meta_adapter"
STRATEGY_RANDOM_ADAPTER = "random_adapter"


# ---------------------------------------------------------------------------
# rng stream derivation (exposed so replay oracles can reproduce the loop)
# ---------------------------------------------------------------------------

def sample_stream(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 11, step]))


def episode_stream(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 12, step]))


def inner_stream(seed: int, step: int, task_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 13, step, task_index]))


# ---------------------------------------------------------------------------
# parameter snapshots over arbitrary name sets
# ---------------------------------------------------------------------------

def snapshot_params(model: TranslationModel, names: list[str]) -> dict[str, np.ndarray]:
    return {n: model.params[n].data.copy() for n in names}


def restore_params(model: TranslationModel, values: dict[str, np.ndarray]) -> None:
    for name, value in values.items():
        if name not in model.params or model.params[name].data.shape != value.shape:
            raise StateError(f"restore_params: layout mismatch at '{name}'")
        model.params[name].data = value.copy()


# ---------------------------------------------------------------------------
# inner loop and Reptile update
# ---------------------------------------------------------------------------

def _train_steps(model: TranslationModel, batches, settings: OptimizerSettings,
                 rng: np.random.Generator, trainable: list[str]) -> list[float]:
    """Run one optimizer step per batch on the given trainable set."""
    model.set_trainable(trainable)
    opt = AdamW({n: model.params[n] for n in trainable}, settings)
    losses = []
    for step_idx, batch in enumerate(batches):
        loss = forward_loss(model, batch, train=True, rng=rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"training diverged at step {step_idx}: loss={value}")
        losses.append(value)
        T.backward(loss)
        opt.step()
    return losses


def inner_adapt(model: TranslationModel, vocab: Vocab, start: dict[str, np.ndarray],
                dlp: DlpId, support: list[SentencePair], k: int,
                settings: OptimizerSettings, rng: np.random.Generator,
                trainable: list[str] | None = None,
                with_domain_tag: bool = False) -> dict[str, np.ndarray]:
    """k gradient updates from `start` on the support set; returns the updated
    parameter map. One batch holds the whole support (batch size = n). The
    optimizer state is fresh for every call."""
    if k < 1:
        raise InputError("inner_adapt: k must be >= 1")
    if not support:
        raise InputError("inner_adapt: empty support set")
    trainable = list(start) if trainable is None else trainable
    restore_params(model, start)
    batch = make_batch(list(support), vocab, dlp, with_domain_tag=with_domain_tag)
    _train_steps(model, [batch] * k, settings, rng, trainable)
    return snapshot_params(model, trainable)


def reptile_step(base: dict[str, np.ndarray], results: list[dict[str, np.ndarray]],
                 beta: float) -> dict[str, np.ndarray]:
    """base + (beta / m) * sum_i (result_i - base); pure function."""
    if not results:
        raise InputError("reptile_step: need at least one inner result")
    for res in results:
        if set(res) != set(base):
            raise StateError("reptile_step: snapshot layouts differ")
    m = len(results)
    out = {}
    for name, value in base.items():
        delta = np.zeros_like(value)
        for res in results:
            if res[name].shape != value.shape:
                raise StateError(f"reptile_step: shape mismatch at '{name}'")
            delta += res[name] - value
        out[name] = value + (beta / m) * delta
    return out


# ---------------------------------------------------------------------------
# meta-training
# ---------------------------------------------------------------------------

def meta_batches_per_epoch(datasets: dict[DlpId, DlpDataset], cfg: MetaConfig) -> int:
    """One epoch = enough meta-batches that expected sentence draws cover the
    pooled training data once."""
    pooled = sum(len(ds.train) for ds in datasets.values())
    return max(1, math.ceil(pooled / (cfg.m * (cfg.n + cfg.q))))


def meta_train(model: TranslationModel, vocab: Vocab, datasets: dict[DlpId, DlpDataset],
               cfg: MetaConfig, trainable: list[str] | None = None,
               run_id: str = "", with_domain_tag: bool = False,
               ) -> tuple[AdapterSnapshot, list[dict]]:
    """Reptile meta-training over the DLP registry.

    Per meta-batch: sample m DLPs from the temperature multinomial, run the
    k-step inner loop per task from the current shared parameters, apply the
    Reptile update, and log the post-update query losses. Early-stops when
    the pooled per-epoch query loss fails to improve for `patience` epochs.
    """
    if not datasets:
        raise InputError("meta_train: empty DLP registry")
    if trainable is None:
        trainable = model.adapter_names()
        if not trainable:
            raise StateError("meta_train: model has no adapter parameters")
    model.set_trainable(trainable)
    replace_mode = cfg.sample_with_replacement or cfg.m > len(datasets)
    plan = SamplingPlan.build(datasets, cfg.tau)
    per_epoch = meta_batches_per_epoch(datasets, cfg)
    log: list[dict] = []
    step = 0
    best_epoch_loss = math.inf
    stale_epochs = 0
    shared = snapshot_params(model, trainable)
    for epoch in range(cfg.epochs):
        epoch_losses: list[float] = []
        for _ in range(per_epoch):
            if cfg.max_meta_batches is not None and step >= cfg.max_meta_batches:
                break
            t0 = time.perf_counter()
            dlps = sample_dlps(plan, cfg.m, sample_stream(cfg.seed, step), replace=replace_mode)
            episode = build_episode(dlps, datasets, cfg.n, cfg.q, episode_stream(cfg.seed, step))
            results = []
            task_losses = {}
            for t_idx, task in enumerate(episode.tasks):
                adapted = inner_adapt(model, vocab, shared, task.dlp, list(task.support),
                                      cfg.k, cfg.inner, inner_stream(cfg.seed, step, t_idx),
                                      trainable=trainable, with_domain_tag=with_domain_tag)
                if task.query:
                    with T.no_grad():
                        qloss = float(forward_loss(
                            model, make_batch(list(task.query), vocab, task.dlp,
                                              with_domain_tag=with_domain_tag)).data)
                    task_losses[task.dlp.key()] = qloss
                results.append(adapted)
            shared = reptile_step(shared, results, cfg.beta)
            restore_params(model, shared)
            batch_loss = sum(task_losses.values()) / len(task_losses) if task_losses else math.nan
            epoch_losses.append(batch_loss)
            log.append({"step": step, "epoch": epoch, "meta_batch_loss": batch_loss,
                        "task_losses": task_losses, "wall": time.perf_counter() - t0})
            step += 1
        if epoch_losses and not math.isnan(epoch_losses[0]):
            epoch_loss = sum(epoch_losses) / len(epoch_losses)
            if epoch_loss < best_epoch_loss - 1e-12:
                best_epoch_loss = epoch_loss
                stale_epochs = 0
            else:
                stale_epochs += 1
                if stale_epochs >= cfg.early_stop_patience:
                    log.append({"step": step, "epoch": epoch, "early_stop": True})
                    break
        if cfg.max_meta_batches is not None and step >= cfg.max_meta_batches:
            break
    return AdapterSnapshot(shared, run_id=run_id, step=step), log


def meta_adapt(model: TranslationModel, vocab: Vocab, start: dict[str, np.ndarray],
               dlp: DlpId, adapt_pairs: list[SentencePair], settings: OptimizerSettings,
               epochs: int = 1, batch_size: int = 16, seed: int = 0,
               trainable: list[str] | None = None, with_domain_tag: bool = False,
               max_steps: int | None = None) -> tuple[dict[str, np.ndarray], list[float]]:
    """Supervised fine-tuning of `start` on one target DLP's adapt split
    (default budget: one epoch). Returns the adapted map and per-step losses."""
    if not adapt_pairs:
        raise InputError("meta_adapt: empty adapt split")
    trainable = list(start) if trainable is None else trainable
    restore_params(model, start)
    losses: list[float] = []
    steps_done = 0
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 21, epoch]))
        order = rng.permutation(len(adapt_pairs))
        batches = []
        for lo in range(0, len(order), batch_size):
            chunk = [adapt_pairs[i] for i in order[lo : lo + batch_size]]
            batches.append(make_batch(chunk, vocab, dlp, with_domain_tag=with_domain_tag))
        if max_steps is not None:
            batches = batches[: max(0, max_steps - steps_done)]
        if not batches:
            break
        losses.extend(_train_steps(model, batches, settings, rng, trainable))
        steps_done += len(batches)
    return snapshot_params(model, trainable), losses


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

@dataclass
class BaselineArtifact:
    strategy: BaselineStrategy
    params: dict[str, dict[str, np.ndarray]]   # component name -> parameter map
    note: str = ""


def pooled_rows(datasets: dict[DlpId, DlpDataset]) -> list[tuple[DlpId, SentencePair]]:
    rows = []
    for dlp in sorted(datasets):
        for pair in datasets[dlp].train:
            rows.append((dlp, pair))
    return rows


def supervised_train(model: TranslationModel, vocab: Vocab,
                     rows: list[tuple[DlpId, SentencePair]], settings: OptimizerSettings,
                     epochs: int, batch_size: int, seed: int, trainable: list[str],
                     with_domain_tag: bool = False, max_steps: int | None = None,
                     extra_prefix_ids: tuple[int, ...] = ()) -> list[float]:
    """Plain mixed-batch training over pooled rows (used by the FT and
    agnostic-adapter baselines)."""
    if not rows:
        raise InputError("supervised_train: no training rows")
    losses: list[float] = []
    steps = 0
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 31, epoch]))
        order = rng.permutation(len(rows))
        batches = []
        for lo in range(0, len(order), batch_size):
            chunk = [rows[i] for i in order[lo : lo + batch_size]]
            batches.append(make_mixed_batch(chunk, vocab, with_domain_tag=with_domain_tag,
                                            extra_prefix_ids=extra_prefix_ids))
        if max_steps is not None:
            batches = batches[: max(0, max_steps - steps)]
        if not batches:
            break
        losses.extend(_train_steps(model, batches, settings, rng, trainable))
        steps += len(batches)
    return losses


def train_baseline(strategy: BaselineStrategy, model: TranslationModel, vocab: Vocab,
                   datasets: dict[DlpId, DlpDataset], cfg: MetaConfig,
                   batch_size: int = 16, max_steps: int | None = None) -> BaselineArtifact:
    """Train one baseline on the meta-training registry.

    FULL_FT / TAG_FT update every parameter (TAG_FT additionally prepends the
    domain tag); AGNOSTIC_ADAPTER trains one shared adapter set on pooled
    data; STACK_ADAPTER trains one adapter per language pair and one per
    domain, composed in sequence at inference; FULL_MODEL_META runs the
    first-order meta loop over all parameters.
    """
    if not isinstance(strategy, BaselineStrategy):
        raise InputError(f"train_baseline: unknown strategy {strategy!r}")
    rows = pooled_rows(datasets)
    if strategy in (BaselineStrategy.FULL_FT, BaselineStrategy.TAG_FT):
        trainable = list(model.params)
        supervised_train(model, vocab, rows, cfg.inner, cfg.epochs, batch_size, cfg.seed,
                         trainable, with_domain_tag=strategy is BaselineStrategy.TAG_FT,
                         max_steps=max_steps)
        return BaselineArtifact(strategy, {"model": snapshot_params(model, trainable)})
    if strategy is BaselineStrategy.AGNOSTIC_ADAPTER:
        trainable = model.adapter_names()
        if not trainable:
            raise StateError("agnostic_adapter baseline needs an adapter-equipped model")
        supervised_train(model, vocab, rows, cfg.inner, cfg.epochs, batch_size, cfg.seed,
                         trainable, max_steps=max_steps)
        return BaselineArtifact(strategy, {"adapter": snapshot_params(model, trainable)})
    if strategy is BaselineStrategy.FULL_MODEL_META:
        snapshot, _ = meta_train(model, vocab, datasets, cfg, trainable=list(model.params))
        return BaselineArtifact(strategy, {"model": snapshot.tensors},
                                note="first-order meta-learning over all parameters")
    if strategy is BaselineStrategy.STACK_ADAPTER:
        return _train_stack_adapter(model, vocab, datasets, cfg, batch_size, max_steps)
    raise InputError(f"train_baseline: unknown strategy {strategy!r}")


def _train_stack_adapter(model: TranslationModel, vocab: Vocab,
                         datasets: dict[DlpId, DlpDataset], cfg: MetaConfig,
                         batch_size: int, max_steps: int | None) -> BaselineArtifact:
    from .model import add_adapter_group, hash_seed, remove_adapter_group

    lang_pairs = sorted({(d.src_lang, d.tgt_lang) for d in datasets})
    domains = sorted({d.domain for d in datasets})
    components: dict[str, dict[str, np.ndarray]] = {}

    def train_component(name: str, subset: dict[DlpId, DlpDataset], comp_seed: int) -> None:
        for group in list(model.adapter_groups):
            remove_adapter_group(model, group)
        add_adapter_group(model, "stack", seed=comp_seed)
        trainable = model.adapter_names("stack")
        supervised_train(model, vocab, pooled_rows(subset), cfg.inner, cfg.epochs,
                         batch_size, cfg.seed, trainable, max_steps=max_steps)
        # keys stored group-agnostically as "<side>/<layer>/<param>"
        components[name] = {k.replace("/adapter/stack", ""): v
                            for k, v in snapshot_params(model, trainable).items()}

    for idx, (src, tgt) in enumerate(lang_pairs):
        subset = {d: ds for d, ds in datasets.items() if (d.src_lang, d.tgt_lang) == (src, tgt)}
        train_component(f"lp:{src}-{tgt}", subset, hash_seed(cfg.seed, 41, idx))
    for idx, domain in enumerate(domains):
        subset = {d: ds for d, ds in datasets.items() if d.domain == domain}
        train_component(f"dom:{domain}", subset, hash_seed(cfg.seed, 42, idx))
    for group in list(model.adapter_groups):
        remove_adapter_group(model, group)
    return BaselineArtifact(BaselineStrategy.STACK_ADAPTER, components,
                            note="language-pair adapter then domain adapter, stacked in sequence")


def install_stack(model: TranslationModel, artifact: BaselineArtifact, dlp: DlpId,
                  seed: int = 0) -> list[str]:
    """Insert the language-pair and domain adapters for `dlp` (freshly
    initialized when that component was never trained), returning the
    trainable adapter names in stack order."""
    from .model import add_adapter_group, hash_seed, remove_adapter_group

    if artifact.strategy is not BaselineStrategy.STACK_ADAPTER:
        raise InputError("install_stack: artifact is not a stacked-adapter artifact")
    for group in list(model.adapter_groups):
        remove_adapter_group(model, group)
    wanted = [("lp", f"lp:{dlp.src_lang}-{dlp.tgt_lang}"), ("dom", f"dom:{dlp.domain}")]
    for g_idx, (group, component) in enumerate(wanted):
        add_adapter_group(model, group, seed=hash_seed(seed, 43, g_idx))
        if component in artifact.params:
            for key, value in artifact.params[component].items():
                side, layer, param = key.split("/")
                model.params[f"{side}/{layer}/adapter/{group}/{param}"].data = value.copy()
    return model.adapter_names()
