import numpy as np
import pytest

from metadapt import tensor as T
from metadapt.corpus import Vocab, load_datasets
from metadapt.errors import InputError, StateError
from metadapt.model import (
    AdapterConfig,
    ModelConfig,
    build_model,
    forward_loss,
    make_batch,
)
from metadapt.optim import AdamW, OptimizerSettings
from metadapt.training import (
    AdapterSnapshot,
    BaselineStrategy,
    MetaConfig,
    build_episode,
    episode_stream,
    inner_adapt,
    inner_stream,
    install_stack,
    meta_adapt,
    meta_train,
    reptile_step,
    restore_params,
    snapshot_params,
    supervised_train,
    train_baseline,
)


@pytest.fixture(scope="module")
def world(tiny_registry):
    vocab = Vocab.load(tiny_registry.root / "vocab.json")
    meta_ids = [r.dlp for r in tiny_registry.by_role("meta_train")]
    datasets = load_datasets(tiny_registry, meta_ids)
    return tiny_registry, vocab, datasets


def small_model(vocab, seed=0, dropout=0.0, groups=("main",)):
    mc = ModelConfig(vocab_size=len(vocab), model_dim=16, num_layers=1, num_heads=2,
                     ffn_dim=24, max_seq_len=24, dropout=dropout)
    return build_model(mc, AdapterConfig(bottleneck_dim=4), seed=seed, adapter_groups=groups)


def small_cfg(**overrides):
    base = dict(m=2, n=4, q=2, k=2, beta=1.0, tau=1.0, epochs=1, seed=0,
                inner=OptimizerSettings(lr=1e-3), max_meta_batches=3)
    base.update(overrides)
    return MetaConfig(**base)


# --- reptile_step ---------------------------------------------------------------

def test_reptile_fixed_point():
    base = {"a": np.array([1.0, 2.0])}
    out = reptile_step(base, [dict(base), dict(base), dict(base)], beta=0.7)
    assert np.array_equal(out["a"], base["a"])


def test_reptile_interpolation_endpoint():
    base = {"a": np.array([0.0, 0.0])}
    res = {"a": np.array([3.0, -1.0])}
    out = reptile_step(base, [res], beta=1.0)
    np.testing.assert_allclose(out["a"], res["a"], atol=1e-15)


def test_reptile_hand_arithmetic():
    base = {"a": np.array([0.0, 0.0])}
    results = [{"a": np.array([1.0, 0.0])}, {"a": np.array([0.0, 1.0])}]
    out = reptile_step(base, results, beta=1.0)
    np.testing.assert_allclose(out["a"], [0.5, 0.5], atol=1e-15)


def test_reptile_layout_mismatch_is_state_error():
    with pytest.raises(StateError):
        reptile_step({"a": np.zeros(2)}, [{"b": np.zeros(2)}], beta=1.0)


def test_reptile_convex_hull_property():
    rng = np.random.default_rng(0)
    for _ in range(20):
        base = {"a": rng.normal(size=5)}
        results = [{"a": rng.normal(size=5)} for _ in range(3)]
        beta = rng.uniform(0.05, 1.0)
        out = reptile_step(base, results, beta)
        stacked = np.stack([base["a"]] + [r["a"] for r in results])
        lo, hi = stacked.min(axis=0), stacked.max(axis=0)
        assert np.all(out["a"] >= lo - 1e-12) and np.all(out["a"] <= hi + 1e-12)


# --- inner_adapt -----------------------------------------------------------------

def test_inner_adapt_zero_lr_fixed_point(world):
    _, vocab, datasets = world
    model = small_model(vocab)
    dlp = next(iter(datasets))
    start = snapshot_params(model, model.adapter_names())
    out = inner_adapt(model, vocab, start, dlp, datasets[dlp].train[:4], k=3,
                      settings=OptimizerSettings(lr=0.0), rng=np.random.default_rng(0))
    for name in start:
        assert np.array_equal(out[name], start[name])


def test_inner_adapt_keeps_backbone_frozen(world):
    _, vocab, datasets = world
    model = small_model(vocab)
    dlp = next(iter(datasets))
    checksum = model.backbone_checksum()
    start = snapshot_params(model, model.adapter_names())
    inner_adapt(model, vocab, start, dlp, datasets[dlp].train[:4], k=2,
                settings=OptimizerSettings(lr=1e-2), rng=np.random.default_rng(0))
    assert model.backbone_checksum() == checksum


def test_inner_adapt_k1_matches_manual_replay(world):
    _, vocab, datasets = world
    dlp = next(iter(datasets))
    support = datasets[dlp].train[:4]
    settings = OptimizerSettings(lr=5e-3)

    model = small_model(vocab, seed=3)
    start = snapshot_params(model, model.adapter_names())
    got = inner_adapt(model, vocab, start, dlp, support, k=1, settings=settings,
                      rng=np.random.default_rng(7))

    # manual replay: one forward/backward/step outside the trainer
    model2 = small_model(vocab, seed=3)
    model2.set_trainable(model2.adapter_names())
    batch = make_batch(list(support), vocab, dlp)
    opt = AdamW({n: model2.params[n] for n in model2.adapter_names()}, settings)
    loss = forward_loss(model2, batch, train=True, rng=np.random.default_rng(7))
    T.backward(loss)
    opt.step()
    for name in got:
        assert np.array_equal(got[name], model2.params[name].data)


def test_inner_adapt_empty_support_rejected(world):
    _, vocab, datasets = world
    model = small_model(vocab)
    with pytest.raises(InputError):
        inner_adapt(model, vocab, snapshot_params(model, model.adapter_names()),
                    next(iter(datasets)), [], k=1, settings=OptimizerSettings(),
                    rng=np.random.default_rng(0))


# --- meta_train --------------------------------------------------------------------

def test_meta_train_leaves_backbone_bitwise_unchanged(world):
    _, vocab, datasets = world
    model = small_model(vocab)
    checksum = model.backbone_checksum()
    meta_train(model, vocab, datasets, small_cfg())
    assert model.backbone_checksum() == checksum


def test_meta_train_only_adapters_trainable(world):
    _, vocab, datasets = world
    model = small_model(vocab)
    meta_train(model, vocab, datasets, small_cfg())
    trainable = set(model.trainable_names())
    assert trainable == set(model.adapter_names())


def test_meta_train_deterministic_under_seed(world):
    _, vocab, datasets = world
    snaps = []
    for _ in range(2):
        model = small_model(vocab, seed=5)
        snap, _ = meta_train(model, vocab, datasets, small_cfg(seed=9))
        snaps.append(snap)
    for name in snaps[0].tensors:
        assert np.array_equal(snaps[0].tensors[name], snaps[1].tensors[name])


def test_meta_train_empty_registry_rejected(world):
    _, vocab, _ = world
    model = small_model(vocab)
    with pytest.raises(InputError):
        meta_train(model, vocab, {}, small_cfg())


def test_meta_train_m1_k1_beta1_equals_sequential_fine_tuning(world):
    """Reptile oracle: 20 meta-batches with m=1, k=1, beta=1 coincide with 20
    plain adapter fine-tuning steps (fresh optimizer state per step, matching
    the per-task state reset) to 1e-12 per coordinate."""
    registry, vocab, datasets = world
    dlp = sorted(datasets)[0]
    one = {dlp: datasets[dlp]}
    steps = 20
    cfg = small_cfg(m=1, k=1, q=0, n=4, beta=1.0, epochs=2, max_meta_batches=steps,
                    inner=OptimizerSettings(lr=2e-3), seed=17)

    model = small_model(vocab, seed=2)
    snap, log = meta_train(model, vocab, one, cfg)
    assert sum(1 for rec in log if "meta_batch_loss" in rec) == steps

    model2 = small_model(vocab, seed=2)
    model2.set_trainable(model2.adapter_names())
    names = model2.adapter_names()
    for step in range(steps):
        episode = build_episode([dlp], one, cfg.n, cfg.q, episode_stream(cfg.seed, step))
        batch = make_batch(list(episode.tasks[0].support), vocab, dlp)
        opt = AdamW({n: model2.params[n] for n in names}, cfg.inner)
        loss = forward_loss(model2, batch, train=True, rng=inner_stream(cfg.seed, step, 0))
        T.backward(loss)
        opt.step()
    for name in names:
        np.testing.assert_allclose(snap.tensors[name], model2.params[name].data,
                                   rtol=0.0, atol=1e-12)


# --- meta_adapt -----------------------------------------------------------------------

def test_meta_adapt_zero_lr_identity(world):
    _, vocab, datasets = world
    model = small_model(vocab)
    dlp = next(iter(datasets))
    start = snapshot_params(model, model.adapter_names())
    out, _ = meta_adapt(model, vocab, start, dlp, datasets[dlp].adapt,
                        OptimizerSettings(lr=0.0))
    for name in start:
        assert np.array_equal(out[name], start[name])


def test_meta_adapt_loss_non_increasing_on_toy_split(world):
    _, vocab, datasets = world
    model = small_model(vocab, seed=1)
    dlp = next(iter(datasets))
    toy = datasets[dlp].adapt[:10]
    start = snapshot_params(model, model.adapter_names())
    batch = make_batch(toy, vocab, dlp)

    def split_loss():
        with T.no_grad():
            return float(forward_loss(model, batch).data)

    losses = [split_loss()]
    current = start
    for epoch in range(3):
        current, _ = meta_adapt(model, vocab, current, dlp, toy,
                                OptimizerSettings(lr=3e-3), epochs=1, seed=epoch)
        restore_params(model, current)
        losses.append(split_loss())
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:])), losses


def test_meta_adapt_no_cross_talk(world):
    _, vocab, datasets = world
    model = small_model(vocab, seed=4)
    ids = sorted(datasets)[:2]
    start = snapshot_params(model, model.adapter_names())
    out_a, _ = meta_adapt(model, vocab, start, ids[0], datasets[ids[0]].adapt,
                          OptimizerSettings(lr=1e-3))
    out_b, _ = meta_adapt(model, vocab, start, ids[1], datasets[ids[1]].adapt,
                          OptimizerSettings(lr=1e-3))
    out_a2, _ = meta_adapt(model, vocab, start, ids[0], datasets[ids[0]].adapt,
                           OptimizerSettings(lr=1e-3))
    assert any(not np.array_equal(out_a[n], out_b[n]) for n in out_a)
    for name in out_a:
        assert np.array_equal(out_a[name], out_a2[name])


def test_meta_adapt_empty_split_rejected(world):
    _, vocab, datasets = world
    model = small_model(vocab)
    with pytest.raises(InputError):
        meta_adapt(model, vocab, snapshot_params(model, model.adapter_names()),
                   next(iter(datasets)), [], OptimizerSettings())


# --- baselines ---------------------------------------------------------------------------

def test_full_ft_updates_backbone(world):
    _, vocab, datasets = world
    model = small_model(vocab, groups=())
    checksum = model.backbone_checksum()
    train_baseline(BaselineStrategy.FULL_FT, model, vocab, datasets,
                   small_cfg(epochs=1), max_steps=3)
    assert model.backbone_checksum() != checksum


def test_tag_ft_updates_backbone(world):
    _, vocab, datasets = world
    model = small_model(vocab, groups=())
    checksum = model.backbone_checksum()
    train_baseline(BaselineStrategy.TAG_FT, model, vocab, datasets,
                   small_cfg(epochs=1), max_steps=3)
    assert model.backbone_checksum() != checksum


def test_agnostic_adapter_keeps_backbone_bitwise(world):
    _, vocab, datasets = world
    model = small_model(vocab)
    checksum = model.backbone_checksum()
    art = train_baseline(BaselineStrategy.AGNOSTIC_ADAPTER, model, vocab, datasets,
                         small_cfg(epochs=1), max_steps=3)
    assert model.backbone_checksum() == checksum
    assert set(art.params["adapter"]) == set(model.adapter_names())


def test_full_model_meta_trains_everything(world):
    _, vocab, datasets = world
    model = small_model(vocab, groups=())
    checksum = model.backbone_checksum()
    art = train_baseline(BaselineStrategy.FULL_MODEL_META, model, vocab, datasets,
                         small_cfg(max_meta_batches=2))
    assert model.backbone_checksum() != checksum
    assert "first-order" in art.note


def test_tag_collapse_equivalence(world):
    """On a single-domain registry every domain tag is one constant token, so
    tag fine-tuning must coincide with plain fine-tuning fed that same
    constant prefix."""
    registry, vocab, datasets = world
    domain = next(iter(datasets)).domain
    single = {d: ds for d, ds in datasets.items() if d.domain == domain}
    cfg = small_cfg(epochs=1, inner=OptimizerSettings(lr=2e-3))

    model_a = small_model(vocab, seed=6, groups=())
    train_baseline(BaselineStrategy.TAG_FT, model_a, vocab, single, cfg, max_steps=4)

    model_b = small_model(vocab, seed=6, groups=())
    from metadapt.training import pooled_rows
    supervised_train(model_b, vocab, pooled_rows(single), cfg.inner, cfg.epochs,
                     batch_size=16, seed=cfg.seed, trainable=list(model_b.params),
                     extra_prefix_ids=(vocab.domain_tag(domain),), max_steps=4)
    for name in model_a.params:
        assert np.array_equal(model_a.params[name].data, model_b.params[name].data)


def test_stack_adapter_component_inventory_and_counts(world):
    _, vocab, datasets = world
    ids = sorted(datasets)[:4]
    subset = {d: datasets[d] for d in ids}
    model = small_model(vocab, groups=())
    art = train_baseline(BaselineStrategy.STACK_ADAPTER, model, vocab, subset,
                         small_cfg(epochs=1), max_steps=1)
    lang_pairs = {(d.src_lang, d.tgt_lang) for d in subset}
    domains = {d.domain for d in subset}
    assert len(art.params) == len(lang_pairs) + len(domains)
    assert model.backbone_checksum() == small_model(vocab, groups=()).backbone_checksum()

    names = install_stack(model, art, ids[0])
    assert model.adapter_groups == ["lp", "dom"]
    per_adapter = len({n for n in names if "/adapter/lp/" in n})
    assert per_adapter == len({n for n in names if "/adapter/dom/" in n})


def test_train_baseline_unknown_strategy(world):
    _, vocab, datasets = world
    with pytest.raises(InputError):
        train_baseline("not_a_strategy", small_model(vocab), vocab, datasets, small_cfg())


def test_adapter_snapshot_copy_is_deep():
    snap = AdapterSnapshot({"a": np.zeros(3)}, run_id="r", step=1)
    dup = snap.copy()
    dup.tensors["a"][0] = 5.0
    assert snap.tensors["a"][0] == 0.0
