import json
from pathlib import Path

import pytest

from metadapt import checkpoint
from metadapt.cli import run
from metadapt.corpus import Vocab
from metadapt.metrics import read_records
from metadapt.model import AdapterConfig, ModelConfig
from metadapt.optim import OptimizerSettings
from metadapt.pipeline import (
    AdaptBudget,
    adapt_and_evaluate,
    backbone_dev_bleu,
    hyperparam_sweep,
    pretrain_backbone,
    role_datasets,
    train_strategies,
)
from metadapt.training import MetaConfig

from conftest import tiny_world_spec


SMOKE_WORLD = {
    "languages": ["apa", "bel", "cor"],
    "domains": ["general", "gears", "herbs"],
    "pretrain_domain": "general",
    "heldout_domains": ["herbs"],
    "heldout_languages": ["cor"],
    "content_vocab_size": 40,
    "domain_vocab_size": 14,
    "neutral_len": [3, 6],
    "specialist_len": [4, 8],
    "train_size": 48,
    "adapt_size": 16,
    "valid_size": 8,
    "test_size": 8,
    "seed": 3,
}


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _smoke_config(tmp_path: Path) -> Path:
    config = {
        "world": SMOKE_WORLD,
        "corpus_dir": str(tmp_path / "corpus"),
        "out_dir": str(tmp_path / "run"),
        "model": {"model_dim": 16, "num_layers": 1, "num_heads": 2, "ffn_dim": 24,
                  "max_seq_len": 24, "dropout": 0.0},
        "adapter": {"bottleneck_dim": 4},
        "pretrain": {"epochs": 1, "lr": 2e-3, "batch_size": 16, "weight_decay": 0.0,
                     "max_steps": 6},
        "meta": {"m": 2, "n": 4, "q": 2, "k": 1, "beta": 1.0, "tau": 1.0, "epochs": 1,
                 "inner_lr": 2e-3, "max_meta_batches": 3},
        "adapt": {"epochs": 1, "batch_size": 8, "lr": 2e-3, "max_steps": 2},
        "eval": {"max_len": 12, "strategies": ["backbone", "meta_adapter", "random_adapter"]},
        "seed": 5,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


def test_cli_gen_corpus_deterministic(tmp_path):
    cfg = _smoke_config(tmp_path)
    assert run(["gen-corpus", "--config", str(cfg)]) == 0
    first = _tree_bytes(tmp_path / "corpus")
    assert run(["gen-corpus", "--config", str(cfg)]) == 0
    assert _tree_bytes(tmp_path / "corpus") == first


def test_cli_full_smoke_pipeline(tmp_path):
    cfg = _smoke_config(tmp_path)
    assert run(["gen-corpus", "--config", str(cfg)]) == 0
    assert run(["pretrain", "--config", str(cfg)]) == 0
    out = tmp_path / "run"
    assert (out / "backbone.ckpt").exists()
    manifest = json.loads((out / "backbone.json").read_text())
    assert manifest["backbone_checksum"]
    assert manifest["partition"]["adapters"] == []  # backbone checkpoint has no adapters
    assert run(["meta-train", "--config", str(cfg)]) == 0
    assert (out / "meta_adapter.ckpt").exists()
    assert run(["adapt", "--config", str(cfg)]) == 0
    records = read_records(out / "metrics.csv")
    strategies = {r.strategy for r in records}
    assert strategies == {"backbone", "meta_adapter", "random_adapter"}
    assert all(0.0 <= r.bleu <= 100.0 for r in records)
    assert run(["report", "--runs", str(out), "--reference", "backbone",
                "--out", str(out / "report")]) == 0
    report_dir = out / "report"
    for name in ("table_by_domain.csv", "table_by_language_pair.csv",
                 "table_overall.csv", "details_by_dlp.csv", "efficiency.csv",
                 "loss_curves.csv"):
        assert (report_dir / name).exists(), name
    first = _tree_bytes(report_dir)
    assert run(["report", "--runs", str(out), "--reference", "backbone",
                "--out", str(out / "report")]) == 0
    assert _tree_bytes(report_dir) == first  # byte-identical regeneration


def test_cli_evaluate_identity_scores_100(tmp_path, capsys):
    refs = tmp_path / "refs.txt"
    refs.write_text("a b c\nd e f g\n", encoding="utf-8")
    assert run(["evaluate", "--hyp-file", str(refs), "--ref-file", str(refs)]) == 0
    out = capsys.readouterr().out
    assert "BLEU 100.00" in out and "chrF 100.00" in out


def test_cli_smoke_config_end_to_end_within_budget(tmp_path, monkeypatch):
    """The checked-in smoke config (3 domains x 3 languages, 200/50/50/50
    splits) must complete gen-corpus through report inside a 10-minute
    budget (documented in the README quickstart)."""
    import time

    monkeypatch.setenv("METADAPT_OUT_ROOT", str(tmp_path))
    cfg = str(Path(__file__).resolve().parent.parent / "configs" / "smoke.json")
    corpus = f"corpus_dir={tmp_path / 'corpus'}"
    t0 = time.perf_counter()
    for command in ("gen-corpus", "pretrain", "meta-train", "adapt"):
        assert run([command, "--config", cfg, "--set", corpus]) == 0
    out_dir = tmp_path / "runs" / "smoke" / "run"
    assert run(["report", "--runs", str(out_dir), "--reference", "backbone",
                "--out", str(out_dir / "report")]) == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 600.0, f"smoke pipeline took {elapsed:.0f}s"
    records = read_records(out_dir / "metrics.csv")
    assert {r.strategy for r in records} == {"backbone", "meta_adapter", "random_adapter"}


def test_cli_baseline_unknown_strategy_exit_2(tmp_path):
    cfg = _smoke_config(tmp_path)
    assert run(["gen-corpus", "--config", str(cfg)]) == 0
    assert run(["baseline", "--config", str(cfg), "--set", "strategy=bogus"]) == 2


def test_cli_missing_backbone_exit_3(tmp_path):
    cfg = _smoke_config(tmp_path)
    assert run(["gen-corpus", "--config", str(cfg)]) == 0
    assert run(["meta-train", "--config", str(cfg)]) == 3


def test_cli_bad_config_json_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert run(["gen-corpus", "--config", str(bad)]) == 2


def test_cli_set_overrides(tmp_path):
    cfg = _smoke_config(tmp_path)
    assert run(["gen-corpus", "--config", str(cfg),
                "--set", "corpus_dir=" + str(tmp_path / "corpus2"),
                "--set", "world.seed=9"]) == 0
    spec = json.loads((tmp_path / "corpus2" / "world.json").read_text())
    assert spec["seed"] == 9


def test_cli_baseline_roundtrip(tmp_path):
    cfg = _smoke_config(tmp_path)
    assert run(["gen-corpus", "--config", str(cfg)]) == 0
    assert run(["pretrain", "--config", str(cfg)]) == 0
    assert run(["baseline", "--config", str(cfg), "--set", "strategy=agnostic_adapter"]) == 0
    art_dir = tmp_path / "run" / "baseline_agnostic_adapter"
    info = json.loads((art_dir / "artifact.json").read_text())
    assert info["components"] == ["adapter"]
    params = checkpoint.load_params(art_dir / "adapter.ckpt")
    assert all("/adapter/" in name for name in params)
    assert run(["adapt", "--config", str(cfg),
                "--set", 'eval.strategies=["backbone","agnostic_adapter"]']) == 0


# --- pipeline functions directly -------------------------------------------------

@pytest.fixture(scope="module")
def smoke_stack(tmp_path_factory):
    from metadapt.corpus import generate_world

    root = tmp_path_factory.mktemp("pipe_world")
    spec = tiny_world_spec(seed=4, train_size=48, adapt_size=16, valid_size=8, test_size=8,
                           specialist_len=(4, 8))
    registry = generate_world(spec, root)
    vocab = Vocab.load(registry.root / "vocab.json")
    mc = ModelConfig(vocab_size=len(vocab), model_dim=16, num_layers=1, num_heads=2,
                     ffn_dim=24, max_seq_len=24, dropout=0.0)
    ac = AdapterConfig(bottleneck_dim=4)
    model, _ = pretrain_backbone(registry, vocab, mc, ac, OptimizerSettings(lr=2e-3),
                                 epochs=1, batch_size=16, seed=0, max_steps=5)
    backbone = {n: model.params[n].data.copy() for n in model.params}
    return registry, vocab, mc, ac, backbone


def test_backbone_dev_bleu_runs(smoke_stack):
    registry, vocab, mc, ac, backbone = smoke_stack
    from metadapt.model import build_model
    from metadapt.training import restore_params

    model = build_model(mc, ac, seed=0, adapter_groups=())
    restore_params(model, backbone)
    score = backbone_dev_bleu(model, vocab, registry, sample_per_dlp=2, max_len=10)
    assert 0.0 <= score <= 100.0


def test_adapt_and_evaluate_identical_budgets_all_strategies(smoke_stack):
    registry, vocab, mc, ac, backbone = smoke_stack
    meta_ds = role_datasets(registry, "meta_train")
    heldout = role_datasets(registry, "heldout")
    dlp = sorted(heldout)[0]
    cfg = MetaConfig(m=2, n=4, q=2, k=1, epochs=1, seed=0, max_meta_batches=2,
                     inner=OptimizerSettings(lr=2e-3))
    strategies = ["backbone", "meta_adapter", "random_adapter", "full_ft", "tag_ft",
                  "agnostic_adapter", "stack_adapter", "full_model_meta"]
    trained = train_strategies(strategies, mc, ac, vocab, backbone, meta_ds, cfg,
                               max_steps=2)
    budget = AdaptBudget(epochs=1, batch_size=8, settings=OptimizerSettings(lr=2e-3),
                         max_steps=2)
    records = []
    for strategy in strategies:
        records.append(adapt_and_evaluate(strategy, dlp, heldout[dlp], mc=mc, ac=ac,
                                          vocab=vocab, backbone=backbone, trained=trained,
                                          budget=budget, run_seed=0, max_len=10))
    by_strategy = {r.strategy: r for r in records}
    assert by_strategy["backbone"].trainable_ratio == 1.0
    assert by_strategy["full_ft"].trainable_ratio == 1.0
    assert by_strategy["meta_adapter"].trainable_ratio < 0.25
    assert by_strategy["meta_adapter"].trainable_params == by_strategy["agnostic_adapter"].trainable_params
    lp_count = len({(d.src_lang, d.tgt_lang) for d in meta_ds})
    dom_count = len({d.domain for d in meta_ds})
    single = by_strategy["meta_adapter"].trainable_params
    assert by_strategy["stack_adapter"].trainable_params == (lp_count + dom_count) * single


def test_hyperparam_sweep_degenerate_and_deterministic(smoke_stack):
    registry, vocab, mc, ac, backbone = smoke_stack
    meta_ds = role_datasets(registry, "meta_train")
    heldout = role_datasets(registry, "heldout")
    pair = {k: heldout[k] for k in sorted(heldout)[:1]}
    base = MetaConfig(m=2, n=4, q=2, k=1, epochs=1, seed=7, max_meta_batches=2,
                      inner=OptimizerSettings(lr=2e-3))
    budget = AdaptBudget(epochs=1, batch_size=8, settings=OptimizerSettings(lr=2e-3),
                         max_steps=1)
    grid = [{"tau": 1.0}]
    rows1 = hyperparam_sweep(grid, base, mc=mc, ac=ac, vocab=vocab, backbone=backbone,
                             meta_datasets=meta_ds, heldout=pair, budget=budget, max_len=10)
    rows2 = hyperparam_sweep(grid, base, mc=mc, ac=ac, vocab=vocab, backbone=backbone,
                             meta_datasets=meta_ds, heldout=pair, budget=budget, max_len=10)
    assert rows1 == rows2
    assert len(rows1) == 1 and rows1[0]["best"] is True

    # a size-1 grid equals a direct meta-train + evaluate run
    trained = train_strategies(["meta_adapter"], mc, ac, vocab, backbone, meta_ds, base)
    dlp = next(iter(pair))
    direct = adapt_and_evaluate("meta_adapter", dlp, pair[dlp], mc=mc, ac=ac, vocab=vocab,
                                backbone=backbone, trained=trained, budget=budget,
                                run_seed=base.seed, max_len=10)
    assert rows1[0]["mean_bleu"] == direct.bleu
