from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metadapt.corpus import (
    Vocab,
    detokenize,
    filter_corpus,
    generate_world,
    load_dlp_dataset,
    load_registry,
    realize,
    to_latent,
    tokenize,
    translate,
)
from metadapt.errors import ConfigError, DataIntegrityError
from metadapt.tasks import DlpId

from conftest import tiny_world_spec


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_language_transform_round_trip(tiny_registry):
    spec = tiny_registry.spec
    latent = ["mk.gears", "w003", "f2", "w010", "f7", "w001"]
    for lang in spec.languages:
        surface = realize(spec, latent, lang)
        assert to_latent(spec, surface, lang) == latent


def test_generated_pairs_are_exact_translations(tiny_registry):
    spec = tiny_registry.spec
    dlp = DlpId("gears", "apa", "bel")
    ds = load_dlp_dataset(tiny_registry, dlp)
    for src, tgt in ds.train[:20]:
        assert " ".join(translate(spec, src.split(), "apa", "bel")) == tgt


def test_same_seed_gives_byte_identical_tree(tmp_path):
    spec = tiny_world_spec(seed=5)
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_world(spec, a)
    generate_world(spec, b)
    assert _tree_bytes(a) == _tree_bytes(b)


def test_domain_unigram_distributions_differ(tiny_registry):
    # counting oracle over the generated corpora, independent of the
    # generation-time assertion
    spec = tiny_registry.spec
    counts = {}
    for domain in spec.domains:
        c = Counter()
        ds = load_dlp_dataset(tiny_registry, DlpId(domain, "apa", "bel"))
        for src, _ in ds.train:
            c.update(to_latent(spec, src.split(), "apa"))
        counts[domain] = c
    domains = list(spec.domains)
    for i, a in enumerate(domains):
        for b in domains[i + 1:]:
            pa = {t: v / sum(counts[a].values()) for t, v in counts[a].items()}
            pb = {t: v / sum(counts[b].values()) for t, v in counts[b].items()}
            tv = 0.5 * sum(abs(pa.get(t, 0) - pb.get(t, 0)) for t in set(pa) | set(pb))
            assert tv >= 0.3, (a, b, tv)


def test_too_similar_domains_rejected(tmp_path):
    spec = tiny_world_spec(min_domain_tv=0.999)
    with pytest.raises(ConfigError):
        generate_world(spec, tmp_path / "w")


def test_filter_drops_long_sentences():
    long_side = " ".join(["tok"] * 176)
    ok_side = " ".join(["tok"] * 175)
    assert filter_corpus([(long_side, "a"), ("a", long_side), (ok_side, "b")]) == [(ok_side, "b")]


def test_filter_punctuation_ratio_strictly_greater():
    assert filter_corpus([("!!! ???", "x")]) == []          # 100% punctuation
    assert filter_corpus([("hello !", "x")]) == [("hello !", "x")]  # exactly 50% kept


def test_filter_dedup_keeps_first_occurrence():
    pairs = [("a", "b"), ("c", "d"), ("a", "b")]
    assert filter_corpus(pairs) == [("a", "b"), ("c", "d")]


def test_filter_idempotent_on_random_corpora():
    pairs = [("a a", "b"), ("! !", "x"), ("a a", "b"), ("q w e", "r t")]
    once = filter_corpus(pairs)
    assert filter_corpus(once) == once


def test_vocab_round_trip(tiny_registry):
    vocab = Vocab.load(tiny_registry.root / "vocab.json")
    ds = load_dlp_dataset(tiny_registry, DlpId("gears", "apa", "cor"))
    for src, tgt in ds.train[:10]:
        assert detokenize(tokenize(src, vocab), vocab) == src
        assert detokenize(tokenize(tgt, vocab), vocab) == tgt


def test_vocab_unknown_token_maps_to_unk(tiny_registry):
    vocab = Vocab.load(tiny_registry.root / "vocab.json")
    assert tokenize("never-seen-token", vocab) == [vocab.unk_id]


def test_vocab_build_order_insensitive():
    counts = Counter({"b": 3, "a": 3, "c": 1})
    v1 = Vocab.build(counts, ["x", "y"], ["d"])
    v2 = Vocab.build(Counter(dict(reversed(list(counts.items())))), ["x", "y"], ["d"])
    assert v1.tokens == v2.tokens
    assert v1.tokens.index("a") < v1.tokens.index("b")  # frequency tie -> lexicographic


def test_vocab_ids_dense_and_specials_disjoint(tiny_registry):
    vocab = Vocab.load(tiny_registry.root / "vocab.json")
    assert sorted(vocab.index.values()) == list(range(len(vocab)))
    assert vocab.pad_id == 0 and vocab.bos_id == 1 and vocab.eos_id == 2 and vocab.unk_id == 3


def test_load_dataset_sizes_match_generator_contract(tiny_registry):
    ds = load_dlp_dataset(tiny_registry, DlpId("gears", "apa", "bel"))
    spec = tiny_registry.spec
    assert (len(ds.train), len(ds.adapt), len(ds.valid), len(ds.test)) == (
        spec.train_size, spec.adapt_size, spec.valid_size, spec.test_size)


def test_splits_pairwise_disjoint_everywhere(tiny_registry):
    for row in tiny_registry.rows:
        ds = load_dlp_dataset(tiny_registry, row.dlp)
        splits = [ds.train, ds.adapt, ds.valid, ds.test]
        for i in range(len(splits)):
            for j in range(i + 1, len(splits)):
                assert not set(splits[i]) & set(splits[j])


def test_injected_overlap_raises(tmp_path):
    spec = tiny_world_spec(seed=9)
    reg = generate_world(spec, tmp_path / "w")
    row = reg.rows[0]
    adapt_path = row.path(reg.root, "adapt")
    test_path = row.path(reg.root, "test")
    test_lines = test_path.read_text().splitlines()
    broken = adapt_path.read_text().splitlines()
    broken[0] = test_lines[0]
    adapt_path.write_text("\n".join(broken) + "\n")
    with pytest.raises(DataIntegrityError):
        load_dlp_dataset(reg, row.dlp)


def test_caps_truncate_head_of_file(tiny_registry):
    row = tiny_registry.rows[0]
    full = load_dlp_dataset(tiny_registry, row.dlp)
    capped = load_dlp_dataset(tiny_registry, row.dlp, caps={"train": 7})
    assert capped.train == full.train[:7]


def test_registry_round_trip(tiny_registry):
    reloaded = load_registry(tiny_registry.root)
    assert [(r.dlp, r.role) for r in sorted(reloaded.rows, key=lambda r: r.dlp)] == \
           [(r.dlp, r.role) for r in sorted(tiny_registry.rows, key=lambda r: r.dlp)]


def test_registry_roles(tiny_registry):
    roles = {r.dlp: r.role for r in tiny_registry.rows}
    assert roles[DlpId("general", "apa", "bel")] == "pretrain"
    assert roles[DlpId("gears", "apa", "bel")] == "meta_train"
    assert roles[DlpId("herbs", "apa", "bel")] == "heldout"       # held-out domain
    assert roles[DlpId("gears", "apa", "cor")] == "heldout"       # held-out language
    assert roles[DlpId("general", "apa", "cor")] == "pretrain"    # pretraining covers all languages


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.text("ab !", min_size=1, max_size=8),
                          st.text("ab !", min_size=1, max_size=8)), max_size=12))
def test_filter_idempotence_property(pairs):
    once = filter_corpus(pairs)
    assert filter_corpus(once) == once
