"""Deterministic synthetic multi-domain multilingual parallel corpora.

World model
-----------
Sentences are born as *latent* token sequences over a shared inventory:

* content words ``w000..wNNN`` plus one exclusive signature word per domain,
* function slots ``f0..f9``.

Each language realizes a latent sentence through an invertible transformation:
content words keep their surface form (a shared vocabulary across languages,
the analog of shared subwords), function slots map to language-specific
surface tokens ``<lang>.fK``, and adjacent token pairs are swapped for
odd-class languages (language-index parity). Translation between any two
languages is therefore nontrivial (function words must be mapped, order must
be rewritten) yet exactly solvable.

Domains differ in which content words they use and how often (distinct
unigram distributions, checked at generation time), in their function-word
profiles, and in their sentence shapes. The designated "pretrain" domain is
template-free - every sentence draws a fresh slot pattern over a near-uniform
distribution of the full inventory - so a backbone trained on it must learn
compositional translation; it covers every language of the world. The
remaining "specialist" domains each use a small fixed set of phrase templates
and a skewed distribution led by their signature word, a stylistic rather
than structural shift away from the pretraining distribution.

Splits per DLP are pairwise disjoint by construction (latent sentences are
deduplicated before realization, and the realization map is injective).
"""

from __future__ import annotations

import dataclasses
import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataIntegrityError, InputError
from .tasks import DlpDataset, DlpId, SentencePair

MAX_SENTENCE_TOKENS = 175
PUNCTUATION_RATIO_LIMIT = 0.5
#: Fixed inventory for the punctuation-ratio filter: a token counts as
#: punctuation when every character belongs to this ASCII class.
PUNCTUATION_CHARS = frozenset(string.punctuation)

N_FUNCTION_WORDS = 10
_REORDER_BLOCK = 2


# ---------------------------------------------------------------------------
# world configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticWorldSpec:
    """Generator configuration; a pure function of this spec plus its seed."""

    languages: tuple[str, ...]
    domains: tuple[str, ...]                 # includes the pretrain domain
    pretrain_domain: str
    heldout_domains: tuple[str, ...] = ()
    heldout_languages: tuple[str, ...] = ()
    content_vocab_size: int = 120
    domain_vocab_size: int = 30
    neutral_len: tuple[int, int] = (3, 7)    # sentence length range, pretrain domain
    specialist_len: tuple[int, int] = (5, 11)
    templates_per_domain: int = 8
    train_size: int = 5000
    adapt_size: int = 500
    valid_size: int = 500
    test_size: int = 500
    pretrain_train_size: int | None = None   # train-split override for the pretrain domain
    min_domain_tv: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if len(self.languages) < 2:
            raise ConfigError("world spec: need at least two languages")
        if len(self.domains) < 2:
            raise ConfigError("world spec: need at least two domains")
        if self.pretrain_domain not in self.domains:
            raise ConfigError("world spec: pretrain_domain must be listed in domains")
        if len(set(self.languages)) != len(self.languages) or len(set(self.domains)) != len(self.domains):
            raise ConfigError("world spec: duplicate language or domain codes")
        for d in self.heldout_domains:
            if d not in self.domains:
                raise ConfigError(f"world spec: held-out domain '{d}' not in domains")
        for l in self.heldout_languages:
            if l not in self.languages:
                raise ConfigError(f"world spec: held-out language '{l}' not in languages")
        if self.pretrain_domain in self.heldout_domains:
            raise ConfigError("world spec: the pretrain domain cannot be held out")
        if self.domain_vocab_size > self.content_vocab_size:
            raise ConfigError("world spec: domain_vocab_size exceeds content inventory")

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticWorldSpec":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        for key in ("languages", "domains", "heldout_domains", "heldout_languages"):
            if key in raw:
                raw[key] = tuple(raw[key])
        for key in ("neutral_len", "specialist_len"):
            if key in raw:
                raw[key] = tuple(raw[key])
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"world spec {path}: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# language transformations
# ---------------------------------------------------------------------------

def _rotation(spec: SyntheticWorldSpec, lang: str) -> int:
    return spec.languages.index(lang) % _REORDER_BLOCK


def _reorder(tokens: list[str], r: int) -> list[str]:
    """Rotate each consecutive token block left by r (adjacent-pair swap for
    odd-class languages); invertible for any block size."""
    out = []
    for start in range(0, len(tokens), _REORDER_BLOCK):
        block = tokens[start : start + _REORDER_BLOCK]
        k = r % len(block)
        out.extend(block[k:] + block[:k])
    return out


def _unreorder(tokens: list[str], r: int) -> list[str]:
    out = []
    for start in range(0, len(tokens), _REORDER_BLOCK):
        block = tokens[start : start + _REORDER_BLOCK]
        k = (-r) % len(block)
        out.extend(block[k:] + block[:k])
    return out


def realize(spec: SyntheticWorldSpec, latent: list[str], lang: str) -> list[str]:
    """Latent sentence -> surface sentence in `lang` (deterministic, invertible)."""
    if lang not in spec.languages:
        raise InputError(f"realize: unknown language '{lang}'")
    surface = [f"{lang}.{t}" if t.startswith("f") else t for t in latent]
    return _reorder(surface, _rotation(spec, lang))


def to_latent(spec: SyntheticWorldSpec, surface: list[str], lang: str) -> list[str]:
    """Inverse of realize(); round-trips exactly."""
    if lang not in spec.languages:
        raise InputError(f"to_latent: unknown language '{lang}'")
    ordered = _unreorder(list(surface), _rotation(spec, lang))
    prefix = f"{lang}."
    out = []
    for t in ordered:
        out.append(t[len(prefix):] if t.startswith(prefix) else t)
    return out


def translate(spec: SyntheticWorldSpec, surface: list[str], src_lang: str, tgt_lang: str) -> list[str]:
    """Gold translation: invert the source transformation, apply the target one."""
    return realize(spec, to_latent(spec, surface, src_lang), tgt_lang)


# ---------------------------------------------------------------------------
# domain machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _DomainModel:
    name: str
    words: tuple[str, ...]
    weights: tuple[float, ...]
    length_range: tuple[int, int]
    function_profile: tuple[float, ...]
    # fixed phrase templates (slots: 'C' or 'f<k>'); None means every sentence
    # draws a fresh pattern, the template-free regime of the pretrain domain
    templates: tuple[tuple[str, ...], ...] | None


def _content_inventory(spec: SyntheticWorldSpec) -> list[str]:
    width = len(str(max(spec.content_vocab_size - 1, 1)))
    return [f"w{i:0{width}d}" for i in range(spec.content_vocab_size)]


def _domain_models(spec: SyntheticWorldSpec) -> dict[str, _DomainModel]:
    """Per-domain sentence models drawn from one shared grammar family.

    The pretrain domain covers the whole inventory (every token embedding gets
    trained) with a near-uniform distribution and short sentences. Specialist
    domains use a skewed distribution over a domain subset led by an exclusive
    signature word, a domain-specific function-word profile, and somewhat
    longer sentences, so the shift away from the pretraining distribution is
    stylistic rather than structural.
    """
    inventory = _content_inventory(spec)
    models: dict[str, _DomainModel] = {}
    specialist = [d for d in spec.domains if d != spec.pretrain_domain]
    markers = {d: f"mk.{d}" for d in specialist}

    all_words = tuple(inventory + [markers[d] for d in specialist])
    uniform = tuple(np.full(len(all_words), 1.0 / len(all_words)).tolist())
    neutral_profile = tuple(np.full(N_FUNCTION_WORDS, 1.0 / N_FUNCTION_WORDS).tolist())
    models[spec.pretrain_domain] = _DomainModel(
        name=spec.pretrain_domain,
        words=all_words,
        weights=uniform,
        length_range=spec.neutral_len,
        function_profile=neutral_profile,
        templates=None,
    )

    for idx, dom in enumerate(specialist):
        drng = np.random.default_rng(np.random.SeedSequence([spec.seed, 202, idx]))
        chosen = drng.choice(len(inventory), size=spec.domain_vocab_size, replace=False)
        words = [markers[dom]] + [inventory[i] for i in sorted(chosen.tolist())]
        order = drng.permutation(len(words) - 1)
        ranks = np.empty(len(words), dtype=np.int64)
        ranks[0] = 0  # the signature word takes the top rank
        ranks[1:][order] = np.arange(1, len(words))
        raw = 1.0 / (ranks + 1.0) ** 1.1
        weights = tuple((raw / raw.sum()).tolist())
        f_perm = drng.permutation(N_FUNCTION_WORDS)
        f_ranks = np.empty(N_FUNCTION_WORDS)
        f_ranks[f_perm] = np.arange(N_FUNCTION_WORDS)
        f_raw = 1.0 / (f_ranks + 2.0)
        profile = tuple((f_raw / f_raw.sum()).tolist())
        models[dom] = _DomainModel(
            name=dom,
            words=tuple(words),
            weights=weights,
            length_range=spec.specialist_len,
            function_profile=profile,
            templates=_make_templates(drng, spec.templates_per_domain,
                                      spec.specialist_len, profile),
        )
    return models


def _pattern(rng: np.random.Generator, length_range: tuple[int, int],
             function_profile) -> tuple[str, ...]:
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ConfigError(f"world spec: bad sentence length range {length_range}")
    length = int(rng.integers(lo, hi + 1))
    slots: list[str] = []
    profile = np.asarray(function_profile)
    while len(slots) < length:
        if rng.random() < 0.35:
            slots.append(f"f{int(rng.choice(N_FUNCTION_WORDS, p=profile))}")
        else:
            slots.append("C")
    return tuple(slots)


def _make_templates(rng: np.random.Generator, count: int, length_range: tuple[int, int],
                    function_profile) -> tuple[tuple[str, ...], ...]:
    return tuple(_pattern(rng, length_range, function_profile) for _ in range(count))


def _latent_sentence(model: _DomainModel, rng: np.random.Generator) -> list[str]:
    if model.templates is None:
        template = _pattern(rng, model.length_range, model.function_profile)
    else:
        template = model.templates[int(rng.integers(0, len(model.templates)))]
    weights = np.asarray(model.weights)
    out = []
    for slot in template:
        if slot == "C":
            out.append(model.words[int(rng.choice(len(model.words), p=weights))])
        else:
            out.append(slot)
    return out


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------

def _is_punct_token(token: str) -> bool:
    return bool(token) and all(c in PUNCTUATION_CHARS for c in token)


def _side_ok(text: str) -> bool:
    tokens = text.split()
    if not tokens or len(tokens) > MAX_SENTENCE_TOKENS:
        return False
    punct = sum(1 for t in tokens if _is_punct_token(t))
    return punct / len(tokens) <= PUNCTUATION_RATIO_LIMIT


def filter_corpus(pairs: list[SentencePair]) -> list[SentencePair]:
    """Length cap (175 tokens), punctuation-ratio cap (> 50% dropped), exact dedup.

    Order of surviving pairs is preserved; the operation is idempotent.
    """
    seen: set[SentencePair] = set()
    out = []
    for pair in pairs:
        src, tgt = pair
        if not (_side_ok(src) and _side_ok(tgt)):
            continue
        if pair in seen:
            continue
        seen.add(pair)
        out.append(pair)
    return out


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"


class Vocab:
    """Closed token<->id map with specials, language tags, and domain tags."""

    def __init__(self, tokens: list[str], languages: list[str], domains: list[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataIntegrityError("vocab: duplicate tokens")
        self.languages = list(languages)
        self.domains = list(domains)
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]
        self._special_ids = {self.pad_id, self.bos_id, self.eos_id, self.unk_id} | {
            self.index[t] for t in self.tokens if t.startswith("<lang:") or t.startswith("<dom:")
        }

    def __len__(self) -> int:
        return len(self.tokens)

    def lang_tag(self, lang: str) -> int:
        tag = f"<lang:{lang}>"
        if tag not in self.index:
            raise InputError(f"vocab: unknown language tag '{lang}'")
        return self.index[tag]

    def domain_tag(self, domain: str) -> int:
        tag = f"<dom:{domain}>"
        if tag not in self.index:
            raise InputError(f"vocab: unknown domain tag '{domain}'")
        return self.index[tag]

    def is_special(self, token_id: int) -> bool:
        return token_id in self._special_ids

    @classmethod
    def build(cls, token_counts: Counter, languages: list[str], domains: list[str]) -> "Vocab":
        """Specials first, then tags, then content by frequency desc / token asc."""
        specials = [PAD, BOS, EOS, UNK]
        tags = [f"<lang:{l}>" for l in languages] + [f"<dom:{d}>" for d in domains]
        content = sorted(token_counts, key=lambda t: (-token_counts[t], t))
        return cls(specials + tags + content, languages, domains)

    def save(self, path: str | Path) -> None:
        payload = {"languages": self.languages, "domains": self.domains, "tokens": self.tokens}
        Path(path).write_text(json.dumps(payload, indent=0, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(raw["tokens"], raw["languages"], raw["domains"])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.index.get(tok, vocab.unk_id) for tok in text.split()]


def detokenize(ids: list[int], vocab: Vocab) -> str:
    return " ".join(vocab.tokens[i] for i in ids if not vocab.is_special(i))


# ---------------------------------------------------------------------------
# generation and registry
# ---------------------------------------------------------------------------

SPLITS = ("train", "adapt", "valid", "test")


@dataclass(frozen=True)
class RegistryRow:
    dlp: DlpId
    role: str  # pretrain | meta_train | heldout
    sizes: dict[str, int] = field(hash=False)

    def path(self, root: Path, split: str) -> Path:
        return root / self.dlp.domain / f"{self.dlp.src_lang}-{self.dlp.tgt_lang}" / f"{split}.tsv"


@dataclass
class Registry:
    root: Path
    spec: SyntheticWorldSpec
    rows: list[RegistryRow]

    def by_role(self, role: str) -> list[RegistryRow]:
        return [r for r in self.rows if r.role == role]

    def row(self, dlp: DlpId) -> RegistryRow:
        for r in self.rows:
            if r.dlp == dlp:
                return r
        raise InputError(f"registry: unknown DLP {dlp.key()}")


def _dlp_role(spec: SyntheticWorldSpec, dlp: DlpId) -> str:
    if dlp.domain == spec.pretrain_domain:
        return "pretrain"
    if (dlp.domain in spec.heldout_domains
            or dlp.src_lang in spec.heldout_languages
            or dlp.tgt_lang in spec.heldout_languages):
        return "heldout"
    return "meta_train"


def generate_world(spec: SyntheticWorldSpec, out_dir: str | Path) -> Registry:
    """Write the full corpus tree, registry manifest, vocab, and world spec.

    Deterministic: the same spec produces a byte-identical tree. Raises
    ConfigError when the generated domain unigram distributions are closer
    than the configured minimum pairwise total-variation distance.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    models = _domain_models(spec)
    token_counts: Counter = Counter()
    unigrams: dict[str, Counter] = {d: Counter() for d in spec.domains}
    rows: list[RegistryRow] = []

    for d_idx, domain in enumerate(spec.domains):
        model = models[domain]
        train_size = spec.train_size
        if domain == spec.pretrain_domain and spec.pretrain_train_size is not None:
            train_size = spec.pretrain_train_size
        sizes = {"train": train_size, "adapt": spec.adapt_size,
                 "valid": spec.valid_size, "test": spec.test_size}
        total = sum(sizes.values())
        for s_idx, src in enumerate(spec.languages):
            for t_idx, tgt in enumerate(spec.languages):
                if src == tgt:
                    continue
                dlp = DlpId(domain, src, tgt)
                rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7, d_idx, s_idx, t_idx]))
                latents: list[list[str]] = []
                seen: set[tuple[str, ...]] = set()
                attempts = 0
                while len(latents) < total:
                    attempts += 1
                    if attempts > 50 * total + 1000:
                        raise ConfigError(
                            f"generate_world: {dlp.key()} cannot supply {total} distinct sentences; "
                            "enlarge the vocabulary or length ranges")
                    latent = _latent_sentence(model, rng)
                    key = tuple(latent)
                    if key in seen:
                        continue
                    seen.add(key)
                    latents.append(latent)
                pairs = []
                for latent in latents:
                    src_toks = realize(spec, latent, src)
                    tgt_toks = realize(spec, latent, tgt)
                    pairs.append((" ".join(src_toks), " ".join(tgt_toks)))
                    unigrams[domain].update(latent)
                pairs = filter_corpus(pairs)
                if len(pairs) != total:
                    raise DataIntegrityError(f"generate_world: filters dropped pairs in {dlp.key()}")
                row = RegistryRow(dlp=dlp, role=_dlp_role(spec, dlp), sizes=dict(sizes))
                offset = 0
                for split in SPLITS:
                    chunk = pairs[offset : offset + sizes[split]]
                    offset += sizes[split]
                    path = row.path(root, split)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    path.write_text("".join(f"{s}\t{t}\n" for s, t in chunk), encoding="utf-8")
                for s, t in pairs:
                    token_counts.update(s.split())
                    token_counts.update(t.split())
                rows.append(row)

    _assert_domain_separation(spec, unigrams)
    vocab = Vocab.build(token_counts, list(spec.languages), list(spec.domains))
    vocab.save(root / "vocab.json")
    (root / "world.json").write_text(spec.to_json(), encoding="utf-8")
    registry = Registry(root=root, spec=spec, rows=rows)
    _write_manifest(registry)
    return registry


def _assert_domain_separation(spec: SyntheticWorldSpec, unigrams: dict[str, Counter]) -> None:
    domains = list(spec.domains)
    dists = {}
    for d in domains:
        total = sum(unigrams[d].values())
        dists[d] = {t: c / total for t, c in unigrams[d].items()}
    for i, a in enumerate(domains):
        for b in domains[i + 1 :]:
            tokens = set(dists[a]) | set(dists[b])
            tv = 0.5 * sum(abs(dists[a].get(t, 0.0) - dists[b].get(t, 0.0)) for t in tokens)
            if tv < spec.min_domain_tv:
                raise ConfigError(
                    f"generate_world: domains '{a}' and '{b}' are too similar "
                    f"(TV {tv:.3f} < {spec.min_domain_tv})")


MANIFEST_COLUMNS = ["domain", "src_lang", "tgt_lang", "role",
                    "train_path", "adapt_path", "valid_path", "test_path",
                    "train_size", "adapt_size", "valid_size", "test_size"]


def _write_manifest(registry: Registry) -> None:
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for row in sorted(registry.rows, key=lambda r: r.dlp):
        rel = {s: row.path(Path("."), s).as_posix() for s in SPLITS}
        lines.append("\t".join([
            row.dlp.domain, row.dlp.src_lang, row.dlp.tgt_lang, row.role,
            rel["train"], rel["adapt"], rel["valid"], rel["test"],
            str(row.sizes["train"]), str(row.sizes["adapt"]),
            str(row.sizes["valid"]), str(row.sizes["test"]),
        ]))
    (registry.root / "registry.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_registry(root: str | Path) -> Registry:
    root = Path(root)
    manifest = root / "registry.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"registry manifest not found: {manifest}")
    spec = SyntheticWorldSpec.from_json(root / "world.json")
    lines = manifest.read_text(encoding="utf-8").strip().split("\n")
    if lines[0].split("\t") != MANIFEST_COLUMNS:
        raise DataIntegrityError("registry.tsv: unexpected column order")
    rows = []
    for line in lines[1:]:
        cells = line.split("\t")
        dlp = DlpId(cells[0], cells[1], cells[2])
        sizes = {s: int(cells[8 + i]) for i, s in enumerate(SPLITS)}
        rows.append(RegistryRow(dlp=dlp, role=cells[3], sizes=sizes))
    return Registry(root=root, spec=spec, rows=rows)


def load_dlp_dataset(registry: Registry, dlp: DlpId, caps: dict[str, int] | None = None) -> DlpDataset:
    """Load one DLP's splits, enforce caps (head-of-file truncation), and
    assert pairwise cross-split disjointness."""
    row = registry.row(dlp)
    splits: dict[str, list[SentencePair]] = {}
    for split in SPLITS:
        path = row.path(registry.root, split)
        if not path.exists():
            raise FileNotFoundError(f"missing split file: {path}")
        pairs: list[SentencePair] = []
        for line in path.read_text(encoding="utf-8").splitlines():
            src, _, tgt = line.partition("\t")
            if not tgt:
                raise DataIntegrityError(f"{path}: malformed line without tab separator")
            pairs.append((src, tgt))
        cap = (caps or {}).get(split)
        if cap is not None:
            pairs = pairs[:cap]
        splits[split] = pairs
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1 :]:
            overlap = set(splits[a]) & set(splits[b])
            if overlap:
                raise DataIntegrityError(
                    f"{dlp.key()}: splits '{a}' and '{b}' overlap on {len(overlap)} pairs")
    return DlpDataset(id=dlp, **splits)


def load_datasets(registry: Registry, dlps: list[DlpId], caps: dict[str, int] | None = None) -> dict[DlpId, DlpDataset]:
    return {dlp: load_dlp_dataset(registry, dlp, caps) for dlp in dlps}
