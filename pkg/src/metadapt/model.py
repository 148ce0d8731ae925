"""Miniature transformer encoder-decoder with bottleneck adapter slots.

Pre-norm layers, tied input/output embeddings, sinusoidal positions. One
adapter sits after the feed-forward sublayer of every encoder and decoder
layer; a model may carry several adapter *groups* applied in sequence (used
by the stacked-adapter baseline), or none at all (plain backbone).

Parameter names containing "/adapter/" form the adapter set; every other
parameter belongs to the backbone. The two name sets are disjoint and cover
the whole model, asserted on every build.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import Vocab
from .errors import ConfigError, DimensionError, InputError, StateError
from .tasks import DlpId, SentencePair
from .tensor import Tensor

NEG_MASK = -1e9  # additive attention mask; finite so forward values stay finite


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int = 64
    num_layers: int = 2          # per stack: encoder and decoder each
    num_heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if min(self.vocab_size, self.model_dim, self.num_layers, self.num_heads,
               self.ffn_dim, self.max_seq_len) < 1:
            raise ConfigError("model config: all dimensions must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError("model config: model_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model config: dropout must be in [0, 1)")


@dataclass(frozen=True)
class AdapterConfig:
    """Bottleneck adapter: gain/bias layer norm, down-projection, ReLU,
    up-projection, residual. Inserted after each feed-forward sublayer."""

    bottleneck_dim: int = 16
    ln_epsilon: float = 1e-5

    def validate(self, model_dim: int) -> None:
        if not 1 <= self.bottleneck_dim < model_dim:
            raise ConfigError("adapter config: need 1 <= bottleneck_dim < model_dim")
        if self.ln_epsilon <= 0:
            raise ConfigError("adapter config: ln_epsilon must be positive")


@dataclass(frozen=True)
class ParamPartition:
    backbone: tuple[str, ...]
    adapters: tuple[str, ...]


@dataclass
class Batch:
    """Teacher-forced batch. Sources start with their control tag tokens and
    end with end-of-sequence; gold rows are the shifted targets plus eos."""

    src: np.ndarray          # (B, Ts) int64
    src_mask: np.ndarray     # (B, Ts) float64, 1.0 at real positions
    dec_in: np.ndarray       # (B, Tt) int64, begins with bos
    gold: np.ndarray         # (B, Tt) int64, ends with eos before padding
    gold_mask: np.ndarray    # (B, Tt) float64
    dlp: DlpId | None = None


def adapter_param_count(model_dim: int, bottleneck_dim: int) -> int:
    """Per-layer adapter parameters: two projections, their biases, LN affine."""
    return 2 * model_dim * bottleneck_dim + 2 * model_dim + bottleneck_dim + model_dim


def _sinusoid_table(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


class TranslationModel:
    """Parameter container plus forward passes; single-writer by convention."""

    def __init__(self, mc: ModelConfig, ac: AdapterConfig,
                 params: dict[str, Tensor], adapter_groups: list[str]):
        self.mc = mc
        self.ac = ac
        self.params = params
        self.adapter_groups = list(adapter_groups)
        self._pos = _sinusoid_table(mc.max_seq_len, mc.model_dim)
        self._assert_partition()

    # -- partition ----------------------------------------------------------

    def partition(self) -> ParamPartition:
        adapters = tuple(n for n in self.params if "/adapter/" in n)
        backbone = tuple(n for n in self.params if "/adapter/" not in n)
        return ParamPartition(backbone=backbone, adapters=adapters)

    def _assert_partition(self) -> None:
        part = self.partition()
        names = set(part.backbone) | set(part.adapters)
        if len(part.backbone) + len(part.adapters) != len(self.params) or names != set(self.params):
            raise StateError("parameter partition must cover the model exactly once")

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if "/adapter/" not in n]

    def adapter_names(self, group: str | None = None) -> list[str]:
        if group is None:
            return [n for n in self.params if "/adapter/" in n]
        return [n for n in self.params if f"/adapter/{group}/" in n]

    def set_trainable(self, names: list[str]) -> None:
        wanted = set(names)
        for name, p in self.params.items():
            p.set_requires_grad(name in wanted)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.requires_grad]

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.backbone_names()):
            h.update(name.encode("utf-8"))
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def param_count(self, names: list[str] | None = None) -> int:
        names = list(self.params) if names is None else names
        return int(sum(self.params[n].size for n in names))

    # -- forward ------------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _maybe_dropout(self, x: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        if not train or self.mc.dropout == 0.0:
            return x
        if rng is None:
            raise InputError("training forward pass needs an rng for dropout")
        return T.dropout(x, self.mc.dropout, rng)

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, add_mask: np.ndarray) -> Tensor:
        mc = self.mc
        dh = mc.model_dim // mc.num_heads

        def heads(x: Tensor, tlen: int) -> Tensor:
            x = T.reshape(x, (x.shape[0], tlen, mc.num_heads, dh))
            return T.swapaxes(x, 1, 2)

        tq, tk = q_in.shape[1], kv_in.shape[1]
        q = heads(T.matmul(q_in, self._p(f"{prefix}/wq")) + self._p(f"{prefix}/bq"), tq)
        k = heads(T.matmul(kv_in, self._p(f"{prefix}/wk")) + self._p(f"{prefix}/bk"), tk)
        v = heads(T.matmul(kv_in, self._p(f"{prefix}/wv")) + self._p(f"{prefix}/bv"), tk)
        scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), 1.0 / np.sqrt(dh))
        attn = T.softmax(scores + Tensor(add_mask))
        ctx = T.swapaxes(T.matmul(attn, v), 1, 2)
        ctx = T.reshape(ctx, (q_in.shape[0], tq, mc.model_dim))
        return T.matmul(ctx, self._p(f"{prefix}/wo")) + self._p(f"{prefix}/bo")

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        h = T.relu(T.matmul(x, self._p(f"{prefix}/w1")) + self._p(f"{prefix}/b1"))
        return T.matmul(h, self._p(f"{prefix}/w2")) + self._p(f"{prefix}/b2")

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self._p(f"{prefix}/g"), self._p(f"{prefix}/b"))

    def _adapters(self, side: str, layer: int, x: Tensor) -> Tensor:
        for group in self.adapter_groups:
            x = adapter_forward(x, self._adapter_tensors(side, layer, group), self.ac.ln_epsilon)
        return x

    def _adapter_tensors(self, side: str, layer: int, group: str) -> dict[str, Tensor]:
        base = f"{side}/{layer}/adapter/{group}"
        return {k: self._p(f"{base}/{k}") for k in ("ln_g", "ln_b", "down_w", "down_b", "up_w", "up_b")}

    def _embed(self, ids: np.ndarray, train: bool, rng) -> Tensor:
        if ids.shape[1] > self.mc.max_seq_len:
            raise DimensionError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.mc.max_seq_len}")
        x = T.scale(T.embedding_lookup(self._p("embed/tok"), ids), np.sqrt(self.mc.model_dim))
        x = x + Tensor(self._pos[: ids.shape[1]])
        return self._maybe_dropout(x, train, rng)

    def encode(self, src: np.ndarray, src_mask: np.ndarray,
               train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = self._embed(src, train, rng)
        key_mask = NEG_MASK * (1.0 - src_mask)[:, None, None, :]
        for i in range(self.mc.num_layers):
            p = f"enc/{i}"
            ln1 = self._ln(f"{p}/ln1", x)
            x = x + self._maybe_dropout(self._attention(f"{p}/attn", ln1, ln1, key_mask), train, rng)
            x = x + self._maybe_dropout(self._ffn(f"{p}/ffn", self._ln(f"{p}/ln2", x)), train, rng)
            x = self._adapters("enc", i, x)
        return self._ln("enc/ln_f", x)

    def decode_logits(self, enc_out: Tensor, src_mask: np.ndarray, dec_in: np.ndarray,
                      dec_mask: np.ndarray, train: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        tt = dec_in.shape[1]
        causal = np.triu(np.full((tt, tt), NEG_MASK), k=1)[None, None, :, :]
        self_mask = causal + NEG_MASK * (1.0 - dec_mask)[:, None, None, :]
        cross_mask = NEG_MASK * (1.0 - src_mask)[:, None, None, :]
        x = self._embed(dec_in, train, rng)
        for i in range(self.mc.num_layers):
            p = f"dec/{i}"
            ln1 = self._ln(f"{p}/ln1", x)
            x = x + self._maybe_dropout(self._attention(f"{p}/attn", ln1, ln1, self_mask), train, rng)
            x = x + self._maybe_dropout(self._attention(f"{p}/xattn", self._ln(f"{p}/ln2", x), enc_out, cross_mask), train, rng)
            x = x + self._maybe_dropout(self._ffn(f"{p}/ffn", self._ln(f"{p}/ln3", x)), train, rng)
            x = self._adapters("dec", i, x)
        x = self._ln("dec/ln_f", x)
        return T.matmul(x, T.swapaxes(self._p("embed/tok"), 0, 1))

    def forward_logits(self, batch: Batch, train: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
        enc = self.encode(batch.src, batch.src_mask, train, rng)
        return self.decode_logits(enc, batch.src_mask, batch.dec_in, batch.gold_mask, train, rng)


def adapter_forward(h: Tensor, params: dict[str, Tensor], ln_epsilon: float = 1e-5) -> Tensor:
    """Position-wise bottleneck adapter: up(relu(down(LN(h)))) + h."""
    if h.shape[-1] != params["down_w"].shape[0]:
        raise DimensionError("adapter_forward: hidden size does not match down-projection")
    x = T.layer_norm(h, params["ln_g"], params["ln_b"], ln_epsilon)
    x = T.relu(T.matmul(x, params["down_w"]) + params["down_b"])
    return T.matmul(x, params["up_w"]) + params["up_b"] + h


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_model(mc: ModelConfig, ac: AdapterConfig, seed: int,
                adapter_groups: tuple[str, ...] = ("main",)) -> TranslationModel:
    """Deterministic build. Backbone init depends only on (mc, seed), so the
    same seed yields an identical backbone regardless of adapter groups.
    Adapters start near-identity: up-projection (and all biases) at zero."""
    ac.validate(mc.model_dim)
    params: dict[str, Tensor] = {}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    def add_param(name: str, value: np.ndarray) -> None:
        params[name] = Tensor(value, requires_grad=False)

    z, f = mc.model_dim, mc.ffn_dim
    add_param("embed/tok", rng.normal(0.0, 0.02, size=(mc.vocab_size, z)))

    def attn_block(prefix: str) -> None:
        for w in ("wq", "wk", "wv", "wo"):
            add_param(f"{prefix}/{w}", glorot(z, z))
        for b in ("bq", "bk", "bv", "bo"):
            add_param(f"{prefix}/{b}", np.zeros(z))

    def ln_block(prefix: str) -> None:
        add_param(f"{prefix}/g", np.ones(z))
        add_param(f"{prefix}/b", np.zeros(z))

    def ffn_block(prefix: str) -> None:
        add_param(f"{prefix}/w1", glorot(z, f))
        add_param(f"{prefix}/b1", np.zeros(f))
        add_param(f"{prefix}/w2", glorot(f, z))
        add_param(f"{prefix}/b2", np.zeros(z))

    for i in range(mc.num_layers):
        ln_block(f"enc/{i}/ln1")
        attn_block(f"enc/{i}/attn")
        ln_block(f"enc/{i}/ln2")
        ffn_block(f"enc/{i}/ffn")
    ln_block("enc/ln_f")
    for i in range(mc.num_layers):
        ln_block(f"dec/{i}/ln1")
        attn_block(f"dec/{i}/attn")
        ln_block(f"dec/{i}/ln2")
        attn_block(f"dec/{i}/xattn")
        ln_block(f"dec/{i}/ln3")
        ffn_block(f"dec/{i}/ffn")
    ln_block("dec/ln_f")

    model = TranslationModel(mc, ac, params, adapter_groups=[])
    for g_idx, group in enumerate(adapter_groups):
        add_adapter_group(model, group, seed=hash_seed(seed, 1, g_idx))
    return model


def hash_seed(*parts: int) -> int:
    """Stable derived seed for independent rng streams (63-bit, nestable)."""
    blob = b"".join(int(p).to_bytes(16, "little", signed=True) for p in parts)
    h = hashlib.sha256(blob).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def add_adapter_group(model: TranslationModel, group: str, seed: int) -> None:
    """Insert a near-identity adapter group after every layer's FFN sublayer."""
    if group in model.adapter_groups:
        raise StateError(f"adapter group '{group}' already inserted")
    z, d = model.mc.model_dim, model.ac.bottleneck_dim
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    for side in ("enc", "dec"):
        for i in range(model.mc.num_layers):
            base = f"{side}/{i}/adapter/{group}"
            model.params[f"{base}/ln_g"] = Tensor(np.ones(z))
            model.params[f"{base}/ln_b"] = Tensor(np.zeros(z))
            model.params[f"{base}/down_w"] = Tensor(rng.uniform(-1e-2, 1e-2, size=(z, d)))
            model.params[f"{base}/down_b"] = Tensor(np.zeros(d))
            model.params[f"{base}/up_w"] = Tensor(np.zeros((d, z)))
            model.params[f"{base}/up_b"] = Tensor(np.zeros(z))
    model.adapter_groups.append(group)
    model._assert_partition()


def remove_adapter_group(model: TranslationModel, group: str) -> None:
    if group not in model.adapter_groups:
        raise StateError(f"adapter group '{group}' not present")
    for name in model.adapter_names(group):
        del model.params[name]
    model.adapter_groups.remove(group)


# ---------------------------------------------------------------------------
# adapter snapshots
# ---------------------------------------------------------------------------

def get_adapter_params(model: TranslationModel) -> dict[str, np.ndarray]:
    """Copy of every adapter tensor, keyed by parameter path."""
    return {n: model.params[n].data.copy() for n in model.adapter_names()}


def set_adapter_params(model: TranslationModel, snapshot: dict[str, np.ndarray]) -> None:
    """Write a snapshot back into the model; backbone untouched. Exact layout
    match required."""
    expected = set(model.adapter_names())
    if set(snapshot) != expected:
        raise StateError("set_adapter_params: snapshot layout does not match the model")
    for name, value in snapshot.items():
        if value.shape != model.params[name].data.shape:
            raise StateError(f"set_adapter_params: shape mismatch for '{name}'")
        model.params[name].data = np.array(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# batching and loss
# ---------------------------------------------------------------------------

def make_batch(pairs: list[SentencePair], vocab: Vocab, dlp: DlpId,
               with_domain_tag: bool = False,
               extra_prefix_ids: tuple[int, ...] = ()) -> Batch:
    """Tokenize pairs into a padded teacher-forced batch.

    Source rows read [<dom:..>]? <lang:src> <lang:tgt> tokens... <eos>; an
    explicit extra_prefix_ids sequence is prepended before everything
    (testing hook). The source-language tag is required because content
    surface forms are shared across languages, so the text alone does not
    identify its language.
    """
    from .corpus import tokenize  # local import keeps module load order simple

    if not pairs:
        raise InputError("make_batch: empty pair list")
    prefix = list(extra_prefix_ids)
    if with_domain_tag:
        prefix.append(vocab.domain_tag(dlp.domain))
    prefix.append(vocab.lang_tag(dlp.src_lang))
    prefix.append(vocab.lang_tag(dlp.tgt_lang))
    src_rows = [prefix + tokenize(src, vocab) + [vocab.eos_id] for src, _ in pairs]
    tgt_rows = [tokenize(tgt, vocab) for _, tgt in pairs]
    ts = max(len(r) for r in src_rows)
    tt = max(len(r) for r in tgt_rows) + 1
    b = len(pairs)
    src = np.full((b, ts), vocab.pad_id, dtype=np.int64)
    src_mask = np.zeros((b, ts))
    dec_in = np.full((b, tt), vocab.pad_id, dtype=np.int64)
    gold = np.full((b, tt), vocab.pad_id, dtype=np.int64)
    gold_mask = np.zeros((b, tt))
    for r, (s_row, t_row) in enumerate(zip(src_rows, tgt_rows)):
        src[r, : len(s_row)] = s_row
        src_mask[r, : len(s_row)] = 1.0
        dec_in[r, 0] = vocab.bos_id
        dec_in[r, 1 : 1 + len(t_row)] = t_row
        gold[r, : len(t_row)] = t_row
        gold[r, len(t_row)] = vocab.eos_id
        gold_mask[r, : len(t_row) + 1] = 1.0
    return Batch(src=src, src_mask=src_mask, dec_in=dec_in, gold=gold, gold_mask=gold_mask, dlp=dlp)


def make_mixed_batch(rows: list[tuple[DlpId, SentencePair]], vocab: Vocab,
                     with_domain_tag: bool = False,
                     extra_prefix_ids: tuple[int, ...] = ()) -> Batch:
    """Batch whose rows may come from different DLPs; tags are per row."""
    from .corpus import tokenize

    if not rows:
        raise InputError("make_mixed_batch: empty row list")
    src_rows = []
    tgt_rows = []
    for dlp, (src, tgt) in rows:
        prefix = list(extra_prefix_ids)
        if with_domain_tag:
            prefix.append(vocab.domain_tag(dlp.domain))
        prefix.append(vocab.lang_tag(dlp.src_lang))
        prefix.append(vocab.lang_tag(dlp.tgt_lang))
        src_rows.append(prefix + tokenize(src, vocab) + [vocab.eos_id])
        tgt_rows.append(tokenize(tgt, vocab))
    ts = max(len(r) for r in src_rows)
    tt = max(len(r) for r in tgt_rows) + 1
    b = len(rows)
    src = np.full((b, ts), vocab.pad_id, dtype=np.int64)
    src_mask = np.zeros((b, ts))
    dec_in = np.full((b, tt), vocab.pad_id, dtype=np.int64)
    gold = np.full((b, tt), vocab.pad_id, dtype=np.int64)
    gold_mask = np.zeros((b, tt))
    for r, (s_row, t_row) in enumerate(zip(src_rows, tgt_rows)):
        src[r, : len(s_row)] = s_row
        src_mask[r, : len(s_row)] = 1.0
        dec_in[r, 0] = vocab.bos_id
        dec_in[r, 1 : 1 + len(t_row)] = t_row
        gold[r, : len(t_row)] = t_row
        gold[r, len(t_row)] = vocab.eos_id
        gold_mask[r, : len(t_row) + 1] = 1.0
    return Batch(src=src, src_mask=src_mask, dec_in=dec_in, gold=gold, gold_mask=gold_mask, dlp=None)


def forward_loss(model: TranslationModel, batch: Batch, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Mean token cross-entropy over non-padding gold positions."""
    logits = model.forward_logits(batch, train=train, rng=rng)
    return T.cross_entropy(logits, batch.gold, batch.gold_mask)


def greedy_decode(model: TranslationModel, vocab: Vocab, sources: list[str],
                  src_lang: str, tgt_lang: str, max_len: int,
                  domain: str | None = None) -> list[str]:
    """Deterministic argmax decoding until eos or max_len; returns detokenized
    hypothesis text (special tokens stripped)."""
    from .corpus import detokenize, tokenize

    if max_len < 1:
        raise InputError("greedy_decode: max_len must be >= 1")
    tags = [vocab.lang_tag(src_lang), vocab.lang_tag(tgt_lang)]  # InputError when unknown
    prefix = [vocab.domain_tag(domain)] if domain is not None else []
    src_rows = [prefix + tags + tokenize(s, vocab) + [vocab.eos_id] for s in sources]
    b = len(src_rows)
    ts = max(len(r) for r in src_rows)
    src = np.full((b, ts), vocab.pad_id, dtype=np.int64)
    src_mask = np.zeros((b, ts))
    for r, row in enumerate(src_rows):
        src[r, : len(row)] = row
        src_mask[r, : len(row)] = 1.0
    with T.no_grad():
        enc = model.encode(src, src_mask)
        out = np.full((b, 1), vocab.bos_id, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            dec_mask = np.ones_like(out, dtype=np.float64)
            logits = model.decode_logits(enc, src_mask, out, dec_mask)
            nxt = logits.data[:, -1, :].argmax(axis=-1).astype(np.int64)
            nxt[done] = vocab.pad_id
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= nxt == vocab.eos_id
            if done.all():
                break
    hyps = []
    for r in range(b):
        ids = []
        for tok in out[r, 1:]:
            if tok == vocab.eos_id or tok == vocab.pad_id:
                break
            ids.append(int(tok))
        hyps.append(detokenize(ids, vocab))
    return hyps
