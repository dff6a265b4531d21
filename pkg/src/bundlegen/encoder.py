"""Type-aware encoder over mixed-type candidates.

The input sequence is (user; K history items; candidate slogans; candidate
templates). Each object is embedded as content embedding + type embedding —
no positional term — so the encoder is permutation-equivariant over
same-type candidates. L Pre-LN self-attention blocks (layer norm before
multi-head attention and before the feed-forward) produce one contextual
vector per object. Padded history slots (id 0) are masked out of attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import TrainConfig
from .types import (
    PAD_ID,
    TYPE_ITEM,
    TYPE_SLOGAN,
    TYPE_TEMPLATE,
    TYPE_USER,
    CandidateContext,
    DataError,
    VocabularyError,
)

NEG_INF = float("-inf")


@dataclass
class SelfAttentionBlock:
    """One Pre-LN block: LN -> multi-head self-attention -> residual; LN -> FFN -> residual."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


def init_self_attention_block(store: ParamStore, prefix: str, d: int, ffn_mult: int) -> SelfAttentionBlock:
    hidden = ffn_mult * d
    return SelfAttentionBlock(
        ln1_gain=store.constant(f"{prefix}.ln1.gain", (d,), 1.0),
        ln1_bias=store.constant(f"{prefix}.ln1.bias", (d,), 0.0),
        wq=store.uniform(f"{prefix}.wq", (d, d), fan=d),
        bq=store.constant(f"{prefix}.bq", (d,), 0.0),
        wk=store.uniform(f"{prefix}.wk", (d, d), fan=d),
        wv=store.uniform(f"{prefix}.wv", (d, d), fan=d),
        bv=store.constant(f"{prefix}.bv", (d,), 0.0),
        wo=store.uniform(f"{prefix}.wo", (d, d), fan=d),
        bo=store.constant(f"{prefix}.bo", (d,), 0.0),
        ln2_gain=store.constant(f"{prefix}.ln2.gain", (d,), 1.0),
        ln2_bias=store.constant(f"{prefix}.ln2.bias", (d,), 0.0),
        ffn_w1=store.uniform(f"{prefix}.ffn.w1", (d, hidden), fan=d),
        ffn_b1=store.constant(f"{prefix}.ffn.b1", (hidden,), 0.0),
        ffn_w2=store.uniform(f"{prefix}.ffn.w2", (hidden, d), fan=d),
        ffn_b2=store.constant(f"{prefix}.ffn.b2", (d,), 0.0),
    )


def apply_self_attention_block(
    x: Tensor,
    blk: SelfAttentionBlock,
    n_heads: int,
    ln_eps: float,
    mask: np.ndarray | None,
) -> Tensor:
    a = ad.layer_norm(x, blk.ln1_gain, blk.ln1_bias, ln_eps)
    q = ad.linear(a, blk.wq, blk.bq)
    # No key bias: softmax shift-invariance makes it a null direction.
    k = ad.linear(a, blk.wk)
    v = ad.linear(a, blk.wv, blk.bv)
    attn = ad.multi_head_attention(q, k, v, n_heads, mask)
    x = ad.add(x, ad.linear(attn, blk.wo, blk.bo))
    f = ad.layer_norm(x, blk.ln2_gain, blk.ln2_bias, ln_eps)
    return ad.add(x, ad.feed_forward(f, blk.ffn_w1, blk.ffn_b1, blk.ffn_w2, blk.ffn_b2))


@dataclass
class EncoderParams:
    """Content embeddings, the 4-row type embedding, and L self-attention blocks."""

    d: int
    n_heads: int
    K: int
    ln_eps: float
    user_emb: Tensor       # (n_users, d)
    item_emb: Tensor       # (n_items + 1, d), row 0 = pad
    slogan_emb: Tensor     # (n_slogans + 1, d), row 0 = pad
    template_emb: Tensor   # (n_templates + 1, d), row 0 = pad
    type_emb: Tensor       # (4, d): user / item / slogan / template
    layers: list[SelfAttentionBlock]

    @property
    def n_users(self) -> int:
        return self.user_emb.data.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.data.shape[0] - 1

    @property
    def n_slogans(self) -> int:
        return self.slogan_emb.data.shape[0] - 1

    @property
    def n_templates(self) -> int:
        return self.template_emb.data.shape[0] - 1


def init_encoder_params(store: ParamStore, cfg: TrainConfig, prefix: str = "enc") -> EncoderParams:
    d = cfg.d
    return EncoderParams(
        d=d,
        n_heads=cfg.n_heads,
        K=cfg.K,
        ln_eps=cfg.ln_eps,
        user_emb=store.uniform(f"{prefix}.user_emb", (cfg.n_users, d), fan=d),
        item_emb=store.uniform(f"{prefix}.item_emb", (cfg.n_items + 1, d), fan=d),
        slogan_emb=store.uniform(f"{prefix}.slogan_emb", (cfg.n_slogans + 1, d), fan=d),
        template_emb=store.uniform(f"{prefix}.template_emb", (cfg.n_templates + 1, d), fan=d),
        type_emb=store.uniform(f"{prefix}.type_emb", (4, d), fan=d),
        layers=[
            init_self_attention_block(store, f"{prefix}.l{i}", d, cfg.ffn_mult)
            for i in range(cfg.n_layers)
        ],
    )


@dataclass(frozen=True)
class Segments:
    """Which encoder columns hold which object type."""

    user: slice
    history: slice
    slogans: slice
    templates: slice


@dataclass
class EncoderOutput:
    h: Tensor                 # (..., M, d)
    segments: Segments
    key_ok: np.ndarray        # bool (..., M); False = padded slot, masked as key

    @property
    def m(self) -> int:
        return self.h.data.shape[-2]


def _check_ids(name: str, ids: np.ndarray, limit: int, allow_pad: bool) -> None:
    lo = 0 if allow_pad else 1
    if ids.size and (ids.min() < lo or ids.max() > limit):
        raise VocabularyError(f"{name} id out of range [{lo}, {limit}]")


def _gather_batched(ctxs: list[CandidateContext], params: EncoderParams):
    k = params.K
    n_s = len(ctxs[0].candidate_slogans)
    n_t = len(ctxs[0].candidate_templates)
    for ctx in ctxs:
        if len(ctx.history) != k:
            raise DataError(f"history length {len(ctx.history)} != configured K={k}")
        if len(ctx.candidate_slogans) != n_s or len(ctx.candidate_templates) != n_t:
            raise DataError("candidate set sizes differ across batch")
    users = np.array([[c.user] for c in ctxs])
    hist = np.array([c.history for c in ctxs])
    slogans = np.array([c.candidate_slogans for c in ctxs])
    templates = np.array([c.candidate_templates for c in ctxs])
    _check_ids("user", users, params.n_users - 1, allow_pad=True)
    _check_ids("item", hist, params.n_items, allow_pad=True)
    _check_ids("slogan", slogans, params.n_slogans, allow_pad=False)
    _check_ids("template", templates, params.n_templates, allow_pad=False)
    return users, hist, slogans, templates


def _type_row(params: EncoderParams, type_index: int) -> Tensor:
    return ad.embedding(params.type_emb, np.array([type_index]))


def _embed(users, hist, slogans, templates, params: EncoderParams) -> Tensor:
    cols = [
        ad.add(ad.embedding(params.user_emb, users), _type_row(params, TYPE_USER)),
        ad.add(ad.embedding(params.item_emb, hist), _type_row(params, TYPE_ITEM)),
        ad.add(ad.embedding(params.slogan_emb, slogans), _type_row(params, TYPE_SLOGAN)),
        ad.add(ad.embedding(params.template_emb, templates), _type_row(params, TYPE_TEMPLATE)),
    ]
    return ad.concat(cols, axis=-2)


def _segments(k: int, n_s: int, n_t: int) -> Segments:
    return Segments(
        user=slice(0, 1),
        history=slice(1, 1 + k),
        slogans=slice(1 + k, 1 + k + n_s),
        templates=slice(1 + k + n_s, 1 + k + n_s + n_t),
    )


def embed_input(ctx: CandidateContext, params: EncoderParams) -> Tensor:
    """Content embedding + type embedding per object; shape (M, d), M = 1+K+|Os|+|Ot|."""
    users, hist, slogans, templates = _gather_batched([ctx], params)
    return ad.index_first(_embed(users, hist, slogans, templates, params), 0)


def _run_layers(x: Tensor, key_ok: np.ndarray, params: EncoderParams) -> Tensor:
    if key_ok.all():
        mask = None
    else:
        # Additive key mask, broadcast over heads and queries.
        mask = np.where(key_ok, 0.0, NEG_INF)[..., None, None, :]
    for blk in params.layers:
        x = apply_self_attention_block(x, blk, params.n_heads, params.ln_eps, mask)
    return x


def encode_batch(ctxs: list[CandidateContext], params: EncoderParams) -> EncoderOutput:
    """Encode several contexts with identical candidate-set sizes; h is (N, M, d)."""
    if not ctxs:
        raise DataError("encode_batch requires at least one context")
    users, hist, slogans, templates = _gather_batched(ctxs, params)
    x = _embed(users, hist, slogans, templates, params)
    n, m = x.data.shape[0], x.data.shape[1]
    key_ok = np.ones((n, m), dtype=bool)
    seg = _segments(params.K, slogans.shape[1], templates.shape[1])
    key_ok[:, seg.history] = hist != PAD_ID
    return EncoderOutput(h=_run_layers(x, key_ok, params), segments=seg, key_ok=key_ok)


def encode(ctx: CandidateContext, params: EncoderParams) -> EncoderOutput:
    """Encode one context; h is (M, d). With zero layers this equals embed_input."""
    batched = encode_batch([ctx], params)
    return EncoderOutput(
        h=ad.index_first(batched.h, 0),
        segments=batched.segments,
        key_ok=batched.key_ok[0],
    )
