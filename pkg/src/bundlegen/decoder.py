"""Decoders: single-pass parallel slot decoding, and an autoregressive baseline.

The parallel decoder turns B = I + S + 1 trigger embeddings (type embedding +
type-specific positional embedding) into B per-slot distributions in one
forward pass: self-attention without a causal mask, cross-attention to the
encoder output, and a type-specific output projection per slot. The
autoregressive baseline decodes the same slots one object at a time with
causal masking, one full decoder pass per slot, restricted at each step to
the scheduled type's vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import TYPE_GROUPS, TrainConfig
from .encoder import NEG_INF, EncoderOutput, EncoderParams
from .types import (
    TYPE_ITEM,
    TYPE_SLOGAN,
    TYPE_TEMPLATE,
    BundleCreative,
    DataError,
    VocabularyError,
)

# Forward passes through a decoder layer stack, for latency instrumentation.
_stack_calls = 0


def stack_call_count() -> int:
    return _stack_calls


def reset_stack_calls() -> None:
    global _stack_calls
    _stack_calls = 0


@dataclass(frozen=True)
class TriggerLayout:
    """Slot plan: which object type and within-type rank each slot produces."""

    B: int
    slot_type: tuple[int, ...]
    slot_rank: tuple[int, ...]

    @classmethod
    def for_creative(cls, I: int, S: int) -> "TriggerLayout":
        slot_type = (TYPE_ITEM,) * I + (TYPE_SLOGAN,) * S + (TYPE_TEMPLATE,)
        slot_rank = tuple(range(I)) + tuple(range(S)) + (0,)
        return cls(B=I + S + 1, slot_type=slot_type, slot_rank=slot_rank)

    @property
    def n_items(self) -> int:
        return sum(1 for t in self.slot_type if t == TYPE_ITEM)

    @property
    def n_slogans(self) -> int:
        return sum(1 for t in self.slot_type if t == TYPE_SLOGAN)


@dataclass
class DecoderBlock:
    """Pre-LN block: self-attention, encoder-decoder cross-attention, FFN."""

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
    cq: Tensor
    cbq: Tensor
    ck: Tensor
    cv: Tensor
    cbv: Tensor
    co: Tensor
    cbo: Tensor
    ln3_gain: Tensor
    ln3_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


def _init_decoder_block(store: ParamStore, prefix: str, d: int, ffn_mult: int) -> DecoderBlock:
    hidden = ffn_mult * d
    u = lambda name, shape: store.uniform(f"{prefix}.{name}", shape, fan=d)
    z = lambda name, shape: store.constant(f"{prefix}.{name}", shape, 0.0)
    one = lambda name: store.constant(f"{prefix}.{name}", (d,), 1.0)
    return DecoderBlock(
        ln1_gain=one("ln1.gain"), ln1_bias=z("ln1.bias", (d,)),
        wq=u("wq", (d, d)), bq=z("bq", (d,)),
        wk=u("wk", (d, d)),
        wv=u("wv", (d, d)), bv=z("bv", (d,)),
        wo=u("wo", (d, d)), bo=z("bo", (d,)),
        ln2_gain=one("ln2.gain"), ln2_bias=z("ln2.bias", (d,)),
        cq=u("cq", (d, d)), cbq=z("cbq", (d,)),
        ck=u("ck", (d, d)),
        cv=u("cv", (d, d)), cbv=z("cbv", (d,)),
        co=u("co", (d, d)), cbo=z("cbo", (d,)),
        ln3_gain=one("ln3.gain"), ln3_bias=z("ln3.bias", (d,)),
        ffn_w1=u("ffn.w1", (d, hidden)), ffn_b1=z("ffn.b1", (hidden,)),
        ffn_w2=u("ffn.w2", (hidden, d)), ffn_b2=z("ffn.b2", (d,)),
    )


@dataclass
class OutputHead:
    w: Tensor | None   # (d, vocab); None when tied to a content table
    b: Tensor          # (vocab,)
    tied_table: Tensor | None = None

    def logits(self, h: Tensor) -> Tensor:
        if self.tied_table is not None:
            # Skip the pad row; project onto real objects only.
            proj = ad.transpose(ad.narrow(self.tied_table, 0, 1, self.tied_table.data.shape[0]))
            return ad.add(ad.matmul(h, proj), self.b)
        return ad.linear(h, self.w, self.b)


@dataclass
class DecoderParams:
    d: int
    n_heads: int
    ln_eps: float
    pos_item: Tensor       # (I, d)
    pos_slogan: Tensor     # (S, d)
    pos_template: Tensor   # (1, d)
    layers: list[DecoderBlock]
    head_item: OutputHead
    head_slogan: OutputHead
    head_template: OutputHead


def _make_head(
    store: ParamStore, name: str, d: int, vocab: int, tied_table: Tensor | None
) -> OutputHead:
    b = store.constant(f"{name}.b", (vocab,), 0.0)
    if tied_table is not None:
        return OutputHead(w=None, b=b, tied_table=tied_table)
    return OutputHead(w=store.uniform(f"{name}.w", (d, vocab), fan=d), b=b)


def init_decoder_params(
    store: ParamStore, cfg: TrainConfig, enc: EncoderParams, prefix: str = "dec"
) -> DecoderParams:
    d = cfg.d
    tied = cfg.tie_output
    return DecoderParams(
        d=d,
        n_heads=cfg.n_heads,
        ln_eps=cfg.ln_eps,
        pos_item=store.uniform(f"{prefix}.pos_item", (cfg.I, d), fan=d),
        pos_slogan=store.uniform(f"{prefix}.pos_slogan", (cfg.S, d), fan=d),
        pos_template=store.uniform(f"{prefix}.pos_template", (1, d), fan=d),
        layers=[
            _init_decoder_block(store, f"{prefix}.l{i}", d, cfg.ffn_mult)
            for i in range(cfg.n_layers)
        ],
        head_item=_make_head(
            store, f"{prefix}.out_item", d, cfg.n_items, enc.item_emb if tied else None
        ),
        head_slogan=_make_head(
            store, f"{prefix}.out_slogan", d, cfg.n_slogans, enc.slogan_emb if tied else None
        ),
        head_template=_make_head(
            store, f"{prefix}.out_template", d, cfg.n_templates, enc.template_emb if tied else None
        ),
    )


@dataclass
class PositionDistributions:
    """Per-slot probability vectors over each slot's type-restricted vocabulary."""

    item_dists: Tensor      # (..., I, n_items)
    slogan_dists: Tensor    # (..., S, n_slogans)
    template_dist: Tensor   # (..., 1, n_templates)

    @property
    def batched(self) -> bool:
        return self.item_dists.data.ndim == 3

    def record(self, n: int) -> "PositionDistributions":
        """Differentiable view of one record from a batched decode."""
        return PositionDistributions(
            item_dists=ad.index_first(self.item_dists, n),
            slogan_dists=ad.index_first(self.slogan_dists, n),
            template_dist=ad.index_first(self.template_dist, n),
        )


def build_triggers(layout: TriggerLayout, type_emb: Tensor, params: DecoderParams) -> Tensor:
    """Trigger matrix (B, d): column j = type embedding + positional column for its rank."""
    pos_by_type = {
        TYPE_ITEM: params.pos_item,
        TYPE_SLOGAN: params.pos_slogan,
        TYPE_TEMPLATE: params.pos_template,
    }
    parts = []
    j = 0
    while j < layout.B:
        typ = layout.slot_type[j]
        ranks = []
        while j < layout.B and layout.slot_type[j] == typ:
            ranks.append(layout.slot_rank[j])
            j += 1
        pos = pos_by_type[typ]
        if max(ranks) >= pos.data.shape[0]:
            raise ad.ShapeError(
                f"slot rank {max(ranks)} exceeds positional matrix of size {pos.data.shape[0]}"
            )
        rows = ad.embedding(pos, np.array(ranks))
        parts.append(ad.add(rows, ad.embedding(type_emb, np.array([typ]))))
    return ad.concat(parts, axis=-2)


def _cross_mask(key_ok: np.ndarray) -> np.ndarray | None:
    if key_ok.all():
        return None
    return np.where(key_ok, 0.0, NEG_INF)[..., None, None, :]


def _run_stack(
    x: Tensor,
    enc_h: Tensor,
    layers: list[DecoderBlock],
    n_heads: int,
    ln_eps: float,
    self_mask: np.ndarray | None,
    cross_mask: np.ndarray | None,
) -> Tensor:
    global _stack_calls
    _stack_calls += 1
    for blk in layers:
        a = ad.layer_norm(x, blk.ln1_gain, blk.ln1_bias, ln_eps)
        attn = ad.multi_head_attention(
            ad.linear(a, blk.wq, blk.bq),
            ad.linear(a, blk.wk),  # key bias omitted: null under softmax shift
            ad.linear(a, blk.wv, blk.bv),
            n_heads,
            self_mask,
        )
        x = ad.add(x, ad.linear(attn, blk.wo, blk.bo))
        c = ad.layer_norm(x, blk.ln2_gain, blk.ln2_bias, ln_eps)
        cross = ad.multi_head_attention(
            ad.linear(c, blk.cq, blk.cbq),
            ad.linear(enc_h, blk.ck),
            ad.linear(enc_h, blk.cv, blk.cbv),
            n_heads,
            cross_mask,
        )
        x = ad.add(x, ad.linear(cross, blk.co, blk.cbo))
        f = ad.layer_norm(x, blk.ln3_gain, blk.ln3_bias, ln_eps)
        x = ad.add(x, ad.feed_forward(f, blk.ffn_w1, blk.ffn_b1, blk.ffn_w2, blk.ffn_b2))
    return x


def decode_nar(
    enc: EncoderOutput, params: DecoderParams, layout: TriggerLayout, type_emb: Tensor
) -> PositionDistributions:
    """All B slot distributions from one decoder pass (no causal mask).

    Accepts a single encoding (M, d) or a batch (N, M, d); output shapes gain
    the same leading axis.
    """
    triggers = build_triggers(layout, type_emb, params)
    if enc.h.data.ndim == 3:
        n = enc.h.data.shape[0]
        triggers = ad.broadcast_to(triggers, (n,) + triggers.data.shape)
    x = _run_stack(
        triggers, enc.h, params.layers, params.n_heads, params.ln_eps,
        None, _cross_mask(enc.key_ok),
    )
    i, s = layout.n_items, layout.n_slogans
    h_items = ad.narrow(x, -2, 0, i)
    h_slogans = ad.narrow(x, -2, i, i + s)
    h_template = ad.narrow(x, -2, i + s, layout.B)
    return PositionDistributions(
        item_dists=ad.softmax(params.head_item.logits(h_items)),
        slogan_dists=ad.softmax(params.head_slogan.logits(h_slogans)),
        template_dist=ad.softmax(params.head_template.logits(h_template)),
    )


def generate(dists: PositionDistributions) -> BundleCreative:
    """Per-slot argmax (ties -> lowest index); repeats across slots are allowed."""
    if dists.batched:
        raise ad.ShapeError("generate expects single-record distributions")
    items = np.argmax(dists.item_dists.data, axis=-1) + 1
    slogans = np.argmax(dists.slogan_dists.data, axis=-1) + 1
    template = int(np.argmax(dists.template_dist.data, axis=-1)[0]) + 1
    return BundleCreative(items=tuple(items.tolist()), slogans=tuple(slogans.tolist()), template=template)


# -- autoregressive baseline ---------------------------------------------------


@dataclass
class ARDecoderParams:
    """Baseline decoder: learned start token and absolute positions, causal stack."""

    d: int
    n_heads: int
    ln_eps: float
    start_emb: Tensor      # (1, d)
    pos_emb: Tensor        # (B, d) absolute positions over decoding steps
    layers: list[DecoderBlock]
    head_item: OutputHead
    head_slogan: OutputHead
    head_template: OutputHead
    # Content/type embeddings shared with the encoder (same parameter budget).
    item_emb: Tensor
    slogan_emb: Tensor
    template_emb: Tensor
    type_emb: Tensor

    def head(self, typ: int) -> OutputHead:
        return {
            TYPE_ITEM: self.head_item,
            TYPE_SLOGAN: self.head_slogan,
            TYPE_TEMPLATE: self.head_template,
        }[typ]

    def content_table(self, typ: int) -> Tensor:
        return {
            TYPE_ITEM: self.item_emb,
            TYPE_SLOGAN: self.slogan_emb,
            TYPE_TEMPLATE: self.template_emb,
        }[typ]


def init_ar_decoder_params(
    store: ParamStore, cfg: TrainConfig, enc: EncoderParams, prefix: str = "ardec"
) -> ARDecoderParams:
    d = cfg.d
    return ARDecoderParams(
        d=d,
        n_heads=cfg.n_heads,
        ln_eps=cfg.ln_eps,
        start_emb=store.uniform(f"{prefix}.start_emb", (1, d), fan=d),
        pos_emb=store.uniform(f"{prefix}.pos_emb", (cfg.B, d), fan=d),
        layers=[
            _init_decoder_block(store, f"{prefix}.l{i}", d, cfg.ffn_mult)
            for i in range(cfg.n_layers)
        ],
        head_item=_make_head(store, f"{prefix}.out_item", d, cfg.n_items, None),
        head_slogan=_make_head(store, f"{prefix}.out_slogan", d, cfg.n_slogans, None),
        head_template=_make_head(store, f"{prefix}.out_template", d, cfg.n_templates, None),
        item_emb=enc.item_emb,
        slogan_emb=enc.slogan_emb,
        template_emb=enc.template_emb,
        type_emb=enc.type_emb,
    )


_GROUP_TO_TYPE = {"items": TYPE_ITEM, "slogans": TYPE_SLOGAN, "template": TYPE_TEMPLATE}


def expand_order(order: Sequence[str], layout: TriggerLayout) -> list[tuple[int, int]]:
    """Expand a type-group ordering into a per-step (type, rank) schedule."""
    if sorted(order) != sorted(TYPE_GROUPS):
        raise DataError(f"order must be a permutation of {TYPE_GROUPS}, got {tuple(order)}")
    counts = {
        TYPE_ITEM: layout.n_items,
        TYPE_SLOGAN: layout.n_slogans,
        TYPE_TEMPLATE: 1,
    }
    schedule = []
    for group in order:
        typ = _GROUP_TO_TYPE[group]
        schedule.extend((typ, rank) for rank in range(counts[typ]))
    return schedule


def _causal_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = NEG_INF
    return mask


def _ar_run(x: Tensor, enc: EncoderOutput, params: ARDecoderParams) -> Tensor:
    steps = x.data.shape[-2]
    return _run_stack(
        x, enc.h, params.layers, params.n_heads, params.ln_eps,
        _causal_mask(steps), _cross_mask(enc.key_ok),
    )


def decode_ar_baseline(
    enc: EncoderOutput,
    params: ARDecoderParams,
    layout: TriggerLayout,
    order: Sequence[str],
) -> tuple[BundleCreative, int]:
    """Greedy sequential decode: one full decoder pass per slot, B in total.

    At step t only the scheduled type's vocabulary is reachable (the other
    types' heads are never consulted, which masks their vocabularies). The
    generated object's content + type embedding feeds the next step.
    """
    if enc.h.data.ndim != 2:
        raise ad.ShapeError("decode_ar_baseline expects a single-record encoding")
    schedule = expand_order(order, layout)
    produced: dict[int, list[int]] = {TYPE_ITEM: [], TYPE_SLOGAN: [], TYPE_TEMPLATE: []}
    steps = 0
    with ad.no_grad():
        rows = [params.start_emb]
        for t, (typ, _rank) in enumerate(schedule):
            x = ad.add(
                ad.concat(rows, axis=0) if len(rows) > 1 else rows[0],
                ad.narrow(params.pos_emb, 0, 0, t + 1),
            )
            h = _ar_run(x, enc, params)
            steps += 1
            h_last = ad.narrow(h, -2, t, t + 1)
            probs = ad.softmax(params.head(typ).logits(h_last))
            obj = int(np.argmax(probs.data[0])) + 1
            produced[typ].append(obj)
            content = ad.embedding(params.content_table(typ), np.array([obj]))
            rows.append(ad.add(content, ad.embedding(params.type_emb, np.array([typ]))))
    creative = BundleCreative(
        items=tuple(produced[TYPE_ITEM]),
        slogans=tuple(produced[TYPE_SLOGAN]),
        template=produced[TYPE_TEMPLATE][0],
    )
    return creative, steps


def ar_training_nll(
    enc: EncoderOutput,
    params: ARDecoderParams,
    layout: TriggerLayout,
    order: Sequence[str],
    golds: list[BundleCreative],
) -> Tensor:
    """Teacher-forced ordered cross-entropy per record, shape (N,).

    The encoder output must be batched with N = len(golds).
    """
    if enc.h.data.ndim != 3 or enc.h.data.shape[0] != len(golds):
        raise ad.ShapeError("ar_training_nll expects a batched encoding matching golds")
    n = len(golds)
    schedule = expand_order(order, layout)
    b = layout.B

    def gold_id(creative: BundleCreative, typ: int, rank: int) -> int:
        if typ == TYPE_ITEM:
            return creative.items[rank]
        if typ == TYPE_SLOGAN:
            return creative.slogans[rank]
        return creative.template

    target_ids = np.array(
        [[gold_id(g, typ, rank) for typ, rank in schedule] for g in golds]
    )
    if target_ids.min() < 1:
        raise VocabularyError("gold creative contains a pad/null object id")
    # Input rows: start token, then embeddings of the previous gold objects.
    rows = [ad.broadcast_to(params.start_emb, (n, 1, params.d))]
    for t in range(b - 1):
        typ, _ = schedule[t]
        content = ad.embedding(params.content_table(typ), target_ids[:, t : t + 1])
        rows.append(ad.add(content, ad.embedding(params.type_emb, np.array([typ]))))
    x = ad.add(ad.concat(rows, axis=-2), params.pos_emb)
    h = _ar_run(x, enc, params)
    nll = None
    start = 0
    while start < b:
        typ = schedule[start][0]
        stop = start
        while stop < b and schedule[stop][0] == typ:
            stop += 1
        h_group = ad.narrow(h, -2, start, stop)
        probs = ad.softmax(params.head(typ).logits(h_group))
        part = ad.select_nll(probs, target_ids[:, start:stop] - 1)
        nll = part if nll is None else ad.add(nll, part)
        start = stop
    return nll
