"""Decoder tests: triggers, parallel decode, argmax generation, AR baseline."""

import numpy as np
import pytest

from bundlegen import autodiff as ad
from bundlegen import decoder as dec
from bundlegen.config import TrainConfig
from bundlegen.decoder import (
    PositionDistributions,
    TriggerLayout,
    build_triggers,
    decode_ar_baseline,
    decode_nar,
    expand_order,
    generate,
)
from bundlegen.model import build_model
from bundlegen.types import (
    TYPE_ITEM,
    TYPE_SLOGAN,
    TYPE_TEMPLATE,
    BundleCreative,
    CandidateContext,
    DataError,
)


def tiny_cfg(**overrides):
    base = dict(
        n_layers=2, d=16, n_heads=2, K=4, I=3, S=2,
        n_users=6, n_items=12, n_slogans=5, n_templates=4, seed=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


def make_ctx(cfg, user=1, history=(2, 7, 4, 9)):
    return CandidateContext(
        user=user,
        history=history,
        candidate_slogans=tuple(range(1, cfg.n_slogans + 1)),
        candidate_templates=tuple(range(1, cfg.n_templates + 1)),
    )


class TestTriggerLayout:
    def test_slot_plan(self):
        layout = TriggerLayout.for_creative(3, 2)
        assert layout.B == 6
        assert layout.slot_type == (TYPE_ITEM,) * 3 + (TYPE_SLOGAN,) * 2 + (TYPE_TEMPLATE,)
        assert layout.slot_rank == (0, 1, 2, 0, 1, 0)


class TestBuildTriggers:
    def test_direct_construction(self):
        cfg = tiny_cfg(I=1, S=1)
        model = build_model(cfg)
        layout = TriggerLayout.for_creative(1, 1)
        trig = build_triggers(layout, model.encoder.type_emb, model.decoder).data
        e = model.encoder.type_emb.data
        np.testing.assert_array_equal(trig[0], model.decoder.pos_item.data[0] + e[TYPE_ITEM])
        np.testing.assert_array_equal(trig[1], model.decoder.pos_slogan.data[0] + e[TYPE_SLOGAN])
        np.testing.assert_array_equal(trig[2], model.decoder.pos_template.data[0] + e[TYPE_TEMPLATE])

    def test_zero_positions_collapse_item_slots(self):
        model = build_model(tiny_cfg())
        model.decoder.pos_item.data[:] = 0.0
        trig = build_triggers(model.layout, model.encoder.type_emb, model.decoder).data
        np.testing.assert_array_equal(trig[0], trig[1])
        np.testing.assert_array_equal(trig[1], trig[2])

    def test_distinct_positions_give_distinct_triggers(self):
        model = build_model(tiny_cfg())
        trig = build_triggers(model.layout, model.encoder.type_emb, model.decoder).data
        for a in range(3):
            for b in range(a + 1, 3):
                assert not np.array_equal(trig[a], trig[b])


class TestDecodeNar:
    def test_shapes_and_normalization(self):
        cfg = tiny_cfg()
        model = build_model(cfg)
        dists = model.decode(model.encode(make_ctx(cfg)))
        assert dists.item_dists.data.shape == (cfg.I, cfg.n_items)
        assert dists.slogan_dists.data.shape == (cfg.S, cfg.n_slogans)
        assert dists.template_dist.data.shape == (1, cfg.n_templates)
        for t in (dists.item_dists, dists.slogan_dists, dists.template_dist):
            np.testing.assert_allclose(t.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_single_forward_pass(self):
        cfg = tiny_cfg()
        model = build_model(cfg)
        enc = model.encode(make_ctx(cfg))
        dec.reset_stack_calls()
        model.decode(enc)
        assert dec.stack_call_count() == 1

    def test_swapping_position_rows_swaps_distributions(self):
        cfg = tiny_cfg()
        ctx = make_ctx(cfg)
        model = build_model(cfg)
        base = model.decode(model.encode(ctx))
        model.decoder.pos_item.data[[0, 1]] = model.decoder.pos_item.data[[1, 0]]
        swapped = model.decode(model.encode(ctx))
        np.testing.assert_allclose(swapped.item_dists.data[0], base.item_dists.data[1], atol=1e-12)
        np.testing.assert_allclose(swapped.item_dists.data[1], base.item_dists.data[0], atol=1e-12)
        np.testing.assert_allclose(swapped.item_dists.data[2], base.item_dists.data[2], atol=1e-12)
        np.testing.assert_allclose(swapped.slogan_dists.data, base.slogan_dists.data, atol=1e-12)

    def test_relabeled_ranks_leave_generated_multiset_unchanged(self):
        # Permuting which slot carries which rank relabels slots; the set of
        # generated items is unchanged.
        cfg = tiny_cfg()
        ctx = make_ctx(cfg)
        model = build_model(cfg)
        base_items = generate(model.decode(model.encode(ctx))).items
        perm = [2, 0, 1]
        model.decoder.pos_item.data[:] = model.decoder.pos_item.data[perm]
        relabeled_items = generate(model.decode(model.encode(ctx))).items
        assert sorted(base_items) == sorted(relabeled_items)

    def test_batched_matches_single(self):
        cfg = tiny_cfg()
        model = build_model(cfg)
        ctxs = [make_ctx(cfg, user=u) for u in range(3)]
        batched = model.decode(model.encode_batch(ctxs))
        for n, ctx in enumerate(ctxs):
            single = model.decode(model.encode(ctx))
            np.testing.assert_allclose(batched.item_dists.data[n], single.item_dists.data, atol=1e-12)
            np.testing.assert_allclose(batched.template_dist.data[n], single.template_dist.data, atol=1e-12)


def manual_dists(item_rows, slogan_rows, template_row):
    return PositionDistributions(
        item_dists=ad.Tensor(np.array(item_rows, dtype=float)),
        slogan_dists=ad.Tensor(np.array(slogan_rows, dtype=float)),
        template_dist=ad.Tensor(np.array([template_row], dtype=float)),
    )


def one_hot(n, j):
    v = np.zeros(n)
    v[j] = 1.0
    return v


class TestGenerate:
    def test_one_hot_recovers_ids(self):
        dists = manual_dists(
            [one_hot(6, 4), one_hot(6, 0), one_hot(6, 2)],
            [one_hot(4, 3), one_hot(4, 1)],
            one_hot(3, 2),
        )
        creative = generate(dists)
        assert creative.items == (5, 1, 3)
        assert creative.slogans == (4, 2)
        assert creative.template == 3

    def test_uniform_ties_break_to_lowest_index(self):
        dists = manual_dists(
            [np.full(6, 1 / 6)] * 3, [np.full(4, 1 / 4)] * 2, np.full(3, 1 / 3)
        )
        creative = generate(dists)
        assert creative.items == (1, 1, 1)
        assert creative.slogans == (1, 1)
        assert creative.template == 1

    def test_identical_rows_give_identical_items(self):
        row = np.array([0.1, 0.6, 0.1, 0.1, 0.05, 0.05])
        creative = generate(manual_dists([row, row, row], [one_hot(4, 0)] * 2, one_hot(3, 0)))
        assert creative.items == (2, 2, 2)


class TestARBaseline:
    def test_step_count_is_b(self):
        cfg = tiny_cfg(decoder_mode="ar")
        model = build_model(cfg)
        enc = model.encode(make_ctx(cfg))
        dec.reset_stack_calls()
        creative, steps = decode_ar_baseline(enc, model.ar_decoder, model.layout, cfg.ar_order)
        assert steps == cfg.B == 6
        assert dec.stack_call_count() == 6
        assert len(creative.items) == cfg.I and len(creative.slogans) == cfg.S

    def test_nar_vs_ar_pass_ratio(self):
        cfg = tiny_cfg()
        nar = build_model(cfg)
        ar = build_model(cfg.replace(decoder_mode="ar"))
        ctx = make_ctx(cfg)
        dec.reset_stack_calls()
        nar.decode(nar.encode(ctx))
        nar_calls = dec.stack_call_count()
        dec.reset_stack_calls()
        decode_ar_baseline(ar.encode(ctx), ar.ar_decoder, ar.layout, cfg.ar_order)
        ar_calls = dec.stack_call_count()
        assert (nar_calls, ar_calls) == (1, cfg.B)

    def test_expand_order(self):
        layout = TriggerLayout.for_creative(2, 2)
        schedule = expand_order(("template", "items", "slogans"), layout)
        assert schedule == [(TYPE_TEMPLATE, 0), (TYPE_ITEM, 0), (TYPE_ITEM, 1),
                            (TYPE_SLOGAN, 0), (TYPE_SLOGAN, 1)]
        with pytest.raises(DataError):
            expand_order(("items", "items", "template"), layout)

    def test_orderings_run_and_type_slots_filled(self):
        cfg = tiny_cfg(decoder_mode="ar")
        model = build_model(cfg)
        enc = model.encode(make_ctx(cfg))
        for order in (("items", "slogans", "template"), ("template", "slogans", "items")):
            creative, steps = decode_ar_baseline(enc, model.ar_decoder, model.layout, order)
            assert steps == 6
            assert all(1 <= i <= cfg.n_items for i in creative.items)
            assert all(1 <= s <= cfg.n_slogans for s in creative.slogans)
            assert 1 <= creative.template <= cfg.n_templates

    def test_teacher_forced_nll_finite_and_differentiable(self):
        cfg = tiny_cfg(decoder_mode="ar")
        model = build_model(cfg)
        ctxs = [make_ctx(cfg, user=u) for u in range(2)]
        golds = [
            BundleCreative(items=(1, 2, 3), slogans=(1, 2), template=1),
            BundleCreative(items=(4, 5, 6), slogans=(3, 4), template=2),
        ]
        enc = model.encode_batch(ctxs)
        nll = dec.ar_training_nll(enc, model.ar_decoder, model.layout, cfg.ar_order, golds)
        assert nll.data.shape == (2,)
        assert np.isfinite(nll.data).all()
        ad.tensor_sum(nll).backward()
        assert model.ar_decoder.start_emb.grad is not None
