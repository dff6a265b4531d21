"""Kernel-level tests: hand-evaluated cases, finite-difference checks, purity."""

import math

import numpy as np
import pytest

from bundlegen import autodiff as ad
from bundlegen.autodiff import (
    NumericDomainError,
    ParamStore,
    ShapeError,
    Tensor,
    grad_check,
    no_grad,
)


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = rng.normal(size=7) * 10
            c = rng.normal() * 5
            a = ad.softmax(Tensor(v)).data
            b = ad.softmax(Tensor(v + c)).data
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_two_logit_closed_form(self):
        # softmax([1, 2]) evaluated from the definition directly.
        e = math.exp(1.0)
        expected = [1.0 / (1.0 + e), e / (1.0 + e)]
        out = ad.softmax(Tensor([1.0, 2.0]))
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_sums_to_one_large_magnitude(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = rng.uniform(-50, 50, size=rng.integers(1, 40))
            p = ad.softmax(Tensor(v)).data
            assert abs(p.sum() - 1.0) < 1e-9
            assert (p > 0).all()

    def test_non_finite_rejected(self):
        with pytest.raises(NumericDomainError):
            ad.softmax(Tensor([1.0, np.inf]))
        with pytest.raises(NumericDomainError):
            ad.softmax(Tensor([np.nan, 0.0]))


class TestLayerNorm:
    def test_constant_vector_zeroed(self):
        ones = np.ones(5)
        out = ad.layer_norm(Tensor(np.full(5, 3.7)), Tensor(ones), Tensor(np.zeros(5)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_hand_case(self):
        # (v - mean)/std for v=[1,-1]: mean 0, population std 1 -> identity.
        out = ad.layer_norm(
            Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12
        )
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-9)

    def test_gain_zero_returns_bias(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=6)
        bias = rng.normal(size=6)
        out = ad.layer_norm(Tensor(v), Tensor(np.zeros(6)), Tensor(bias))
        np.testing.assert_array_equal(out.data, bias)

    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            v = rng.normal(size=32)
            out = ad.layer_norm(Tensor(v), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
            assert abs(out.mean()) < 1e-7
            assert abs(out.var() - 1.0) < 1e-4

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ad.layer_norm(Tensor(np.zeros(4)), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class TestCrossEntropy:
    def test_one_hot_is_zero(self):
        dist = np.zeros(5)
        dist[2] = 1.0
        assert ad.cross_entropy(Tensor(dist), 2).item() == 0.0

    def test_uniform_is_log_n(self):
        for n in (2, 3, 10, 64):
            dist = np.full(n, 1.0 / n)
            assert abs(ad.cross_entropy(Tensor(dist), n - 1).item() - math.log(n)) < 1e-12

    def test_hand_value(self):
        expected = -math.log(0.75)
        assert abs(ad.cross_entropy(Tensor([0.25, 0.75]), 1).item() - expected) < 1e-15

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor([0.5, 0.5]), 2)
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor([0.5, 0.5]), -1)


def _finite_difference(loss_fn, params, h=1e-5):
    """Independent driver used to sanity-check grad_check's own arithmetic."""
    errs = []
    with no_grad():
        for _, t in params.items():
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn(params).data)
                flat[i] = orig - h
                fm = float(loss_fn(params).data)
                flat[i] = orig
                errs.append((fp - fm) / (2 * h))
    return np.array(errs)


class TestGradCheck:
    def test_sum_of_squares(self):
        params = ParamStore(seed=0)
        params.uniform("w", (7,), fan=7)

        def loss(p):
            w = p["w"]
            return ad.tensor_sum(ad.mul(w, w))

        assert grad_check(loss, params, h=1e-5) < 1e-6

    def test_constant_loss_zero_gradient(self):
        params = ParamStore(seed=0)
        params.uniform("w", (4,), fan=4)

        def loss(p):
            return Tensor(2.5)

        assert grad_check(loss, params) < 1e-8

    def test_matches_external_finite_differences(self):
        params = ParamStore(seed=5)
        w = params.uniform("w", (3, 3), fan=3)

        def loss(p):
            return ad.tensor_sum(ad.gelu(p["w"]))

        params.zero_grad()
        out = loss(params)
        out.backward()
        numeric = _finite_difference(loss, params)
        np.testing.assert_allclose(w.grad.reshape(-1), numeric, rtol=1e-6, atol=1e-9)

    def test_rejects_bad_step(self):
        params = ParamStore(seed=0)
        params.uniform("w", (2,), fan=2)
        with pytest.raises(ValueError):
            grad_check(lambda p: ad.tensor_sum(p["w"]), params, h=1e-2)

    def test_non_finite_loss_rejected(self):
        params = ParamStore(seed=0)
        params.uniform("w", (2,), fan=2)
        with pytest.raises(NumericDomainError):
            grad_check(lambda p: Tensor(np.nan), params)


def _scalar_loss(fn, proj_seed):
    """Wrap a kernel as a deterministic scalar loss via a fixed random projection."""
    cache = {}

    def loss(p):
        t = fn(p, None)
        w = cache.get(t.data.shape)
        if w is None:
            w = np.random.default_rng(proj_seed).normal(size=t.data.shape)
            cache[t.data.shape] = w
        return ad.tensor_sum(ad.mul(t, Tensor(w)))

    return loss


KERNEL_CASES = {
    "add": lambda p, rng: ad.add(p["a"], p["b"]),
    "add_broadcast": lambda p, rng: ad.add(p["a"], p["bias"]),
    "mul": lambda p, rng: ad.mul(p["a"], p["b"]),
    "matmul": lambda p, rng: ad.matmul(p["a"], p["w"]),
    "transpose": lambda p, rng: ad.matmul(p["a"], ad.transpose(p["a"])),
    "relu": lambda p, rng: ad.relu(p["a"]),
    "gelu": lambda p, rng: ad.gelu(p["a"]),
    "softmax": lambda p, rng: ad.softmax(p["a"]),
    "layer_norm": lambda p, rng: ad.layer_norm(p["a"], p["gain"], p["bias"]),
    "embedding": lambda p, rng: ad.embedding(p["table"], np.array([0, 2, 2, 1])),
    "concat": lambda p, rng: ad.concat([p["a"], p["b"]], axis=0),
    "narrow": lambda p, rng: ad.narrow(p["a"], 1, 1, 3),
    "index_first": lambda p, rng: ad.index_first(p["a"], 1),
    "broadcast": lambda p, rng: ad.broadcast_to(p["bias"], (3, 4)),
    "feed_forward": lambda p, rng: ad.feed_forward(p["a"], p["w1"], p["h1"], p["w2"], p["bias"]),
    "attention": lambda p, rng: ad.multi_head_attention(p["q"], p["k"], p["v"], n_heads=2),
}


@pytest.mark.parametrize("kernel", sorted(KERNEL_CASES))
def test_kernel_gradients_match_finite_differences(kernel):
    """Reverse-mode gradients of every kernel agree with central differences."""
    fn = KERNEL_CASES[kernel]
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = ParamStore(seed=seed)
        params.uniform("a", (3, 4), fan=4)
        params.uniform("b", (3, 4), fan=4)
        params.uniform("w", (4, 5), fan=4)
        params.uniform("w1", (4, 8), fan=4)
        params.uniform("h1", (8,), fan=4)
        params.uniform("w2", (8, 4), fan=4)
        params.uniform("gain", (4,), fan=1)
        params.uniform("bias", (4,), fan=1)
        params.uniform("table", (5, 4), fan=4)
        params.uniform("q", (3, 4), fan=4)
        params.uniform("k", (6, 4), fan=4)
        params.uniform("v", (6, 4), fan=4)
        worst = max(worst, grad_check(_scalar_loss(fn, 1000 + seed), params))
    assert worst < 1e-4, f"{kernel}: max relative error {worst}"


def test_select_nll_gradient_and_value():
    rng = np.random.default_rng(11)
    params = ParamStore(seed=11)
    params.uniform("logits", (3, 5), fan=5)
    targets = np.array([4, 0, 2])

    def loss(p):
        return ad.select_nll(ad.softmax(p["logits"]), targets)

    probs = ad.softmax(params["logits"]).data
    expected = -sum(math.log(probs[j, targets[j]]) for j in range(3))
    assert abs(loss(params).item() - expected) < 1e-12
    assert grad_check(loss, params) < 1e-4


def test_select_nll_batched_matches_per_row():
    rng = np.random.default_rng(12)
    logits = rng.normal(size=(4, 3, 6))
    targets = rng.integers(0, 6, size=(4, 3))
    batched = ad.select_nll(ad.softmax(Tensor(logits)), targets)
    for n in range(4):
        single = ad.select_nll(ad.softmax(Tensor(logits[n])), targets[n])
        assert abs(batched.data[n] - single.item()) < 1e-12


def test_attention_weights_sum_to_one_under_mask():
    rng = np.random.default_rng(13)
    q = rng.normal(size=(3, 8))
    kv = rng.normal(size=(5, 8))
    mask = np.zeros((1, 3, 5))
    mask[..., 4] = -np.inf
    out = ad.multi_head_attention(Tensor(q), Tensor(kv), Tensor(kv), n_heads=2, mask=mask)
    assert np.isfinite(out.data).all()
    # A fully-masked value column cannot influence the output.
    kv2 = kv.copy()
    kv2[4] += 100.0
    out2 = ad.multi_head_attention(Tensor(q), Tensor(kv[:4]), Tensor(kv[:4]), n_heads=2)
    out3 = ad.multi_head_attention(Tensor(q), Tensor(kv2), Tensor(kv2), n_heads=2, mask=mask)
    np.testing.assert_allclose(out3.data, out2.data, atol=1e-12)


def test_forward_kernels_are_pure():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(4, 8))
    w = rng.normal(size=(8, 8))
    a = ad.multi_head_attention(Tensor(x), Tensor(x), Tensor(x), n_heads=4).data
    b = ad.multi_head_attention(Tensor(x), Tensor(x), Tensor(x), n_heads=4).data
    assert (a == b).all()
    c = ad.gelu(ad.matmul(Tensor(x), Tensor(w))).data
    d = ad.gelu(ad.matmul(Tensor(x), Tensor(w))).data
    assert (c == d).all()


def test_no_grad_suppresses_graph():
    t = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = ad.mul(t, t)
    assert not out.requires_grad
    out2 = ad.mul(t, t)
    assert out2.requires_grad


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.mul(t, t).backward()


def test_gradient_accumulates_across_uses():
    t = Tensor(np.array([2.0]), requires_grad=True)
    out = ad.tensor_sum(ad.add(ad.mul(t, t), t))  # x^2 + x -> 2x + 1
    out.backward()
    np.testing.assert_allclose(t.grad, [5.0])


class TestParamStore:
    def test_duplicate_name_rejected(self):
        params = ParamStore(seed=0)
        params.uniform("w", (2,), fan=2)
        with pytest.raises(ValueError, match="duplicate"):
            params.uniform("w", (2,), fan=2)

    def test_seeded_init_reproducible(self):
        a = ParamStore(seed=9).uniform("w", (4, 4), fan=4)
        b = ParamStore(seed=9).uniform("w", (4, 4), fan=4)
        assert (a.data == b.data).all()

    def test_state_round_trip(self):
        params = ParamStore(seed=1)
        params.uniform("w", (3, 2), fan=2)
        params.constant("b", (2,), 0.0)
        state = params.state_arrays()
        params["w"].data[:] = 0.0
        params.load_state_arrays(state)
        assert (params["w"].data == state["w"]).all()

    def test_state_mismatch_rejected(self):
        params = ParamStore(seed=1)
        params.uniform("w", (3, 2), fan=2)
        with pytest.raises(ValueError):
            params.load_state_arrays({})

    def test_embedding_bound_follows_fan(self):
        params = ParamStore(seed=4)
        w = params.uniform("w", (100, 16), fan=16)
        assert abs(w.data).max() <= 1.0 / 4.0
