"""Minimal reverse-mode autodiff over numpy arrays.

Provides exactly the kernels the bundle-creative model needs: elementwise
arithmetic, matrix multiply, embedding row lookup, layer norm, softmax,
cross-entropy, GELU, ReLU, scaled dot-product multi-head attention, and the
position-wise feed-forward block, each with a hand-written backward pass.
``grad_check`` compares every reverse-mode gradient against central finite
differences.

All forward kernels are pure functions; identical inputs produce
bitwise-identical outputs. Default precision is float64 (float32 is allowed
for latency benchmarking; gradients are only checked at float64).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class NumericDomainError(ValueError):
    """A kernel received or produced values outside its numeric domain."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with a kernel's contract."""


_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that disables graph construction (values only)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    """A numpy array plus an optional reverse-mode gradient.

    ``grad`` is populated by ``backward()`` and has the same shape as
    ``data``. Graph edges are only recorded while gradients are enabled and
    at least one operand requires them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar output into leaf ``grad``s."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        self.grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, post = stack.pop()
            if post:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> tuple[Tensor, bool]:
    out = Tensor(data)
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if track:
        out.requires_grad = True
        out._parents = parents
    return out, track


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise kernels ----------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.data.dtype)
    out, track = _node(a.data + b.data, (a, b))
    if track:
        def backward():
            g = out.grad
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))

        out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.data.dtype)
    out, track = _node(a.data * b.data, (a, b))
    if track:
        def backward():
            g = out.grad
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

        out._backward = backward
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out, track = _node(np.maximum(x.data, 0.0), (x,))
    if track:
        def backward():
            _accum(x, out.grad * (x.data > 0.0))

        out._backward = backward
    return out


def gelu(x) -> Tensor:
    """Gaussian-error linear unit, exact erf form."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out, track = _node(x.data * cdf, (x,))
    if track:
        def backward():
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            _accum(x, out.grad * (cdf + x.data * pdf))

        out._backward = backward
    return out


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    out, track = _node(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,))
    if track:
        def backward():
            _accum(x, np.broadcast_to(out.grad, x.data.shape))

        out._backward = backward
    return out


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out, track = _node(np.broadcast_to(x.data, shape).copy(), (x,))
    if track:
        def backward():
            _accum(x, _unbroadcast(out.grad, x.data.shape))

        out._backward = backward
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul expects matrices, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out, track = _node(a.data @ b.data, (a, b))
    if track:
        def backward():
            g = out.grad
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

        out._backward = backward
    return out


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError("transpose requires at least 2 dimensions")
    out, track = _node(x.data.swapaxes(-1, -2).copy(), (x,))
    if track:
        def backward():
            _accum(x, out.grad.swapaxes(-1, -2))

        out._backward = backward
    return out


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` (``b`` broadcasts over leading axes)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def feed_forward(x, w1, b1, w2, b2) -> Tensor:
    """Position-wise feed-forward: two affine maps with a GELU between."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# -- structural kernels -------------------------------------------------------


def embedding(table, ids) -> Tensor:
    """Row lookup: ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"embedding ids out of range [0, {n_rows})")
    out, track = _node(table.data[ids], (table,))
    if track:
        def backward():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, out.grad)

        out._backward = backward
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out, track = _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    if track:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward():
            g = out.grad
            for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                _accum(p, g[tuple(idx)])

        out._backward = backward
    return out


def narrow(x, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` along one axis."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out, track = _node(x.data[idx].copy(), (x,))
    if track:
        def backward():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += out.grad

        out._backward = backward
    return out


def index_first(x, i: int) -> Tensor:
    """Select ``x[i]`` along the first axis (drops that axis)."""
    x = as_tensor(x)
    out, track = _node(x.data[i].copy(), (x,))
    if track:
        def backward():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[i] += out.grad

        out._backward = backward
    return out


# -- normalization and probabilities ------------------------------------------


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    gain = as_tensor(gain, dtype=x.data.dtype)
    bias = as_tensor(bias, dtype=x.data.dtype)
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({n},), got {gain.data.shape} and {bias.data.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out, track = _node(gain.data * xhat + bias.data, (x, gain, bias))
    if track:
        def backward():
            g = out.grad
            g_xhat = g * gain.data
            # Jacobian of (x - mean)/std over the last axis.
            gx = inv_std * (
                g_xhat
                - g_xhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(g_xhat * xhat, axis=-1, keepdims=True)
            )
            _accum(x, gx)
            red = tuple(range(g.ndim - 1))
            _accum(gain, (g * xhat).sum(axis=red))
            _accum(bias, g.sum(axis=red))

        out._backward = backward
    return out


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = as_tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericDomainError("softmax input contains non-finite values")
    p = _stable_softmax(x.data)
    out, track = _node(p, (x,))
    if track:
        def backward():
            g = out.grad
            _accum(x, p * (g - (p * g).sum(axis=-1, keepdims=True)))

        out._backward = backward
    return out


def cross_entropy(dist, target: int) -> Tensor:
    """``-log(dist[target])`` for a probability vector; differentiable in ``dist``."""
    dist = as_tensor(dist)
    if dist.data.ndim != 1:
        raise ShapeError("cross_entropy expects a probability vector")
    target = int(target)
    if not 0 <= target < dist.data.shape[0]:
        raise IndexError(f"cross_entropy target {target} out of range [0, {dist.data.shape[0]})")
    p = dist.data[target]
    out, track = _node(np.asarray(-np.log(p), dtype=dist.data.dtype), (dist,))
    if track:
        def backward():
            if dist.grad is None:
                dist.grad = np.zeros_like(dist.data)
            dist.grad[target] += -out.grad / p

        out._backward = backward
    return out


def select_nll(dists, targets) -> Tensor:
    """Sum of ``-log(dists[..., j, targets[..., j]])`` over the slot axis.

    ``dists`` has shape (..., n, V); ``targets`` has shape (..., n). Returns a
    tensor of shape (...,): one negative log-likelihood total per leading index.
    """
    dists = as_tensor(dists)
    targets = np.asarray(targets, dtype=np.int64)
    if dists.data.ndim < 2:
        raise ShapeError("select_nll expects at least 2 dimensions (slots, vocab)")
    if targets.shape != dists.data.shape[:-1]:
        raise ShapeError(
            f"select_nll targets shape {targets.shape} != slot shape {dists.data.shape[:-1]}"
        )
    v = dists.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"select_nll targets out of range [0, {v})")
    picked = np.take_along_axis(dists.data, targets[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        # A zero-probability target scores +inf, honestly.
        nll = -np.log(picked).sum(axis=-1)
    out, track = _node(nll, (dists,))
    if track:
        # Each (leading..., slot) pair addresses one distinct grad cell.
        scatter = tuple(np.indices(targets.shape)) + (targets,)

        def backward():
            if dists.grad is None:
                dists.grad = np.zeros_like(dists.data)
            dists.grad[scatter] += -np.asarray(out.grad)[..., None] / picked

        out._backward = backward
    return out


# -- attention -----------------------------------------------------------------


def multi_head_attention(q, k, v, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with ``n_heads`` heads.

    ``q``: (..., Mq, d), ``k``/``v``: (..., Mk, d). ``mask`` is an additive
    array broadcastable to (..., n_heads, Mq, Mk); use ``-inf`` to forbid a
    key (every query must keep at least one finite score). Logits are scaled
    by 1/sqrt(head dimension); per-query weights sum to 1.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.data.shape[-1]
    if k.data.shape[-1] != d or v.data.shape[-1] != d:
        raise ShapeError("multi_head_attention q/k/v model dims differ")
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeError("multi_head_attention k/v lengths differ")
    if d % n_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    scale = 1.0 / np.sqrt(hd)

    def split(t: np.ndarray) -> np.ndarray:
        # (..., M, d) -> (..., H, M, hd)
        return t.reshape(t.shape[:-1] + (n_heads, hd)).swapaxes(-3, -2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.swapaxes(-1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    w = _stable_softmax(scores)
    oh = w @ vh
    out_data = oh.swapaxes(-3, -2).reshape(q.data.shape)
    out, track = _node(out_data, (q, k, v))
    if track:
        def backward():
            gh = split(out.grad)
            g_w = gh @ vh.swapaxes(-1, -2)
            g_scores = w * (g_w - (w * g_w).sum(axis=-1, keepdims=True))
            g_q = (g_scores @ kh) * scale
            g_k = (g_scores.swapaxes(-1, -2) @ qh) * scale
            g_v = w.swapaxes(-1, -2) @ gh

            def merge(t: np.ndarray, like: Tensor) -> np.ndarray:
                full = t.swapaxes(-3, -2)
                full = full.reshape(full.shape[:-2] + (d,))
                return _unbroadcast(full, like.data.shape)

            _accum(q, merge(g_q, q))
            _accum(k, merge(g_k, k))
            _accum(v, merge(g_v, v))

        out._backward = backward
    return out


# -- parameters and gradient checking ------------------------------------------


class ParamStore:
    """Named registry of trainable tensors with a seeded initializer.

    Weight matrices and embeddings are initialized uniformly in
    [-1/sqrt(fan), 1/sqrt(fan)]; norms/biases start at constants. Names are
    unique; registration order is the canonical iteration order.
    """

    def __init__(self, seed: int, dtype=DEFAULT_DTYPE):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.init_scheme = "uniform(-1/sqrt(fan), 1/sqrt(fan))"
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan)
        return self._register(name, self._rng.uniform(-bound, bound, size=shape))

    def constant(self, name: str, shape: tuple[int, ...], value: float = 0.0) -> Tensor:
        return self._register(name, np.full(shape, value, dtype=self.dtype))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)


def grad_check(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` must be a deterministic scalar function of the parameters.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"finite-difference step {h} outside [1e-6, 1e-3]")
    params.zero_grad()
    out = loss_fn(params)
    if not np.isfinite(out.data).all():
        raise NumericDomainError("loss is non-finite at the evaluation point")
    out.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    max_rel = 0.0
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(loss_fn(params).data)
                flat[i] = orig - h
                f_minus = float(loss_fn(params).data)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericDomainError(f"loss non-finite while perturbing {name}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * h)
                denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
                max_rel = max(max_rel, abs(a_flat[i] - numeric) / denom)
    return max_rel
