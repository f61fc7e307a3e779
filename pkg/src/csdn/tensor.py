"""Dense float64 tensors with explicit per-op backward passes.

Every differentiable operation in the package is built from the ops in
this module.  Each op computes its forward value with numpy and attaches
an explicit backward function to the output node; ``backward()`` walks
the recorded nodes in reverse topological order.  There is no operator
dispatch beyond that: the head's architecture is static, so the graph is
simply whatever the forward pass recorded.

Everything is float64.  Gradient correctness is enforced by
``grad_check``, a central-finite-difference oracle that every op and the
full decoder layer must pass.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import DegenerateMaskError, EvaluationError, ShapeMismatchError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    Values are immutable once produced by a forward op; only leaf
    tensors (parameters) are updated in place, between passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _make(data, inputs: Sequence, backward_factory) -> Tensor:
    """Build an op output; record parents/backward only when tracking."""
    tracked = [t for t in inputs if isinstance(t, Tensor) and t.requires_grad]
    out = Tensor(data)
    if _grad_enabled and tracked:
        out.requires_grad = True
        out._parents = tuple(tracked)
        out._backward = backward_factory(out)
    return out


def _accum(t: Tensor, g: np.ndarray):
    # backward closures never mutate gradient arrays, so aliasing is safe
    if not (isinstance(t, Tensor) and t.requires_grad):
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(out: Tensor, seed=None):
    """Reverse-mode sweep from ``out``; accumulates into ``.grad`` slots."""
    if seed is None:
        seed = np.ones_like(out.data)
    out.grad = np.asarray(seed, dtype=np.float64).reshape(out.data.shape)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    out_data = da + db

    def bw(out):
        def run():
            if isinstance(a, Tensor):
                _accum(a, _unbroadcast(out.grad, da.shape))
            if isinstance(b, Tensor):
                _accum(b, _unbroadcast(out.grad, db.shape))

        return run

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    out_data = da - db

    def bw(out):
        def run():
            if isinstance(a, Tensor):
                _accum(a, _unbroadcast(out.grad, da.shape))
            if isinstance(b, Tensor):
                _accum(b, _unbroadcast(-out.grad, db.shape))

        return run

    return _make(out_data, (a, b), bw)


def neg(a) -> Tensor:
    da = _as_array(a)

    def bw(out):
        def run():
            _accum(a, -out.grad)

        return run

    return _make(-da, (a,), bw)


def mul(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    out_data = da * db

    def bw(out):
        def run():
            if isinstance(a, Tensor):
                _accum(a, _unbroadcast(out.grad * db, da.shape))
            if isinstance(b, Tensor):
                _accum(b, _unbroadcast(out.grad * da, db.shape))

        return run

    return _make(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    out_data = da / db

    def bw(out):
        def run():
            if isinstance(a, Tensor):
                _accum(a, _unbroadcast(out.grad / db, da.shape))
            if isinstance(b, Tensor):
                _accum(b, _unbroadcast(-out.grad * da / (db * db), db.shape))

        return run

    return _make(out_data, (a, b), bw)


def pow_const(a, p: float) -> Tensor:
    da = _as_array(a)
    out_data = da**p

    def bw(out):
        def run():
            _accum(a, out.grad * p * da ** (p - 1.0))

        return run

    return _make(out_data, (a,), bw)


def exp(a) -> Tensor:
    out_data = np.exp(_as_array(a))

    def bw(out):
        def run():
            _accum(a, out.grad * out.data)

        return run

    return _make(out_data, (a,), bw)


def log(a) -> Tensor:
    da = _as_array(a)

    def bw(out):
        def run():
            _accum(a, out.grad / da)

        return run

    return _make(np.log(da), (a,), bw)


def abs_op(a) -> Tensor:
    da = _as_array(a)

    def bw(out):
        def run():
            _accum(a, out.grad * np.sign(da))

        return run

    return _make(np.abs(da), (a,), bw)


def relu(a) -> Tensor:
    da = _as_array(a)

    def bw(out):
        def run():
            _accum(a, out.grad * (da > 0.0))

        return run

    return _make(np.maximum(da, 0.0), (a,), bw)


def maximum(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    out_data = np.maximum(da, db)

    def bw(out):
        def run():
            # ties split evenly so the map stays symmetric in its arguments
            wa = np.where(da > db, 1.0, np.where(da == db, 0.5, 0.0))
            if isinstance(a, Tensor):
                _accum(a, _unbroadcast(out.grad * wa, da.shape))
            if isinstance(b, Tensor):
                _accum(b, _unbroadcast(out.grad * (1.0 - wa), db.shape))

        return run

    return _make(out_data, (a, b), bw)


def minimum(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    out_data = np.minimum(da, db)

    def bw(out):
        def run():
            wa = np.where(da < db, 1.0, np.where(da == db, 0.5, 0.0))
            if isinstance(a, Tensor):
                _accum(a, _unbroadcast(out.grad * wa, da.shape))
            if isinstance(b, Tensor):
                _accum(b, _unbroadcast(out.grad * (1.0 - wa), db.shape))

        return run

    return _make(out_data, (a, b), bw)


def sum_op(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _as_array(a)
    out_data = da.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, da.shape))

        return run

    return _make(out_data, (a,), bw)


def mean_op(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _as_array(a)
    count = da.size if axis is None else da.shape[axis]
    return mul(sum_op(a, axis=axis, keepdims=keepdims), 1.0 / count)


def sigmoid(a) -> Tensor:
    da = _as_array(a)
    out_data = np.where(da >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(da))),
                        np.exp(-np.abs(da)) / (1.0 + np.exp(-np.abs(da))))

    def bw(out):
        def run():
            _accum(a, out.grad * out.data * (1.0 - out.data))

        return run

    return _make(out_data, (a,), bw)


def inverse_sigmoid(a, eps: float = 1e-6) -> Tensor:
    """log(x / (1-x)) with the input clipped to [eps, 1-eps].

    Gradient is zero where the clip is active.
    """
    da = _as_array(a)
    xc = np.clip(da, eps, 1.0 - eps)
    out_data = np.log(xc) - np.log1p(-xc)

    def bw(out):
        def run():
            inside = (da > eps) & (da < 1.0 - eps)
            _accum(a, out.grad * inside / (xc * (1.0 - xc)))

        return run

    return _make(out_data, (a,), bw)


def gelu(a) -> Tensor:
    da = _as_array(a)
    phi = 0.5 * (1.0 + erf(da * _INV_SQRT2))
    out_data = da * phi

    def bw(out):
        def run():
            pdf = np.exp(-0.5 * da * da) * _INV_SQRT2PI
            _accum(a, out.grad * (phi + da * pdf))

        return run

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    da = _as_array(a)

    def bw(out):
        def run():
            _accum(a, out.grad.reshape(da.shape))

        return run

    return _make(da.reshape(shape), (a,), bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    da = _as_array(a)
    idx = [slice(None)] * da.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(out):
        def run():
            g = np.zeros_like(da)
            g[idx] = out.grad
            _accum(a, g)

        return run

    return _make(da[idx], (a,), bw)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    datas = [_as_array(p) for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def bw(out):
        def run():
            offset = 0
            for p, size in zip(parts, sizes):
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(offset, offset + size)
                _accum(p, out.grad[tuple(idx)])
                offset += size

        return run

    return _make(out_data, tuple(parts), bw)


def transpose(a) -> Tensor:
    da = _as_array(a)
    if da.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected 2-D, got {da.shape}")

    def bw(out):
        def run():
            _accum(a, out.grad.T)

        return run

    return _make(da.T, (a,), bw)


def permute(a, axes) -> Tensor:
    da = _as_array(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(out):
        def run():
            _accum(a, np.transpose(out.grad, inverse))

        return run

    return _make(np.transpose(da, axes), (a,), bw)


def bmm(a, b) -> Tensor:
    """Batched matmul on stacked matrices: [B, m, k] @ [B, k, n]."""
    da, db = _as_array(a), _as_array(b)
    if da.ndim != 3 or db.ndim != 3 or da.shape[0] != db.shape[0] or da.shape[2] != db.shape[1]:
        raise ShapeMismatchError(f"bmm: cannot multiply {da.shape} by {db.shape}")
    out_data = np.matmul(da, db)

    def bw(out):
        def run():
            g = np.ascontiguousarray(out.grad)
            if isinstance(a, Tensor):
                _accum(a, np.matmul(g, np.ascontiguousarray(db.transpose(0, 2, 1))))
            if isinstance(b, Tensor):
                _accum(b, np.matmul(np.ascontiguousarray(da.transpose(0, 2, 1)), g))

        return run

    return _make(out_data, (a, b), bw)


def gather_rows(a, indices) -> Tensor:
    da = _as_array(a)
    idx = np.asarray(indices, dtype=np.int64)

    def bw(out):
        def run():
            g = np.zeros_like(da)
            np.add.at(g, idx, out.grad)
            _accum(a, g)

        return run

    return _make(da[idx], (a,), bw)


# ---------------------------------------------------------------------------
# Linear algebra and attention kernels
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise ShapeMismatchError(
            f"matmul: cannot multiply {da.shape} by {db.shape}"
        )
    out_data = da @ db

    def bw(out):
        def run():
            if isinstance(a, Tensor):
                _accum(a, out.grad @ db.T)
            if isinstance(b, Tensor):
                _accum(b, da.T @ out.grad)

        return run

    return _make(out_data, (a, b), bw)


def linear(x, weight, bias) -> Tensor:
    """x [n, d_in] @ weight [d_in, d_out] + bias [d_out]."""
    dx, dw, db = _as_array(x), _as_array(weight), _as_array(bias)
    if dx.ndim != 2 or dw.ndim != 2 or dx.shape[1] != dw.shape[0]:
        raise ShapeMismatchError(
            f"linear: input {dx.shape} incompatible with weight {dw.shape}"
        )
    if db.shape != (dw.shape[1],):
        raise ShapeMismatchError(
            f"linear: bias {db.shape} incompatible with weight {dw.shape}"
        )
    out_data = dx @ dw + db

    def bw(out):
        def run():
            if isinstance(x, Tensor):
                _accum(x, out.grad @ dw.T)
            if isinstance(weight, Tensor):
                _accum(weight, dx.T @ out.grad)
            if isinstance(bias, Tensor):
                _accum(bias, out.grad.sum(axis=0))

        return run

    return _make(out_data, (x, weight, bias), bw)


def masked_softmax(logits, mask: np.ndarray, scale: float) -> Tensor:
    """Row softmax of logits/scale over allowed entries; masked entries are 0.

    Stabilized by subtracting the row max over allowed entries.  Raises
    DegenerateMaskError when a row allows nothing.
    """
    if scale <= 0.0:
        raise ValueError(f"masked_softmax: scale must be positive, got {scale}")
    dl = _as_array(logits)
    m = np.asarray(mask, dtype=bool)
    try:
        if np.broadcast_shapes(m.shape, dl.shape) != dl.shape:
            raise ValueError
    except ValueError:
        raise ShapeMismatchError(
            f"masked_softmax: mask {m.shape} does not broadcast to logits {dl.shape}"
        ) from None
    if not m.any(axis=-1).all():
        raise DegenerateMaskError("masked_softmax: a row has no allowed entries")
    z = np.where(m, dl / scale, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        def run():
            g = out.grad
            inner = (g * s).sum(axis=-1, keepdims=True)
            _accum(logits, s * (g - inner) / scale)

        return run

    return _make(s, (logits,), bw)


def softmax(logits, scale: float = 1.0) -> Tensor:
    return masked_softmax(logits, np.ones(_as_array(logits).shape, dtype=bool), scale)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization over the last axis."""
    dx = _as_array(x)
    dgamma, dbeta = _as_array(gamma), _as_array(beta)
    d = dx.shape[-1]
    mu = dx.mean(axis=-1, keepdims=True)
    xc = dx - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * dgamma + dbeta

    def bw(out):
        def run():
            g = out.grad
            if isinstance(gamma, Tensor):
                _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
            if isinstance(beta, Tensor):
                _accum(beta, g.reshape(-1, d).sum(axis=0))
            if isinstance(x, Tensor):
                gh = g * dgamma
                term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (
                    gh * xhat
                ).mean(axis=-1, keepdims=True)
                _accum(x, term * inv)

        return run

    return _make(out_data, (x, gamma, beta), bw)


def bilinear_gather(vmap, locations) -> Tensor:
    """Sample vmap [H, W, C] at continuous pixel locations [M, 2] (x, y).

    Out-of-range corners contribute zero.  Differentiable in both the map
    values and the locations (away from integer-coordinate kinks).
    """
    dm = _as_array(vmap)
    dl = _as_array(locations)
    if dm.ndim != 3 or dl.ndim != 2 or dl.shape[1] != 2:
        raise ShapeMismatchError(
            f"bilinear_gather: map {dm.shape}, locations {dl.shape}"
        )
    xs = np.ascontiguousarray(dl[:, 0])
    ys = np.ascontiguousarray(dl[:, 1])
    out_data = kernels.bilinear_forward(dm, xs, ys)

    def bw(out):
        def run():
            g = np.ascontiguousarray(out.grad)
            if isinstance(vmap, Tensor):
                gmap, gxs, gys = kernels.bilinear_backward(dm, xs, ys, g)
                _accum(vmap, gmap)
            else:
                gxs, gys = kernels.bilinear_backward_locations(dm, xs, ys, g)
            if isinstance(locations, Tensor):
                _accum(locations, np.stack([gxs, gys], axis=1))

        return run

    return _make(out_data, (vmap, locations), bw)


def bilinear_sample(vmap, location) -> Tensor:
    """Single-location convenience wrapper around bilinear_gather -> [C]."""
    loc = location if isinstance(location, Tensor) else np.asarray(location, np.float64)
    loc2 = reshape(loc, (1, 2)) if isinstance(loc, Tensor) else loc.reshape(1, 2)
    return reshape(bilinear_gather(vmap, loc2), (_as_array(vmap).shape[2],))


def sigmoid_focal(logits, targets_onehot: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Summed sigmoid focal loss against a 0/1 target array (fused op).

    Positives: alpha * (1-p)^gamma * softplus(-l); negatives use the
    complementary form.  Stable for large |logits|.
    """
    dl = _as_array(logits)
    t = np.asarray(targets_onehot, dtype=np.float64)
    if t.shape != dl.shape:
        raise ShapeMismatchError(
            f"sigmoid_focal: targets {t.shape} do not match logits {dl.shape}"
        )
    p = np.where(dl >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(dl))),
                 np.exp(-np.abs(dl)) / (1.0 + np.exp(-np.abs(dl))))
    softplus_neg = np.where(dl > 0.0, np.log1p(np.exp(-dl)), -dl + np.log1p(np.exp(dl)))
    softplus_pos = np.where(dl > 0.0, dl + np.log1p(np.exp(-dl)), np.log1p(np.exp(dl)))
    pos = alpha * (1.0 - p) ** gamma * softplus_neg
    negv = (1.0 - alpha) * p**gamma * softplus_pos
    out_data = np.array((t * pos + (1.0 - t) * negv).sum())

    def bw(out):
        def run():
            dpos = -alpha * (1.0 - p) ** gamma * (
                gamma * p * softplus_neg + (1.0 - p)
            )
            dneg = (1.0 - alpha) * p**gamma * (
                gamma * (1.0 - p) * softplus_pos + p
            )
            _accum(logits, out.grad * (t * dpos + (1.0 - t) * dneg))

        return run

    return _make(out_data, (logits,), bw)


# ---------------------------------------------------------------------------
# Parameters, initialization, gradient checking
# ---------------------------------------------------------------------------


class Parameter:
    """Named leaf tensor plus optimizer state (moments, step counter)."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = True
        self.first_moment = Tensor(np.zeros_like(self.value.data))
        self.second_moment = Tensor(np.zeros_like(self.value.data))
        self.step_count = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.value.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox); the one PRNG used everywhere."""
    return np.random.Generator(np.random.Philox(seed))


def uniform_init(rng: np.random.Generator, shape, d_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(d_in)
    return rng.uniform(-bound, bound, size=shape)


def grad_check(f, params: Sequence[Parameter], epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    ``f`` must be a deterministic scalar function of the parameter values.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"grad_check: epsilon {epsilon} outside [1e-7, 1e-3]")

    def run() -> Tensor:
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise EvaluationError("grad_check: function value is not finite")
        return out

    for p in params:
        p.zero_grad()
    out = run()
    backward(out)
    analytic = [
        np.zeros_like(p.value.data) if p.value.grad is None else p.value.grad.copy()
        for p in params
    ]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = run().item()
            flat[i] = orig - epsilon
            f_minus = run().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            rel = abs(ana_flat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst
