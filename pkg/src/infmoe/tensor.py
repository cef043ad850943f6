"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy buffer (float64 by default, float32 allowed for
training speed). Every operation that produces a tensor records its inputs
and a vector-Jacobian closure; ``Tensor.backward()`` linearizes the recorded
graph into a tape and replays it in reverse topological order, accumulating
(adding into) ``.grad`` buffers. Repeated backward calls from independent
losses therefore sum their gradients.

Broadcasting is deliberately minimal: bias-over-rows and scalar scaling.
Everything the model needs beyond the primitive set here is composed from it.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True
_FINITE_CHECKS = True

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def finite_checks(enabled: bool):
    """Toggle per-op NaN/Inf validation (left on everywhere but hot loops)."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A dense n-d array with optional gradient tracking.

    ``data`` is row-major and owned; ``grad`` (same shape) is allocated on
    first accumulation. Tensors produced by ops are treated as immutable.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._vjp = None
        return out

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradient machinery ---------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        """Accumulate a gradient the caller may still alias (copies on first use)."""
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def _accum_owned(self, g: np.ndarray) -> None:
        """Accumulate a freshly allocated gradient buffer (takes ownership)."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def _build_tape(self) -> list:
        """Execution-ordered record of op nodes reachable from self.

        Iterative depth-first post-order; parents always precede children,
        so reversing the tape yields a valid reverse-topological schedule.
        """
        tape = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return tape

    def backward(self) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from a scalar loss."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        if not self.requires_grad:
            return
        tape = self._build_tape()
        self._accum(np.ones_like(self.data))
        for node in reversed(tape):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)
        # intermediate grads are not needed once propagated; free them so
        # repeated backward calls only keep leaf accumulations
        for node in tape:
            if node._vjp is not None:
                node.grad = None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition; also accepts a rank-1 bias broadcast over rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias_mode = b.data.ndim == 1 and a.data.ndim > 1 and a.data.shape[-1] == b.data.shape[0]
    if not bias_mode and a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape}")
    out = Tensor._from_op(a.data + b.data, (a, b))
    if out.requires_grad:
        def vjp(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                if bias_mode:
                    b._accum_owned(g.sum(axis=tuple(range(g.ndim - 1))))
                else:
                    b._accum(g)
        out._vjp = vjp
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape}")
    out = Tensor._from_op(a.data * b.data, (a, b))
    if out.requires_grad:
        def vjp(g):
            if a.requires_grad:
                a._accum_owned(g * b.data)
            if b.requires_grad:
                b._accum_owned(g * a.data)
        out._vjp = vjp
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    a = _as_tensor(a)
    s = float(s)
    out = Tensor._from_op(a.data * s, (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum_owned(g * s)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched over identical leading dimensions.

    Gradient contract: dA = dC @ B^T, dB = A^T @ dC (batch dims untouched).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} x {b.data.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data
    _check_finite(out_data, "matmul output (non-finite input?)")
    out = Tensor._from_op(out_data, (a, b))
    if out.requires_grad:
        def vjp(g):
            if a.requires_grad:
                a._accum_owned(g @ b.data.swapaxes(-1, -2))
            if b.requires_grad:
                b._accum_owned(a.data.swapaxes(-1, -2) @ g)
        out._vjp = vjp
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T (+ bias), the standard row-major projection."""
    y = matmul(x, transpose(w))
    return add(y, b) if b is not None else y


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._from_op(a.data.reshape(shape), (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum(g.reshape(a.data.shape))
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    """Axis transposition as a strided view (BLAS consumes strides directly)."""
    a = _as_tensor(a)
    out = Tensor._from_op(a.data.swapaxes(ax1, ax2), (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum(g.swapaxes(ax1, ax2))
    return out


def transpose(a: Tensor) -> Tensor:
    """2-d transpose as a lazy view (BLAS consumes the stride directly)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a rank-2 tensor")
    out = Tensor._from_op(a.data.T, (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum(g.T)
    return out


def _gelu_np(v: np.ndarray) -> np.ndarray:
    """tanh-form gelu; operation order matches the gelu op bit for bit."""
    t = np.multiply(v, v)
    t *= _GELU_A
    t += 1.0
    t *= v
    t *= _GELU_C
    np.tanh(t, out=t)
    t += 1.0
    t *= v
    t *= 0.5
    return t


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form). In-place chains keep the
    temporary count low; this op dominates the FFN's elementwise cost."""
    a = _as_tensor(a)
    v = a.data
    t = np.multiply(v, v)
    t *= _GELU_A
    t += 1.0
    t *= v
    t *= _GELU_C
    np.tanh(t, out=t)         # t = tanh(c * (v + A v^3)), kept for backward
    res = t + 1.0
    res *= v
    res *= 0.5
    out = Tensor._from_op(res, (a,))
    if out.requires_grad:
        def vjp(g):
            # d/dv = 0.5 (1 + t) + 0.5 v (1 - t^2) c (1 + 3 A v^2)
            w = np.multiply(v, v)
            w *= 3.0 * _GELU_A
            w += 1.0
            w *= _GELU_C
            tt = np.multiply(t, t)
            np.subtract(1.0, tt, out=tt)
            w *= tt
            w *= v
            w += t
            w += 1.0
            w *= 0.5
            w *= g
            a._accum_owned(w)
        out._vjp = vjp
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._from_op(np.maximum(a.data, 0.0), (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum(g * (a.data > 0))
    return out


ACTIVATIONS = {"gelu": gelu, "relu": relu}


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed overflow-free."""
    a = _as_tensor(a)
    # max(x, 0) + log1p(exp(-|x|)): vectorizes far better than logaddexp
    buf = np.abs(a.data)
    np.negative(buf, out=buf)
    np.exp(buf, out=buf)
    np.log1p(buf, out=buf)
    buf += np.maximum(a.data, 0.0)
    out = Tensor._from_op(buf, (a,))
    if out.requires_grad:
        def vjp(g):
            a._accum_owned(g * _sigmoid_np(a.data))
        out._vjp = vjp
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    a = _as_tensor(a)
    if a.data.size == 0 or a.data.shape[-1] == 0:
        raise ShapeError("softmax of an empty tensor")
    m = a.data.max(axis=-1, keepdims=True)
    p = a.data - m
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = Tensor._from_op(p, (a,))
    if out.requires_grad:
        def vjp(g):
            gp = g * p
            s = gp.sum(axis=-1, keepdims=True)
            s *= -1.0
            gp += p * s          # p * (g - sum(g * p))
            a._accum_owned(gp)
        out._vjp = vjp
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._from_op(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def vjp(g):
            if gain.requires_grad:
                gain._accum_owned((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
            if bias.requires_grad:
                bias._accum_owned(g.sum(axis=tuple(range(g.ndim - 1))))
            if x.requires_grad:
                gg = g * gain.data
                m1 = gg.mean(axis=-1, keepdims=True)
                m2 = (gg * xhat).mean(axis=-1, keepdims=True)
                gg -= m1
                gg -= xhat * m2
                gg *= inv
                x._accum_owned(gg)
        out._vjp = vjp
    return out


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[idx[...], :]."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError("embedding index out of range")
    out = Tensor._from_op(table.data[idx], (table,))
    if out.requires_grad:
        def vjp(g):
            # scatter-add via a one-hot matmul: for small vocabularies this is
            # far faster than np.add.at's per-element dispatch
            g2 = g.reshape(-1, table.data.shape[1])
            flat = idx.reshape(-1)
            onehot = np.zeros((flat.size, table.data.shape[0]), dtype=g2.dtype)
            onehot[np.arange(flat.size), flat] = 1.0
            table._accum_owned(onehot.T @ g2)
        out._vjp = vjp
    return out


def take_cols(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis: out[b, j] = a[b, idx[b, j]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    out = Tensor._from_op(np.take_along_axis(a.data, idx, axis=-1), (a,))
    if out.requires_grad:
        def vjp(g):
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, idx, g, axis=-1)
            a._accum_owned(buf)
        out._vjp = vjp
    return out


def scatter_cols(a: Tensor, idx: np.ndarray, width: int) -> Tensor:
    """Inverse of take_cols: place a[b, j] at column idx[b, j] of a zero row."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    buf = np.zeros(a.data.shape[:-1] + (width,), dtype=a.data.dtype)
    np.put_along_axis(buf, idx, a.data, axis=-1)
    out = Tensor._from_op(buf, (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum_owned(np.take_along_axis(g, idx, axis=-1))
    return out


def col(a: Tensor, i: int) -> Tensor:
    """Extract column i of a rank-2 tensor as a rank-1 tensor."""
    a = _as_tensor(a)
    out = Tensor._from_op(a.data[:, i].copy(), (a,))
    if out.requires_grad:
        def vjp(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, i] += g
        out._vjp = vjp
    return out


def mul_colvec(a: Tensor, w: Tensor) -> Tensor:
    """Scale each row of ``a`` [B, D] by the matching entry of ``w`` [B]."""
    a, w = _as_tensor(a), _as_tensor(w)
    if w.data.ndim != 1 or a.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"mul_colvec: {a.data.shape} x {w.data.shape}")
    out = Tensor._from_op(a.data * w.data[:, None], (a, w))
    if out.requires_grad:
        def vjp(g):
            if a.requires_grad:
                a._accum_owned(g * w.data[:, None])
            if w.requires_grad:
                w._accum_owned((g * a.data).sum(axis=-1))
        out._vjp = vjp
    return out


def add_const(a: Tensor, c: np.ndarray | float) -> Tensor:
    """Add a non-differentiable constant (e.g. the causal attention mask)."""
    a = _as_tensor(a)
    out = Tensor._from_op(a.data + c, (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum(g)
    return out


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-differentiable constant array of the same shape."""
    a = _as_tensor(a)
    out = Tensor._from_op(a.data * c, (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum_owned(g * c)
    return out


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._from_op(np.asarray(a.data.sum()), (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum_owned(np.full_like(a.data, g))
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / _as_tensor(a).data.size)


def sum_axis0(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._from_op(a.data.sum(axis=0), (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum(np.broadcast_to(g, a.data.shape).copy())
    return out


def top_count_mask(a: Tensor, count: int) -> Tensor:
    """Keep the ``count`` largest entries of each last-axis row, zero the rest.

    Retained entries keep their original values; ties at the threshold are
    resolved toward the lowest index so the retained set is unique and
    deterministic. Gradients flow through retained entries only (the
    selection is treated as constant during backward).
    """
    a = _as_tensor(a)
    d = a.data.shape[-1]
    if not 1 <= count <= d:
        raise ContractError(f"top_count_mask: count {count} outside [1, {d}]")
    keep = _top_count_bool(a.data, count)
    out = Tensor._from_op(np.where(keep, a.data, 0.0), (a,))
    if out.requires_grad:
        out._vjp = lambda g: a._accum_owned(g * keep)
    return out


def _top_count_bool(m: np.ndarray, count: int) -> np.ndarray:
    """Boolean retention pattern with exactly ``count`` True per row.

    The threshold is the count-th largest value per row; entries strictly
    above it are kept, then ties at the threshold fill remaining slots in
    index order. Independent of any partial-sort internals.
    """
    d = m.shape[-1]
    if count == d:
        return np.ones(m.shape, dtype=bool)
    thresh = np.partition(m, d - count, axis=-1)[..., d - count : d - count + 1]
    keep = m > thresh
    short = count - keep.sum(axis=-1, keepdims=True)
    at = m == thresh
    if (short == 1).all():
        # generic (tie-free) case: only the threshold entry itself is missing
        flat_at = at.reshape(-1, d)
        flat_keep = keep.reshape(-1, d)
        flat_keep[np.arange(flat_at.shape[0]), flat_at.argmax(axis=-1)] = True
    else:
        keep |= at & (np.cumsum(at, axis=-1) <= short)
    return keep


def top_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties broken by lowest index.

    Returned in descending score order (stable within equal scores).
    """
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects [batch, vocab] logits")
    targets = np.asarray(targets)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("cross_entropy target out of range")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    logp = logits.data - m - np.log(z)
    nll = -logp[np.arange(n), targets].mean()
    _check_finite(np.asarray(nll), "cross_entropy loss")
    out = Tensor._from_op(np.asarray(nll), (logits,))
    if out.requires_grad:
        def vjp(g):
            p = e / z
            p[np.arange(n), targets] -= 1.0
            logits._accum_owned(p * (float(g) / n))
        out._vjp = vjp
    return out


# operator sugar
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: add(self, scale(_as_tensor(other), -1.0))
Tensor.__mul__ = lambda self, other: (
    scale(self, other) if isinstance(other, (int, float)) else mul(self, other)
)
Tensor.__rmul__ = Tensor.__mul__
Tensor.__matmul__ = lambda self, other: matmul(self, other)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, params: list[Tensor], eps: float = 1e-5,
               max_entries_per_param: int | None = None, seed: int = 0,
               tie_retries: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must return a scalar Tensor and be twice differentiable at the
    evaluation point away from top-k selection ties. Analytic gradients come
    from one backward pass; each parameter entry (or a seeded sample of up
    to ``max_entries_per_param`` entries for large tensors) is then
    perturbed by +/- eps and the loss re-evaluated. The relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    When a difference quotient crosses a selection boundary the quotient is
    meaningless, so entries that disagree are re-tried at eps/8 up to
    ``tie_retries`` times; a genuine gradient defect disagrees at every
    step size and still surfaces.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    for p in params:
        p.zero_grad()
    loss = f()
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("grad_check: f must return a scalar Tensor")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def quotient(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        lp = f().item()
        flat[i] = orig - h
        lm = f().item()
        flat[i] = orig
        return (lp - lm) / (2.0 * h)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            entries = range(n)
        an_flat = an.reshape(-1)
        for i in entries:
            h = eps
            err = None
            for _ in range(tie_retries + 1):
                num = quotient(flat, i, h)
                e = abs(an_flat[i] - num) / max(abs(an_flat[i]), abs(num), 1e-8)
                err = e if err is None else min(err, e)
                if err < 1e-5:
                    break
                h /= 8.0
            worst = max(worst, err)
    return worst


def global_grad_norm(params: list[Tensor]) -> float:
    """L2 norm over all parameter gradients (missing grads count as zero)."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)
