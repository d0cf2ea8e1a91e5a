"""Dense tensors with a define-by-run gradient tape.

Arrays are numpy-backed. Every differentiable op records its parents and a
backward closure on the result; ``Tensor.backward`` replays the recorded
nodes in reverse creation order, which is always a reverse topological
order. The graph is released after one backward pass.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

_seq = itertools.count()
_local = threading.local()


def _state():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.dtype = np.float32
    return _local


def get_default_dtype():
    return _state().dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (float64 for gradient checks)."""
    st = _state()
    prev, st.dtype = st.dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev, st.grad_enabled = st.grad_enabled, False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled():
    return _state().grad_enabled


class Tensor:
    """N-d float array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "spike", "_parents", "_backward", "_seq", "_released", "name")

    def __init__(self, data, requires_grad=False, dtype=None, spike=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # float arrays keep their precision; lists, scalars and ints take the default
            is_float_array = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if is_float_array else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.spike = spike
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._released = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, spike=self.spike)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- graph ------------------------------------------------------------
    @property
    def is_leaf(self):
        return not self._parents

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self._released:
            raise RuntimeError("backward called twice on the same graph; run the forward pass again")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError(f"grad must be given for non-scalar output of shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        nodes = {}
        stack = [self]
        while stack:
            n = stack.pop()
            if id(n) in nodes:
                continue
            nodes[id(n)] = n
            for p in n._parents:
                if p.requires_grad and id(p) not in nodes:
                    stack.append(p)
        order = sorted(nodes.values(), key=lambda n: n._seq, reverse=True)

        grads = {id(self): grad}
        for n in order:
            g = grads.pop(id(n), None)
            if n.is_leaf:
                if g is not None:
                    n.grad = g.copy() if n.grad is None else n.grad + g
                continue
            if g is not None:
                pgrads = n._backward(g)
                for p, pg in zip(n._parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
            n._parents = ()
            n._backward = None
            n._released = True

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward, spike=False):
    """Wrap an op output, recording it on the tape when any parent needs grad."""
    out = Tensor(data, dtype=data.dtype, spike=spike)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_operands(a, b):
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# -- elementwise ------------------------------------------------------------
def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    a, b = _binary_operands(a, b)
    data = a.data + b.data
    sa, sb = a.shape, b.shape
    return _result(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    spike = a.spike and b.spike
    return _result(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), spike)


def div(a, b):
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def clamp01_ste(x):
    """min(max(x, 0), 1); gradient passes only where 0 < x < 1."""
    x = as_tensor(x)
    xd = x.data
    inside = ((xd > 0) & (xd < 1)).astype(xd.dtype)
    return _result(np.clip(xd, 0, 1), (x,), lambda g: (g * inside,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


# -- shape ops ----------------------------------------------------------------
def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), x.spike)


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.asarray(x.data.transpose(axes), order="C"), (x,), lambda g: (g.transpose(inv),), x.spike)


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x, idx):
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(np.asarray(x.data[idx], order="C"), (x,), backward, x.spike)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(data, tensors, backward, all(t.spike for t in tensors))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), all(t.spike for t in tensors))


# -- reductions ---------------------------------------------------------------
def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), backward)


def reduce_sum(x, axis):
    """Sum along one axis, keeping it as a size-1 dimension."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for tensor of rank {x.ndim}")
    return tsum(x, axis=axis, keepdims=True)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


# -- linear algebra -------------------------------------------------------------
def matmul(a, b):
    """Matrix product over the last two axes; leading axes of ``a`` batch the rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _result(out, (a, b), backward)


def batchnorm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5, update_stats=True):
    """Normalize over every axis but the last (channel) axis.

    In training mode the batch statistics are used and, when ``update_stats``,
    folded into ``running_mean``/``running_var`` (numpy arrays, updated in
    place) with an exponential moving average.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"batchnorm parameters {gamma.shape}/{beta.shape} do not match channel width {d}")
    xd = x.data.reshape(-1, d)
    m = xd.shape[0]
    if training:
        if m < 2:
            raise ValueError("batchnorm in training mode needs at least 2 rows")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu) * invstd
    gd = gamma.data
    out = (xhat * gd + beta.data).reshape(x.shape)

    def backward(g):
        g = g.reshape(-1, d)
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gd
        if training:
            dx = invstd / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * invstd
        return dx.reshape(x.shape), dgamma, dbeta

    return _result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def conv2d(x, w, stride=1, padding=0):
    """Channels-last convolution: x (B, H, W, Cin), w (k, k, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    b, h, wd, cin = x.shape
    k, k2, wcin, cout = w.shape
    if k != k2 or wcin != cin:
        raise ValueError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {k}")
    wdat = w.data
    out = np.zeros((b, ho, wo, cout), dtype=x.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + span_h:stride, j:j + span_w:stride, :] @ wdat[i, j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wdat)
        g2 = g.reshape(-1, cout)
        for i in range(k):
            for j in range(k):
                patch = xp[:, i:i + span_h:stride, j:j + span_w:stride, :]
                gw[i, j] = patch.reshape(-1, cin).T @ g2
                gxp[:, i:i + span_h:stride, j:j + span_w:stride, :] += g @ wdat[i, j].T
        gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        return gx, gw

    return _result(out, (x, w), backward)


# -- losses ---------------------------------------------------------------------
def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _result(loss, (logits,), backward)


# -- gradient checking ------------------------------------------------------------
class GradCheckReport:
    def __init__(self, max_rel_error, worst, checked):
        self.max_rel_error = max_rel_error
        self.worst = worst
        self.checked = checked

    def __repr__(self):
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3g}, checked={self.checked}, worst={self.worst})"


def grad_check(f, params, eps=1e-3, tol=1e-3, max_elements=None, rng=None, floor=1e-8, names=None):
    """Compare tape gradients of scalar ``f()`` with central finite differences.

    ``params`` are leaf tensors that ``f`` reads. If ``max_elements`` is set and
    the parameters hold more elements than that, a random subsample is checked.
    The relative error of one element is |a - n| / max(|a|, |n|, floor).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    names = names or [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar objective, got shape {out.shape}")
    out.backward()
    analytic = []
    for p, name in zip(params, names):
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite tape gradient for parameter {name}")
        analytic.append(g)

    index = [(pi, ei) for pi, p in enumerate(params) for ei in range(p.size)]
    if max_elements is not None and len(index) > max_elements:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(index), size=max_elements, replace=False)
        index = [index[i] for i in sorted(pick)]

    worst, max_rel = None, 0.0
    with no_grad():
        for pi, ei in index:
            flat = params[pi].data.reshape(-1)
            orig = flat[ei]
            flat[ei] = orig + eps
            fp = f().item()
            flat[ei] = orig - eps
            fm = f().item()
            flat[ei] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while perturbing {names[pi]}[{ei}]")
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[pi].reshape(-1)[ei])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            if rel > max_rel:
                max_rel, worst = rel, (names[pi], ei, ana, num)
    for p in params:
        p.grad = None
    report = GradCheckReport(max_rel, worst, len(index))
    report.passed = max_rel < tol
    return report
