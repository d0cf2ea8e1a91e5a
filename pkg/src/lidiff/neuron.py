"""Leaky integrate-and-fire neurons with an arctangent surrogate gradient.

Per step, with hard reset:

    H[t] = U[t-1] + (X[t] - (U[t-1] - u_reset)) / tau
    S[t] = 1 if H[t] - u_th >= 0 else 0
    U[t] = H[t] * (1 - S[t]) + u_reset * S[t]

The backward pass replaces dS/dH by the surrogate derivative. Inside
:func:`smooth_spikes` the forward pass itself emits the surrogate
sigma(H - u_th) instead of the step, which gives a differentiable model that
finite differences can check against.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _result, as_tensor

_local = threading.local()


@contextlib.contextmanager
def smooth_spikes(enabled=True):
    prev = getattr(_local, "smooth", False)
    _local.smooth = enabled
    try:
        yield
    finally:
        _local.smooth = prev


def smooth_mode():
    return getattr(_local, "smooth", False)


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    u_th: float = 1.0
    u_reset: float = 0.0
    surrogate_width: float = 2.0

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.u_th > self.u_reset:
            raise ValueError("u_th must exceed u_reset")
        if self.surrogate_width <= 0:
            raise ValueError("surrogate_width must be positive")


@dataclass
class LifState:
    u: np.ndarray | Tensor
    t: int = 0

    @classmethod
    def fresh(cls, shape, params: LifParams, dtype=np.float32):
        return cls(np.full(shape, params.u_reset, dtype=dtype), 0)


def surrogate(v, width):
    """sigma(v) = arctan(pi * width * v / 2) / pi + 1/2."""
    return np.arctan(np.pi * width * np.asarray(v) / 2) / np.pi + 0.5


def surrogate_grad(v, width):
    """Derivative of :func:`surrogate`; equals width / 2 at v = 0."""
    if width <= 0:
        raise ValueError("width must be positive")
    out = _sg(np.asarray(v), width)
    return float(out) if np.ndim(out) == 0 else out


def _sg(v, width):
    z = np.pi * width * v / 2
    return width / (2 * (1 + z * z))


def heaviside(v, width=2.0):
    """Spike nonlinearity on a tensor: step forward, surrogate derivative backward."""
    v = as_tensor(v)
    vd = v.data
    if smooth_mode():
        out = np.asarray(surrogate(vd, width), dtype=vd.dtype)
    else:
        out = (vd >= 0).astype(vd.dtype)
    dv = np.asarray(_sg(vd, width), dtype=vd.dtype)
    return _result(out, (v,), lambda g: (g * dv,), spike=not smooth_mode())


def lif_step(x, state: LifState, params: LifParams = LifParams()):
    """Advance one time step. Updates ``state`` in place and returns the spikes."""
    x = as_tensor(x)
    u = state.u if isinstance(state.u, Tensor) else Tensor(np.asarray(state.u, dtype=x.dtype))
    if u.shape != x.shape:
        raise ValueError(f"input shape {x.shape} does not match membrane shape {u.shape}")
    h = u + (x - (u - params.u_reset)) / params.tau
    s = heaviside(h - params.u_th, params.surrogate_width)
    new_u = h * (1.0 - s) + s * params.u_reset
    if not np.all(np.isfinite(new_u.data)):
        raise FloatingPointError("non-finite membrane potential")
    state.u = new_u
    state.t += 1
    return s


def lif_sequence(x_seq, params: LifParams = LifParams(), return_membrane=False):
    """Run a fresh LIF layer over axis 0 (time) of ``x_seq``.

    Fused equivalent of repeated :func:`lif_step` calls from the reset state,
    with backpropagation through time done in one reverse sweep.
    """
    x = as_tensor(x_seq)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ValueError("lif_sequence needs at least one time step")
    xd = x.data
    dtype = xd.dtype
    tau, u_th, u_r, width = params.tau, params.u_th, params.u_reset, params.surrogate_width
    smooth = smooth_mode()
    steps = xd.shape[0]
    hs = np.empty_like(xd)
    ss = np.empty_like(xd)
    us = np.empty_like(xd)
    u = np.full(xd.shape[1:], u_r, dtype=dtype)
    for t in range(steps):
        h = u + (xd[t] - (u - u_r)) / dtype.type(tau)
        v = h - dtype.type(u_th)
        s = np.asarray(surrogate(v, width), dtype=dtype) if smooth else (v >= 0).astype(dtype)
        u = h * (1 - s) + u_r * s
        hs[t], ss[t], us[t] = h, s, u
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite membrane potential")

    def backward(g):
        gx = np.empty_like(g)
        gu = np.zeros(g.shape[1:], dtype=dtype)
        decay = dtype.type(1 - 1 / tau)
        for t in range(steps - 1, -1, -1):
            h, s = hs[t], ss[t]
            sg = np.asarray(_sg(h - u_th, width), dtype=dtype)
            gh = g[t] * sg + gu * ((1 - s) + (u_r - h) * sg)
            gx[t] = gh / dtype.type(tau)
            gu = gh * decay
        return (gx,)

    out = _result(ss, (x,), backward, spike=not smooth)
    if return_membrane:
        return out, us
    return out


def is_spike(arr):
    a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    return bool(np.all((a == 0) | (a == 1)))


def first_spike_time(x_seq, params: LifParams = LifParams()):
    """Index of the first spike per neuron (``T`` where it never fires)."""
    s = lif_sequence(Tensor(np.asarray(x_seq, dtype=np.float64)), params).data
    fired = s > 0
    return np.where(fired.any(axis=0), fired.argmax(axis=0), s.shape[0])

