"""Layers built on the tensor tape: Linear, Conv2d, BatchNorm, LIF."""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import energy
from .neuron import LifParams, lif_sequence
from .tensor import Tensor, batchnorm, conv2d, get_default_dtype, matmul

_local = threading.local()


@contextlib.contextmanager
def frozen_bn_stats():
    """BatchNorm layers keep their running statistics unchanged inside this block
    unless they were built with ``always_track=True``."""
    prev = getattr(_local, "freeze", False)
    _local.freeze = True
    try:
        yield
    finally:
        _local.freeze = prev


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()), requires_grad=True)


class Module:
    training = True
    name = ""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        def walk(key, val):
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    yield from walk(f"{key}.{i}", item)

        for key, val in vars(self).items():
            yield from walk(key, val)

    def named_modules(self, prefix=""):
        seen = set()
        stack = [(prefix, self)]
        while stack:
            name, mod = stack.pop(0)
            if id(mod) in seen:
                continue
            seen.add(id(mod))
            yield name, mod
            for key, child in mod._children():
                stack.append((f"{name}.{key}" if name else key, child))

    def named_parameters(self):
        seen = set()
        for mname, mod in self.named_modules():
            for key, val in vars(mod).items():
                if isinstance(val, Tensor) and val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    yield (f"{mname}.{key}" if mname else key), val

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for mname, mod in self.named_modules():
            for key in getattr(mod, "_buffers", ()):
                yield f"{mname}.{key}" if mname else key, getattr(mod, key)

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, b in buffers.items():
            b[...] = state[name]

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, mod in self.named_modules():
            for key in getattr(mod, "_buffers", ()):
                setattr(mod, key, getattr(mod, key).astype(dtype))
        return self

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def assign_names(self):
        for name, m in self.named_modules():
            m.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _tokens_per_sample(shape):
    # activations are laid out (T, B, *tokens, D)
    return int(np.prod(shape[2:-1])) if len(shape) > 3 else 1


class Linear(Module):
    """y = x W (+ b) on the last axis; W stored as (d_in, d_out)."""

    def __init__(self, d_in, d_out, rng, bias=False, kind="linear"):
        self.d_in, self.d_out = d_in, d_out
        self.weight = kaiming_uniform(rng, (d_in, d_out), d_in)
        self.bias = Tensor(np.zeros(d_out, dtype=get_default_dtype()), requires_grad=True) if bias else None
        self.kind = kind

    def forward(self, x):
        energy.record(self.name, self.kind, _tokens_per_sample(x.shape) * self.d_in * self.d_out, inputs=x)
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    """Channels-last convolution over (T, B, H, W, C) or (B, H, W, C) inputs."""

    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0, first=False):
        self.c_in, self.c_out, self.k, self.stride, self.padding = c_in, c_out, k, stride, padding
        self.weight = kaiming_uniform(rng, (k, k, c_in, c_out), k * k * c_in)
        self.kind = "conv-first" if first else "conv"

    def forward(self, x):
        lead = x.shape[:-3]
        flat = x.reshape((-1,) + x.shape[-3:]) if len(lead) != 1 else x
        y = conv2d(flat, self.weight, self.stride, self.padding)
        ho, wo = y.shape[1:3]
        energy.record(self.name, self.kind, self.k * self.k * self.c_in * self.c_out * ho * wo, inputs=x)
        return y.reshape(lead + y.shape[1:]) if len(lead) != 1 else y


class BatchNorm(Module):
    """Per-channel batch norm over every leading axis (time, batch and tokens pooled)."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, d, momentum=0.1, eps=1e-5, always_track=False):
        dtype = get_default_dtype()
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(d, dtype=dtype)
        self.running_var = np.ones(d, dtype=dtype)
        self.momentum, self.eps = momentum, eps
        self.always_track = always_track

    def forward(self, x):
        update = self.always_track or not getattr(_local, "freeze", False)
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps, update_stats=update)


class LIF(Module):
    """Multi-step LIF layer; axis 0 of the input is time and state starts fresh per call."""

    def __init__(self, params: LifParams = LifParams()):
        self.params = params

    def forward(self, x):
        return lif_sequence(x, self.params)


class SpikeLinear(Module):
    """SN(BN(x W)) -- the projection unit used throughout the blocks."""

    def __init__(self, d_in, d_out, rng, lif=LifParams(), always_track=False, kind="linear"):
        self.fc = Linear(d_in, d_out, rng, kind=kind)
        self.bn = BatchNorm(d_out, always_track=always_track)
        self.sn = LIF(lif)

    def forward(self, x):
        return self.sn(self.bn(self.fc(x)))
