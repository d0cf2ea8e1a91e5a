"""Lateral-inhibition attention for spiking transformers.

Activations are laid out (T, B, N, D): time, batch, tokens, channels.

* :class:`FFLiDiffAttention` -- channel-split query; the excitatory half's
  token score minus the inhibitory half's score is spiked into a token mask
  that gates the key spikes.
* :class:`FBLiDiffAttention` -- spike-driven linear attention Q (K^T V) run
  twice; on the second run a feedback spike map derived from the last
  block's first-run output is injected into the value path.
* :class:`FeedbackPrompts` -- the excitatory/inhibitory prompt vectors that
  filter that feedback.

Heads split the channels into equal groups that are processed independently.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import energy
from .neuron import LifParams, is_spike
from .nn import LIF, BatchNorm, Module, SpikeLinear, kaiming_uniform
from .tensor import Tensor, clamp01_ste, get_default_dtype, matmul, reduce_sum, swap_last

_local = threading.local()


@contextlib.contextmanager
def record_maps():
    """Collect attention maps emitted by blocks into the yielded dict (name -> array)."""
    prev = getattr(_local, "maps", None)
    maps = {}
    _local.maps = maps
    try:
        yield maps
    finally:
        _local.maps = prev


def _emit(name, tensor):
    maps = getattr(_local, "maps", None)
    if maps is not None:
        maps[name] = np.array(tensor.data, dtype=np.float32)


def _check_spikes(x, what):
    # residual streams carry sums of spike maps, so non-negative integer counts are accepted
    a = x.data
    if not (is_spike(a) or (np.all(a >= 0) and np.all(a == np.round(a)))):
        raise ValueError(f"{what} must be spike-valued (0/1 or spike counts) in strict mode")


def _split_heads(x, heads):
    # (T, B, N, D) -> (T, B, N, H, D/H)
    return x.reshape(x.shape[:-1] + (heads, x.shape[-1] // heads))


def _merge_heads(x):
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def lateral_mask(q_s1, q_s2, sn):
    """Token mask SN(sum_j Q_s1 - sum_j Q_s2); q_s1/q_s2 share all but the last axis."""
    a_e = reduce_sum(q_s1, -1)
    a_i = reduce_sum(q_s2, -1)
    return sn(a_e - a_i), a_e, a_i


class FFLiDiffAttention(Module):
    def __init__(self, d, rng, heads=1, lif=LifParams(), summed_query=False, strict=False):
        if d % heads or (d // heads) % 2:
            raise ValueError(f"channel width {d} must split into {heads} heads of even width")
        self.d, self.heads = d, heads
        self.q = SpikeLinear(d, d, rng, lif)
        self.k = SpikeLinear(d, d, rng, lif)
        # one LIF per query half; the layers are stateless between calls
        self.sn_q1 = LIF(lif)
        self.sn_q2 = LIF(lif)
        self.sn_attn = LIF(lif)
        self.summed_query = summed_query
        self.strict = strict

    def forward(self, x, inhibit=True):
        """X' = SN(A_e - A_i) * K_s with the (N x 1) mask broadcast over channels.

        ``inhibit=False`` forces the inhibitory spikes to zero (test hook).
        With ``summed_query`` (the no-FF ablation) the mask is SN(sum over all
        query spikes) instead.
        """
        if self.strict:
            _check_spikes(x, "FF-LiDiff input")
        q = self.q.bn(self.q.fc(x))
        k_s = self.k(x)
        qh = _split_heads(q, self.heads)
        kh = _split_heads(k_s, self.heads)
        half = qh.shape[-1] // 2
        if self.summed_query:
            q_s = self.sn_q1(qh)
            mask = self.sn_attn(reduce_sum(q_s, -1))
        else:
            q_s1 = self.sn_q1(qh[..., :half])
            q_s2 = self.sn_q2(qh[..., half:])
            if not inhibit:
                q_s2 = q_s2 * 0.0
            mask, _, _ = lateral_mask(q_s1, q_s2, self.sn_attn)
        n_tok = x.shape[2]
        energy.record(self.name + ".mask", "attention-ff", n_tok * self.d, inputs=mask)
        _emit(self.name + ".a_combined", mask)
        return _merge_heads(kh * mask)


def ff_lidiff_forward(x, params: FFLiDiffAttention, inhibit=True):
    return params(x, inhibit=inhibit)


def sdsa_core(q_s, k_s, v_s, heads=1, name=""):
    """Attn = Q_s (K_s^T V_s) per head; no softmax and no scaling."""
    if not (q_s.shape == k_s.shape == v_s.shape):
        raise ValueError(f"q/k/v shape mismatch: {q_s.shape}, {k_s.shape}, {v_s.shape}")
    lead, n, d = q_s.shape[:-2], q_s.shape[-2], q_s.shape[-1]
    if d % heads:
        raise ValueError(f"{d} channels do not split into {heads} heads")
    dh = d // heads

    def heads_first(t):
        # (..., N, D) -> (..., H, N, dh)
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return t.reshape(lead + (n, heads, dh)).transpose(*axes)

    qh, kh, vh = heads_first(q_s), heads_first(k_s), heads_first(v_s)
    g = matmul(swap_last(kh), vh)
    attn = matmul(qh, g)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    out = attn.transpose(*axes).reshape(lead + (n, d))
    energy.record(name + ".kv", "attention-fb", n * d * dh, inputs=k_s)
    energy.record(name + ".qg", "attention-fb", n * d * dh, inputs=q_s)
    return out


class FeedbackPrompts(Module):
    """Learnable (1 x D) excitatory and inhibitory prompts."""

    def __init__(self, d, rng, tied=False):
        dtype = get_default_dtype()
        self.w_p1 = Tensor(rng.uniform(0.0, 0.1, size=(1, d)).astype(dtype), requires_grad=True)
        p2 = self.w_p1.data.copy() if tied else rng.uniform(0.0, 0.1, size=(1, d)).astype(dtype)
        self.w_p2 = Tensor(p2, requires_grad=True)


class FBLiDiffAttention(Module):
    def __init__(self, d, rng, fb_rng=None, heads=1, lif=LifParams(), feedback=True, strict=False):
        self.d, self.heads = d, heads
        self.q = SpikeLinear(d, d, rng, lif)
        self.k = SpikeLinear(d, d, rng, lif)
        self.v = SpikeLinear(d, d, rng, lif)
        self.proj = SpikeLinear(d, d, rng, lif)
        self.strict = strict
        self.has_feedback = feedback
        if feedback:
            fb_rng = fb_rng if fb_rng is not None else rng
            self.w_fb = kaiming_uniform(fb_rng, (1, d), 1)
            self.bn_fb = BatchNorm(d, always_track=True)
            self.sn_fb = LIF(lif)

    def _attend(self, q_s, k_s, v_s):
        attn = sdsa_core(q_s, k_s, v_s, self.heads, self.name)
        return self.proj(attn)

    def first_pass(self, x):
        if self.strict:
            _check_spikes(x, "FB-LiDiff input")
        return self._attend(self.q(x), self.k(x), self.v(x))

    forward = first_pass

    def feedback(self, o_last, prompts: FeedbackPrompts):
        """X_FB = SN(BN((clamp(O w_p1^T) - clamp(O w_p2^T)) w_fb)) -- shape of ``o_last``."""
        if not self.has_feedback:
            raise RuntimeError("this block was built without a feedback path")
        d = o_last.shape[-1]
        if prompts.w_p1.shape != (1, d) or prompts.w_p2.shape != (1, d):
            raise ValueError(f"prompt shape {prompts.w_p1.shape} does not match channel width {d}")
        a_e = clamp01_ste(matmul(o_last, swap_last(prompts.w_p1)))
        a_i = clamp01_ste(matmul(o_last, swap_last(prompts.w_p2)))
        a_comb = a_e - a_i
        x_fb = self.sn_fb(self.bn_fb(matmul(a_comb, self.w_fb)))
        energy.record(self.name + ".feedback", "feedback", 2 * o_last.shape[2] * d + 2 * o_last.shape[2]
                      + o_last.shape[2] * d, inputs=o_last)
        _emit(self.name + ".a_e_fb", a_e)
        _emit(self.name + ".a_i_fb", a_i)
        _emit(self.name + ".a_combined_fb", a_comb)
        return x_fb

    def second_pass(self, x2, x_fb):
        if x2.shape != x_fb.shape:
            raise ValueError(f"second-pass input {x2.shape} and feedback {x_fb.shape} differ in shape")
        if self.strict:
            _check_spikes(x2, "FB-LiDiff input")
            _check_spikes(x_fb, "feedback input")
        v_in = self.v.fc(x2) + self.v.fc(x_fb)
        v_s = self.v.sn(self.v.bn(v_in))
        return self._attend(self.q(x2), self.k(x2), v_s)


def sdsa_forward(q_s, k_s, v_s, proj: SpikeLinear, heads=1):
    """Plain spike-driven self-attention on given spike q/k/v: SN(BN(Q(K^T V) W_attn))."""
    return proj(sdsa_core(q_s, k_s, v_s, heads, proj.name))


def fb_first_pass(x, params: FBLiDiffAttention):
    return params.first_pass(x)


def compute_feedback(o_last, prompts: FeedbackPrompts, params: FBLiDiffAttention):
    return params.feedback(o_last, prompts)


def fb_second_pass(x2, x_fb, params: FBLiDiffAttention):
    return params.second_pass(x2, x_fb)
