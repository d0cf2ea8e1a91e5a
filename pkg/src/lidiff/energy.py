"""Theoretical energy model: FLOP counting, firing-rate capture and SOP energy.

Layers report themselves to the active :class:`Profiler` while it is open;
the recorded profiles feed :func:`estimate_energy`::

    SOP_i = firing_rate_i * T * FLOPs_i
    E_snn = E_AC * sum(SOP_i over spike-driven layers) + E_MAC * FLOPs(first conv)

Real-valued layers other than the first convolution (the feedback prompt
products) are charged at MAC cost once per time step.
"""

from __future__ import annotations

import contextlib
import csv
import io
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad

E_MAC_PJ = 4.6
E_AC_PJ = 0.9

SPIKE_KINDS = ("conv", "linear", "attention-ff", "attention-fb")
MAC_KINDS = ("conv-first", "feedback")
KINDS = SPIKE_KINDS + MAC_KINDS

_local = threading.local()


@dataclass
class LayerProfile:
    name: str
    kind: str
    flops: float
    firing_rate: float
    T: int = 1
    stage: int = 0
    phase: str = "pass1"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.firing_rate < 0:
            raise ValueError("firing rate must be non-negative")

    @property
    def sops(self):
        return self.firing_rate * self.T * self.flops

    @property
    def energy_pj(self):
        if self.kind == "conv-first":
            return E_MAC_PJ * self.flops
        if self.kind == "feedback":
            return E_MAC_PJ * self.flops * self.T
        return E_AC_PJ * self.sops


@dataclass
class EnergyReport:
    profiles: list
    T: int
    e_mac: float = E_MAC_PJ
    e_ac: float = E_AC_PJ
    snn_pj: float = 0.0
    ann_pj: float = 0.0
    pass1_pj: float = 0.0
    pass2_pj: float = 0.0
    sops: float = 0.0

    @property
    def total_mj(self):
        return self.snn_pj * 1e-9

    @property
    def ann_mj(self):
        return self.ann_pj * 1e-9

    def to_csv(self, unit="mJ"):
        scale = _unit_scale(unit)
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["layer", "kind", "stage", "phase", "flops", "firing_rate", "T", "sops", f"energy_{unit}"])
        for p in self.profiles:
            w.writerow([p.name, p.kind, p.stage, p.phase, p.flops, f"{p.firing_rate:.6g}", p.T, f"{p.sops:.6g}",
                        f"{p.energy_pj * scale:.6g}"])
        w.writerow(["TOTAL_SNN", "", "", "", "", "", self.T, f"{self.sops:.6g}", f"{self.snn_pj * scale:.6g}"])
        w.writerow(["TOTAL_ANN", "", "", "", "", "", 1, "", f"{self.ann_pj * scale:.6g}"])
        return buf.getvalue()

    def table(self, unit="mJ"):
        scale = _unit_scale(unit)
        rows = [f"{'layer':<36} {'kind':<13} {'phase':<6} {'FLOPs':>12} {'rate':>7} {'SOPs':>12} {unit:>10}"]
        for p in self.profiles:
            rows.append(f"{p.name:<36} {p.kind:<13} {p.phase:<6} {p.flops:>12.0f} {p.firing_rate:>7.4f} "
                        f"{p.sops:>12.0f} {p.energy_pj * scale:>10.4g}")
        rows.append(f"pass 1: {self.pass1_pj * scale:.4g} {unit}   pass 2: {self.pass2_pj * scale:.4g} {unit}")
        rows.append(f"SNN total: {self.snn_pj * scale:.4g} {unit}   ANN equivalent: {self.ann_pj * scale:.4g} {unit}")
        return "\n".join(rows)


def _unit_scale(unit):
    scales = {"pJ": 1.0, "uJ": 1e-6, "µJ": 1e-6, "mJ": 1e-9}
    if unit not in scales:
        raise ValueError(f"unit must be one of {sorted(scales)}")
    return scales[unit]


def count_flops(kind, projections=False, **dims):
    """Multiply-accumulate count of one layer for one sample and one time step.

    conv / conv-first: k, c_in, c_out, h_out, w_out
    linear: n, d_in, d_out
    attention-fb: n, d, heads -- K^T V and Q G products (+ q/k/v/out projections)
    attention-ff: n, d -- token mask products (+ q/k projections)
    feedback: n, d -- two prompt products, two clamps, and the 1 x d lift
    """
    if kind in ("conv", "conv-first"):
        return dims["k"] ** 2 * dims["c_in"] * dims["c_out"] * dims["h_out"] * dims["w_out"]
    if kind == "linear":
        return dims["n"] * dims["d_in"] * dims["d_out"]
    if kind == "attention-fb":
        n, d, heads = dims["n"], dims["d"], dims.get("heads", 1)
        core = 2 * n * d * (d // heads)
        return core + (4 * n * d * d if projections else 0)
    if kind == "attention-ff":
        n, d = dims["n"], dims["d"]
        return n * d + (2 * n * d * d if projections else 0)
    if kind == "feedback":
        n, d = dims["n"], dims["d"]
        return 2 * n * d + 2 * n + n * d
    raise ValueError(f"unknown layer kind {kind!r}")


# -- recording -------------------------------------------------------------
@dataclass
class _Acc:
    kind: str
    stage: int
    flops: float
    total: float = 0.0
    count: float = 0.0
    calls: int = 0


@dataclass
class Profiler:
    """Collects per-layer FLOPs and input spike statistics during forward passes."""

    entries: dict = field(default_factory=dict)
    stage: int = 0
    phase: str = "pass1"

    def record(self, name, kind, flops, inputs=None, rate=None):
        key = (name, self.phase)
        acc = self.entries.get(key)
        if acc is None:
            acc = self.entries[key] = _Acc(kind, self.stage, flops)
        if inputs is not None:
            a = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs)
            acc.total += float(np.sum(a, dtype=np.float64))
            acc.count += a.size
        elif rate is not None:
            acc.total += rate
            acc.count += 1
        acc.calls += 1

    def flops_where(self, phase=None, stages=None):
        """Total FLOPs executed (per sample-step, summed over calls) matching the filters."""
        out = 0.0
        for (_, ph), acc in self.entries.items():
            if phase is not None and ph != phase:
                continue
            if stages is not None and acc.stage not in stages:
                continue
            out += acc.flops * acc.calls
        return out

    def profiles(self, T):
        out = []
        for (name, phase), acc in self.entries.items():
            rate = acc.total / acc.count if acc.count else 0.0
            out.append(LayerProfile(name, acc.kind, acc.flops, rate, T, acc.stage, phase))
        return out


def active_profiler():
    return getattr(_local, "profiler", None)


@contextlib.contextmanager
def profiling():
    prof = Profiler()
    prev = active_profiler()
    _local.profiler = prof
    try:
        yield prof
    finally:
        _local.profiler = prev


@contextlib.contextmanager
def tagged(stage=None, phase=None):
    """Attribute records inside the block to a stage and/or propagation phase."""
    prof = active_profiler()
    if prof is None:
        yield
        return
    old = prof.stage, prof.phase
    if stage is not None:
        prof.stage = stage
    if phase is not None:
        prof.phase = phase
    try:
        yield
    finally:
        prof.stage, prof.phase = old


def record(name, kind, flops, inputs=None, rate=None):
    prof = active_profiler()
    if prof is not None:
        prof.record(name, kind, flops, inputs, rate)


def record_firing_rates(model, x, T=None):
    """Run an instrumented inference forward and return the per-layer profiles."""
    if T is None:
        T = model.cfg.T
    with profiling() as prof, no_grad():
        if hasattr(model, "infer"):
            model.infer(x)
        else:
            model(x)
    return prof.profiles(T)


def estimate_energy(profiles, T=None):
    profiles = list(profiles)
    if not any(p.kind == "conv-first" for p in profiles):
        raise ValueError("energy estimate needs the first (real-valued input) convolution profile")
    if T is None:
        T = profiles[0].T
    parts = [p.energy_pj for p in profiles]
    report = EnergyReport(profiles, T)
    report.snn_pj = math.fsum(parts)
    report.pass1_pj = math.fsum(e for e, p in zip(parts, profiles) if p.phase == "pass1")
    report.pass2_pj = math.fsum(e for e, p in zip(parts, profiles) if p.phase == "pass2")
    report.sops = math.fsum(p.sops for p in profiles if p.kind in SPIKE_KINDS)
    report.ann_pj = E_MAC_PJ * math.fsum(p.flops for p in profiles)
    return report
