"""Three-stage lateral-inhibition spiking transformer with a two-pass Stage 3.

Stage s: downsample (conv3x3 + BN + SN, then patch conv + BN + SN), then N_s
blocks of attention + SpMLP with shortcut sums. Stages 1-2 use FF-LiDiff
attention; Stage 3 uses FB-LiDiff attention, whose second propagation starts
from the cached Stage-3 downsample output and never re-runs Stages 1-2.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import energy, ltf
from .attention import FBLiDiffAttention, FeedbackPrompts, FFLiDiffAttention
from .neuron import LifParams
from .nn import LIF, BatchNorm, Conv2d, Linear, Module, SpikeLinear, frozen_bn_stats
from .tensor import Tensor, as_tensor, cross_entropy, mean, no_grad, stack


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    T: int = 4
    in_channels: int = 3
    img_size: int = 32
    num_classes: int = 10
    base_channels: int = 64
    stage_depths: tuple = (1, 1, 2)
    patch_sizes: tuple = (4, 2, 2)
    heads: tuple = ()
    mlp_ratio: int = 4
    tau: float = 2.0
    u_th: float = 1.0
    u_reset: float = 0.0
    surrogate_width: float = 2.0
    no_ff_lidiff: bool = False
    no_fb_lidiff: bool = False
    cross_block_sharing: bool = False
    freeze_prompts: bool = False
    residual: str = "membrane"
    strict: bool = False
    alpha: float = 0.5

    def __post_init__(self):
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.patch_sizes = tuple(int(v) for v in self.patch_sizes)
        if not self.heads:
            self.heads = tuple(8 if w >= 256 else 1 for w in self.widths)
        self.heads = tuple(int(v) for v in self.heads)
        self.validate()

    @property
    def widths(self):
        c = self.base_channels
        return (c, 2 * c, 4 * c)

    @property
    def lif(self):
        return LifParams(self.tau, self.u_th, self.u_reset, self.surrogate_width)

    @property
    def has_feedback(self):
        return not self.no_fb_lidiff and self.stage_depths[2] > 0

    def grids(self, h=None, w=None):
        """Token grid (rows, cols) after each stage."""
        h = h or self.img_size
        w = w or self.img_size
        out = []
        for p in self.patch_sizes:
            h, w = h // p, w // p
            out.append((h, w))
        return out

    def validate(self):
        if len(self.stage_depths) != 3 or len(self.patch_sizes) != 3 or len(self.heads) != 3:
            raise ConfigError("stage_depths, patch_sizes and heads need exactly three entries")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if min(self.stage_depths) < 0:
            raise ConfigError("stage depths must be non-negative")
        if self.stage_depths[2] < 1 and not self.no_fb_lidiff:
            raise ConfigError("Stage 3 needs at least one block unless no_fb_lidiff is set")
        total = int(np.prod(self.patch_sizes))
        if self.img_size % total:
            raise ConfigError(f"img_size {self.img_size} must be divisible by {total}")
        for w, h in zip(self.widths, self.heads):
            if w % h or (w // h) % 2:
                raise ConfigError(f"width {w} does not split into {h} heads of even width")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.residual not in ("membrane", "spike"):
            raise ConfigError("residual must be 'membrane' or 'spike'")

    # -- key=value round trip ---------------------------------------------
    def to_kv(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_kv(cls, kv, base=None):
        base = base or cls()
        values = dataclasses.asdict(base)
        for key, raw in kv.items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(cls.keys())}")
            values[key] = coerce(raw, type(values[key]), key)
        return cls(**values)


def coerce(raw, kind, key="value"):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {kind.__name__}") from None


def parse_kv(text):
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


# -- building blocks ---------------------------------------------------------
class Downsample(Module):
    def __init__(self, c_in, c_out, patch, rng, lif, first=False):
        self.first = first
        self.sn_in = None if first else LIF(lif)
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=1, padding=1, first=first)
        self.bn = BatchNorm(c_out)
        self.sn = LIF(lif)
        self.patch = Conv2d(c_out, c_out, patch, rng, stride=patch)
        self.bn_patch = BatchNorm(c_out)
        self.sn_patch = LIF(lif)
        self.patch_size = patch

    def forward(self, x):
        """(T, B, H, W, C) -> (T, B, H/p, W/p, C_out) spikes."""
        h, w = x.shape[2:4]
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"spatial size {h}x{w} not divisible by patch size {self.patch_size}")
        y = self.sn(self.bn(self.conv(x)))
        return self.sn_patch(self.bn_patch(self.patch(y)))


class SpMLP(Module):
    def __init__(self, d, ratio, rng, lif):
        self.hidden = ratio * d
        self.fc1 = SpikeLinear(d, self.hidden, rng, lif)
        self.fc2 = SpikeLinear(self.hidden, d, rng, lif)

    def forward(self, x):
        return self.fc2(self.fc1(x))


def spmlp(x, mlp: SpMLP):
    return mlp(x)


class Block(Module):
    """Attention + SpMLP with shortcut sums around both."""

    def __init__(self, attn, mlp, residual, lif):
        self.attn = attn
        self.mlp = mlp
        self.residual = residual
        if residual == "spike":
            self.sn_attn_out = LIF(lif)
            self.sn_mlp_out = LIF(lif)

    def _add(self, x, y, sn_name):
        if self.residual == "membrane":
            return x + y
        return getattr(self, sn_name)(x + y)

    def forward(self, x):
        x = self._add(x, self.attn(x), "sn_attn_out")
        return self._add(x, self.mlp(x), "sn_mlp_out")

    def first_pass(self, x):
        o = self.attn.first_pass(x)
        r = self._add(x, o, "sn_attn_out")
        return self._add(r, self.mlp(r), "sn_mlp_out"), o

    def second_pass(self, x, x_fb):
        o = self.attn.second_pass(x, x_fb)
        r = self._add(x, o, "sn_attn_out")
        return self._add(r, self.mlp(r), "sn_mlp_out"), o


class ClassifierHead(Module):
    """SN, mean over tokens and time, then a linear readout."""

    def __init__(self, d, num_classes, rng, lif):
        self.sn = LIF(lif)
        self.fc = Linear(d, num_classes, rng, bias=True)
        self.fc.bias.data[:] = 0

    def forward(self, x):
        s = self.sn(x)
        energy.record(self.fc.name, "linear", self.fc.d_in * self.fc.d_out, inputs=s)
        pooled = mean(mean(s, axis=2), axis=0)
        return pooled @ self.fc.weight + self.fc.bias


@dataclass
class Pass1Cache:
    s_ds: Tensor
    o_last: Tensor
    grid: tuple = field(default=())


class SpiLiFormer(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        # feedback-only parameters draw from their own stream so that the shared
        # weights are identical with and without the feedback path
        fb_rng = np.random.default_rng([seed, 1])
        lif = cfg.lif
        widths = cfg.widths
        c_prev = cfg.in_channels
        self.downsample = []
        self.stages = []
        for s in range(3):
            self.downsample.append(Downsample(c_prev, widths[s], cfg.patch_sizes[s], rng, lif, first=(s == 0)))
            blocks = []
            shared_attn = None
            for _ in range(cfg.stage_depths[s]):
                if s < 2:
                    attn = FFLiDiffAttention(widths[s], rng, cfg.heads[s], lif, summed_query=cfg.no_ff_lidiff,
                                             strict=cfg.strict)
                elif cfg.cross_block_sharing and shared_attn is not None:
                    attn = shared_attn
                else:
                    attn = shared_attn = FBLiDiffAttention(widths[s], rng, fb_rng, cfg.heads[s], lif,
                                                           feedback=cfg.has_feedback, strict=cfg.strict)
                blocks.append(Block(attn, SpMLP(widths[s], cfg.mlp_ratio, rng, lif), cfg.residual, lif))
            self.stages.append(blocks)
            c_prev = widths[s]
        self.head = ClassifierHead(widths[2], cfg.num_classes, rng, lif)
        if cfg.has_feedback:
            self.prompts = FeedbackPrompts(widths[2], fb_rng, tied=cfg.freeze_prompts)
        self.assign_names()

    def trainable_parameters(self):
        frozen = set()
        if self.cfg.has_feedback and self.cfg.freeze_prompts:
            frozen = {id(self.prompts.w_p1), id(self.prompts.w_p2)}
        return [(n, p) for n, p in self.named_parameters() if id(p) not in frozen]

    # -- input -----------------------------------------------------------
    def encode_input(self, x):
        """(B, C, H, W) static images (repeated over T) or (B, T, C, H, W) frames -> (T, B, H, W, C)."""
        x = as_tensor(x)
        if x.ndim == 4:
            img = x.transpose(0, 2, 3, 1)
            return stack([img] * self.cfg.T, axis=0)
        if x.ndim == 5:
            if x.shape[1] != self.cfg.T:
                raise ValueError(f"input has {x.shape[1]} time steps, model expects {self.cfg.T}")
            return x.transpose(1, 0, 3, 4, 2)
        raise ValueError(f"expected a 4-d or 5-d input batch, got shape {x.shape}")

    # -- propagation -----------------------------------------------------
    def _stage(self, s, stream):
        """Downsample then run the FF blocks of stage ``s`` (0 or 1); returns the token stream."""
        y = self.downsample[s](stream)
        t, b, h, w, c = y.shape
        r = y.reshape(t, b, h * w, c)
        for blk in self.stages[s]:
            r = blk(r)
        return r, (h, w)

    def _to_grid(self, r, grid):
        t, b, _, c = r.shape
        return r.reshape(t, b, grid[0], grid[1], c)

    def forward_pass1(self, x):
        """Returns (logits_1, cache); the cache is None without a feedback path."""
        inp = self.encode_input(x)
        with energy.tagged(stage=1, phase="pass1"):
            r, grid = self._stage(0, inp)
        with energy.tagged(stage=2):
            r, grid = self._stage(1, self._to_grid(r, grid))
        with energy.tagged(stage=3):
            y = self.downsample[2](self._to_grid(r, grid))
            t, b, h, w, c = y.shape
            s_ds = y.reshape(t, b, h * w, c)
            r, o = s_ds, None
            for blk in self.stages[2]:
                r, o = blk.first_pass(r)
            logits = self.head(r)
        cache = Pass1Cache(s_ds, o, (h, w)) if self.cfg.has_feedback else None
        return logits, cache

    def forward_pass2(self, cache):
        if not self.cfg.has_feedback:
            raise RuntimeError("model has no feedback path; there is no second propagation")
        if cache is None:
            raise RuntimeError("forward_pass2 needs the cache returned by forward_pass1")
        with energy.tagged(stage=3, phase="pass2"), frozen_bn_stats():
            r = cache.s_ds
            for blk in self.stages[2]:
                x_fb = blk.attn.feedback(cache.o_last, self.prompts)
                r, _ = blk.second_pass(r, x_fb)
            return self.head(r)

    def forward(self, x):
        logits1, cache = self.forward_pass1(x)
        logits2 = self.forward_pass2(cache) if cache is not None else None
        return logits1, logits2

    def infer(self, x):
        """Deployed prediction logits: second pass when present, else first."""
        logits1, logits2 = self.forward(x)
        return logits2 if logits2 is not None else logits1

    def predict(self, x):
        with no_grad():
            return np.argmax(self.infer(x).data, axis=1)

    def loss(self, x, y, alpha=None):
        """Returns (total, loss_1, loss_2 or None)."""
        alpha = self.cfg.alpha if alpha is None else alpha
        logits1, logits2 = self.forward(x)
        if logits2 is None:
            l1 = cross_entropy(logits1, y)
            return l1, l1, None
        total, l1, l2 = dual_loss(logits1, logits2, y, alpha, parts=True)
        return total, l1, l2


def dual_loss(logits1, logits2, y, alpha=0.5, parts=False):
    """alpha * CE(logits_1, y) + (1 - alpha) * CE(logits_2, y)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    l1 = cross_entropy(logits1, y)
    l2 = cross_entropy(logits2, y)
    total = l1 * alpha + l2 * (1.0 - alpha)
    return (total, l1, l2) if parts else total


def downsample(x, model: SpiLiFormer, stage):
    """Run the downsampling module of ``stage`` (1-based) on a (T, B, H, W, C) input."""
    return model.downsample[stage - 1](as_tensor(x))


# -- checkpoints ---------------------------------------------------------------
MANIFEST = "manifest.txt"


def save_checkpoint(model: SpiLiFormer, directory, extra=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"config.{k}={v}" for k, v in model.cfg.to_kv().items()]
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k}={v}")
    for name, arr in model.state_dict().items():
        blob = ltf.dumps(arr)
        (d / f"{name}.ltf").write_bytes(blob)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"tensor.{name}={shape}:{hashlib.sha256(blob).hexdigest()}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(directory):
    kv = parse_kv((Path(directory) / MANIFEST).read_text())
    config = {k[7:]: v for k, v in kv.items() if k.startswith("config.")}
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    tensors = {k[7:]: v for k, v in kv.items() if k.startswith("tensor.")}
    return config, meta, tensors


def load_checkpoint(directory, seed=0):
    d = Path(directory)
    config, meta, tensors = read_manifest(d)
    cfg = ModelConfig.from_kv(config)
    model = SpiLiFormer(cfg, seed=seed)
    state = {}
    for name, entry in tensors.items():
        digest = entry.split(":", 1)[1]
        blob = (d / f"{name}.ltf").read_bytes()
        if hashlib.sha256(blob).hexdigest() != digest:
            raise ValueError(f"checkpoint tensor {name} does not match its manifest hash")
        state[name] = ltf.loads(blob)
    model.load_state_dict(state)
    return model, meta


# -- whole-model gradient check --------------------------------------------------
def tiny_config(**overrides):
    """T=2, 8x8 single-channel input, C=8, one block per stage."""
    base = dict(T=2, in_channels=1, img_size=8, num_classes=3, base_channels=8, stage_depths=(1, 1, 1),
                patch_sizes=(2, 2, 2), mlp_ratio=2)
    base.update(overrides)
    return ModelConfig(**base)


def model_grad_check(cfg=None, seed=7, elements=64, eps=1e-5, batch=4, floor=1e-6):
    """Tape gradients of the dual loss vs central differences, in float64 with smooth spikes.

    Returns a GradCheckReport over ``elements`` randomly sampled parameter entries.
    """
    from .neuron import smooth_spikes
    from .tensor import default_dtype, grad_check

    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64), smooth_spikes():
        model = SpiLiFormer(cfg, seed=seed)
        model.train()
        x = rng.uniform(0, 1, size=(batch, cfg.in_channels, cfg.img_size, cfg.img_size))
        y = rng.integers(0, cfg.num_classes, size=batch)
        named = model.trainable_parameters()

        def objective():
            return model.loss(x, y)[0]

        return grad_check(objective, [p for _, p in named], eps=eps, tol=1e-2, max_elements=elements,
                          rng=rng, floor=floor, names=[n for n, _ in named])
