"""Differentiable building blocks shared by converter, inverter and translator.

Everything here is a thin layer over ``torch.nn``; autograd supplies the
reverse-mode gradients and :func:`gradient_check` verifies them against
central finite differences.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclasses.dataclass
class BlockConfig:
    hidden_size: int = 256
    ffn_size: int = 1024
    num_blocks: int = 6
    num_heads: int = 4
    conv_kernel: int = 3
    conv_stride: int = 2
    conv_filters: int = 256
    num_conv_layers: int = 2
    dropout: float = 0.1

    @property
    def ratio(self) -> int:
        """Down/up-sampling ratio c."""
        return self.conv_stride ** self.num_conv_layers

    def validate(self):
        for name in ("hidden_size", "ffn_size", "num_blocks", "num_heads",
                     "conv_kernel", "conv_stride", "conv_filters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_conv_layers < 0:
            raise ValueError("num_conv_layers must be >= 0")
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        return self


def downsampled_length(length: int, ratio: int) -> int:
    return -(-length // ratio)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * inv)
    table[:, 1::2] = torch.cos(pos * inv[: dim // 2])
    return table.to(dtype)


def padding_mask(lengths, max_len: int) -> torch.Tensor:
    """Boolean (B, max_len) mask, True at padded positions."""
    lengths = torch.as_tensor(lengths)
    return torch.arange(max_len)[None, :] >= lengths[:, None]


class ConvDownsample(nn.Module):
    """Strided 1-D convolutions shortening a sequence by ``c = stride ** layers``.

    Input ``(B, l, in_dim)``, output ``(B, ceil(l / c), hidden_size)``.
    """

    def __init__(self, in_dim: int, cfg: BlockConfig):
        super().__init__()
        self.ratio = cfg.ratio
        self.convs = nn.ModuleList()
        width = in_dim
        for _ in range(cfg.num_conv_layers):
            self.convs.append(nn.Conv1d(width, cfg.conv_filters, cfg.conv_kernel,
                                        stride=cfg.conv_stride, padding=cfg.conv_kernel // 2))
            width = cfg.conv_filters
        self.act = nn.ReLU()
        self.proj = nn.Linear(width, cfg.hidden_size) if width != cfg.hidden_size else nn.Identity()

    def forward(self, x):
        if x.dim() != 3:
            raise ValueError(f"expected (batch, length, dim) input, got shape {tuple(x.shape)}")
        out_len = downsampled_length(x.shape[1], self.ratio)
        if x.shape[1] != out_len * self.ratio:
            # keeps the output length exactly ceil(l / c) for any stride/kernel
            x = F.pad(x, (0, 0, 0, out_len * self.ratio - x.shape[1]))
        h = x.transpose(1, 2)
        for conv in self.convs:
            h = self.act(conv(h))
        return self.proj(h.transpose(1, 2))


class ConvUpsample(nn.Module):
    """Transposed convolutions lengthening a sequence by exactly ``c``."""

    def __init__(self, in_dim: int, cfg: BlockConfig):
        super().__init__()
        self.ratio = cfg.ratio
        self.convs = nn.ModuleList()
        width = in_dim
        pad = cfg.conv_kernel // 2
        for _ in range(cfg.num_conv_layers):
            # (m - 1) * s - 2p + k + op == m * s
            out_pad = cfg.conv_stride + 2 * pad - cfg.conv_kernel
            self.convs.append(nn.ConvTranspose1d(width, cfg.conv_filters, cfg.conv_kernel,
                                                 stride=cfg.conv_stride, padding=pad,
                                                 output_padding=out_pad))
            width = cfg.conv_filters
        self.act = nn.ReLU()
        self.proj = nn.Linear(width, cfg.hidden_size) if width != cfg.hidden_size else nn.Identity()

    def forward(self, x):
        if x.dim() != 3:
            raise ValueError(f"expected (batch, length, dim) input, got shape {tuple(x.shape)}")
        h = x.transpose(1, 2)
        for conv in self.convs:
            h = self.act(conv(h))
        return self.proj(h.transpose(1, 2))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query, memory, key_padding_mask=None, causal=False):
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        blocked = torch.zeros(scores.shape[-2:], dtype=torch.bool)
        if causal:
            blocked = torch.ones_like(blocked).triu(1)
        blocked = blocked[None, None]
        if key_padding_mask is not None:
            blocked = blocked | key_padding_mask[:, None, None, :]
        scores = scores.masked_fill(blocked, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(query.shape)
        return self.out(ctx)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, ffn_size: int, dropout: float = 0.0):
        super().__init__(nn.Linear(dim, ffn_size), nn.ReLU(), nn.Dropout(dropout),
                         nn.Linear(ffn_size, dim))


class TransformerBlock(nn.Module):
    """Post-LN block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, cfg: BlockConfig, cross_attention: bool = False):
        super().__init__()
        d = cfg.hidden_size
        self.self_attn = MultiHeadAttention(d, cfg.num_heads, cfg.dropout)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.num_heads, cfg.dropout) if cross_attention else None
        self.norm_cross = nn.LayerNorm(d) if cross_attention else None
        self.ffn = FeedForward(d, cfg.ffn_size, cfg.dropout)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask=None, causal=False, memory=None, memory_mask=None):
        x = self.norm1(x + self.dropout(self.self_attn(x, x, mask, causal)))
        if self.cross_attn is not None:
            x = self.norm_cross(x + self.dropout(self.cross_attn(x, memory, memory_mask)))
        return self.norm2(x + self.dropout(self.ffn(x)))


class TransformerStack(nn.Module):
    """N blocks; ``causal=True`` restricts position i to attend to positions <= i."""

    def __init__(self, cfg: BlockConfig, cross_attention: bool = False):
        super().__init__()
        self.width = cfg.hidden_size
        self.blocks = nn.ModuleList(TransformerBlock(cfg, cross_attention) for _ in range(cfg.num_blocks))

    def forward(self, x, mask=None, causal=False, memory=None, memory_mask=None):
        if x.shape[-1] != self.width:
            raise ValueError(f"expected width {self.width}, got {x.shape[-1]}")
        for block in self.blocks:
            x = block(x, mask, causal, memory, memory_mask)
        return x


# ---------------------------------------------------------------- optimisation


@dataclasses.dataclass
class OptimConfig:
    lr_scale: float = 1.0
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    grad_clip: float = 0.0


def noam_lr(step: int, hidden_size: int, cfg: OptimConfig) -> float:
    """Inverse-square-root schedule with linear warmup (``step`` is 1-based)."""
    step = max(step, 1)
    return cfg.lr_scale * hidden_size ** -0.5 * min(step ** -0.5, step * cfg.warmup_steps ** -1.5)


def make_optimizer(params, hidden_size: int, cfg: OptimConfig):
    opt = torch.optim.Adam(params, lr=1.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: noam_lr(i + 1, hidden_size, cfg))
    return opt, sched


# ---------------------------------------------------------------- gradient check


@dataclasses.dataclass
class GradCheckReport:
    errors: dict[str, float]  # max relative error per parameter group
    checked: dict[str, int]
    non_finite: list[str]
    excluded: dict[str, int] = dataclasses.field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def ok(self, tol: float = 1e-4) -> bool:
        return not self.non_finite and self.max_error < tol


def gradient_check(fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor],
                   step: float = 1e-4, max_per_param: int | None = None,
                   seed: int = 0, scale_floor: float = 1e-6,
                   regime: Callable[[], bytes] | None = None) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``params`` are float64 leaf tensors that ``fn`` closes over; they are
    perturbed in place and restored. The error reported for a group is
    ``max |g_auto - g_num| / max(max |g_auto|, max |g_num|, scale_floor)``
    over the checked elements; the floor keeps structurally-zero gradients
    (e.g. attention key biases) from turning round-off into relative error.
    ``max_per_param`` bounds the number of randomly chosen elements checked
    per tensor.

    ``regime``, when given, is called after every evaluation of ``fn`` and
    returns a fingerprint of the piecewise-smooth region (ReLU signs, argmax
    choices). Elements whose difference stencil changes the fingerprint
    straddle a non-differentiable point; they are skipped and counted in
    ``excluded``.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ValueError(f"gradient_check needs float64 tensors ({name} is {p.dtype})")
    for p in params.values():
        p.grad = None
        p.requires_grad_(True)
    if regime is not None:
        regime()  # drop anything recorded before the baseline evaluation
    loss = fn()
    base = regime() if regime else None
    if loss.dim() != 0:
        raise ValueError("fn must return a scalar")
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    errors, checked, excluded, non_finite = {}, {}, {}, []
    if not torch.isfinite(loss):
        non_finite.append("<loss>")
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_per_param is not None and flat.numel() > max_per_param:
                idx = rng.choice(flat.numel(), size=max_per_param, replace=False)
            auto_all = g.reshape(-1)[torch.as_tensor(idx)].numpy()
            keep, num = [], []
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                plus = fn().item()
                crossed = regime is not None and regime() != base
                flat[i] = orig - step
                minus = fn().item()
                crossed = crossed or (regime is not None and regime() != base)
                flat[i] = orig
                if crossed:
                    continue
                keep.append(j)
                num.append((plus - minus) / (2 * step))
            auto, num = auto_all[keep], np.asarray(num)
            excluded[name] = len(idx) - len(keep)
            if not (np.all(np.isfinite(num)) and np.all(np.isfinite(auto))):
                non_finite.append(name)
                continue
            scale = max(np.abs(auto).max(initial=0.0), np.abs(num).max(initial=0.0), scale_floor)
            errors[name] = float(np.abs(auto - num).max(initial=0.0) / scale)
            checked[name] = len(keep)
    return GradCheckReport(errors, checked, non_finite, excluded)


class ReluRegime:
    """Records the sign pattern of every ``nn.ReLU`` input inside ``module``.

    Use as ``regime=`` for :func:`gradient_check`: each call returns the
    pattern accumulated since the previous call::

        with ReluRegime(model) as rr:
            report = gradient_check(fn, params, regime=rr)
    """

    def __init__(self, module: nn.Module):
        self.module = module
        self._parts: list[bytes] = []
        self._handles = []

    def _hook(self, _mod, inputs, _out):
        self._parts.append(np.packbits((inputs[0].detach() > 0).numpy()).tobytes())

    def __enter__(self):
        self._handles = [m.register_forward_hook(self._hook)
                         for m in self.module.modules() if isinstance(m, nn.ReLU)]
        self._parts = []
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles = []

    def __call__(self) -> bytes:
        out = b"".join(self._parts)
        self._parts = []
        return out


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   magic "UWCKPT\0\0" | u32 version | u32 config_len | config JSON (UTF-8)
#   | u32 num_tensors | per tensor: u16 name_len | name (UTF-8) | u8 ndim
#   | ndim x u32 dims | prod(dims) f32 payload, row-major.

CKPT_MAGIC = b"UWCKPT\x00\x00"
CKPT_VERSION = 1


@dataclasses.dataclass
class ParamStore:
    entries: dict[str, np.ndarray]
    config: dict
    version: int = CKPT_VERSION

    @classmethod
    def from_module(cls, module: nn.Module, config: dict) -> "ParamStore":
        entries = {k: v.detach().cpu().numpy().astype(np.float32)
                   for k, v in module.state_dict().items()}
        return cls(entries, config)

    def load_into(self, module: nn.Module):
        expected = module.state_dict()
        missing = set(expected) - set(self.entries)
        unexpected = set(self.entries) - set(expected)
        if missing or unexpected:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} "
                             f"unexpected={sorted(unexpected)}")
        state = {}
        for k, ref in expected.items():
            arr = self.entries[k]
            if tuple(arr.shape) != tuple(ref.shape):
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {tuple(ref.shape)}")
            state[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
        module.load_state_dict(state)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        cfg = json.dumps(self.config, sort_keys=True).encode("utf-8")
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<II", self.version, len(cfg)))
        buf.write(cfg)
        buf.write(struct.pack("<I", len(self.entries)))
        for name, arr in self.entries.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<HB", len(raw), len(arr.shape)))
            buf.write(raw)
            buf.write(struct.pack(f"<{len(arr.shape)}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        if not data.startswith(CKPT_MAGIC):
            raise ValueError("not a checkpoint file (bad magic)")
        off = len(CKPT_MAGIC)
        version, cfg_len = struct.unpack_from("<II", data, off)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off += 8
        config = json.loads(data[off:off + cfg_len].decode("utf-8"))
        off += cfg_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        entries = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", data, off)
            off += 3
            name = data[off:off + name_len].decode("utf-8")
            off += name_len
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            entries[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            off += 4 * n
        return cls(entries, config, version)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())
