"""Dense-tensor primitives, attention layers and the AdamW optimizer.

Reverse-mode differentiation is delegated to torch autograd; everything here
is written against ``torch.Tensor`` so that every layer carries a backward rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class MissingGradientError(RuntimeError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__("missing gradient for parameters: " + ", ".join(self.names))


# ---------------------------------------------------------------- functional


def attention(q, k, v, return_weights=False):
    """Scaled dot-product attention, ``softmax(q k^T / sqrt(d)) v``.

    Works on any leading batch dims: q is (..., N, d), k and v are (..., M, d).
    """
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value token mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key width mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    d = q.shape[-1]
    if d <= 0:
        raise DimensionError("attention width must be positive")
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def pad_time(z, k, dim=0):
    """Right-pad ``dim`` by edge replication up to a multiple of ``k``."""
    T = z.shape[dim]
    extra = (-T) % k
    if extra == 0:
        return z
    edge = z.narrow(dim, T - 1, 1)
    reps = [1] * z.dim()
    reps[dim] = extra
    return torch.cat([z, edge.repeat(*reps)], dim=dim)


def avg_pool_time(z, k, dim=0):
    """Average non-overlapping windows of ``k`` steps along ``dim``.

    A length not divisible by ``k`` is right-padded with the last step first.
    """
    if k <= 0:
        raise ValueError(f"pool factor must be positive, got {k}")
    if k == 1:
        return z
    dim = dim % z.dim()
    z = pad_time(z, k, dim)
    shape = list(z.shape)
    new_shape = shape[:dim] + [shape[dim] // k, k] + shape[dim + 1:]
    return z.reshape(new_shape).mean(dim=dim + 1)


def repeat_time(z, k, dim=0):
    """Nearest-neighbour upsampling along ``dim``."""
    return torch.repeat_interleave(z, k, dim=dim)


def deconv_time(z, weight, k):
    """Transposed 1-D convolution along time with stride ``k``.

    ``z`` is (B, C, L), ``weight`` is (C_in, C_out, 2k) or (C_in, C_out, 1) for
    k == 1. The output length is exactly ``L * k``.
    """
    if k not in (1, 2, 4):
        raise ConfigError(f"upsampling rate must be one of 1, 2, 4; got {k}")
    width = 1 if k == 1 else 2 * k
    if weight.shape[-1] != width:
        raise DimensionError(f"kernel width {weight.shape[-1]} != {width} for rate {k}")
    padding = 0 if k == 1 else k // 2
    return F.conv_transpose1d(z, weight, stride=k, padding=padding)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gelu(x):
    return F.gelu(x)


def softmax(x, dim=-1):
    return torch.softmax(x, dim=dim)


# ---------------------------------------------------------------- init


def fan_in_uniform_(module):
    """Fan-in scaled uniform weights, zero biases, ones/zeros for norms."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d, nn.Conv3d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.ConvTranspose1d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
            # weight is (C_in, C_out, *k); each output sees C_in * prod(k) / stride taps
            fan_in = m.weight.shape[0] * m.weight[0, 0].numel()
            stride = math.prod(m.stride)
            bound = 1.0 / math.sqrt(max(fan_in // stride, 1))
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm) and m.elementwise_affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------- layers


class MultiHeadAttention(nn.Module):
    """Multi-head attention with biased q/k/v projections and a bias-free
    output projection, so a zeroed value projection yields an exact zero."""

    def __init__(self, dim, heads=4, context_dim=None):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        context_dim = dim if context_dim is None else context_dim
        self.dim = dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(context_dim, dim)
        self.to_v = nn.Linear(context_dim, dim)
        self.to_out = nn.Linear(dim, dim, bias=False)

    def _split(self, x):
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.dim // self.heads).transpose(-2, -3)

    def forward(self, x, context=None, return_weights=False):
        context = x if context is None else context
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(context)), self._split(self.to_v(context))
        if return_weights:
            out, w = attention(q, k, v, return_weights=True)
        else:
            # fused kernel (same math as ``attention``); it needs 4-D inputs
            lead = q.shape[:-3]
            out = F.scaled_dot_product_attention(*(t.reshape(-1, *t.shape[-3:]) for t in (q, k, v)))
            out = out.reshape(*lead, *out.shape[-3:])
        out = self.to_out(out.transpose(-2, -3).reshape(*x.shape[:-1], self.dim))
        if return_weights:
            return out, w
        return out

    def zero_value_(self):
        with torch.no_grad():
            self.to_v.weight.zero_()
            self.to_v.bias.zero_()


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP block over the second-to-last axis."""

    def __init__(self, dim, heads, mlp_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DeConvTime(nn.Module):
    """Learned temporal upsampler (stride k, kernel 2k; pointwise for k=1)."""

    def __init__(self, channels, k):
        super().__init__()
        if k not in (1, 2, 4):
            raise ConfigError(f"upsampling rate must be one of 1, 2, 4; got {k}")
        self.k = k
        width = 1 if k == 1 else 2 * k
        bound = 1.0 / math.sqrt(channels * max(width // k, 1))
        self.weight = nn.Parameter(torch.empty(channels, channels, width).uniform_(-bound, bound))

    def forward(self, z, length=None, dim=0):
        """Upsample ``dim`` of a channels-last tensor by ``k``, cropping to ``length``."""
        dim = dim % z.dim()
        moved = z.movedim(dim, -1)  # (..., C, L)
        lead = moved.shape[:-2]
        flat = moved.reshape(-1, *moved.shape[-2:])
        out = deconv_time(flat, self.weight, self.k)
        if length is not None:
            out = out[..., :length]
        out = out.reshape(*lead, *out.shape[-2:])
        return out.movedim(-1, dim)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def tensors(self):
        """Flat name -> tensor view used by checkpointing."""
        out = {}
        for name, t in self.exp_avg.items():
            out[f"m.{name}"] = t
        for name, t in self.exp_avg_sq.items():
            out[f"v.{name}"] = t
        return out

    def load_tensors(self, tensors):
        for key, t in tensors.items():
            kind, name = key.split(".", 1)
            (self.exp_avg if kind == "m" else self.exp_avg_sq)[name] = t.clone()


@torch.no_grad()
def adamw_step(params, state):
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    ``params`` maps names to trainable tensors whose ``.grad`` is populated.
    """
    missing = [n for n, p in params.items() if p.requires_grad and p.grad is None]
    if missing:
        raise MissingGradientError(missing)
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if state.weight_decay:
            p.mul_(1 - state.lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)


def named_trainable(module, prefix=""):
    return {prefix + n: p for n, p in module.named_parameters() if p.requires_grad}


# ---------------------------------------------------------------- gradient checking


def finite_difference_check(fn, wrt, n_directions=3, eps=1e-4, seed=0):
    """Compare autograd directional derivatives of the scalar ``fn()`` with
    central differences along random directions in the space of ``wrt``.

    Returns the worst relative error. ``wrt`` should be double precision
    leaf tensors with ``requires_grad`` set.
    """
    gen = torch.Generator().manual_seed(seed)
    wrt = list(wrt)
    grads = torch.autograd.grad(fn(), wrt, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(wrt, grads)]
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_directions):
            dirs = [torch.randn(x.shape, generator=gen, dtype=x.dtype) for x in wrt]
            analytic = sum((g * d).sum() for g, d in zip(grads, dirs)).item()
            for x, d in zip(wrt, dirs):
                x.add_(eps * d)
            plus = fn().item()
            for x, d in zip(wrt, dirs):
                x.sub_(2 * eps * d)
            minus = fn().item()
            for x, d in zip(wrt, dirs):
                x.add_(eps * d)
            numeric = (plus - minus) / (2 * eps)
            scale = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst
