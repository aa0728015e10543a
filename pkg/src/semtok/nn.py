"""Transformer building blocks on the autodiff engine.

Every module draws its initial weights from an explicit np.random.Generator,
so two models built from equal seeds are bit-identical. state_dict() flattens
parameters to name -> array for the checkpoint bundle.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import Tensor, Parameter


class Module:
    def parameters(self):
        seen = set()
        out = []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}")
            p.data[...] = state[name]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 scale: float | None = None):
        # fan-in scaling; a fixed small std starves narrow models (every
        # sublayer output shrinks relative to the residual stream)
        std = scale if scale is not None else d_in ** -0.5
        self.w = Parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.b = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return E.matmul(x, self.w) + self.b


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return E.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two-layer GELU feed-forward, hidden width = ratio * dim."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4):
        self.fc1 = Linear(dim, ratio * dim, rng)
        self.fc2 = Linear(ratio * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(E.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head attention; query source and key/value source may differ."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dh = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        return x.reshape(b, l, self.heads, self.dh).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, ctx: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        # mask broadcasts to (B, heads, Lq, Lk); True = may attend
        src = x if ctx is None else ctx
        b, lq, d = x.shape
        q = self._split(self.wq(x))
        k = self._split(self.wk(src))
        v = self._split(self.wv(src))
        if mask is not None and mask.ndim == 3:
            mask = mask[:, None, :, :]
        out = E.masked_attention(q, k, v, mask)
        out = out.transpose(0, 2, 1, 3).reshape(b, lq, d)
        return self.wo(out)


class Block(Module):
    """Pre-norm transformer block; cross-attention slot is optional."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, cross: bool = False):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.cross = None
        self.ln_x = None
        if cross:
            self.ln_x = LayerNorm(dim)
            self.cross = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 ctx: Tensor | None = None, ctx_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        if self.cross is not None:
            if ctx is None:
                raise ValueError("block built with a cross-attention slot needs ctx")
            x = x + self.cross(self.ln_x(x), ctx=ctx, mask=ctx_mask)
        x = x + self.mlp(self.ln2(x))
        return x


class AttentionPool(Module):
    """Collapse a token set to one vector with a learned probe query."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.probe = Parameter(rng.normal(0.0, 0.02, size=(1, 1, dim)))
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        probe = self.probe + E.zeros((b, 1, x.shape[-1]))
        out = self.attn(probe, ctx=self.ln(x))
        return out.reshape(b, x.shape[-1])


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos features of shape (len(positions), dim); dim must be even."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def sincos_2d(h: int, w: int, dim: int) -> np.ndarray:
    """Grid positional features (h*w, dim): half the channels encode the row
    coordinate, half the column, row-major flattening."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    rows = sincos_1d(np.arange(h, dtype=np.float64), dim // 2)
    cols = sincos_1d(np.arange(w, dtype=np.float64), dim // 2)
    out = np.zeros((h * w, dim))
    out[:, : dim // 2] = np.repeat(rows, w, axis=0)
    out[:, dim // 2 :] = np.tile(cols, (h, 1))
    return out


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal diffusion-step features, shape (len(t), dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)
