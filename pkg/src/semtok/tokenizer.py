"""Register-token encoder with coarse-to-fine prefix structure.

Patch tokens and k learned register tokens share one transformer. Masking
enforces two rules: patch tokens never see registers, and register i sees
all patches but only registers <= i. Nested dropout during training zeroes
a random power-of-two suffix, which concentrates coarse information in the
early registers; any prefix in the schedule support is a valid code.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import engine as E
from . import nn
from .engine import Tensor


@dataclass
class RegisterSequence:
    tokens: object  # (k, d_R) or (B, k, d_R); Tensor or ndarray
    valid_prefix: int

    @property
    def k(self) -> int:
        return self.tokens.shape[-2]

    def truncated(self):
        """The live prefix, tokens[..., :valid_prefix, :]."""
        if isinstance(self.tokens, Tensor):
            return self.tokens[(Ellipsis, slice(0, self.valid_prefix), slice(None))]
        return self.tokens[..., : self.valid_prefix, :]


@dataclass(frozen=True)
class PrefixSchedule:
    k: int

    def __post_init__(self):
        if self.k < 1 or (self.k & (self.k - 1)) != 0:
            raise ValueError(f"k must be a power of two, got {self.k}")

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(2**i for i in range(self.k.bit_length()))

    def sample(self, rng: np.random.Generator) -> int:
        support = self.support
        return int(support[rng.integers(0, len(support))])


def sample_prefix(schedule: PrefixSchedule, rng: np.random.Generator) -> int:
    return schedule.sample(rng)


def apply_nested_dropout(regs: RegisterSequence, prefix: int) -> RegisterSequence:
    """Zero every register past `prefix`. prefix must be in the schedule support."""
    sched = PrefixSchedule(regs.k)
    if prefix not in sched.support:
        raise ValueError(f"prefix {prefix} not in support {sched.support}")
    keep = np.zeros((regs.k, 1))
    keep[:prefix] = 1.0
    return RegisterSequence(tokens=regs.tokens * keep,
                            valid_prefix=min(prefix, regs.valid_prefix))


@lru_cache(maxsize=32)
def build_encoder_mask(p: int, r: int) -> np.ndarray:
    """(P+R) x (P+R) attend-permission mask; see module docstring for rules."""
    if p < 1 or r < 1:
        raise ValueError("need at least one patch and one register")
    mask = np.zeros((p + r, p + r), dtype=bool)
    mask[:p, :p] = True  # patches attend patches
    mask[p:, :p] = True  # registers attend patches
    mask[p:, p:] = np.tril(np.ones((r, r), dtype=bool))  # causal among registers
    mask.setflags(write=False)
    return mask


def patchify(values, ps: int):
    """(B, C, H, W) -> (B, P, C*ps*ps) raw patch arrangement (no projection).

    Row-major patch order; inverse is unpatchify. Also accepts (C, H, W).
    """
    arr = values if isinstance(values, Tensor) else np.asarray(values)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr.reshape((1,) + tuple(arr.shape))
    b, c, h, w = arr.shape
    if h % ps or w % ps:
        raise ValueError(f"patch size {ps} does not divide grid {h}x{w}")
    x = arr.reshape(b, c, h // ps, ps, w // ps, ps)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, (h // ps) * (w // ps), c * ps * ps)
    if squeeze:
        x = x.reshape(x.shape[1:]) if isinstance(x, Tensor) else x[0]
    return x


def unpatchify(tokens, ps: int, c: int, h: int, w: int):
    """Inverse of patchify: (B, P, C*ps*ps) -> (B, C, H, W)."""
    arr = tokens if isinstance(tokens, Tensor) else np.asarray(tokens)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr.reshape((1,) + tuple(arr.shape))
    b = arr.shape[0]
    x = arr.reshape(b, h // ps, w // ps, c, ps, ps)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(b, c, h, w)
    if squeeze:
        x = x.reshape(x.shape[1:]) if isinstance(x, Tensor) else x[0]
    return x


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 8
    height: int = 16
    width: int = 16
    patch_size: int = 2
    k: int = 16
    d_register: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    warmup_fraction: float = 0.2

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)


class Encoder(nn.Module):
    """Joint patch+register transformer; only register outputs survive."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        if cfg.height % cfg.patch_size or cfg.width % cfg.patch_size:
            raise ValueError("grid size must divide by patch size")
        self.cfg = cfg
        d_patch = cfg.channels * cfg.patch_size**2
        self.embed = nn.Linear(d_patch, cfg.dim, rng)
        self.pos = nn.sincos_2d(cfg.height // cfg.patch_size,
                                cfg.width // cfg.patch_size, cfg.dim)
        self.registers = E.Parameter(rng.normal(0.0, 0.02, size=(cfg.k, cfg.dim)))
        self.blocks = [nn.Block(cfg.dim, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.out_proj = nn.Linear(cfg.dim, cfg.d_register, rng)

    def __call__(self, grids) -> RegisterSequence:
        """grids: (B, C, H, W) -> RegisterSequence tokens (B, k, d_R), full prefix."""
        cfg = self.cfg
        patches = patchify(grids, cfg.patch_size)
        if not isinstance(patches, Tensor):
            patches = Tensor(patches)
        if patches.ndim == 2:
            patches = patches.reshape(1, *patches.shape)
        b = patches.shape[0]
        x = self.embed(patches) + self.pos
        regs = self.registers.reshape(1, cfg.k, cfg.dim) + E.zeros((b, cfg.k, cfg.dim))
        seq = E.concat([x, regs], axis=1)
        mask = build_encoder_mask(cfg.n_patches, cfg.k)
        for blk in self.blocks:
            seq = blk(seq, mask=mask)
        reg_out = seq[(slice(None), slice(cfg.n_patches, None), slice(None))]
        reg_out = self.out_proj(self.ln_f(reg_out))
        return RegisterSequence(tokens=reg_out, valid_prefix=cfg.k)
