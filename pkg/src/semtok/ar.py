"""Causal generator over continuous register tokens.

A causal transformer reads [condition, token_0, ..., token_{i-1}] and emits
one conditioning vector z per position; a small MLP diffusion head turns z
into a token by denoising, so tokens stay continuous end to end (nothing is
quantized). Generation draws each position's noise from its own RNG stream
keyed by (seed, position): extending a sequence never changes the tokens
already produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from . import nn
from . import tokenizer as tk
from .diffusion import DiffusionSchedule, linear_schedule, q_sample, ancestral_sample
from .engine import Tensor
from .relational import TrainLog


@dataclass(frozen=True)
class ConditionEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        n = np.linalg.norm(v)
        if not np.isclose(n, 1.0, atol=1e-6):
            raise ValueError(f"condition embedding must be unit-norm, got |v|={n}")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class ARConfig:
    k: int = 16
    d_register: int = 8
    d_cond: int = 32
    dim: int = 64
    depth: int = 2
    heads: int = 4
    head_T: int = 50
    head_width_ratio: int = 4
    cond_dropout: float = 0.1


class DiffusionHead(nn.Module):
    """Per-token epsilon MLP: (noised token, step, z) -> epsilon estimate."""

    def __init__(self, cfg: ARConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.head_width_ratio * cfg.d_register
        t_dim = 16
        self.t_dim = t_dim
        d_in = cfg.d_register + t_dim + cfg.dim
        self.fc1 = nn.Linear(d_in, w, rng)
        self.fc2 = nn.Linear(w, w, rng)
        self.fc3 = nn.Linear(w, cfg.d_register, rng)

    def __call__(self, x_t, t, z) -> Tensor:
        """x_t: (N, d_R); t: int or (N,); z: (N, dim)."""
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=np.float64))
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        n = x_t.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        temb = Tensor(nn.timestep_embedding(t_arr, self.t_dim))
        h = E.concat([x_t, temb, z], axis=-1)
        h = E.gelu(self.fc1(h))
        h = E.gelu(self.fc2(h))
        return self.fc3(h)


class ARModel(nn.Module):
    """Causal trunk + diffusion head + learned null condition."""

    def __init__(self, cfg: ARConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.cond_proj = nn.Linear(cfg.d_cond, cfg.dim, rng)
        self.null_cond = E.Parameter(rng.normal(0.0, 0.02, size=(cfg.dim,)))
        self.tok_proj = nn.Linear(cfg.d_register, cfg.dim, rng)
        self.pos = E.Parameter(rng.normal(0.0, 0.02, size=(cfg.k + 1, cfg.dim)))
        self.blocks = [nn.Block(cfg.dim, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.z_head = nn.Linear(cfg.dim, cfg.dim, rng)
        self.head = DiffusionHead(cfg, rng)


def _causal_mask(l: int) -> np.ndarray:
    return np.tril(np.ones((l, l), dtype=bool))


def ar_forward(model: ARModel, cond, tokens, null_mask: np.ndarray | None = None) -> Tensor:
    """Conditioning vectors for the next token at every position.

    cond: (B, d_cond) or ConditionEmbedding; tokens: (B, l, d_R) with l >= 0
    (the already-known prefix). Returns (B, l+1, dim): position i depends on
    cond and tokens < i only. null_mask (B,) True swaps in the learned null
    condition for that sample (condition dropout / guidance).
    """
    cfg = model.cfg
    if isinstance(cond, ConditionEmbedding):
        cond = cond.vector[None, :]
    cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=np.float64))
    if cond.ndim == 1:
        cond = cond.reshape(1, cond.shape[0])
    b = cond.shape[0]
    c = model.cond_proj(cond)
    if null_mask is not None:
        m = np.asarray(null_mask, dtype=np.float64)[:, None]
        c = c * (1.0 - m) + model.null_cond.reshape(1, cfg.dim) * m
    seq = [c.reshape(b, 1, cfg.dim)]
    tokens_arr = tokens if tokens is not None else np.zeros((b, 0, cfg.d_register))
    l = tokens_arr.shape[-2]
    if l > cfg.k:
        raise ValueError(f"prefix length {l} exceeds k={cfg.k}")
    if l > 0:
        toks = tokens_arr if isinstance(tokens_arr, Tensor) else Tensor(np.asarray(tokens_arr, dtype=np.float64))
        if toks.ndim == 2:
            toks = toks.reshape(1, *toks.shape)
        seq.append(model.tok_proj(toks))
    x = E.concat(seq, axis=1) if len(seq) > 1 else seq[0]
    x = x + model.pos[(slice(0, l + 1), slice(None))].reshape(1, l + 1, cfg.dim)
    mask = _causal_mask(l + 1)
    for blk in model.blocks:
        x = blk(x, mask=mask)
    return model.z_head(model.ln_f(x))


def head_loss(head: DiffusionHead, z, target_tokens, sched: DiffusionSchedule,
              rng: np.random.Generator, t=None, eps=None) -> Tensor:
    """Epsilon-prediction MSE for tokens under their conditioning vectors.

    z: (N, dim); target_tokens: (N, d_R). (t, eps) drawn unless pinned.
    """
    tgt = target_tokens if isinstance(target_tokens, Tensor) else Tensor(np.asarray(target_tokens, dtype=np.float64))
    n = tgt.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(tgt.shape)
    x_t = q_sample(tgt.data, t, eps, sched)
    eps_hat = head(x_t, t, z)
    diff = eps_hat - eps
    return (diff * diff).mean()


def head_sample(head: DiffusionHead, z, sched: DiffusionSchedule,
                rng: np.random.Generator, steps: int | None = None,
                z_null=None, guidance_w: float = 1.0) -> np.ndarray:
    """Denoise one token vector per row of z. Optional guidance blends
    predictions under z and z_null exactly as the decoder does."""
    z_arr = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if z_arr.ndim == 1:
        z_arr = z_arr[None, :]
    zn = None
    if z_null is not None:
        zn = z_null.data if isinstance(z_null, Tensor) else np.asarray(z_null, dtype=np.float64)
        if zn.ndim == 1:
            zn = zn[None, :]

    def predict(x, t):
        with E.no_grad():
            if zn is None or guidance_w == 1.0:
                return head(x, t, z_arr).data
            if guidance_w == 0.0:
                return head(x, t, zn).data
            e_c = head(x, t, z_arr).data
            e_n = head(x, t, zn).data
            return e_n + guidance_w * (e_c - e_n)

    n = z_arr.shape[0]
    out = ancestral_sample(predict, (n, head.cfg.d_register), sched, rng, steps)
    return out


def train_ar(token_dataset: np.ndarray, cond_dataset: np.ndarray, cfg: ARConfig,
             epochs: int, seed: int, batch_size: int = 16, lr: float = 1e-3):
    """Teacher-forced training over all positions.

    token_dataset: (N, k, d_R) encoder outputs; cond_dataset: (N, d_cond)
    unit-norm rows. Returns (model, TrainLog, schedule).
    """
    n, k, d_r = token_dataset.shape
    if k != cfg.k or d_r != cfg.d_register:
        raise ValueError(f"token dataset shape {token_dataset.shape} does not match config")
    rng = np.random.default_rng(seed)
    model = ARModel(cfg, rng)
    sched = linear_schedule(cfg.head_T)
    opt = E.Adam(model.parameters(), lr=lr)
    logbook = TrainLog(("epoch", "l_head", "total"))
    for epoch in range(epochs):
        tot, count = 0.0, 0
        order = rng.permutation(n)
        step = min(batch_size, n)
        for i in range(0, n - step + 1, step):
            idx = order[i : i + step]
            toks = token_dataset[idx]
            conds = cond_dataset[idx]
            drop = rng.random(len(idx)) < cfg.cond_dropout
            z = ar_forward(model, conds, toks[:, :-1, :], null_mask=drop)
            b = len(idx)
            z_flat = z.reshape(b * k, cfg.dim)
            loss = head_loss(model.head, z_flat, toks.reshape(b * k, d_r), sched, rng)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite generator loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.data)
            count += 1
        logbook.add(epoch, tot / max(count, 1), tot / max(count, 1))
    return model, logbook, sched


def generate(model: ARModel, cond, length: int, guidance_w: float, seed: int,
             sched: DiffusionSchedule | None = None,
             head_steps: int | None = None) -> tk.RegisterSequence:
    """Autoregressive rollout of `length` tokens (length must be a schedule
    prefix). Each position consumes only its own (seed, position) stream, so
    a longer rollout extends a shorter one without changing shared tokens."""
    cfg = model.cfg
    psched = tk.PrefixSchedule(cfg.k)
    if length not in psched.support:
        raise ValueError(f"length {length} not in prefix support {psched.support}")
    sched = sched or linear_schedule(cfg.head_T)
    if isinstance(cond, ConditionEmbedding):
        cond = cond.vector[None, :]
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 1:
        cond = cond[None, :]
    b = cond.shape[0]
    tokens = np.zeros((b, 0, cfg.d_register))
    use_guidance = guidance_w != 1.0
    ones = np.ones(b, dtype=bool)
    for i in range(length):
        with E.no_grad():
            z = ar_forward(model, cond, tokens).data[:, -1, :]
            z_null = ar_forward(model, cond, tokens, null_mask=ones).data[:, -1, :] if use_guidance else None
        pos_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        nxt = head_sample(model.head, z, sched, pos_rng, steps=head_steps,
                          z_null=z_null, guidance_w=guidance_w)
        tokens = np.concatenate([tokens, nxt[:, None, :]], axis=1)
    return tk.RegisterSequence(tokens=tokens, valid_prefix=length)
