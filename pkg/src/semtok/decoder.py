"""Prefix-conditioned diffusion decoder, trained jointly with the encoder.

The denoiser is a transformer over noised patch tokens that cross-attends
to the register prefix (truncated to its valid length, so anything past the
prefix cannot influence the output even in principle). A learned null token
is always the first cross-attention key: condition dropout masks everything
but the null key for a sample, and the same mask trick drives the
unconditional branch of classifier-free guidance at sampling time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from . import nn
from . import tokenizer as tk
from .diffusion import DiffusionSchedule, linear_schedule, q_sample, predict_x0, ancestral_sample
from .engine import Tensor
from .relational import LossWeights, TrainLog, loss_semantic, frozen
from .synth import LatentGrid


@dataclass(frozen=True)
class DecoderConfig:
    channels: int = 8
    height: int = 16
    width: int = 16
    patch_size: int = 2
    d_register: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    T: int = 100
    cond_dropout: float = 0.1

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def d_patch(self) -> int:
        return self.channels * self.patch_size**2


class Denoiser(nn.Module):
    """Transformer epsilon-predictor over noised patch tokens."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = nn.Linear(cfg.d_patch, cfg.dim, rng)
        self.pos = nn.sincos_2d(cfg.height // cfg.patch_size,
                                cfg.width // cfg.patch_size, cfg.dim)
        self.t_proj = nn.Linear(cfg.dim, cfg.dim, rng)
        self.cond_proj = nn.Linear(cfg.d_register, cfg.dim, rng)
        self.null_token = E.Parameter(rng.normal(0.0, 0.02, size=(1, 1, cfg.dim)))
        self.blocks = [nn.Block(cfg.dim, cfg.heads, rng, cross=True)
                       for _ in range(cfg.depth)]
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.d_patch, rng)

    def _context(self, prefix: tk.RegisterSequence | None, b: int):
        """Cross-attention keys: [null, prefix tokens]; key mask per sample."""
        cfg = self.cfg
        null = self.null_token + E.zeros((b, 1, cfg.dim))
        if prefix is None or prefix.valid_prefix == 0:
            return null, None
        toks = prefix.truncated()
        if not isinstance(toks, Tensor):
            toks = Tensor(np.asarray(toks, dtype=np.float64))
        if toks.ndim == 2:
            toks = toks.reshape(1, *toks.shape)
        cond = self.cond_proj(toks)
        if cond.shape[0] == 1 and b > 1:
            # one shared prefix conditioning a whole batch
            cond = cond + E.zeros((b,) + tuple(cond.shape[1:]))
        ctx = E.concat([null, cond], axis=1)
        return ctx, None

    def __call__(self, x_t: Tensor, t, prefix: tk.RegisterSequence | None,
                 drop_mask: np.ndarray | None = None) -> Tensor:
        """x_t: (B, P, d_patch) noised tokens; t: int or (B,) steps.

        drop_mask: optional (B,) bool; True samples see only the null key
        (their register keys are masked out), used for condition dropout and
        the guidance null branch.
        """
        cfg = self.cfg
        b = x_t.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        temb = self.t_proj(Tensor(nn.timestep_embedding(t_arr, cfg.dim)))
        x = self.embed(x_t) + self.pos + temb.reshape(b, 1, cfg.dim)
        ctx, _ = self._context(prefix, b)
        n_keys = ctx.shape[1]
        if drop_mask is not None and n_keys > 1:
            key_mask = np.ones((b, 1, 1, n_keys), dtype=bool)
            key_mask[np.asarray(drop_mask, dtype=bool), :, :, 1:] = False
        else:
            key_mask = None
        for blk in self.blocks:
            x = blk(x, ctx=ctx, ctx_mask=key_mask)
        return self.head(self.ln_f(x))


def denoise_predict(model: Denoiser, x_t, t, prefix: tk.RegisterSequence | None) -> Tensor:
    """Epsilon estimate for noised patch tokens under a register prefix."""
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=np.float64))
    if x_t.ndim == 2:
        x_t = x_t.reshape(1, *x_t.shape)
    if x_t.shape[-1] != model.cfg.d_patch or x_t.shape[-2] != model.cfg.n_patches:
        raise ValueError(f"expected (*, {model.cfg.n_patches}, {model.cfg.d_patch}) tokens, got {x_t.shape}")
    return model(x_t, t, prefix)


def loss_denoise(model: Denoiser, x0_tokens, prefix, sched: DiffusionSchedule,
                 rng: np.random.Generator, drop_mask=None, t=None, eps=None) -> Tensor:
    """Mean squared epsilon-prediction error; (t, eps) drawn from rng unless
    pinned by the caller (tests pin them for scalar oracles)."""
    x0 = x0_tokens if isinstance(x0_tokens, Tensor) else Tensor(np.asarray(x0_tokens, dtype=np.float64))
    b = x0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=b)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, sched)
    eps_hat = model(x_t if isinstance(x_t, Tensor) else Tensor(x_t), t, prefix, drop_mask)
    diff = eps_hat - eps
    return (diff * diff).mean()


def loss_total(model: Denoiser, extractor, x0_tokens, prefix, w: LossWeights,
               sched: DiffusionSchedule, rng: np.random.Generator, drop_mask=None):
    """Denoise MSE plus semantic guidance on the implied clean estimate."""
    cfg = model.cfg
    x0 = x0_tokens if isinstance(x0_tokens, Tensor) else Tensor(np.asarray(x0_tokens, dtype=np.float64))
    b = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, sched)
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    eps_hat = model(x_t, t, prefix, drop_mask)
    diff = eps_hat - eps
    l_den = (diff * diff).mean()
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    pred_grid = tk.unpatchify(x0_hat, cfg.patch_size, cfg.channels, cfg.height, cfg.width)
    tgt_grid = tk.unpatchify(x0.data, cfg.patch_size, cfg.channels, cfg.height, cfg.width)
    l_sem = loss_semantic(pred_grid, tgt_grid, extractor)
    total = l_den + l_sem * w.lambda_semantic
    return total, {"l_denoise": float(l_den.data), "l_semantic": float(l_sem.data)}


def sample(model: Denoiser, prefix: tk.RegisterSequence | None, guidance_w: float,
           sched: DiffusionSchedule, rng: np.random.Generator,
           steps: int | None = None, batch: int = 1) -> LatentGrid:
    """Ancestral generation conditioned on a register prefix.

    guidance_w blends conditional and null predictions; 0 and 1 shortcut to
    the pure branches so those trajectories are bit-identical to single-path
    sampling. With a batched prefix (B, l, d_R), one grid per prefix row is
    produced and `batch` is ignored.
    """
    cfg = model.cfg
    if prefix is not None and np.asarray(
            prefix.tokens.data if isinstance(prefix.tokens, Tensor) else prefix.tokens).ndim == 3:
        batch = prefix.tokens.shape[0]

    def predict(x, t):
        with E.no_grad():
            xt = Tensor(x)
            if prefix is None or guidance_w == 0.0:
                return model(xt, t, None).data
            if guidance_w == 1.0:
                return model(xt, t, prefix).data
            e_cond = model(xt, t, prefix).data
            e_null = model(xt, t, None).data
            return e_null + guidance_w * (e_cond - e_null)

    toks = ancestral_sample(predict, (batch, cfg.n_patches, cfg.d_patch), sched, rng, steps)
    grids = tk.unpatchify(toks, cfg.patch_size, cfg.channels, cfg.height, cfg.width)
    return LatentGrid(values=grids[0] if batch == 1 else grids)


class TrainingDiverged(RuntimeError):
    """Raised on non-finite loss; carries the last finite-epoch weights."""

    def __init__(self, msg: str, last_good: dict | None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class JointTrainResult:
    encoder: tk.Encoder
    denoiser: Denoiser
    logbook: TrainLog
    sched: DiffusionSchedule


def train_tokenizer(dataset, enc_cfg: tk.EncoderConfig, dec_cfg: DecoderConfig,
                    extractor, w: LossWeights, epochs: int, seed: int,
                    batch_size: int = 16, lr: float = 1e-3,
                    prefix_hook=None) -> JointTrainResult:
    """Joint encoder+decoder training under the combined objective.

    The first warmup_fraction of epochs always uses the full register set;
    after that each batch draws one power-of-two prefix. prefix_hook, when
    given, is called with (epoch, prefix_len) per batch.
    """
    rng = np.random.default_rng(seed)
    encoder = tk.Encoder(enc_cfg, rng)
    denoiser = Denoiser(dec_cfg, rng)
    sched = linear_schedule(dec_cfg.T)
    psched = tk.PrefixSchedule(enc_cfg.k)
    params = encoder.parameters() + denoiser.parameters()
    opt = E.Adam(params, lr=lr)
    logbook = TrainLog(("epoch", "l_denoise", "l_semantic", "total"))
    warmup_epochs = int(np.ceil(enc_cfg.warmup_fraction * epochs))
    last_good = None
    for epoch in range(epochs):
        sums = np.zeros(3)
        count = 0
        for idx in _batches(len(dataset), batch_size, rng):
            grids = dataset.grids[idx]
            regs = encoder(grids)
            if epoch < warmup_epochs:
                plen = enc_cfg.k
            else:
                plen = psched.sample(rng)
            if prefix_hook is not None:
                prefix_hook(epoch, plen)
            regs = tk.apply_nested_dropout(regs, plen)
            x0_tokens = tk.patchify(grids, dec_cfg.patch_size)
            drop = rng.random(len(idx)) < dec_cfg.cond_dropout
            total, parts = loss_total(denoiser, extractor, x0_tokens, regs, w,
                                      sched, rng, drop_mask=drop)
            if not np.isfinite(total.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: {parts}", last_good)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += [parts["l_denoise"], parts["l_semantic"], float(total.data)]
            count += 1
        avg = sums / max(count, 1)
        logbook.add(epoch, avg[0], avg[1], avg[2])
        last_good = {"encoder": encoder.state_dict(), "denoiser": denoiser.state_dict()}
    return JointTrainResult(encoder=encoder, denoiser=denoiser, logbook=logbook, sched=sched)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    step = min(batch_size, n)
    for i in range(0, n - step + 1, step):
        yield order[i : i + step]
