"""Relational distillation: the semantic extractor and its loss suite.

The extractor maps latent grids to spatial tokens plus an attention-pooled
unit-norm global embedding. Three losses align its output with the frozen
teacher: a multi-positive InfoNCE over mined positive/negative sets, a rank
loss matching z-scored similarity rows (exactly 2*(1-pearson) per anchor),
and a KL between row-softmaxed token affinity matrices. A fourth, the
semantic guidance loss, scores decoder outputs by extractor-global cosine
and is used with the extractor frozen.

Student-side quantities are engine Tensors so gradients flow; teacher-side
quantities are plain arrays.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from . import nn
from .engine import Parameter, Tensor

log = logging.getLogger(__name__)

_ZSCORE_EPS = 1e-8
_NORM_EPS = 1e-8


@dataclass(frozen=True)
class MiningConfig:
    t_pos: float = 0.7
    t_neg: float = 0.3
    m_max: int = 8

    def __post_init__(self):
        if not self.t_pos > self.t_neg:
            raise ValueError(f"t_pos must exceed t_neg, got {self.t_pos} <= {self.t_neg}")
        if self.m_max < 1:
            raise ValueError("m_max must be positive")


@dataclass(frozen=True)
class MiningSets:
    positives: tuple[tuple[int, ...], ...]
    negatives: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class LossWeights:
    lambda_g: float = 1.0
    lambda_r: float = 1.0
    lambda_s: float = 0.5
    lambda_semantic: float = 1.0

    def __post_init__(self):
        if min(self.lambda_g, self.lambda_r, self.lambda_s, self.lambda_semantic) < 0:
            raise ValueError("loss weights must be non-negative")


def cosine_matrix(embeddings) -> Tensor:
    """Pairwise cosine similarity of unit-norm rows. Accepts Tensor or array."""
    e = embeddings if isinstance(embeddings, Tensor) else Tensor(np.asarray(embeddings, dtype=np.float64))
    norms = np.linalg.norm(e.data, axis=-1)
    if (norms < _NORM_EPS).any():
        raise ValueError("zero-norm row in embedding matrix")
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ValueError("rows must be unit-norm within 1e-6")
    return E.matmul(e, e.mT)


def mine_sets(teacher_cos: np.ndarray, cfg: MiningConfig) -> MiningSets:
    """Threshold-mined positive/negative index sets per anchor.

    Positives: j != i with sim >= t_pos, the m_max highest kept; negatives:
    sim <= t_neg, the m_max lowest kept. Ties break toward the lower index.
    """
    sims = np.asarray(teacher_cos, dtype=np.float64)
    p = sims.shape[0]
    pos_out, neg_out = [], []
    idx = np.arange(p)
    for i in range(p):
        row = sims[i]
        others = idx != i
        cand_p = idx[others & (row >= cfg.t_pos)]
        # lexsort: last key is primary; minus-sim descending, index ascending on ties
        order = np.lexsort((cand_p, -row[cand_p]))
        pos_out.append(tuple(int(j) for j in cand_p[order][: cfg.m_max]))
        cand_n = idx[others & (row <= cfg.t_neg)]
        order = np.lexsort((cand_n, row[cand_n]))
        neg_out.append(tuple(int(j) for j in cand_n[order][: cfg.m_max]))
    return MiningSets(positives=tuple(pos_out), negatives=tuple(neg_out))


def _logsumexp(row: Tensor) -> Tensor:
    m = float(row.data.max())
    return E.log(E.exp(row - m).sum()) + m


def loss_global(student_cos: Tensor, sets: MiningSets, temperature: float = 1.0) -> Tensor:
    """Multi-positive InfoNCE over the mined sets; anchors without positives
    are skipped, a batch with none contributes exactly 0."""
    terms = []
    for i, (pos, neg) in enumerate(zip(sets.positives, sets.negatives)):
        if not pos:
            continue
        pos_row = E.getitem(student_cos, (i, np.array(pos))) * (1.0 / temperature)
        num = _logsumexp(pos_row)
        if neg:
            all_row = E.getitem(student_cos, (i, np.array(pos + neg))) * (1.0 / temperature)
            den = _logsumexp(all_row)
        else:
            den = num
        terms.append(den - num)
    if not terms:
        log.warning("loss_global: every positive set empty; returning 0")
        return E.zeros(())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def zscore_row(row, eps: float = _ZSCORE_EPS):
    """Standardize to mean 0, population std 1 (std floored at eps)."""
    if isinstance(row, Tensor):
        if row.shape[-1] < 2:
            raise ValueError("zscore_row needs length >= 2")
        mu = row.mean(axis=-1, keepdims=True)
        centered = row - mu
        std = E.sqrt((centered * centered).mean(axis=-1, keepdims=True))
        return centered / E.maximum(std, eps)
    row = np.asarray(row, dtype=np.float64)
    if row.shape[-1] < 2:
        raise ValueError("zscore_row needs length >= 2")
    centered = row - row.mean(axis=-1, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    return centered / np.maximum(std, eps)


def _drop_diagonal(p: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(p), p - 1)
    cols = np.concatenate([np.delete(np.arange(p), i) for i in range(p)])
    return rows, cols


def loss_rank(student_cos: Tensor, teacher_cos: np.ndarray) -> Tensor:
    """MSE between per-anchor z-scored similarity rows (self entry dropped).

    Equals mean_i 2*(1 - pearson(student_row_i, teacher_row_i)).
    """
    p = student_cos.shape[0]
    if p < 3:
        raise ValueError("loss_rank needs batch size >= 3")
    rows, cols = _drop_diagonal(p)
    s = E.getitem(student_cos, (rows, cols)).reshape(p, p - 1)
    t = np.asarray(teacher_cos, dtype=np.float64)[rows, cols].reshape(p, p - 1)
    diff = zscore_row(s) - zscore_row(t)
    return (diff * diff).mean()


def affinity(tokens) -> Tensor:
    """Token self-similarity: cosine of every row pair, rows normalized with
    an eps floor. Works on (K, d) or batched (B, K, d)."""
    s = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=np.float64))
    if s.shape[-2] < 2:
        raise ValueError("affinity needs at least 2 tokens")
    sq = (s * s).sum(axis=-1, keepdims=True)
    normed = s * (E.sqrt(E.maximum(sq, _NORM_EPS * _NORM_EPS)) ** -1.0)
    return E.matmul(normed, normed.mT)


def loss_spatial(student_spatial: Tensor, teacher_spatial: np.ndarray,
                 temperature: float = 1.0) -> Tensor:
    """Mean KL(teacher || student) between row-softmaxed affinity matrices."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if student_spatial.shape[-2] != np.asarray(teacher_spatial).shape[-2]:
        raise ValueError("student/teacher token counts differ")
    a_s = affinity(student_spatial) * (1.0 / temperature)
    a_t = affinity(Tensor(np.asarray(teacher_spatial, dtype=np.float64))).data / temperature
    log_ps = E.log_softmax(a_s, axis=-1)
    zt = a_t - a_t.max(axis=-1, keepdims=True)
    pt = np.exp(zt)
    pt /= pt.sum(axis=-1, keepdims=True)
    log_pt = np.log(pt)
    # KL per row: sum_t pt*(log pt - log ps); mean over rows (and batch)
    cross = (Tensor(pt) * log_ps).sum(axis=-1)
    ent = (pt * log_pt).sum(axis=-1)
    kl = Tensor(ent) - cross
    return kl.mean()


def loss_rida(student_globals: Tensor, teacher_globals: np.ndarray,
              student_spatials: Tensor, teacher_spatials: np.ndarray,
              sets: MiningSets, w: LossWeights,
              temperature: float = 1.0, affinity_temperature: float = 1.0):
    """Weighted relational objective; returns (total, parts dict)."""
    s_cos = cosine_matrix(student_globals)
    l_g = loss_global(s_cos, sets, temperature)
    l_r = loss_rank(s_cos, np.asarray(teacher_globals) @ np.asarray(teacher_globals).T)
    l_s = loss_spatial(student_spatials, teacher_spatials, affinity_temperature)
    total = l_g * w.lambda_g + l_r * w.lambda_r + l_s * w.lambda_s
    return total, {"l_global": float(l_g.data), "l_rank": float(l_r.data),
                   "l_spatial": float(l_s.data)}


# -- extractor ---------------------------------------------------------------


@dataclass(frozen=True)
class ExtractorConfig:
    channels: int = 8
    height: int = 16
    width: int = 16
    patch_size: int = 4
    dim: int = 64
    depth: int = 2
    heads: int = 4
    spatial_dim: int = 16  # d, must match the teacher's spatial feature width
    global_dim: int = 32  # D

    @property
    def n_tokens(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)


class Extractor(nn.Module):
    """Patchify -> transformer -> (spatial head, attention-pooled global)."""

    def __init__(self, cfg: ExtractorConfig, rng: np.random.Generator):
        if cfg.height % cfg.patch_size or cfg.width % cfg.patch_size:
            raise ValueError("grid size must divide by patch size")
        self.cfg = cfg
        d_patch = cfg.channels * cfg.patch_size * cfg.patch_size
        # per-cell input normalizer, fitted by train_extractor and stored with
        # the checkpoint; stays zero (a no-op) until fitted
        self.input_center = Parameter(np.zeros((cfg.channels, cfg.height, cfg.width)))
        self.input_center.requires_grad = False
        self.embed = nn.Linear(d_patch, cfg.dim, rng)
        # unit-amplitude positional features swamp the patch content at init,
        # which pins all pooled embeddings into a narrow cosine cone that the
        # contrastive loss cannot escape; keep them small relative to content
        self.pos = 0.1 * nn.sincos_2d(cfg.height // cfg.patch_size,
                                      cfg.width // cfg.patch_size, cfg.dim)
        self.blocks = [nn.Block(cfg.dim, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.spatial_head = nn.Linear(cfg.dim, cfg.spatial_dim, rng)
        self.pool = nn.AttentionPool(cfg.dim, cfg.heads, rng)
        # pooled-feature normalizer, fitted alongside input_center; without it
        # every global lands in a narrow cosine cone around the shared pooled
        # mean and the contrastive term starts at a flat saddle
        self.pool_center = Parameter(np.zeros(cfg.dim))
        self.pool_center.requires_grad = False
        self.global_head = nn.Linear(cfg.dim, cfg.global_dim, rng)

    def _patchify(self, grids: np.ndarray) -> np.ndarray:
        b, c, h, w = grids.shape
        ps = self.cfg.patch_size
        x = grids.reshape(b, c, h // ps, ps, w // ps, ps)
        x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // ps) * (w // ps), -1)
        return x

    def _trunk(self, grids) -> tuple[Tensor, Tensor]:
        if isinstance(grids, Tensor):
            b, c, h, w = grids.shape
            ps = self.cfg.patch_size
            x = grids - self.input_center
            x = x.reshape(b, c, h // ps, ps, w // ps, ps)
            x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // ps) * (w // ps),
                                                      c * ps * ps)
        else:
            centered = np.asarray(grids, dtype=np.float64) - self.input_center.data
            x = Tensor(self._patchify(centered))
        tok = self.embed(x) + self.pos
        for blk in self.blocks:
            tok = blk(tok)
        tok = self.ln_f(tok)
        return tok, self.pool(tok)

    def __call__(self, grids) -> tuple[Tensor, Tensor]:
        """grids: (B, C, H, W) array or Tensor -> (spatial (B,K,d), global (B,D))."""
        tok, pooled_raw = self._trunk(grids)
        spatial = self.spatial_head(tok)
        g = self.global_head(pooled_raw - self.pool_center)
        gnorm = E.sqrt(E.maximum((g * g).sum(axis=-1, keepdims=True), _NORM_EPS**2))
        return spatial, g * (gnorm ** -1.0)


@contextmanager
def frozen(module: nn.Module):
    """Treat a module's parameters as constants inside the block."""
    params = module.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def loss_semantic(pred: Tensor, target, extractor: Extractor) -> Tensor:
    """1 - cosine of extractor globals; the extractor sees no gradient."""
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target_arr.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target_arr.shape}")
    with frozen(extractor):
        _, g_pred = extractor(pred)
        with E.no_grad():
            _, g_tgt = extractor(target_arr)
    cos = (g_pred * g_tgt.data).sum(axis=-1)
    return (1.0 - cos).mean()


# -- training loops ----------------------------------------------------------


@dataclass
class TrainLog:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def add(self, *vals):
        self.rows.append(tuple(vals))

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
        return "\n".join(lines) + "\n"


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n - batch_size + 1, batch_size):
        yield order[i : i + batch_size]


def fit_normalizers(model: Extractor, dataset, limit: int = 512) -> None:
    """Fit the stored input/pooled centers on (a slice of) the training set.

    Both constants ship with the checkpoint; inference stays per-sample
    deterministic. Centering the pooled features at the initial weights is
    what gives the contrastive term a usable gradient from step one.
    """
    model.input_center.data[...] = dataset.grids.mean(axis=0)
    with E.no_grad():
        _, pooled = model._trunk(dataset.grids[:limit])
    model.pool_center.data[...] = pooled.data.mean(axis=0)


def train_extractor(dataset, cfg: ExtractorConfig, w: LossWeights, epochs: int,
                    seed: int, mining: MiningConfig | None = None,
                    batch_size: int = 16, lr: float = 1e-3,
                    temperature: float = 1.0, affinity_temperature: float = 1.0):
    """Fit the extractor to the teacher's relational structure.

    Returns (extractor, TrainLog with columns epoch,l_global,l_rank,l_spatial,total).
    """
    mining = mining or MiningConfig()
    rng = np.random.default_rng(seed)
    model = Extractor(cfg, rng)
    fit_normalizers(model, dataset)
    opt = E.Adam(model.parameters(), lr=lr)
    logbook = TrainLog(("epoch", "l_global", "l_rank", "l_spatial", "total"))
    t_globals = dataset.globals_
    for epoch in range(epochs):
        sums = np.zeros(4)
        count = 0
        for idx in _batches(len(dataset), batch_size, rng):
            spatial, g = model(dataset.grids[idx])
            t_g = t_globals[idx]
            sets = mine_sets(t_g @ t_g.T, mining)
            total, parts = loss_rida(g, t_g, spatial, dataset.spatials[idx], sets, w,
                                     temperature, affinity_temperature)
            if not np.isfinite(total.data):
                raise RuntimeError(f"non-finite extractor loss at epoch {epoch}: {parts}")
            if total.requires_grad:
                opt.zero_grad()
                total.backward()
                opt.step()
            sums += [parts["l_global"], parts["l_rank"], parts["l_spatial"], float(total.data)]
            count += 1
        avg = sums / max(count, 1)
        logbook.add(epoch, avg[0], avg[1], avg[2], avg[3])
    return model, logbook


def train_regression(dataset, cfg: ExtractorConfig, epochs: int, seed: int,
                     batch_size: int = 16, lr: float = 1e-3):
    """Coordinate-regression baseline: same architecture, but the global head
    chases the teacher embedding with plain MSE (no relational terms)."""
    if cfg.global_dim != dataset.globals_.shape[1]:
        raise ValueError("regression baseline needs global_dim == teacher dim")
    rng = np.random.default_rng(seed)
    model = Extractor(cfg, rng)
    fit_normalizers(model, dataset)
    opt = E.Adam(model.parameters(), lr=lr)
    logbook = TrainLog(("epoch", "l_mse", "total"))
    for epoch in range(epochs):
        tot, count = 0.0, 0
        for idx in _batches(len(dataset), batch_size, rng):
            _, g = model(dataset.grids[idx])
            diff = g - dataset.globals_[idx]
            loss = (diff * diff).mean()
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite regression loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.data)
            count += 1
        logbook.add(epoch, tot / max(count, 1), tot / max(count, 1))
    return model, logbook
