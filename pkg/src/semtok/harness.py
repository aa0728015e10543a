"""Evaluation: Chamfer, the retrieval suite, and the prefix-quality curve.

Retrieval ground truth is the teacher's top-K neighbor set per query (self
excluded, ties at the boundary broken toward the lower index); student
rankings use the same convention, so every metric is a pure function of the
two embedding matrices. All metrics match a brute-force implementation
exactly; the brute-force twin lives in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import decoder as dec
from . import engine as E
from . import tokenizer as tk
from .relational import TrainLog


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric squared-nearest-neighbor distance between point sets.

    Mean over A of min squared distance to B, plus the reverse. Zero iff the
    sets are equal as sets.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer requires non-empty point sets")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def top_k_neighbors(sims: np.ndarray, query: int, k: int) -> np.ndarray:
    """Indices of the k most similar items to `query`, self excluded,
    ordered by descending similarity with ascending-index tie-break."""
    n = sims.shape[0]
    if k > n - 1:
        raise ValueError(f"k={k} exceeds corpus size minus one ({n - 1})")
    row = sims[query]
    others = np.delete(np.arange(n), query)
    vals = row[others]
    order = np.lexsort((others, -vals))
    return others[order][:k]


def recall_at_k(gt: np.ndarray, retrieved: np.ndarray, k: int) -> float:
    return len(set(gt.tolist()) & set(retrieved[:k].tolist())) / k


def map_at_k(gt: np.ndarray, retrieved: np.ndarray, k: int) -> float:
    """Average precision over the ranked list, normalized by min(k, |gt|)."""
    gt_set = set(gt.tolist())
    hits = 0
    ap = 0.0
    for rank, idx in enumerate(retrieved[:k], start=1):
        if int(idx) in gt_set:
            hits += 1
            ap += hits / rank
    return ap / min(k, len(gt_set))


def jaccard_at_k(gt: np.ndarray, retrieved: np.ndarray, k: int) -> float:
    gs, rs = set(gt.tolist()), set(retrieved[:k].tolist())
    union = gs | rs
    return len(gs & rs) / len(union) if union else 0.0


@dataclass(frozen=True)
class RetrievalResult:
    method: str
    k: int
    recall: float
    map_: float
    jaccard: float

    def __post_init__(self):
        for v in (self.recall, self.map_, self.jaccard):
            if not 0.0 <= v <= 1.0:
                raise ValueError("retrieval metrics must lie in [0,1]")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def retrieval_eval(method_embeddings: dict[str, np.ndarray],
                   teacher_globals: np.ndarray, ks: list[int]) -> list[RetrievalResult]:
    """Mean retrieval metrics per (method, K) against teacher ground truth."""
    t = _unit_rows(teacher_globals)
    n = t.shape[0]
    if n < max(ks) + 1:
        raise ValueError(f"corpus of {n} too small for K={max(ks)}")
    t_sims = t @ t.T
    out = []
    for method, emb in method_embeddings.items():
        s = _unit_rows(emb.reshape(n, -1))
        s_sims = s @ s.T
        for k in ks:
            rec, mp, jac = 0.0, 0.0, 0.0
            for q in range(n):
                gt = top_k_neighbors(t_sims, q, k)
                got = top_k_neighbors(s_sims, q, k)
                rec += recall_at_k(gt, got, k)
                mp += map_at_k(gt, got, k)
                jac += jaccard_at_k(gt, got, k)
            out.append(RetrievalResult(method=method, k=k, recall=rec / n,
                                       map_=mp / n, jaccard=jac / n))
    return out


def retrieval_csv(results: list[RetrievalResult]) -> str:
    log = TrainLog(("method", "k", "recall", "map", "jaccard"))
    for r in results:
        log.add(r.method, r.k, r.recall, r.map_, r.jaccard)
    return log.to_csv()


# -- prefix curve ------------------------------------------------------------


def occupancy_points(grid: np.ndarray, threshold: float) -> np.ndarray:
    """(row, col) coordinates where channel 0 exceeds the threshold."""
    rows, cols = np.nonzero(grid[0] > threshold)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def prefix_curve(encoder: tk.Encoder, denoiser: dec.Denoiser, sched, extractor,
                 grids: np.ndarray, levels: list[int], seeds: list[int],
                 steps: int = 20) -> TrainLog:
    """Reconstruction quality per prefix level: grid MSE, Chamfer on
    thresholded occupancy, extractor-global cosine. One row per (level, seed);
    a final summary row carries Spearman trend statistics."""
    threshold = float(grids[:, 0].mean())
    log = TrainLog(("level", "seed", "mse", "chamfer", "cosine"))
    with E.no_grad():
        regs_full = encoder(grids)
        _, g_target = extractor(grids)
    mse_by_level: dict[int, list[float]] = {l: [] for l in levels}
    cos_by_level: dict[int, list[float]] = {l: [] for l in levels}
    for seed in seeds:
        for level in levels:
            regs = tk.apply_nested_dropout(
                tk.RegisterSequence(tokens=regs_full.tokens.data, valid_prefix=regs_full.valid_prefix),
                level)
            out = dec.sample(denoiser, regs, 1.0, sched,
                             np.random.default_rng(seed), steps=steps)
            recon = out.values
            mse = float(((recon - grids) ** 2).mean())
            ch_vals = []
            for i in range(grids.shape[0]):
                pa = occupancy_points(recon[i], threshold)
                pb = occupancy_points(grids[i], threshold)
                if len(pa) and len(pb):
                    ch_vals.append(chamfer(pa, pb))
            ch = float(np.mean(ch_vals)) if ch_vals else float("nan")
            with E.no_grad():
                _, g_recon = extractor(recon)
            cos = float((g_recon.data * g_target.data).sum(axis=1).mean())
            log.add(level, seed, mse, ch, cos)
            mse_by_level[level].append(mse)
            cos_by_level[level].append(cos)
    mse_means = [float(np.mean(mse_by_level[l])) for l in levels]
    cos_means = [float(np.mean(cos_by_level[l])) for l in levels]
    rho_mse = float(spearmanr(np.arange(len(levels)), [-m for m in mse_means]).statistic)
    rho_cos = float(spearmanr(np.arange(len(levels)), cos_means).statistic)
    log.add("summary", -1, rho_mse, float("nan"), rho_cos)
    return log


def spearman(x, y) -> float:
    return float(spearmanr(np.asarray(x), np.asarray(y)).statistic)
