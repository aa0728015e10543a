"""Attention primitives shared by the encoder, decoder, and generator."""

from __future__ import annotations

import numpy as np

from . import tensor as ops
from .tensor import Tensor


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis (all entries allowed)."""
    mask = np.ones(x.shape[-1], dtype=bool)
    return ops.masked_softmax(x, mask)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with a boolean attend-permission mask.

    q: (..., Lq, d), k/v: (..., Lk, d). mask, if given, broadcasts to
    (..., Lq, Lk); True marks key positions a query may attend to. Disallowed
    positions receive exactly zero weight. A query row with no allowed key is
    an error: raises ValueError("unattendable query").
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ValueError(f"query/key width mismatch: {d} vs {k.shape[-1]}")
    scores = ops.matmul(q, k.mT) * (1.0 / np.sqrt(d))
    if mask is None:
        mask = np.ones(scores.shape[-1], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        rows_ok = np.broadcast_to(mask, scores.shape).any(axis=-1)
        if not rows_ok.all():
            raise ValueError("unattendable query: mask row with no allowed key")
    weights = ops.masked_softmax(scores, mask)
    return ops.matmul(weights, v)


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """The softmax weight matrix alone, same masking contract as above."""
    d = q.shape[-1]
    scores = ops.matmul(q, k.mT) * (1.0 / np.sqrt(d))
    if mask is None:
        mask = np.ones(scores.shape[-1], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, scores.shape).any(axis=-1).all():
            raise ValueError("unattendable query: mask row with no allowed key")
    return ops.masked_softmax(scores, mask)
