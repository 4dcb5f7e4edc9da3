"""Symmetric max-of-hinges triplet loss with in-batch hardest negatives.

For a batch of B aligned pairs with similarity matrix ``S[k, j] = <img_k, txt_j>``::

    L = sum_k [max_{j != k} S[k, j] - S[k, k] + m]_+      (image -> text)
      + sum_k [max_{j != k} S[j, k] - S[k, k] + m]_+      (text -> image)

Entries flagged in ``duplicate_mask`` never serve as negatives. The max is
realised by gathering the argmax entry, so its gradient lands on exactly one
negative per term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from crossembed.autodiff import Tensor, hinge
from crossembed.errors import ConfigError, ContractError, ShapeError


@dataclass
class LossConfig:
    margin: float = 0.2
    duplicate_mask: Optional[np.ndarray] = None
    reduction: str = "sum"

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


def similarity_matrix(img_emb: Tensor, txt_emb: Tensor) -> Tensor:
    if img_emb.ndim != 2 or img_emb.shape != txt_emb.shape:
        raise ShapeError(f"embedding shapes differ: {img_emb.shape} vs {txt_emb.shape}")
    return img_emb @ txt_emb.T


def _excluded(b: int, mask: Optional[np.ndarray]) -> np.ndarray:
    excl = np.eye(b, dtype=bool)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (b, b):
            raise ShapeError(f"duplicate_mask must be ({b}, {b}), got {mask.shape}")
        excl |= mask
    return excl


def hard_negative_indices(S, mask: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Hardest negative per row (image->text) and per column (text->image).

    Ties go to the smallest index; ``-1`` marks a row or column with no
    eligible negative.
    """
    S = S.data if isinstance(S, Tensor) else np.asarray(S)
    b = S.shape[0]
    if S.shape != (b, b):
        raise ShapeError(f"similarity matrix must be square, got {S.shape}")
    excl = _excluded(b, mask)
    rows = np.where(excl, -np.inf, S)
    cols = np.where(excl, -np.inf, S)
    i2t = rows.argmax(axis=1)
    t2i = cols.argmax(axis=0)
    i2t[excl.all(axis=1)] = -1
    t2i[excl.all(axis=0)] = -1
    return i2t.astype(np.int64), t2i.astype(np.int64)


def mh_loss_from_similarity(S: Tensor, cfg: Optional[LossConfig] = None) -> Tensor:
    """Max-of-hinges loss given the ``(B, B)`` similarity matrix."""
    cfg = cfg or LossConfig()
    b = S.shape[0]
    if S.ndim != 2 or S.shape != (b, b):
        raise ShapeError(f"similarity matrix must be square, got {S.shape}")
    if b == 0:
        raise ContractError("empty batch")
    zero = (S * 0.0).sum()
    if b == 1:
        return zero
    i2t, t2i = hard_negative_indices(S, cfg.duplicate_mask)
    total = zero
    rows = np.flatnonzero(i2t >= 0)
    if rows.size:
        neg = S[rows, i2t[rows]]
        pos = S[rows, rows]
        total = total + hinge(neg - pos + cfg.margin).sum()
    cols = np.flatnonzero(t2i >= 0)
    if cols.size:
        neg = S[t2i[cols], cols]
        pos = S[cols, cols]
        total = total + hinge(neg - pos + cfg.margin).sum()
    if cfg.reduction == "mean":
        total = total / float(b)
    return total


def mh_loss(img_emb: Tensor, txt_emb: Tensor, cfg: Optional[LossConfig] = None) -> Tensor:
    """Loss for aligned ``(B, D)`` image and text embeddings (rows assumed unit-norm)."""
    return mh_loss_from_similarity(similarity_matrix(img_emb, txt_emb), cfg)
