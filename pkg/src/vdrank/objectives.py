"""Masked token loss, the 4-way contrastive loss and their combination."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoding import MASK, TokenSequence, Vocabulary


class QuartetteLabel(enum.IntEnum):
    MATCHED = 0
    POLLUTED_IMAGE = 1
    POLLUTED_QUESTION = 2
    POLLUTED_ANSWER = 3


class Phase(str, enum.Enum):
    BOTH = "both"
    CCL4_ONLY = "ccl4_only"


@dataclass
class MaskedBatch:
    masked_sequence: TokenSequence
    masked_positions: list[int]
    original_ids: list[int]


@dataclass
class LossBreakdown:
    cmtl: float
    ccl4: float
    total: float
    tensor: ad.Tensor | None = None  # differentiable total


def apply_token_masking(
    seq: TokenSequence, vocab: Vocabulary, rng: np.random.Generator, rate: float = 0.15
) -> MaskedBatch:
    """Replace each text token by [MASK] with probability ``rate``.

    Region slots and marker tokens are never touched. If the draw selects
    nothing, one eligible token is masked so the loss is always defined.
    """
    eligible = seq.text_positions(vocab)
    if not eligible:
        raise ValueError("sequence has no maskable text tokens")
    hits = rng.random(len(eligible)) < rate
    chosen = [p for p, h in zip(eligible, hits) if h]
    if not chosen:
        chosen = [eligible[int(rng.integers(len(eligible)))]]
    ids = list(seq.token_ids)
    original = [ids[p] for p in chosen]
    mask_id = vocab.stoi[MASK]
    for p in chosen:
        ids[p] = mask_id
    return MaskedBatch(seq.with_tokens(ids), chosen, original)


def mlm_logits(hidden: ad.Tensor, masked: Sequence[MaskedBatch], params) -> tuple[ad.Tensor, np.ndarray]:
    """Token-prediction logits at every masked position of a batch."""
    if hidden.ndim == 2:
        hidden = ad.reshape(hidden, (1,) + hidden.shape)
    rows = np.concatenate([np.full(len(m.masked_positions), b) for b, m in enumerate(masked)])
    cols = np.concatenate([m.masked_positions for m in masked])
    targets = np.concatenate([m.original_ids for m in masked])
    picked = ad.take(hidden, (rows.astype(np.int64), cols.astype(np.int64)))
    return ad.linear(picked, params["mlm_w"], params["mlm_b"]), targets


def cmtl_loss(hidden: ad.Tensor, masked: MaskedBatch | Sequence[MaskedBatch], params) -> ad.Tensor:
    """Mean cross-entropy of the recovered tokens over all masked positions.

    ``hidden`` is [n x d_h] with a single ``MaskedBatch``, or [B x n x d_h]
    with one per batch row.
    """
    if isinstance(masked, MaskedBatch):
        masked = [masked]
    logits, targets = mlm_logits(hidden, masked, params)
    return ad.cross_entropy(logits, targets)


def ccl4_head(h_cls: ad.Tensor, params) -> ad.Tensor:
    """FC classifier over the [CLS] encoding: [d_h] -> [4] or [B x d_h] -> [B x 4]."""
    if h_cls.ndim == 1:
        out = ad.linear(ad.reshape(h_cls, (1, -1)), params["cls_w"], params["cls_b"])
        return ad.reshape(out, (params["cls_w"].shape[1],))
    return ad.linear(h_cls, params["cls_w"], params["cls_b"])


def ccl4_loss(logits: ad.Tensor, label) -> ad.Tensor:
    if logits.ndim == 1:
        return ad.cross_entropy(ad.reshape(logits, (1, -1)), [int(label)])
    return ad.cross_entropy(logits, np.asarray(label, dtype=np.int64))


def _value(x) -> float:
    return x.item() if isinstance(x, ad.Tensor) else float(x)


def total_loss(cmtl, ccl4, phase: Phase | str = Phase.BOTH) -> LossBreakdown:
    """Sum with equal weights, or the contrastive term alone in the second phase."""
    phase = Phase(phase)
    c, g = _value(cmtl), _value(ccl4)
    if phase is Phase.BOTH:
        t = ad.add(cmtl, ccl4) if isinstance(cmtl, ad.Tensor) or isinstance(ccl4, ad.Tensor) else None
        return LossBreakdown(c, g, c + g, t)
    t = ccl4 if isinstance(ccl4, ad.Tensor) else None
    return LossBreakdown(c, g, g, t)
