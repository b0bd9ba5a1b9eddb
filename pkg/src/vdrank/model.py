"""Transformer encoder over packed region/dialog sequences."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .encoding import LOCATION_DIM, TokenSequence

NEG_INF = -np.inf


@dataclass
class ModelConfig:
    num_blocks: int = 2
    num_heads: int = 2
    hidden_dim: int = 64
    ffn_dim: int = 256
    vocab_size: int = 200
    max_positions: int = 256
    visual_dim: int = 32
    regions_per_image: int = 8
    num_classes: int = 4  # 4-way contrastive head; 2 for the matched/unmatched ablation
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        for name in ("num_heads", "hidden_dim", "ffn_dim", "vocab_size", "max_positions", "visual_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_blocks < 0 or self.regions_per_image < 0:
            raise ValueError("num_blocks and regions_per_image must be non-negative")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")
        if self.num_classes not in (2, 4):
            raise ValueError("num_classes must be 4 (contrastive) or 2 (binary ablation)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


class TransformerParams:
    """Ordered, uniquely named collection of parameters."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._params: dict[str, ad.Parameter] = {}

    def register(self, name: str, data) -> ad.Parameter:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        p = ad.Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> ad.Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[ad.Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def block(self, i: int) -> dict[str, ad.Parameter]:
        prefix = f"block{i}."
        return {n[len(prefix) :]: p for n, p in self._params.items() if n.startswith(prefix)}

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None


def init_params(config: ModelConfig, rng: np.random.Generator) -> TransformerParams:
    d, f, std = config.hidden_dim, config.ffn_dim, config.init_std
    P = TransformerParams(config)

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    P.register("tok_emb", normal(config.vocab_size, d))
    P.register("pos_emb", normal(config.max_positions, d))
    P.register("seg_emb", normal(2, d))
    P.register("roi_w", normal(config.visual_dim, d))
    P.register("roi_b", np.zeros(d))
    P.register("loc_w", normal(LOCATION_DIM, d))
    P.register("loc_b", np.zeros(d))
    P.register("emb_ln_g", np.ones(d))
    P.register("emb_ln_b", np.zeros(d))
    for i in range(config.num_blocks):
        for proj in ("q", "k", "v", "o"):
            P.register(f"block{i}.w_{proj}", normal(d, d))
            P.register(f"block{i}.b_{proj}", np.zeros(d))
        P.register(f"block{i}.ln1_g", np.ones(d))
        P.register(f"block{i}.ln1_b", np.zeros(d))
        P.register(f"block{i}.ffn_w1", normal(d, f))
        P.register(f"block{i}.ffn_b1", np.zeros(f))
        P.register(f"block{i}.ffn_w2", normal(f, d))
        P.register(f"block{i}.ffn_b2", np.zeros(d))
        P.register(f"block{i}.ln2_g", np.ones(d))
        P.register(f"block{i}.ln2_b", np.zeros(d))
    P.register("cls_w", normal(d, config.num_classes))
    P.register("cls_b", np.zeros(config.num_classes))
    P.register("mlm_w", normal(d, config.vocab_size))
    P.register("mlm_b", np.zeros(config.vocab_size))
    return P


# ---------------------------------------------------------------- masks

MaskStrategy = Callable[[TokenSequence, int], np.ndarray]


def build_attention_mask(seq: TokenSequence | int, padding_len: int = 0) -> np.ndarray:
    """Bidirectional mask over real tokens; padding is cut off in both directions.

    Every position keeps its diagonal so no softmax row is empty.
    """
    n = seq if isinstance(seq, int) else len(seq)
    total = n + padding_len
    m = np.zeros((total, total))
    m[n:, :] = NEG_INF
    m[:, n:] = NEG_INF
    idx = np.arange(n, total)
    m[idx, idx] = 0.0
    return m


def batch_mask(
    seqs: Sequence[TokenSequence], strategy: MaskStrategy = build_attention_mask
) -> np.ndarray:
    """Stack per-sequence masks, padded to the longest sequence: [B x n x n]."""
    n = max(len(s) for s in seqs)
    return np.stack([strategy(s, n - len(s)) for s in seqs])


# ---------------------------------------------------------------- blocks


def _as_batch(h: ad.Tensor):
    return (ad.reshape(h, (1,) + h.shape), True) if h.ndim == 2 else (h, False)


def attention(h_prev: ad.Tensor, block: dict, mask: np.ndarray, num_heads: int) -> ad.Tensor:
    """Multi-head masked self-attention followed by the output projection."""
    h, squeeze = _as_batch(h_prev)
    B, n, d = h.shape
    dk = d // num_heads
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]

    def heads(x):
        return ad.swapaxes(ad.reshape(x, (B, n, num_heads, dk)), 1, 2)

    q = heads(ad.linear(h, block["w_q"], block["b_q"]))
    k = heads(ad.linear(h, block["w_k"], block["b_k"]))
    v = heads(ad.linear(h, block["w_v"], block["b_v"]))
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, 2, 3)), 1.0 / math.sqrt(dk))
    weights = ad.masked_softmax(scores, mask[:, None])
    ctx = ad.reshape(ad.swapaxes(ad.matmul(weights, v), 1, 2), (B, n, d))
    out = ad.linear(ctx, block["w_o"], block["b_o"])
    return ad.reshape(out, (n, d)) if squeeze else out


def feed_forward(h: ad.Tensor, block: dict) -> ad.Tensor:
    return ad.linear(ad.gelu(ad.linear(h, block["ffn_w1"], block["ffn_b1"])), block["ffn_w2"], block["ffn_b2"])


def transformer_block(
    h_prev: ad.Tensor, block: dict, mask: np.ndarray, num_heads: int, eps: float = 1e-12
) -> ad.Tensor:
    """Post-norm residual block: attention, add & norm, FFN, add & norm."""
    h1 = ad.layer_norm(h_prev + attention(h_prev, block, mask, num_heads), block["ln1_g"], block["ln1_b"], eps)
    return ad.layer_norm(h1 + feed_forward(h1, block), block["ln2_g"], block["ln2_b"], eps)


def encode(h0: ad.Tensor, params: TransformerParams, mask: np.ndarray) -> ad.Tensor:
    cfg = params.config
    h = h0
    for i in range(cfg.num_blocks):
        h = transformer_block(h, params.block(i), mask, cfg.num_heads, cfg.ln_eps)
    return h
