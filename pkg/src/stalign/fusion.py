"""Attention-based fusion of paired image and gene embeddings.

Each d-vector is viewed as ``s`` tokens of width ``l`` (``d = s * l``).
Image tokens attend over gene tokens and vice versa with single-head
cross-attention; each enhanced token matrix is projected from ``l`` to
``l/2`` features and the two halves are concatenated back to ``s x l`` and
flattened to ``d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .encoders import EmbeddingSet
from .layers import Linear, Module, param
from .numerics import Rng, Tensor, concat, matmul, no_grad, reshape, scale, softmax, swapaxes


@dataclass
class AbfnConfig:
    tokens: int = 8
    token_dim: int = 8

    def validate(self, embed_dim: int | None = None) -> None:
        if self.tokens < 1 or self.token_dim < 2:
            raise ConfigError("abfn needs tokens >= 1 and token_dim >= 2")
        if self.token_dim % 2:
            raise ConfigError(f"abfn token_dim must be even, got {self.token_dim}")
        if embed_dim is not None and self.tokens * self.token_dim != embed_dim:
            raise ConfigError(
                f"abfn tokens*token_dim = {self.tokens}*{self.token_dim} != embed_dim {embed_dim}"
            )


def _as_tokens(x: Tensor, s: int, l: int) -> Tensor:
    if x.shape[-1] != s * l:
        raise ConfigError(f"feature dim {x.shape[-1]} is not tokens*token_dim = {s}*{l}")
    return reshape(x, (*x.shape[:-1], s, l))


def cross_attend(query_feat: Tensor, context_feat: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                 tokens: int, token_dim: int, return_weights: bool = False):
    """Enhance ``query_feat`` with ``context_feat``; returns ``(..., s, l)``.

    Works on single d-vectors or on a batch ``(u, d)``; softmax runs over the
    ``s`` context tokens of the same pair.
    """
    q_tok = _as_tokens(query_feat, tokens, token_dim)
    c_tok = _as_tokens(context_feat, tokens, token_dim)
    q = matmul(q_tok, wq)
    k = matmul(c_tok, wk)
    v = matmul(c_tok, wv)
    logits = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(token_dim))
    weights = softmax(logits, axis=-1)
    z = matmul(weights, v)
    return (z, weights) if return_weights else z


def fuse(z_image: Tensor, z_gene: Tensor, w_image: Tensor, w_gene: Tensor) -> Tensor:
    """``[Z_I W_I ; Z_G W_G]`` along the feature axis, flattened to d."""
    if z_image.shape != z_gene.shape:
        raise ShapeError(f"fuse: Z_I {z_image.shape} and Z_G {z_gene.shape} differ")
    s, l = z_image.shape[-2:]
    if w_image.shape != (l, l // 2) or w_gene.shape != (l, l // 2):
        raise ShapeError(f"fuse: W_I {w_image.shape} / W_G {w_gene.shape} must be ({l}, {l // 2})")
    joined = concat([matmul(z_image, w_image), matmul(z_gene, w_gene)], axis=-1)
    return reshape(joined, (*joined.shape[:-2], s * l))


class FusionNetwork(Module):
    """One level (spot or niche) of the bidirectional cross-attention fusion."""

    def __init__(self, cfg: AbfnConfig, rng: Rng):
        cfg.validate()
        self._cfg = cfg
        l = cfg.token_dim
        bound = 1.0 / math.sqrt(l)

        def init(label, shape):
            return param(rng.split(label).uniform(-bound, bound, shape))

        self.wq_image = init("wq_image", (l, l))
        self.wk_image = init("wk_image", (l, l))
        self.wv_image = init("wv_image", (l, l))
        self.wq_gene = init("wq_gene", (l, l))
        self.wk_gene = init("wk_gene", (l, l))
        self.wv_gene = init("wv_gene", (l, l))
        self.w_image = init("w_image", (l, l // 2))
        self.w_gene = init("w_gene", (l, l // 2))

    def __call__(self, image: Tensor, gene: Tensor) -> Tensor:
        if image.shape != gene.shape:
            raise ShapeError(f"fusion inputs differ: {image.shape} vs {gene.shape}")
        s, l = self._cfg.tokens, self._cfg.token_dim
        z_image = cross_attend(image, gene, self.wq_image, self.wk_image, self.wv_image, s, l)
        z_gene = cross_attend(gene, image, self.wq_gene, self.wk_gene, self.wv_gene, s, l)
        return fuse(z_image, z_gene, self.w_image, self.w_gene)


class ConcatFusion(Module):
    """Ablation path: ``[image ; gene]`` followed by a linear map to d."""

    def __init__(self, embed_dim: int, rng: Rng):
        self.proj = Linear(2 * embed_dim, embed_dim, rng.split("proj"))

    def __call__(self, image: Tensor, gene: Tensor) -> Tensor:
        return self.proj(concat([image, gene], axis=-1))


def abfn_forward(image_emb: EmbeddingSet, gene_emb: EmbeddingSet, network: Module,
                 level: str = "spot") -> EmbeddingSet:
    """Eval-mode fusion of two aligned embedding sets."""
    if level not in ("spot", "niche"):
        raise ConfigError(f"level must be 'spot' or 'niche', got {level!r}")
    if image_emb.ids != gene_emb.ids:
        mismatch = next((a for a, b in zip(image_emb.ids, gene_emb.ids) if a != b), None)
        raise DataError(f"image and gene embeddings disagree on ids (first: {mismatch!r})")
    dtype = _param_dtype(network)
    with no_grad():
        fused = network(Tensor(image_emb.vectors.astype(dtype)), Tensor(gene_emb.vectors.astype(dtype))).data
    return EmbeddingSet("fused_spot" if level == "spot" else "fused_niche", image_emb.ids, fused)


def _param_dtype(network: Module):
    for _, t in network.named_tensors():
        return t.dtype
    return np.float32
