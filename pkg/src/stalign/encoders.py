"""Image and gene encoders for the spot and niche levels.

Two paths are trainable (the convolutional spot-image encoder and the
transformer niche-gene encoder) and two are frozen random-feature stand-ins
for large pretrained models.  Precomputed embeddings from real pretrained
models can replace the stand-ins via :func:`load_precomputed_embeddings`.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ImagePatch, atomic_write_bytes
from .errors import ConfigError, DataError, FormatError, ShapeError
from .layers import LayerNorm, Linear, Module, TransformerEncoderLayer, buffer, param
from .numerics import (
    Rng,
    Tensor,
    add,
    conv2d,
    embedding_lookup,
    gelu,
    mean_pool,
    relu,
    reshape,
)

ROLES = ("spot_image", "niche_image", "spot_gene", "niche_gene", "fused_spot", "fused_niche")
ROLE_TAGS = {role: i for i, role in enumerate(ROLES)}
EMBEDDING_MAGIC = b"STEM"
EMBEDDING_VERSION = 1


@dataclass
class ModelConfig:
    embed_dim: int = 64
    patch_size: int = 28
    niche_size: int = 112
    img_channels: tuple[int, ...] = (8, 16, 32)
    img_kernel: int = 3
    img_pool: int = 2
    gene_layers: int = 2
    gene_heads: int = 4
    gene_tokens: int = 16
    token_dim: int = 32
    dropout: float = 0.1
    frozen_seed: int = 1234
    frozen_hidden: int = 128

    def validate(self) -> None:
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if self.token_dim % self.gene_heads:
            raise ConfigError(f"gene_heads ({self.gene_heads}) must divide token_dim ({self.token_dim})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not self.img_channels:
            raise ConfigError("img_channels needs at least one conv block")
        size = self.patch_size
        for _ in self.img_channels:
            if size < self.img_pool:
                raise ConfigError(f"patch_size {self.patch_size} too small for {len(self.img_channels)} pooled blocks")
            size //= self.img_pool
        if min(self.gene_layers, self.gene_tokens, self.frozen_hidden) < 1:
            raise ConfigError("gene_layers, gene_tokens and frozen_hidden must be positive")

    @classmethod
    def full_scale(cls, **overrides) -> ModelConfig:
        """Full-size transformer depth/heads and niche resolution."""
        values = dict(gene_layers=6, gene_heads=8, niche_size=224, token_dim=64)
        values.update(overrides)
        return cls(**values)


@dataclass(eq=False)
class EmbeddingSet:
    role: str
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        if self.role not in ROLE_TAGS:
            raise ConfigError(f"unknown embedding role {self.role!r}")
        self.vectors = np.asarray(self.vectors)
        self.ids = list(self.ids)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ShapeError(f"{self.role}: {len(self.ids)} ids but vectors of shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError(f"{self.role}: embedding contains NaN/Inf")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


# ---------------------------------------------------------------------------
# input conversion
# ---------------------------------------------------------------------------
def patches_to_array(patches: Sequence[ImagePatch] | np.ndarray, size: int | None = None) -> np.ndarray:
    """``(N, H, W, 3)`` uint8 patches to ``(N, 3, H, W)`` float32 in [0, 1]."""
    if isinstance(patches, np.ndarray):
        arr = patches
    else:
        arr = np.stack([p.pixels for p in patches]) if len(patches) else np.zeros((0, size or 0, size or 0, 3), np.uint8)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (N, H, W, 3) patches, got {arr.shape}")
    if size is not None and arr.shape[1:3] != (size, size):
        raise ShapeError(f"patches are {arr.shape[2]}x{arr.shape[1]}, encoder expects {size}x{size}")
    return (arr.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# trainable encoders
# ---------------------------------------------------------------------------
class SpotImageEncoder(Module):
    """Conv blocks (conv, ReLU, mean pool) then global mean pool and a dense map to d."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self._cfg = cfg
        chans = (3, *cfg.img_channels)
        for i in range(len(cfg.img_channels)):
            fan_in = chans[i] * cfg.img_kernel ** 2
            shape = (chans[i + 1], chans[i], cfg.img_kernel, cfg.img_kernel)
            setattr(self, f"conv{i}_w", param(rng.split(f"conv{i}").normal(0, math.sqrt(2.0 / fan_in), shape)))
            setattr(self, f"conv{i}_b", param(np.zeros((chans[i + 1], 1, 1))))
        self.head = Linear(chans[-1], cfg.embed_dim, rng.split("head"))

    def __call__(self, images: Tensor) -> Tensor:
        cfg = self._cfg
        if images.ndim != 4 or images.shape[1:] != (3, cfg.patch_size, cfg.patch_size):
            raise ShapeError(f"spot images must be (N, 3, {cfg.patch_size}, {cfg.patch_size}), got {images.shape}")
        x = images
        pad = cfg.img_kernel // 2
        for i in range(len(cfg.img_channels)):
            x = conv2d(x, getattr(self, f"conv{i}_w"), stride=1, padding=pad)
            x = relu(add(x, getattr(self, f"conv{i}_b")))
            x = mean_pool(x, cfg.img_pool)
        return self.head(mean_pool(x))


class NicheGeneEncoder(Module):
    """Chunk tokenizer + transformer encoder + token mean pool + dense map to d."""

    def __init__(self, cfg: ModelConfig, n_genes: int, rng: Rng):
        self._cfg = cfg
        self._n_genes = n_genes
        self._chunk = math.ceil(n_genes / cfg.gene_tokens)
        self.token_proj = Linear(self._chunk, cfg.token_dim, rng.split("token_proj"))
        # the position code is the only thing telling chunks (gene groups)
        # apart after mean pooling, so start it at the scale of the tokens
        self.pos_embed = param(rng.split("pos").normal(0, 0.5, (cfg.gene_tokens, cfg.token_dim)))
        self.layers = [TransformerEncoderLayer(cfg.token_dim, cfg.gene_heads, rng.split(f"layer{i}"), cfg.dropout)
                       for i in range(cfg.gene_layers)]
        self.norm = LayerNorm(cfg.token_dim)
        self.head = Linear(cfg.token_dim, cfg.embed_dim, rng.split("head"))

    def tokenize(self, rows: np.ndarray | Tensor) -> Tensor:
        rows = rows if isinstance(rows, Tensor) else Tensor(rows)
        n, g = rows.shape
        if g != self._n_genes:
            raise ShapeError(f"niche gene encoder built for {self._n_genes} genes, got {g}")
        padded_len = self._chunk * self._cfg.gene_tokens
        if padded_len != g:
            from .numerics import concat
            rows = concat([rows, Tensor(np.zeros((n, padded_len - g), dtype=rows.dtype))], axis=1)
        return reshape(rows, (n, self._cfg.gene_tokens, self._chunk))

    def __call__(self, rows, rng: Rng | None = None, training: bool = False) -> Tensor:
        tokens = self.token_proj(self.tokenize(rows))
        positions = embedding_lookup(self.pos_embed, np.arange(self._cfg.gene_tokens))
        x = add(tokens, positions)
        for layer in self.layers:
            x = layer(x, rng, training)
        x = self.norm(x)
        return self.head(x.mean(axis=1))


# ---------------------------------------------------------------------------
# frozen stand-ins
# ---------------------------------------------------------------------------
class RandomFeatureEncoder(Module):
    """Fixed two-layer GELU network whose weights derive only from a seed.

    Inputs are flattened.  The weights are buffers (never trainable), so the
    optimizer never sees them and backprop stops here.
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int, seed: int, stream: str,
                 center: float = 0.0):
        rng = Rng(seed, f"frozen/{stream}")
        self._center = center
        self._in_dim = in_dim
        self.w1 = buffer(rng.normal(0, 1.0 / math.sqrt(in_dim), (in_dim, hidden)))
        self.b1 = buffer(rng.normal(0, 0.1, hidden))
        self.w2 = buffer(rng.normal(0, 1.0 / math.sqrt(hidden), (hidden, out_dim)))

    def encode(self, inputs: np.ndarray, batch: int = 256) -> np.ndarray:
        x = np.asarray(inputs)
        n = x.shape[0]
        flat = x.reshape(n, -1).astype(self.w1.dtype)
        if flat.shape[1] != self._in_dim:
            raise ShapeError(f"frozen encoder expects {self._in_dim} inputs per row, got {flat.shape[1]}")
        if not np.all(np.isfinite(flat)):
            raise DataError("frozen encoder input contains NaN/Inf")
        out = []
        for start in range(0, n, batch):
            h = flat[start:start + batch] - self.w1.dtype.type(self._center)
            h = gelu(Tensor(h @ self.w1.data + self.b1.data)).data
            out.append(h @ self.w2.data)
        return np.concatenate(out) if out else np.zeros((0, self.w2.shape[1]), self.w2.dtype)


def frozen_niche_image_encoder(cfg: ModelConfig) -> RandomFeatureEncoder:
    return RandomFeatureEncoder(3 * cfg.niche_size ** 2, cfg.frozen_hidden, cfg.embed_dim,
                                cfg.frozen_seed, "niche_image", center=0.5)


def frozen_spot_gene_encoder(cfg: ModelConfig, n_genes: int) -> RandomFeatureEncoder:
    return RandomFeatureEncoder(n_genes, cfg.frozen_hidden, cfg.embed_dim, cfg.frozen_seed, "spot_gene")


# ---------------------------------------------------------------------------
# functional entry points
# ---------------------------------------------------------------------------
def encode_spot_images(patches, encoder: SpotImageEncoder, ids: Sequence[str] | None = None,
                       training: bool = False) -> EmbeddingSet | Tensor:
    """Embed spot patches.

    In training mode returns the differentiable Tensor; in eval mode an
    :class:`EmbeddingSet` (``ids`` default to row numbers).
    """
    x = Tensor(patches_to_array(patches, encoder._cfg.patch_size))
    if training:
        return encoder(x)
    from .numerics import no_grad
    with no_grad():
        out = encoder(x).data
    return EmbeddingSet("spot_image", _ids(ids, len(out)), out)


def encode_niche_images_frozen(niche_images, cfg: ModelConfig, ids: Sequence[str] | None = None,
                               encoder: RandomFeatureEncoder | None = None) -> EmbeddingSet:
    arr = patches_to_array(niche_images, cfg.niche_size)
    encoder = encoder or frozen_niche_image_encoder(cfg)
    # flatten in H, W, C order so the map matches the row-major patch layout
    out = encoder.encode(arr.transpose(0, 2, 3, 1))
    return EmbeddingSet("niche_image", _ids(ids, len(out)), out)


def encode_spot_genes_frozen(expression_rows: np.ndarray, cfg: ModelConfig,
                             ids: Sequence[str] | None = None,
                             encoder: RandomFeatureEncoder | None = None) -> EmbeddingSet:
    rows = np.asarray(expression_rows, dtype=np.float64)
    if not np.all(np.isfinite(rows)):
        raise DataError("spot expression contains NaN/Inf")
    encoder = encoder or frozen_spot_gene_encoder(cfg, rows.shape[1])
    out = encoder.encode(rows)
    return EmbeddingSet("spot_gene", _ids(ids, len(out)), out)


def encode_niche_genes(niche_expression_rows: np.ndarray, encoder: NicheGeneEncoder,
                       ids: Sequence[str] | None = None, training: bool = False,
                       rng: Rng | None = None) -> EmbeddingSet | Tensor:
    rows = np.asarray(niche_expression_rows, dtype=encoder.head.weight.dtype)
    if training:
        return encoder(rows, rng, training=True)
    from .numerics import no_grad
    with no_grad():
        out = encoder(rows, None, training=False).data
    return EmbeddingSet("niche_gene", _ids(ids, len(out)), out)


def _ids(ids, n: int) -> list[str]:
    return [str(i) for i in range(n)] if ids is None else list(ids)


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------
def embedding_bytes(emb: EmbeddingSet) -> bytes:
    buf = io.BytesIO()
    buf.write(EMBEDDING_MAGIC)
    buf.write(struct.pack("<BBII", EMBEDDING_VERSION, ROLE_TAGS[emb.role], len(emb.ids), emb.dim))
    vectors = np.ascontiguousarray(emb.vectors, dtype="<f4")
    for sid, row in zip(emb.ids, vectors):
        encoded = sid.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(row.tobytes())
    return buf.getvalue()


def save_embeddings(emb: EmbeddingSet, path) -> None:
    atomic_write_bytes(path, embedding_bytes(emb))


def read_embeddings(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if raw[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {EMBEDDING_MAGIC!r}")
    if len(raw) < 14:
        raise FormatError(f"{path}: truncated header")
    version, tag, rows, dim = struct.unpack_from("<BBII", raw, 4)
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported embedding file version {version}")
    if tag >= len(ROLES):
        raise FormatError(f"{path}: unknown role tag {tag}")
    offset = 14
    ids, vecs = [], []
    for _ in range(rows):
        if offset + 2 > len(raw):
            raise FormatError(f"{path}: truncated record")
        (n,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        ids.append(raw[offset:offset + n].decode("utf-8"))
        offset += n
        body = raw[offset:offset + 4 * dim]
        if len(body) != 4 * dim:
            raise FormatError(f"{path}: truncated vector for {ids[-1]!r}")
        vecs.append(np.frombuffer(body, dtype="<f4"))
        offset += 4 * dim
    vectors = np.stack(vecs) if vecs else np.zeros((0, dim), np.float32)
    return EmbeddingSet(ROLES[tag], ids, vectors.astype(np.float32))


def load_precomputed_embeddings(path, expected_role: str, ids: Sequence[str],
                                expected_dim: int | None = None) -> EmbeddingSet:
    """Read an embedding file and realign its rows to ``ids``."""
    emb = read_embeddings(path)
    if emb.role != expected_role:
        raise DataError(f"{path}: holds role {emb.role!r}, expected {expected_role!r}")
    if expected_dim is not None and emb.dim != expected_dim:
        raise ShapeError(f"{path}: embedding dim {emb.dim}, model expects {expected_dim}")
    position = {sid: i for i, sid in enumerate(emb.ids)}
    wanted = set(ids)
    for sid in ids:
        if sid not in position:
            raise DataError(f"{path}: no embedding for spot {sid!r}")
    for sid in emb.ids:
        if sid not in wanted:
            raise DataError(f"{path}: unexpected spot {sid!r}")
    order = [position[sid] for sid in ids]
    return EmbeddingSet(emb.role, list(ids), emb.vectors[order])
