"""Full model: four encoder paths, projections, and spot/niche fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ExpressionScaler, Slide
from .encoders import (
    ModelConfig,
    NicheGeneEncoder,
    RandomFeatureEncoder,
    SpotImageEncoder,
    frozen_niche_image_encoder,
    frozen_spot_gene_encoder,
    patches_to_array,
)
from .errors import DataError
from .fusion import AbfnConfig, ConcatFusion, FusionNetwork
from .layers import Linear, Module
from .numerics import Rng, Tensor, no_grad
from .objectives import (
    ObjectiveConfig,
    effective_lambdas,
    niche_infonce,
    spot_niche_loss,
    symmetric_infonce,
    total_loss,
)
from .spatial import compose_mosaic, niche_member_matrix


@dataclass(eq=False)
class PretrainData:
    """Per-spot arrays aligned to the slide's spot order."""

    ids: list[str]
    spot_images: np.ndarray      # (N, 3, P, P) float32 in [0, 1]
    spot_expression: np.ndarray  # (N, G) preprocessed
    niche_images: np.ndarray     # (N, S, S, 3) uint8
    niche_expression: np.ndarray  # (N, G) mean of preprocessed member rows
    members: np.ndarray          # (N, k+1) indices, center first
    scaler: ExpressionScaler
    gene_names: list[str]
    coords: np.ndarray
    labels: np.ndarray | None = None
    raw_expression: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_spots(self) -> int:
        return len(self.ids)

    @property
    def n_genes(self) -> int:
        return self.spot_expression.shape[1]


def prepare_pretrain_data(slide: Slide, model_cfg: ModelConfig, k: int = 3,
                          scaler: ExpressionScaler | None = None) -> PretrainData:
    """Preprocess expression, build niches and stack model inputs.

    ``scaler`` defaults to one fitted on this slide.
    """
    raw = slide.expression_matrix()
    scaler = scaler or ExpressionScaler().fit(raw)
    expr = scaler.transform(raw)
    members = niche_member_matrix(slide, k)
    pixels = slide.patch_array()
    if pixels.shape[1:3] != (model_cfg.patch_size, model_cfg.patch_size):
        raise DataError(f"slide patches are {pixels.shape[2]}x{pixels.shape[1]}, model expects "
                        f"{model_cfg.patch_size}x{model_cfg.patch_size}")
    niche_images = np.stack([compose_mosaic([pixels[j] for j in row], model_cfg.niche_size) for row in members])
    labels = slide.label_array() if slide.labels is not None else None
    return PretrainData(
        ids=slide.ids,
        spot_images=patches_to_array(pixels),
        spot_expression=expr,
        niche_images=niche_images,
        niche_expression=expr[members].mean(axis=1),
        members=members,
        scaler=scaler,
        gene_names=list(slide.gene_names),
        coords=slide.coords(),
        labels=labels,
        raw_expression=raw,
    )


class _Pair(Module):
    def __init__(self, spot: Module, niche: Module):
        self.spot = spot
        self.niche = niche


class _Frozen(Module):
    pass


class STAlignModel(Module):
    """Parameter container and forward pass.

    With ``use_ae`` off the two trainable encoders are swapped for frozen
    random-feature maps followed by trainable linear projections.  With
    ``use_abfn`` off each level fuses by concatenation + linear projection.
    """

    def __init__(self, model_cfg: ModelConfig, abfn_cfg: AbfnConfig, n_genes: int, seed: int,
                 use_abfn: bool = True, use_ae: bool = True):
        model_cfg.validate()
        abfn_cfg.validate(model_cfg.embed_dim)
        self._cfg = model_cfg
        self._abfn_cfg = abfn_cfg
        self._n_genes = n_genes
        self._use_ae = use_ae
        self._use_abfn = use_abfn
        rng = Rng(seed, "init")
        d = model_cfg.embed_dim
        if use_ae:
            self.ae_img = SpotImageEncoder(model_cfg, rng.split("ae_img"))
            self.ae_gene = NicheGeneEncoder(model_cfg, n_genes, rng.split("ae_gene"))
        else:
            self.proj_spot_image = Linear(d, d, rng.split("proj_spot_image"))
            self.proj_niche_gene = Linear(d, d, rng.split("proj_niche_gene"))
        self.proj_spot_gene = Linear(d, d, rng.split("proj_spot_gene"))
        self.proj_niche_image = Linear(d, d, rng.split("proj_niche_image"))
        if use_abfn:
            self.abfn = _Pair(FusionNetwork(abfn_cfg, rng.split("abfn_spot")),
                              FusionNetwork(abfn_cfg, rng.split("abfn_niche")))
        else:
            self.concat = _Pair(ConcatFusion(d, rng.split("concat_spot")),
                                ConcatFusion(d, rng.split("concat_niche")))
        self.frozen = _Frozen()
        self.frozen.niche_image = frozen_niche_image_encoder(model_cfg)
        self.frozen.spot_gene = frozen_spot_gene_encoder(model_cfg, n_genes)
        if not use_ae:
            self.frozen.spot_image = RandomFeatureEncoder(
                3 * model_cfg.patch_size ** 2, model_cfg.frozen_hidden, d,
                model_cfg.frozen_seed, "spot_image", center=0.5)
            self.frozen.niche_gene = RandomFeatureEncoder(
                n_genes, model_cfg.frozen_hidden, d, model_cfg.frozen_seed, "niche_gene")

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def use_ae(self) -> bool:
        return self._use_ae

    @property
    def use_abfn(self) -> bool:
        return self._use_abfn

    @property
    def dtype(self):
        return self.proj_spot_gene.weight.dtype

    @property
    def fusion(self) -> _Pair:
        return self.abfn if self._use_abfn else self.concat

    # -- frozen features ---------------------------------------------------
    def frozen_features(self, data: PretrainData) -> dict[str, np.ndarray]:
        """Outputs of every frozen path for all spots (computed once)."""
        feats = {
            "niche_image": self.frozen.niche_image.encode(
                (data.niche_images.astype(np.float32) / 255.0)),
            "spot_gene": self.frozen.spot_gene.encode(data.spot_expression),
        }
        if not self._use_ae:
            feats["spot_image"] = self.frozen.spot_image.encode(data.spot_images.transpose(0, 2, 3, 1))
            feats["niche_gene"] = self.frozen.niche_gene.encode(data.niche_expression)
        return feats

    # -- forward -------------------------------------------------------------
    def embed(self, data: PretrainData, frozen: dict[str, np.ndarray], idx: np.ndarray,
              rng: Rng | None = None, training: bool = False) -> dict[str, Tensor]:
        """Embeddings R, S, E, T and fused F^S, F^N for spots ``idx``."""
        dt = self.dtype
        if self._use_ae:
            spot_image = self.ae_img(Tensor(data.spot_images[idx].astype(dt)))
            niche_gene = self.ae_gene(data.niche_expression[idx].astype(dt), rng, training)
        else:
            spot_image = self.proj_spot_image(Tensor(frozen["spot_image"][idx].astype(dt)))
            niche_gene = self.proj_niche_gene(Tensor(frozen["niche_gene"][idx].astype(dt)))
        spot_gene = self.proj_spot_gene(Tensor(frozen["spot_gene"][idx].astype(dt)))
        niche_image = self.proj_niche_image(Tensor(frozen["niche_image"][idx].astype(dt)))
        return {
            "spot_image": spot_image,
            "spot_gene": spot_gene,
            "niche_image": niche_image,
            "niche_gene": niche_gene,
            "fused_spot": self.fusion.spot(spot_image, spot_gene),
            "fused_niche": self.fusion.niche(niche_image, niche_gene),
        }

    def embed_all(self, data: PretrainData, frozen: dict[str, np.ndarray] | None = None,
                  batch: int = 128) -> dict[str, np.ndarray]:
        """Eval-mode embeddings of every role for all spots."""
        frozen = frozen if frozen is not None else self.frozen_features(data)
        chunks: dict[str, list[np.ndarray]] = {}
        with no_grad():
            for start in range(0, data.n_spots, batch):
                idx = np.arange(start, min(start + batch, data.n_spots))
                for role, t in self.embed(data, frozen, idx).items():
                    chunks.setdefault(role, []).append(t.data)
        return {role: np.concatenate(parts) for role, parts in chunks.items()}


def compute_losses(emb: dict[str, Tensor], obj: ObjectiveConfig, use_lns: bool = True) -> dict[str, Tensor]:
    tau, norm = obj.temperature, obj.normalize
    l_spot = symmetric_infonce(emb["spot_image"], emb["spot_gene"], tau, norm)
    l_niche = niche_infonce(emb["niche_image"], emb["niche_gene"], tau, norm)
    l_ns = spot_niche_loss(emb["fused_spot"], emb["fused_niche"], tau, norm)
    lam_s, lam_n = effective_lambdas(obj, use_lns)
    return {
        "total": total_loss(l_spot, l_niche, l_ns, lam_s, lam_n),
        "spot": l_spot,
        "niche": l_niche,
        "ns": l_ns,
    }
