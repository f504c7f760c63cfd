"""Replace a frozen stand-in with externally computed embeddings.

The niche-image and spot-gene paths use seeded random-feature networks in
place of large pretrained encoders.  Any other encoder can be dropped in by
writing its per-spot vectors to an embedding file and passing it to
training.  Here the "external" niche-image encoder is a PCA of the niche
mosaics followed by a random rotation to the model width, standing in for
whatever pretrained model you have.

    python demos/precomputed_embeddings.py --steps 500
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from stalign.config import RunConfig, TrainConfig
from stalign.data import generate_synthetic_slide
from stalign.downstream import zero_shot_cluster_eval
from stalign.encoders import EmbeddingSet, load_precomputed_embeddings, save_embeddings
from stalign.model import prepare_pretrain_data
from stalign.trainer import init_state, train


def pca_niche_features(niche_images: np.ndarray, dim: int, seed: int = 0) -> np.ndarray:
    flat = niche_images.reshape(len(niche_images), -1).astype(np.float64) / 255.0
    flat -= flat.mean(axis=0)
    _, _, vt = np.linalg.svd(flat, full_matrices=False)
    comps = flat @ vt[:dim].T
    rot, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(dim, dim)))
    return comps @ rot


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args()

    cfg = RunConfig(train=TrainConfig(steps=args.steps))
    slide, _ = generate_synthetic_slide(cfg.data.synthetic)
    data = prepare_pretrain_data(slide, cfg.model, cfg.data.niche_k)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "niche_image.stem"
        # rows may come in any order; loading realigns them to the slide's spot ids
        order = np.random.default_rng(1).permutation(data.n_spots)
        vectors = pca_niche_features(data.niche_images, cfg.model.embed_dim)
        save_embeddings(EmbeddingSet("niche_image", [data.ids[i] for i in order], vectors[order]), path)
        external = load_precomputed_embeddings(path, "niche_image", data.ids, cfg.model.embed_dim)

    for label, overrides in (("random-feature stand-in", None), ("PCA drop-in", {"niche_image": external.vectors})):
        state = init_state(cfg, data)
        history = train(state, data, frozen_overrides=overrides)
        ari, _ = zero_shot_cluster_eval(slide, state, seed=0)
        print(f"{label:<24} final niche loss {history[-1].niche:.3f}  zero-shot ARI {ari:.3f}")


if __name__ == "__main__":
    main()
