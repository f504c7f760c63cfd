"""Pretrain on a synthetic slide and run both evaluation protocols.

The slide is a 16x16 grid with four planted tissue domains that show up in
the expression of a few marker genes and in the colour and texture of the
image patches.  After pretraining we check whether the fused spot embedding
recovers the domains without supervision (k-means + ARI), and whether the
spot-image embedding alone predicts marker-gene expression on held-out spots.

    python demos/quickstart.py --steps 500 --out quickstart_out
"""

import argparse
import time
from pathlib import Path

from stalign.config import RunConfig, TrainConfig
from stalign.data import generate_synthetic_slide, marker_genes
from stalign.downstream import (
    batched_retrieval,
    cluster_map_svg,
    embed_slide,
    gene_prediction_eval,
    zero_shot_cluster_eval,
)
from stalign.model import prepare_pretrain_data
from stalign.trainer import checkpoint_bytes, init_state, parse_checkpoint, train


def progress(m):
    if m.step % 100 == 0:
        print(f"  step {m.step:4d}  loss {m.total:.3f}  "
              f"(spot {m.spot:.3f}, niche {m.niche:.3f}, spot-niche {m.ns:.3f})")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="quickstart_out")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = RunConfig(train=TrainConfig(steps=args.steps, seed=args.seed))
    slide, _ = generate_synthetic_slide(cfg.data.synthetic)
    print(f"slide: {slide.n_spots} spots, {slide.n_genes} genes, "
          f"{len(set(slide.labels.values()))} planted domains")

    # niches (spot + 3 nearest neighbours), preprocessing and model inputs
    data = prepare_pretrain_data(slide, cfg.model, cfg.data.niche_k)
    state = init_state(cfg, data)
    untrained = parse_checkpoint(checkpoint_bytes(state))

    start = time.perf_counter()
    history = train(state, data, metrics_path=out / "metrics.tsv", callback=progress)
    print(f"trained {len(history)} steps in {time.perf_counter() - start:.0f}s; "
          f"loss {history[0].total:.3f} -> {history[-1].total:.3f}")

    # zero-shot clustering of fused spot embeddings, with an untrained control
    ari, clusters = zero_shot_cluster_eval(slide, state, seed=0)
    control, _ = zero_shot_cluster_eval(slide, untrained, seed=0)
    print(f"zero-shot ARI: trained {ari:.3f}, untrained {control:.3f}")
    svg = cluster_map_svg(slide.coords(), clusters.assignments, slide.label_array(), title="fused spot k-means")
    (out / "cluster_map.svg").write_text(svg)

    # how well do paired image and gene embeddings find each other?
    emb = embed_slide(state, slide)
    top1 = batched_retrieval(emb["spot_image"], emb["spot_gene"], 32, 20, seed=0)
    print(f"image->gene top-1 retrieval in batches of 32: {top1:.3f} (chance {1 / 32:.3f})")

    # gene prediction from the spot-image embedding, 80/20 split
    genes = [slide.gene_names[g] for idx in marker_genes(cfg.data.synthetic).values() for g in idx]
    res = gene_prediction_eval(slide, state, cfg.eval, genes, seed=0)
    print(f"marker-gene prediction: held-out MSE {res.mse:.3f}, "
          f"train-mean baseline {res.baseline_mse:.3f}")
    print(f"wrote {out / 'metrics.tsv'} and {out / 'cluster_map.svg'}")


if __name__ == "__main__":
    main()
