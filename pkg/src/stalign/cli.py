"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numerical failure (non-finite loss, failed gradient check).

Training runs single-threaded by default, which is what makes repeated runs
bitwise identical.  ``--threads N`` lets the BLAS backend use N threads and
gives up that guarantee.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig, describe_defaults, load_config
from .data import (
    ExpressionScaler,
    atomic_write_text,
    expression_tsv,
    generate_synthetic_slide,
    load_slide_dir,
    save_slide,
)
from .downstream import (
    adjusted_rand_index,
    batched_retrieval,
    cluster_map_svg,
    embed_slide,
    gene_prediction_eval,
    kmeans,
    report_tsv,
)
from .encoders import ROLES, EmbeddingSet, load_precomputed_embeddings, read_embeddings, save_embeddings
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .gradsuite import END_TO_END, OP_CHECKS, format_table, run_suite
from .model import prepare_pretrain_data
from .spatial import build_niches, save_niches
from .trainer import METRICS_HEADER, init_state, load_checkpoint, save_checkpoint, train

log = logging.getLogger("stalign")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.validate()
    return cfg


def _slide(args, cfg: RunConfig):
    if getattr(args, "data", None):
        return load_slide_dir(args.data)
    slide, _ = generate_synthetic_slide(cfg.data.synthetic)
    return slide


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = _config(args)
    syn = cfg.data.synthetic
    if args.seed is not None:
        syn = dataclasses.replace(syn, seed=args.seed)
    slide, _ = generate_synthetic_slide(syn, slide_id=args.slide_id)
    out = _outdir(args.out)
    save_slide(slide, out)
    print(f"wrote {slide.n_spots} spots x {slide.n_genes} genes to {out}")
    return EXIT_OK


def cmd_niches(args) -> int:
    cfg = _config(args)
    slide = load_slide_dir(args.input)
    k = cfg.data.niche_k if args.k is None else args.k
    size = cfg.model.niche_size if args.size is None else args.size
    expr = ExpressionScaler().fit_transform(slide.expression_matrix())
    niches = build_niches(slide, k=k, target_size=size, expression=expr)
    out = _outdir(args.out or Path(args.input) / "niches")
    save_niches(niches, out, slide.gene_names)
    print(f"wrote {len(niches)} niches of {k + 1} members to {out}")
    return EXIT_OK


def _parse_precomputed(items, data, model_cfg) -> dict[str, np.ndarray]:
    overrides = {}
    for item in items or []:
        role, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--precomputed expects ROLE=PATH, got {item!r}")
        emb = load_precomputed_embeddings(path, role, data.ids, model_cfg.embed_dim)
        overrides[role] = emb.vectors
    return overrides


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg.train = dataclasses.replace(cfg.train, steps=args.steps)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    cfg.validate()
    slide = _slide(args, cfg)
    out = _outdir(args.out)
    metrics = out / "metrics.tsv"
    ckpt = out / "checkpoint.stck"

    if args.resume:
        state = load_checkpoint(args.resume)
        if state.config.train.steps < cfg.train.steps:
            state.config.train = dataclasses.replace(state.config.train, steps=cfg.train.steps)
        data = prepare_pretrain_data(slide, state.config.model, state.config.data.niche_k, scaler=state.scaler)
        previous = metrics.read_text(encoding="utf-8").splitlines() if metrics.exists() else [METRICS_HEADER]
        kept = [previous[0]] + [ln for ln in previous[1:] if ln and int(ln.split("\t")[0]) <= state.step]
    else:
        data = prepare_pretrain_data(slide, cfg.model, cfg.data.niche_k)
        state = init_state(cfg, data)
        save_checkpoint(state, out / "initial.stck")
        kept = [METRICS_HEADER]

    overrides = _parse_precomputed(args.precomputed, data, state.config.model)
    # metrics go to a temp file that replaces metrics.tsv once training ends
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".metrics.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write("\n".join(kept) + "\n")
    try:
        history = train(state, data, metrics_path=tmp, checkpoint_path=ckpt, frozen_overrides=overrides)
        os.replace(tmp, metrics)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    if history:
        first, last = history[0], history[-1]
        print(f"steps {first.step}-{last.step}: loss {first.total:.4f} -> {last.total:.4f}; checkpoint {ckpt}")
    else:
        print(f"already at step {state.step}; nothing to do")
    return EXIT_OK


def cmd_embed(args) -> int:
    state = load_checkpoint(args.checkpoint)
    slide = load_slide_dir(args.data)
    roles = ROLES if args.roles == "all" else tuple(r.strip() for r in args.roles.split(","))
    unknown = [r for r in roles if r not in ROLES]
    if unknown:
        raise ConfigError(f"unknown role {unknown[0]!r}; choose from {', '.join(ROLES)}")
    emb = embed_slide(state, slide)
    out = _outdir(args.out)
    for role in roles:
        save_embeddings(EmbeddingSet(role, slide.ids, emb[role]), out / f"{role}.stem")
    print(f"wrote {len(roles)} embedding files for {slide.n_spots} spots to {out}")
    return EXIT_OK


def _fused_vectors(args, cfg: RunConfig):
    """(ids, F^S vectors, slide or None) from either an embedding file or a checkpoint."""
    slide = load_slide_dir(args.data) if args.data else None
    if args.embeddings:
        emb = read_embeddings(args.embeddings)
        if emb.role != "fused_spot":
            raise DataError(f"{args.embeddings}: holds {emb.role!r} embeddings, clustering needs fused_spot")
        if slide is not None:
            emb = load_precomputed_embeddings(args.embeddings, "fused_spot", slide.ids)
        return emb.ids, emb.vectors, slide
    if not (args.checkpoint and slide is not None):
        raise UsageError("cluster needs --embeddings, or --checkpoint together with --data")
    state = load_checkpoint(args.checkpoint)
    return slide.ids, embed_slide(state, slide)["fused_spot"], slide


def cmd_cluster(args) -> int:
    cfg = _config(args)
    ids, vectors, slide = _fused_vectors(args, cfg)
    truth = slide.label_array() if slide is not None and slide.labels is not None else None
    k = args.k if args.k is not None else (len(set(truth.tolist())) if truth is not None else None)
    if k is None:
        raise UsageError("--k is required when the slide carries no labels")
    seed = cfg.eval.split_seed if args.seed is None else args.seed
    result = kmeans(vectors, k, seed=seed, restarts=cfg.eval.kmeans_restarts,
                    max_iter=cfg.eval.kmeans_max_iter, ids=ids)
    out = _outdir(args.out)
    atomic_write_text(out / "clusters.tsv", "spot_id\tcluster\n" + "".join(
        f"{sid}\t{c}\n" for sid, c in zip(ids, result.assignments)))
    rows = [("inertia", slide.slide_id if slide else "-", result.inertia, seed)]
    if truth is not None:
        ari = adjusted_rand_index(result.assignments, truth)
        rows.insert(0, ("ari", slide.slide_id, ari, seed))
        print(f"ARI {ari:.4f} (k={k})")
    if slide is not None:
        atomic_write_text(out / "cluster_map.svg",
                          cluster_map_svg(slide.coords(), result.assignments, truth, title=slide.slide_id))
    atomic_write_text(out / "report.tsv", report_tsv(rows))
    return EXIT_OK


def cmd_predict_genes(args) -> int:
    cfg = _config(args)
    state = load_checkpoint(args.checkpoint)
    slide = load_slide_dir(args.data)
    genes = [g.strip() for g in args.genes.split(",")] if args.genes else None
    seed = 0 if args.seed is None else args.seed
    res = gene_prediction_eval(slide, state, cfg.eval, genes, seed=seed)
    out = _outdir(args.out)
    atomic_write_text(out / "predictions.tsv", expression_tsv(res.test_ids, res.head.target_genes, res.predictions))
    atomic_write_text(out / "report.tsv", report_tsv([
        ("mse", slide.slide_id, res.mse, seed),
        ("baseline_mse", slide.slide_id, res.baseline_mse, seed),
    ]))
    print(f"held-out MSE {res.mse:.4f} (train-mean baseline {res.baseline_mse:.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    state = load_checkpoint(args.checkpoint)
    slide = load_slide_dir(args.data)
    seed = 0 if args.seed is None else args.seed
    emb = embed_slide(state, slide)
    rows = []
    truth = slide.label_array() if slide.labels is not None else None
    if truth is not None:
        k = len(set(truth.tolist()))
        result = kmeans(emb["fused_spot"], k, seed=seed, restarts=cfg.eval.kmeans_restarts,
                        max_iter=cfg.eval.kmeans_max_iter, ids=slide.ids)
        rows.append(("ari", slide.slide_id, adjusted_rand_index(result.assignments, truth), seed))
    genes = [g.strip() for g in args.genes.split(",")] if args.genes else None
    res = gene_prediction_eval(slide, state, cfg.eval, genes, seed=seed)
    rows.append(("mse", slide.slide_id, res.mse, seed))
    rows.append(("baseline_mse", slide.slide_id, res.baseline_mse, seed))
    u = state.config.train.batch_size
    if slide.n_spots >= u:
        rows.append(("retrieval_top1", slide.slide_id,
                     batched_retrieval(emb["spot_image"], emb["spot_gene"], u, cfg.eval.retrieval_batches, seed), seed))
    out = _outdir(args.out)
    atomic_write_text(out / "report.tsv", report_tsv(rows))
    if truth is not None:
        atomic_write_text(out / "cluster_map.svg",
                          cluster_map_svg(slide.coords(), result.assignments, truth, title=slide.slide_id))
    for metric, _, value, _ in rows:
        print(f"{metric}\t{value:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.ops == "all":
        names = list(OP_CHECKS)
    else:
        names = [n.strip() for n in args.ops.split(",") if n.strip()]
    if args.end_to_end:
        names += [n for n in END_TO_END if n not in names]
    try:
        rows = run_suite(names, seed=0 if args.seed is None else args.seed)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    print(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def cmd_version(args) -> int:
    print(f"stalign {__version__}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    defaults = "config keys and defaults:\n\n" + describe_defaults()
    parser = _Parser(prog="stalign", description="Spot/niche image-gene pretraining at desk scale.",
                     epilog=defaults, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_text, config=True, seed=True):
        p = sub.add_parser(name, help=help_text, description=help_text,
                           epilog=defaults if config else None,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(fn=fn)
        if config:
            p.add_argument("--config", help="sectioned key = value config file")
        if seed:
            p.add_argument("--seed", type=int, help="override the relevant seed")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS threads (default 1; >1 voids bitwise reproducibility)")
        return p

    p = add("synth", cmd_synth, "generate a synthetic slide with planted domains")
    p.add_argument("--out", required=True)
    p.add_argument("--slide-id", default="synthetic")

    p = add("niches", cmd_niches, "build spot niches (k nearest neighbours plus the spot)", seed=False)
    p.add_argument("--in", dest="input", required=True, help="slide directory")
    p.add_argument("--k", type=int)
    p.add_argument("--size", type=int, help="niche image side in pixels")
    p.add_argument("--out", help="output directory (default: <in>/niches)")

    p = add("pretrain", cmd_pretrain, "train the model; writes metrics.tsv and checkpoint.stck")
    p.add_argument("--data", help="slide directory (default: synthesize from the config)")
    p.add_argument("--out", default="run")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--precomputed", action="append", metavar="ROLE=PATH",
                   help="use an embedding file instead of a frozen stand-in (niche_image, spot_gene)")

    p = add("embed", cmd_embed, "export per-spot embeddings", config=False, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--roles", default="all", help=f"comma list from {', '.join(ROLES)}")

    p = add("cluster", cmd_cluster, "k-means on fused spot embeddings, ARI and SVG map")
    p.add_argument("--embeddings", help="fused_spot embedding file")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)

    p = add("predict-genes", cmd_predict_genes, "fit a gene head on image embeddings, score held-out spots")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--genes", help="comma list of target genes (default: config, then all genes)")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "clustering, gene prediction and retrieval report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--genes")
    p.add_argument("--out", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op", config=False)
    p.add_argument("--ops", default="all", help=f"'all' or a comma list from {', '.join(OP_CHECKS)}")
    p.add_argument("--end-to-end", action="store_true", help="also check the full loss (tolerance 1e-4)")

    add("version", cmd_version, "print the version", config=False, seed=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, OSError, UnicodeDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def run(argv: list[str] | None = None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
