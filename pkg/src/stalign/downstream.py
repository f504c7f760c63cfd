"""Zero-shot spatial clustering, gene-expression prediction and diagnostics."""

from __future__ import annotations

import html
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import EvalConfig
from .data import ExpressionScaler, Slide, train_val_split
from .errors import ConfigError, DataError, ShapeError
from .layers import Linear, Module
from .model import prepare_pretrain_data
from .numerics import Rng, Tensor, gelu, no_grad, square
from .trainer import TrainState, adamw_step


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class ClusterResult:
    assignments: np.ndarray
    k: int
    inertia: float
    seed: int
    ids: list[str] | None = None
    inertia_trace: list[float] = field(default_factory=list)

    def as_map(self) -> dict[str, int]:
        ids = self.ids if self.ids is not None else [str(i) for i in range(len(self.assignments))]
        return {sid: int(c) for sid, c in zip(ids, self.assignments)}


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already sits on a center; pick any unused point
            choice = rng.integers(n)
        else:
            choice = rng.choice(n, p=closest / total)
        centers.append(x[choice])
        closest = np.minimum(closest, ((x - x[choice]) ** 2).sum(1))
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    labels = None
    trace = []
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new_labels = d.argmin(1)
        trace.append(float(d[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(len(centers)):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(0)
    d = _sq_dists(x, centers)
    labels = d.argmin(1)
    inertia = float(((x - centers[labels]) ** 2).sum())
    return labels, centers, inertia, trace


def kmeans(vectors: np.ndarray, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300,
           ids: Sequence[str] | None = None) -> ClusterResult:
    """k-means++ seeding and Lloyd iterations; keeps the lowest-inertia restart."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"kmeans expects an (N, d) matrix, got {x.shape}")
    if k < 1 or len(x) < k:
        raise ConfigError(f"kmeans needs 1 <= k <= N, got k={k}, N={len(x)}")
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    rng = Rng(seed, "kmeans")
    best = None
    for r in range(restarts):
        centers = _kmeans_pp(x, k, rng.split(f"restart{r}"))
        labels, _, inertia, trace = _lloyd(x, centers.copy(), max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterResult(labels, k, inertia, seed, list(ids) if ids is not None else None, trace)
    return best


# ---------------------------------------------------------------------------
# adjusted Rand index
# ---------------------------------------------------------------------------
def _comb2(n):
    return n * (n - 1) // 2


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected pair agreement between two partitions.

    ``a`` and ``b`` are equal-length sequences, or mappings with identical
    key sets (values are compared per key).
    """
    if isinstance(a, dict) or isinstance(b, dict):
        if not (isinstance(a, dict) and isinstance(b, dict)):
            raise DataError("both labelings must be mappings when one is")
        if set(a) != set(b):
            diff = sorted(set(a) ^ set(b))
            raise DataError(f"labelings cover different spot ids (e.g. {diff[0]!r})")
        keys = sorted(a)
        a = [a[k] for k in keys]
        b = [b[k] for k in keys]
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"labelings differ in length: {a.shape} vs {b.shape}")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if n else 0, bi.max() + 1 if n else 0), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    # exact integer pair counts; the only rounding is the final division
    index = int(_comb2(table).sum())
    row = int(_comb2(table.sum(1)).sum())
    col = int(_comb2(table.sum(0)).sum())
    total = _comb2(n)
    if total == 0:
        return 1.0
    numerator = 2 * (index * total - row * col)
    denominator = (row + col) * total - 2 * row * col
    if denominator == 0:
        # both partitions trivial (all-in-one or all singletons) in the same way
        return 1.0
    return numerator / denominator


def embed_slide(state: TrainState, slide: Slide) -> dict[str, np.ndarray]:
    """Eval-mode embeddings of every role, using the checkpoint's own scaler."""
    cfg = state.config
    data = prepare_pretrain_data(slide, cfg.model, cfg.data.niche_k, scaler=state.scaler)
    return state.model.embed_all(data)


def zero_shot_cluster_eval(slide: Slide, state: TrainState, k: int | None = None, seed: int = 0,
                           restarts: int = 10, max_iter: int = 300) -> tuple[float, ClusterResult]:
    """k-means on fused spot embeddings, scored against the slide's labels."""
    truth = slide.label_array()
    k = len(set(truth.tolist())) if k is None else k
    fused = embed_slide(state, slide)["fused_spot"]
    result = kmeans(fused, k, seed=seed, restarts=restarts, max_iter=max_iter, ids=slide.ids)
    return adjusted_rand_index(result.assignments, truth), result


# ---------------------------------------------------------------------------
# regression head
# ---------------------------------------------------------------------------
def mse(pred, truth) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"mse: prediction {p.shape} vs truth {t.shape}")
    return float(((p - t) ** 2).mean())


class _MLP(Module):
    def __init__(self, n_in: int, hidden: int, n_out: int, rng: Rng):
        self.fc1 = Linear(n_in, hidden, rng.split("fc1"))
        self.fc2 = Linear(hidden, n_out, rng.split("fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


@dataclass(eq=False)
class GeneHead:
    """One-hidden-layer regressor from frozen embeddings to gene values."""

    target_genes: list[str]
    hidden: int
    network: _MLP
    input_mean: np.ndarray
    input_std: np.ndarray
    train_mse: float

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        x = (np.asarray(embeddings, dtype=np.float64) - self.input_mean) / self.input_std
        with no_grad():
            return self.network(Tensor(x)).data


def fit_gene_head(train_embeddings: np.ndarray, train_targets: np.ndarray, hidden: int = 64,
                  seed: int = 0, epochs: int = 300, lr: float = 1e-2, weight_decay: float = 1e-4,
                  target_genes: Sequence[str] | None = None) -> GeneHead:
    """Full-batch AdamW on mean squared error; embeddings stay fixed inputs."""
    x = np.asarray(train_embeddings, dtype=np.float64)
    y = np.asarray(train_targets, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"gene head: embeddings {x.shape} and targets {y.shape} do not pair up")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    mu = x.mean(0)
    sd = x.std(0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xs = Tensor((x - mu) / sd)
    net = _MLP(x.shape[1], hidden, y.shape[1], Rng(seed, "gene_head"))
    net.astype(np.float64)
    params = net.named_parameters()
    moments: dict = {}
    yt = Tensor(y)
    for epoch in range(1, epochs + 1):
        for p in params.values():
            p.grad = None
        loss = square(net(xs) - yt).mean()
        loss.backward()
        adamw_step({n: p.data for n, p in params.items()}, {n: p.grad for n, p in params.items()},
                   moments, lr, weight_decay, 0.9, 0.999, 1e-8, epoch)
    with no_grad():
        final = mse(net(xs).data, y)
    genes = list(target_genes) if target_genes is not None else [str(i) for i in range(y.shape[1])]
    return GeneHead(genes, hidden, net, mu, sd, final)


@dataclass(eq=False)
class GenePrediction:
    head: GeneHead
    test_ids: list[str]
    predictions: np.ndarray
    targets: np.ndarray
    mse: float
    baseline_mse: float


def gene_prediction_eval(slide: Slide, state: TrainState, eval_cfg: EvalConfig | None = None,
                         target_genes: Sequence[str] | None = None, seed: int = 0) -> GenePrediction:
    """Fit a head from spot-image embeddings on the train split, score the rest.

    Targets are log1p + standardized with statistics from the training spots
    only. ``baseline_mse`` predicts the training mean for every held-out spot.
    """
    ec = eval_cfg or EvalConfig()
    genes = list(target_genes or ec.target_genes or slide.gene_names)
    missing = [g for g in genes if g not in slide.gene_names]
    if missing:
        raise DataError(f"target gene {missing[0]!r} is not in the slide")
    cols = [slide.gene_names.index(g) for g in genes]
    train_ids, _ = train_val_split(slide, ec.train_fraction, ec.split_seed)
    is_train = np.array([sid in train_ids for sid in slide.ids])
    if is_train.all() or not is_train.any():
        raise ConfigError("train/held-out split leaves one side empty")
    raw = slide.expression_matrix()
    scaler = ExpressionScaler().fit(raw[is_train])
    targets = scaler.transform(raw)[:, cols]
    emb = embed_slide(state, slide)["spot_image"]
    head = fit_gene_head(emb[is_train], targets[is_train], hidden=ec.head_hidden, seed=seed,
                         epochs=ec.head_epochs, lr=ec.head_lr, weight_decay=ec.head_weight_decay,
                         target_genes=genes)
    pred = head.predict(emb[~is_train])
    truth = targets[~is_train]
    baseline = np.broadcast_to(targets[is_train].mean(0), truth.shape)
    test_ids = [sid for sid, t in zip(slide.ids, is_train) if not t]
    return GenePrediction(head, test_ids, pred, truth, mse(pred, truth), mse(baseline, truth))


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------
def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def retrieval_topk(image_emb: np.ndarray, gene_emb: np.ndarray, k: int = 1) -> float:
    """Fraction of image rows whose paired gene row ranks in the top ``k`` by cosine."""
    a = np.asarray(image_emb, dtype=np.float64)
    b = np.asarray(gene_emb, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"retrieval needs matching (u, d) matrices, got {a.shape} and {b.shape}")
    u = len(a)
    if not 1 <= k <= u:
        raise ConfigError(f"k must be in [1, {u}], got {k}")
    sims = _unit_rows(a) @ _unit_rows(b).T
    positive = np.diag(sims)
    # rank = number of candidates strictly better than the true partner
    rank = (sims > positive[:, None]).sum(1)
    return float((rank < k).mean())


def batched_retrieval(image_emb: np.ndarray, gene_emb: np.ndarray, batch: int, n_batches: int,
                      seed: int = 0, k: int = 1) -> float:
    """Mean within-batch retrieval accuracy over random batches."""
    rng = Rng(seed, "retrieval")
    scores = []
    for _ in range(n_batches):
        idx = rng.choice(len(image_emb), size=batch, replace=False)
        scores.append(retrieval_topk(image_emb[idx], gene_emb[idx], k))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------
def report_tsv(rows: Sequence[tuple[str, str, float, int]]) -> str:
    lines = ["metric\tslide_id\tvalue\tseed"]
    lines += [f"{m}\t{s}\t{repr(float(v))}\t{seed}" for m, s, v, seed in rows]
    return "\n".join(lines) + "\n"


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
            "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def cluster_map_svg(coords: np.ndarray, clusters: Sequence, truth: Sequence | None = None,
                    title: str = "clusters", panel: int = 320) -> str:
    """Scatter of spot coordinates coloured by cluster (and by truth if given)."""
    coords = np.asarray(coords, dtype=np.float64)
    panels = [("predicted", list(clusters))]
    if truth is not None:
        panels.append(("ground truth", list(truth)))
    lo = coords.min(0)
    span = np.maximum(coords.max(0) - lo, 1e-9)
    margin = 20
    inner = panel - 2 * margin
    n = max(len(coords), 1)
    radius = max(1.5, 0.45 * inner / math.sqrt(n))
    width = panel * len(panels)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{panel + 20}" '
             f'viewBox="0 0 {width} {panel + 20}">',
             f'<title>{html.escape(title)}</title>']
    for p, (label, values) in enumerate(panels):
        codes = {v: i for i, v in enumerate(sorted(set(map(str, values))))}
        x0 = p * panel
        parts.append(f'<text x="{x0 + margin}" y="14" font-size="12">{html.escape(label)}</text>')
        for (cx, cy), v in zip(coords, values):
            px = x0 + margin + (cx - lo[0]) / span[0] * inner
            py = 20 + margin + (cy - lo[1]) / span[1] * inner
            color = _PALETTE[codes[str(v)] % len(_PALETTE)]
            parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="{radius:.2f}" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
