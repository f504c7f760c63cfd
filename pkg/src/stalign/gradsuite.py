"""Finite-difference checks for every differentiable op and the full loss.

Each entry of :data:`OP_CHECKS` builds a small random 64-bit instance and
returns the max relative error between backprop and central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import SyntheticConfig, generate_synthetic_slide
from .encoders import ModelConfig
from .fusion import AbfnConfig, FusionNetwork, cross_attend
from .model import STAlignModel, compute_losses, prepare_pretrain_data
from .numerics import Rng, Tensor, check_parameters, grad_check
from .objectives import ObjectiveConfig, niche_infonce, spot_niche_loss, symmetric_infonce

PRIMITIVE_TOL = 1e-5
END_TO_END_TOL = 1e-4


def _unary(op: Callable[[Tensor], Tensor], shape=(3, 4), low=-2.0, high=2.0, away_from_zero=False):
    def check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        x = rng.uniform(low, high, shape)
        if away_from_zero:
            x = np.sign(x) * (0.1 + np.abs(x))
        return grad_check(op, x, seed=seed)
    return check


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False):
    def check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        a = rng.normal(size=shape_a)
        if positive_b:
            b = rng.uniform(0.5, 2.0, shape_b) * rng.choice([-1, 1], shape_b)
        else:
            b = rng.normal(size=shape_b)
        return grad_check(op, [a, b], seed=seed)
    return check


def _check_concat(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 5))
    return grad_check(lambda x, y: nx.concat([x, y], axis=1), [a, b], seed=seed)


def _check_getitem(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 4))
    rows = np.array([0, 2, 2, 4])
    w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=(4, 4))
    return grad_check(lambda t: (t[1:4, ::2] * w1).sum() + (t[rows] * w2).sum(), x, seed=seed)


def _check_dropout(seed: int) -> float:
    x = np.random.default_rng(seed).normal(size=(4, 6))
    # the mask must be identical on every evaluation, so re-seed each call
    return grad_check(lambda t: nx.dropout(t, 0.3, Rng(seed, "mask"), True), x, seed=seed)


def _check_layer_norm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, g, b = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    return grad_check(lambda t, gg, bb: nx.layer_norm(t, gg, bb), [x, g, b], seed=seed)


def _check_embedding(seed: int) -> float:
    table = np.random.default_rng(seed).normal(size=(5, 3))
    idx = np.array([[0, 4], [4, 2]])
    return grad_check(lambda t: nx.embedding_lookup(t, idx), table, seed=seed)


def _check_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(1, 2, 5, 6)), rng.normal(size=(2, 2, 3, 3))
    return grad_check(lambda a, b: nx.conv2d(a, b, stride=2, padding=1), [x, k], seed=seed)


def _check_mean_pool(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 5, 4))
    w1, w2 = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3))
    return grad_check(lambda t: (nx.mean_pool(t, 2) * w1).sum() + (nx.mean_pool(t) * w2).sum(), x, seed=seed)


def _check_attention(seed: int) -> float:
    rng = np.random.default_rng(seed)
    q, k, v = (rng.normal(size=(2, 4, 3)) for _ in range(3))
    return grad_check(nx.scaled_dot_product_attention, [q, k, v], seed=seed)


def _check_cross_attend(seed: int) -> float:
    rng = np.random.default_rng(seed)
    s, l = 4, 4
    args = [rng.normal(size=(3, s * l)), rng.normal(size=(3, s * l))]
    # init-scale projections keep the softmax out of saturation, where the
    # true gradients sink below what eps=1e-6 differences can resolve
    args += [rng.normal(size=(l, l)) * 0.3 for _ in range(3)]
    return grad_check(lambda a, c, q, k, v: cross_attend(a, c, q, k, v, s, l), args, seed=seed)


def _check_fusion(seed: int) -> float:
    net = FusionNetwork(AbfnConfig(tokens=4, token_dim=4), Rng(seed, "fusion"))
    net.astype(np.float64)
    rng = np.random.default_rng(seed)
    img, gene = Tensor(rng.normal(size=(3, 16))), Tensor(rng.normal(size=(3, 16)))
    w = rng.normal(size=(3, 16))
    errs = check_parameters(lambda: (net(img, gene) * w).sum(), net.named_parameters())
    inputs = grad_check(net, [img.data, gene.data], seed=seed)
    return max(max(errs.values()), inputs)


def _loss_check(loss):
    def check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        return grad_check(lambda x, y: loss(x, y, 0.5), [a, b], seed=seed)
    return check


def micro_setup(seed: int = 0):
    """Tiny 64-bit model plus a 4-pair batch for end-to-end checks."""
    syn = SyntheticConfig(grid_side=3, n_domains=2, n_genes=8, patch_size=8, seed=seed)
    slide, _ = generate_synthetic_slide(syn)
    mcfg = ModelConfig(embed_dim=16, patch_size=8, niche_size=16, img_channels=(3, 4),
                       gene_layers=1, gene_heads=2, gene_tokens=4, token_dim=8, frozen_hidden=8)
    data = prepare_pretrain_data(slide, mcfg, k=3)
    return data, mcfg


def _check_end_to_end(seed: int, use_abfn: bool = True, use_ae: bool = True) -> dict[str, float]:
    data, mcfg = micro_setup(seed)
    model = STAlignModel(mcfg, AbfnConfig(tokens=4, token_dim=4), data.n_genes, seed,
                         use_abfn=use_abfn, use_ae=use_ae)
    model.astype(np.float64)
    frozen = model.frozen_features(data)
    idx = np.array([0, 2, 4, 7])
    obj = ObjectiveConfig()

    def loss() -> Tensor:
        return compute_losses(model.embed(data, frozen, idx), obj)["total"]

    return check_parameters(loss, model.named_parameters(), max_coords=6, seed=seed)


def _e2e(seed: int) -> float:
    return max(_check_end_to_end(seed).values())


OP_CHECKS: dict[str, Callable[[int], float]] = {
    "add": _binary(nx.add, (3, 4), (1, 4)),
    "sub": _binary(nx.sub, (3, 4), (3, 1)),
    "mul": _binary(nx.mul, (2, 3, 4), (3, 4)),
    "div": _binary(nx.div, (3, 4), (3, 4), positive_b=True),
    "neg": _unary(nx.neg),
    "exp": _unary(nx.exp),
    "log": _unary(nx.log, low=0.2, high=3.0),
    "square": _unary(nx.square),
    "sum": _unary(lambda t: nx.tsum(t, axis=1, keepdims=True)),
    "mean": _unary(lambda t: nx.tmean(t, axis=0)),
    "reshape": _unary(lambda t: nx.reshape(t, (2, 6))),
    "transpose": _unary(lambda t: nx.transpose(t, (2, 0, 1)), shape=(2, 3, 4)),
    "swapaxes": _unary(lambda t: nx.swapaxes(t, 0, 2), shape=(2, 3, 4)),
    "concat": _check_concat,
    "getitem": _check_getitem,
    "matmul": _binary(nx.matmul, (2, 3, 4), (4, 5)),
    "relu": _unary(nx.relu, away_from_zero=True),
    "gelu": _unary(nx.gelu),
    "softmax": _unary(lambda t: nx.softmax(t, axis=1)),
    "log_softmax": _unary(lambda t: nx.log_softmax(t, axis=0)),
    "l2_normalize": _unary(lambda t: nx.l2_normalize(t, axis=1)),
    "layer_norm": _check_layer_norm,
    "dropout": _check_dropout,
    "embedding_lookup": _check_embedding,
    "conv2d": _check_conv2d,
    "mean_pool": _check_mean_pool,
    "attention": _check_attention,
    "cross_attend": _check_cross_attend,
    "abfn": _check_fusion,
    "symmetric_infonce": _loss_check(symmetric_infonce),
    "niche_infonce": _loss_check(niche_infonce),
    "spot_niche_loss": _loss_check(spot_niche_loss),
}

END_TO_END: dict[str, Callable[[int], float]] = {"total_loss": _e2e}


@dataclass
class CheckRow:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run_suite(names: list[str] | None = None, seed: int = 0) -> list[CheckRow]:
    """Run the named checks (all when ``names`` is None) in registry order."""
    registry = {**{k: (f, PRIMITIVE_TOL) for k, f in OP_CHECKS.items()},
                **{k: (f, END_TO_END_TOL) for k, f in END_TO_END.items()}}
    if names is None:
        names = list(registry)
    unknown = [n for n in names if n not in registry]
    if unknown:
        raise KeyError(f"unknown gradient check {unknown[0]!r}; known: {', '.join(registry)}")
    rows = []
    for name in names:
        fn, tol = registry[name]
        start = time.perf_counter()
        err = fn(seed)
        rows.append(CheckRow(name, err, tol, time.perf_counter() - start))
    return rows


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'op':<{width}}  max_rel_error  tolerance  status"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.error:13.3e}  {r.tolerance:9.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
