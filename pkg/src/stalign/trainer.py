"""Deterministic pretraining loop, AdamW, schedules and checkpoints."""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig, TrainConfig, from_text, to_text
from .data import ExpressionScaler, atomic_write_bytes
from .errors import DataError, FormatError, NumericalError, ShapeError, VersionError
from .model import PretrainData, STAlignModel, compute_losses
from .numerics import Rng
from .numerics.snapshot import read_table, write_table

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STCK"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step\tlr\twd\tloss_total\tloss_spot\tloss_niche\tloss_ns"


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------
def warmup_steps(cfg: TrainConfig) -> int:
    return int(round(cfg.warmup_fraction * cfg.steps))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to ``lr_floor``."""
    warm = warmup_steps(cfg)
    if warm > 0 and step <= warm:
        return cfg.lr_peak * step / warm
    progress = (step - warm) / max(cfg.steps - warm, 1)
    w = 0.5 * (1.0 + math.cos(math.pi * min(max(progress, 0.0), 1.0)))
    return (1.0 - w) * cfg.lr_floor + w * cfg.lr_peak


def wd_at(step: int, cfg: TrainConfig) -> float:
    """Cosine interpolation from ``wd_start`` (step 0) to ``wd_end`` (last step)."""
    progress = min(max(step / cfg.steps, 0.0), 1.0)
    w = 0.5 * (1.0 - math.cos(math.pi * progress))
    return (1.0 - w) * cfg.wd_start + w * cfg.wd_end


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               moments: dict[str, tuple[np.ndarray, np.ndarray]], lr: float, wd: float,
               beta1: float, beta2: float, eps: float, t: int) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``moments`` maps each name to its ``(m, v)`` buffers; missing entries are
    created as zeros.  The decay term uses the pre-update parameter and never
    enters the moment estimates.
    """
    if t < 1:
        raise ValueError(f"AdamW step counter starts at 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} does not match parameter {p.shape}")
        if name not in moments:
            moments[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = moments[name]
        if m.shape != p.shape:
            raise ShapeError(f"{name}: moment {m.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + eps) + wd * p
        p -= lr * update


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class Batch:
    indices: np.ndarray
    spot_images: np.ndarray
    spot_expression: np.ndarray
    niche_images: np.ndarray
    niche_expression: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def sample_indices(pool: np.ndarray, u: int, rng: Rng) -> np.ndarray:
    pool = np.asarray(pool)
    if len(pool) < u:
        raise DataError(f"batch size {u} exceeds pool of {len(pool)} spots")
    return pool[rng.choice(len(pool), size=u, replace=False)]


def assemble_batch(data: PretrainData, pool: np.ndarray, u: int, rng: Rng) -> Batch:
    """``u`` distinct spots drawn without replacement, each with its niche."""
    idx = sample_indices(pool, u, rng)
    return Batch(idx, data.spot_images[idx], data.spot_expression[idx],
                 data.niche_images[idx], data.niche_expression[idx])


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class TrainState:
    config: RunConfig
    model: STAlignModel
    scaler: ExpressionScaler
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0
    batch_rng: Rng | None = None
    dropout_rng: Rng | None = None

    def __post_init__(self):
        seed = self.config.train.seed
        self.batch_rng = self.batch_rng or Rng(seed, "batches")
        self.dropout_rng = self.dropout_rng or Rng(seed, "dropout")


def build_model(cfg: RunConfig, n_genes: int) -> STAlignModel:
    t = cfg.train
    return STAlignModel(cfg.model, cfg.abfn, n_genes, seed=t.seed, use_abfn=t.use_abfn, use_ae=t.use_ae)


def init_state(cfg: RunConfig, data: PretrainData) -> TrainState:
    cfg.validate()
    return TrainState(cfg, build_model(cfg, data.n_genes), data.scaler)


@dataclass(eq=False)
class StepMetrics:
    step: int
    lr: float
    wd: float
    total: float
    spot: float
    niche: float
    ns: float

    def tsv(self) -> str:
        values = (self.lr, self.wd, self.total, self.spot, self.niche, self.ns)
        return f"{self.step}\t" + "\t".join(repr(float(v)) for v in values)


def train_step(state: TrainState, data: PretrainData, frozen: dict[str, np.ndarray]) -> StepMetrics:
    cfg = state.config
    tc = cfg.train
    batch = assemble_batch(data, np.arange(data.n_spots), tc.batch_size, state.batch_rng)
    params = state.model.named_parameters()
    for p in params.values():
        p.grad = None
    emb = state.model.embed(data, frozen, batch.indices, state.dropout_rng, training=True)
    losses = compute_losses(emb, cfg.objective, use_lns=tc.use_lns)
    total = losses["total"].item()
    if not math.isfinite(total):
        detail = ", ".join(f"{k}={v.item():.6g}" for k, v in losses.items())
        raise NumericalError(f"non-finite loss at step {state.step + 1}: {detail}")
    losses["total"].backward()
    t = state.step + 1
    lr, wd = lr_at(t, tc), wd_at(t, tc)
    adamw_step({n: p.data for n, p in params.items()},
               {n: p.grad for n, p in params.items() if p.grad is not None},
               state.moments, lr, wd, tc.adam_beta1, tc.adam_beta2, tc.adam_eps, t)
    state.step = t
    return StepMetrics(t, lr, wd, total, losses["spot"].item(), losses["niche"].item(), losses["ns"].item())


def train(state: TrainState, data: PretrainData, until: int | None = None,
          metrics_path=None, checkpoint_path=None,
          callback: Callable[[StepMetrics], None] | None = None,
          frozen_overrides: dict[str, np.ndarray] | None = None) -> list[StepMetrics]:
    """Advance ``state`` to step ``until`` (default: the configured step count).

    Metrics rows are appended to ``metrics_path`` as they are produced; a
    checkpoint is written every ``checkpoint_every`` steps and at the end.
    ``frozen_overrides`` replaces stand-in outputs by role (e.g. externally
    computed ``niche_image`` features aligned to ``data.ids``).
    """
    tc = state.config.train
    until = tc.steps if until is None else min(until, tc.steps)
    frozen = state.model.frozen_features(data)
    for role, values in (frozen_overrides or {}).items():
        if role not in frozen:
            raise DataError(f"no frozen path named {role!r}; have {sorted(frozen)}")
        if values.shape != frozen[role].shape:
            raise ShapeError(f"override for {role!r} has shape {values.shape}, expected {frozen[role].shape}")
        frozen[role] = np.asarray(values, dtype=frozen[role].dtype)
    history = []
    fh = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        fresh = not metrics_path.exists() or metrics_path.stat().st_size == 0
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "a", encoding="utf-8")
        if fresh:
            fh.write(METRICS_HEADER + "\n")
    try:
        while state.step < until:
            row = train_step(state, data, frozen)
            history.append(row)
            if fh is not None:
                fh.write(row.tsv() + "\n")
                fh.flush()
            if callback is not None:
                callback(row)
            if row.step % 50 == 0 or row.step == until:
                log.info("step %d  loss %.4f  (spot %.4f niche %.4f ns %.4f)",
                         row.step, row.total, row.spot, row.niche, row.ns)
            if checkpoint_path is not None and tc.checkpoint_every and row.step % tc.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return history


def read_metrics(path) -> list[dict[str, float]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, map(float, line.split("\t")))) for line in lines[1:] if line]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def checkpoint_tables(state: TrainState) -> dict[str, np.ndarray]:
    table = {name: t.data for name, t in state.model.named_tensors()}
    for name in state.model.named_parameters():
        if name in state.moments:
            m, v = state.moments[name]
            table[f"optim.m.{name}"] = m
            table[f"optim.v.{name}"] = v
    table["prep.mean"] = np.asarray(state.scaler.mean, dtype=np.float64)
    table["prep.std"] = np.asarray(state.scaler.std, dtype=np.float64)
    return table


def checkpoint_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    echo = to_text(state.config) + f"\n[meta]\nn_genes = {state.model._n_genes}\n"
    encoded = echo.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    write_table(buf, checkpoint_tables(state))
    buf.write(struct.pack("<Q", state.step))
    rng_blob = b"\n".join([state.batch_rng.state_bytes(), state.dropout_rng.state_bytes()])
    buf.write(struct.pack("<I", len(rng_blob)))
    buf.write(rng_blob)
    return buf.getvalue()


def save_checkpoint(state: TrainState, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(state))


def _take(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated checkpoint: wanted {n} bytes, got {len(raw)}")
    return raw


def parse_checkpoint(raw: bytes) -> TrainState:
    fh = io.BytesIO(raw)
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<B", _take(fh, 1))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")
    (echo_len,) = struct.unpack("<I", _take(fh, 4))
    echo = _take(fh, echo_len).decode("utf-8")
    body, _, meta = echo.partition("\n[meta]\n")
    cfg = from_text(body)
    n_genes = int(meta.split("=", 1)[1])
    table = read_table(fh)
    (step,) = struct.unpack("<Q", _take(fh, 8))
    (rng_len,) = struct.unpack("<I", _take(fh, 4))
    rng_blob = _take(fh, rng_len)
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint")

    model = build_model(cfg, n_genes)
    for name, t in model.named_tensors():
        if name not in table:
            raise FormatError(f"checkpoint lacks tensor {name!r}")
        if table[name].shape != t.shape:
            raise FormatError(f"checkpoint tensor {name!r} has shape {table[name].shape}, model expects {t.shape}")
        t.data = table[name].astype(t.dtype)
    moments = {}
    for name in model.named_parameters():
        if f"optim.m.{name}" in table:
            moments[name] = (table[f"optim.m.{name}"], table[f"optim.v.{name}"])
    scaler = ExpressionScaler(table["prep.mean"], table["prep.std"])
    batch_raw, dropout_raw = rng_blob.split(b"\n")
    return TrainState(cfg, model, scaler, moments, step,
                      Rng.from_state_bytes(batch_raw), Rng.from_state_bytes(dropout_raw))


def load_checkpoint(path) -> TrainState:
    return parse_checkpoint(Path(path).read_bytes())
