"""Central finite-difference gradient checking (64-bit)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[..., Tensor], point, eps: float = 1e-6,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` takes one Tensor per entry of ``point`` (a single array is also
    accepted).  A scalar result is differentiated directly.  A non-scalar
    result is contracted with a fixed random cotangent ``w`` (drawn from
    ``seed``); the backprop side is then the vector-Jacobian product and the
    numeric side is ``sum(w * (f(x+e) - f(x-e))) / 2e``, differencing each
    output before summing so outputs untouched by a coordinate add no
    rounding noise.  Every coordinate is probed unless ``max_coords`` caps
    the number sampled per input.
    """
    arrays = [point] if isinstance(point, np.ndarray) else list(point)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*tensors)
    rng = np.random.default_rng(seed)
    cotangent = np.ones(()) if out.size == 1 else rng.normal(size=out.shape)
    out.backward(np.broadcast_to(cotangent, out.shape).astype(out.dtype))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for idx, base in enumerate(arrays):
        flat_ids = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            flat_ids = np.sort(rng.choice(base.size, max_coords, replace=False))
        for flat in flat_ids:
            coord = np.unravel_index(flat, base.shape)
            numeric = _central_difference(f, arrays, idx, coord, eps, cotangent)
            err = relative_error(np.asarray(analytic[idx][coord]), np.asarray(numeric))
            worst = max(worst, float(err))
    return worst


def _central_difference(f, arrays: Sequence[np.ndarray], idx: int, coord, eps: float,
                        cotangent: np.ndarray) -> float:
    values = []
    for sign in (1.0, -1.0):
        probe = [a.copy() for a in arrays]
        probe[idx][coord] += sign * eps
        values.append(np.asarray(f(*[Tensor(p) for p in probe]).data, dtype=np.float64))
    return float((cotangent * (values[0] - values[1])).sum() / (2.0 * eps))


def check_parameters(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                     eps: float = 1e-6, max_coords: int | None = None,
                     seed: int = 0) -> dict[str, float]:
    """Gradient check of ``loss_fn`` w.r.t. named parameter tensors in place.

    The parameters must be 64-bit.  ``loss_fn`` closes over them; each is
    perturbed in place and restored.  Returns max relative error per name.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat_ids = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat_ids = np.sort(rng.choice(p.size, max_coords, replace=False))
        worst = 0.0
        for flat in flat_ids:
            coord = np.unravel_index(flat, p.shape)
            orig = p.data[coord]
            p.data[coord] = orig + eps
            up = loss_fn().item()
            p.data[coord] = orig - eps
            down = loss_fn().item()
            p.data[coord] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, float(relative_error(np.asarray(analytic[coord]), np.asarray(numeric))))
        report[name] = worst
    return report
