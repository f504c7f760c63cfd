"""Finite-difference checks of every differentiable op and the full loss."""

import numpy as np
import pytest

from stalign import numerics as nx
from stalign.gradsuite import (
    END_TO_END_TOL,
    OP_CHECKS,
    PRIMITIVE_TOL,
    _check_end_to_end,
    format_table,
    run_suite,
)
from stalign.numerics import Tensor, grad_check
from stalign.numerics.tensor import _make

N_POINTS = 100


@pytest.mark.parametrize("name", list(OP_CHECKS))
def test_primitive_gradient_at_100_points(name):
    errors = [OP_CHECKS[name](seed) for seed in range(N_POINTS)]
    assert max(errors) < PRIMITIVE_TOL, f"{name}: worst seed {int(np.argmax(errors))}"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_loss_gradient(seed):
    errors = _check_end_to_end(seed)
    assert max(errors.values()) < END_TO_END_TOL, errors


@pytest.mark.parametrize("use_abfn,use_ae", [(False, True), (True, False)])
def test_full_loss_gradient_ablations(use_abfn, use_ae):
    errors = _check_end_to_end(0, use_abfn=use_abfn, use_ae=use_ae)
    assert max(errors.values()) < END_TO_END_TOL, errors


def test_checker_flags_a_wrong_backward():
    def bad_square(t):
        # derivative should be 2x; report x instead
        return _make(t.data ** 2, (t,), lambda g: (g * t.data,))

    x = np.random.default_rng(0).uniform(0.5, 2.0, (3, 3))
    assert grad_check(lambda t: bad_square(t).sum(), x) > 0.1
    assert grad_check(lambda t: nx.square(t).sum(), x) < 1e-8


def test_checker_on_known_linear_map():
    w = np.arange(1.0, 7.0).reshape(2, 3)
    assert grad_check(lambda t: (t * Tensor(w)).sum(), np.ones((2, 3))) < 1e-7


def test_run_suite_rejects_unknown_names():
    with pytest.raises(KeyError, match="nope"):
        run_suite(["add", "nope"])


def test_run_suite_table():
    rows = run_suite(["add", "softmax"])
    assert [r.name for r in rows] == ["add", "softmax"]
    assert all(r.passed and r.tolerance == PRIMITIVE_TOL for r in rows)
    table = format_table(rows)
    assert table.splitlines()[0].startswith("op")
    assert table.count("ok") == 2
