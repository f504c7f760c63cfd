import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stalign import numerics as nx
from stalign.errors import FormatError, ShapeError, STAlignError
from stalign.numerics import Rng, Tensor, no_grad
from stalign.numerics.snapshot import read_table, table_bytes

finite = st.floats(-10, 10, allow_nan=False, width=64)


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv2d(x, w, stride, padding):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b, o, i, j in itertools.product(range(n), range(c_out), range(ho), range(wo)):
        acc = 0.0
        for c, p, q in itertools.product(range(c_in), range(kh), range(kw)):
            acc += xp[b, c, i * stride + p, j * stride + q] * w[o, c, p, q]
        out[b, o, i, j] = acc
    return out


def test_matmul_matches_loop_oracle_on_200_instances():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n, k, m = rng.integers(1, 7, size=3)
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b),
                                   rtol=1e-5, atol=1e-12)


def test_conv2d_matches_loop_oracle_on_200_instances():
    rng = np.random.default_rng(12)
    for _ in range(200):
        n, c_in, c_out = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        kh, kw = rng.integers(1, 4, size=2)
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = kh + rng.integers(0, 5), kw + rng.integers(0, 5)
        x = rng.normal(size=(n, c_in, h, w))
        k = rng.normal(size=(c_out, c_in, kh, kw))
        got = nx.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
        np.testing.assert_allclose(got, naive_conv2d(x, k, stride, padding), rtol=1e-5, atol=1e-12)


def test_conv2d_unbatched_input_keeps_rank():
    x = np.arange(16.0).reshape(1, 4, 4)
    k = np.ones((2, 1, 2, 2))
    out = nx.conv2d(Tensor(x), Tensor(k)).data
    assert out.shape == (2, 3, 3)
    assert out[0, 0, 0] == 0 + 1 + 4 + 5


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError, match="channels"):
        nx.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))
    with pytest.raises(ShapeError, match="larger"):
        nx.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_mean_pool_window_and_global():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(nx.mean_pool(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    assert nx.mean_pool(x).data.shape == (1, 1)
    assert nx.mean_pool(x).data[0, 0] == 7.5


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_backward_needs_scalar():
    with pytest.raises(STAlignError, match="scalar"):
        Tensor(np.ones(3), requires_grad=True).sum(axis=None).reshape(1, 1).__mul__(np.ones((2, 2))).backward()


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = nx.exp(x)
    assert not y.requires_grad and y._parents == ()
    assert nx.is_grad_enabled()


def test_dropout_is_identity_in_eval_and_scales_in_training():
    x = Tensor(np.ones((50, 40)))
    assert nx.dropout(x, 0.5, Rng(0), training=False) is x
    out = nx.dropout(x, 0.25, Rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs((out == 0).mean() - 0.25) < 0.03


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax(Tensor(x), axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(np.exp(nx.log_softmax(Tensor(x), axis=1).data), p, rtol=1e-10, atol=1e-300)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(0.1, 10)).map(lambda a: a * np.where(np.arange(a.size).reshape(a.shape) % 2, 1, -1)))
def test_l2_normalize_gives_unit_rows(x):
    y = nx.l2_normalize(Tensor(x), axis=1).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
def test_layer_norm_standardizes_rows(x):
    y = nx.layer_norm(Tensor(x), eps=1e-5).data
    v = x.var(axis=1)
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=1), v / (v + 1e-5), rtol=1e-9, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([((3, 4), (4,)), ((3, 4), (3, 1)), ((2, 3, 4), (1, 4)), ((5,), ())]),
       st.integers(0, 2 ** 16))
def test_broadcast_gradients_have_operand_shapes(shapes, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=shapes[0]), requires_grad=True)
    b = Tensor(rng.normal(size=shapes[1]), requires_grad=True)
    nx.mul(nx.add(a, b), b).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_rng_streams_are_reproducible_and_independent():
    a, b = Rng(7, "x"), Rng(7, "x")
    np.testing.assert_array_equal(a.normal(size=5), b.normal(size=5))
    assert not np.array_equal(Rng(7, "x").normal(size=5), Rng(7, "y").normal(size=5))
    # a child does not depend on how much the parent has consumed
    parent = Rng(7)
    first = parent.split("c").random(3)
    parent.random(100)
    np.testing.assert_array_equal(parent.split("c").random(3), first)


def test_rng_state_bytes_round_trip():
    rng = Rng(3, "batches")
    rng.random(17)
    clone = Rng.from_state_bytes(rng.state_bytes())
    np.testing.assert_array_equal(clone.random(10), rng.random(10))


def test_snapshot_table_round_trip():
    table = {"w": np.arange(6, dtype=np.float32).reshape(2, 3),
             "scalar": np.float64(2.5) * np.ones(()),
             "v": np.linspace(0, 1, 4)}
    raw = table_bytes(table)
    back = read_table(io.BytesIO(raw))
    assert list(back) == list(table)
    for name in table:
        assert back[name].dtype == table[name].dtype
        np.testing.assert_array_equal(back[name], table[name])
    assert table_bytes(back) == raw


def test_snapshot_truncation_is_a_format_error():
    raw = table_bytes({"w": np.ones(4)})
    with pytest.raises(FormatError, match="truncated"):
        read_table(io.BytesIO(raw[:-3]))
