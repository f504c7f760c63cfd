import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from stalign.downstream import (
    _lloyd,
    adjusted_rand_index,
    batched_retrieval,
    cluster_map_svg,
    fit_gene_head,
    gene_prediction_eval,
    kmeans,
    mse,
    report_tsv,
    retrieval_topk,
    zero_shot_cluster_eval,
)
from stalign.errors import ConfigError, DataError, ShapeError
from stalign.model import prepare_pretrain_data
from stalign.trainer import checkpoint_bytes, init_state, train

from conftest import tiny_config


def pair_counting_ari(a, b):
    """ARI from the four pair-agreement counts over all point pairs."""
    both = only_a = only_b = neither = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        same_a, same_b = a[i] == a[j], b[i] == b[j]
        if same_a and same_b:
            both += 1
        elif same_a:
            only_a += 1
        elif same_b:
            only_b += 1
        else:
            neither += 1
    pairs = both + only_a + only_b + neither
    if pairs == 0:
        return 1.0
    same_a, same_b = both + only_a, both + only_b
    expected = same_a * same_b / pairs
    max_index = (same_a + same_b) / 2
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


# -- ARI -------------------------------------------------------------------------
def test_ari_fixtures():
    assert adjusted_rand_index([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == -0.5


def test_ari_matches_pair_counting_oracle_on_200_labelings():
    rng = np.random.default_rng(41)
    for _ in range(200):
        n = int(rng.integers(1, 51))
        a = rng.integers(0, rng.integers(1, 6), n).tolist()
        b = rng.integers(0, rng.integers(1, 6), n).tolist()
        assert abs(adjusted_rand_index(a, b) - pair_counting_ari(a, b)) < 1e-12


def test_ari_agrees_with_sklearn():
    rng = np.random.default_rng(42)
    for _ in range(50):
        a, b = rng.integers(0, 4, 30), rng.integers(0, 3, 30)
        assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=40))
def test_ari_is_symmetric_and_permutation_invariant(pairs):
    a, b = [p[0] for p in pairs], [p[1] for p in pairs]
    ab = adjusted_rand_index(a, b)
    assert ab == pytest.approx(adjusted_rand_index(b, a), abs=1e-12)
    relabel = {0: "x", 1: "q", 2: "z", 3: "m", 4: "a"}
    assert ab == pytest.approx(adjusted_rand_index([relabel[v] for v in a], b), abs=1e-12)
    assert adjusted_rand_index(a, a) == 1.0
    assert ab <= 1.0 + 1e-12


def test_ari_on_maps_checks_ids():
    assert adjusted_rand_index({"a": 0, "b": 1}, {"b": 5, "a": 7}) == 1.0
    with pytest.raises(DataError):
        adjusted_rand_index({"a": 0, "b": 1}, {"a": 0, "c": 1})
    with pytest.raises(DataError):
        adjusted_rand_index([0, 1], [0, 1, 1])


# -- k-means ---------------------------------------------------------------------
def test_kmeans_with_k_equal_n_has_zero_inertia():
    x = np.random.default_rng(0).normal(size=(7, 3))
    res = kmeans(x, 7, seed=0)
    assert res.inertia == 0.0
    assert sorted(res.assignments.tolist()) == list(range(7))


def test_kmeans_separates_blobs():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(0, 0.1, (30, 2)), rng.normal(10, 0.1, (20, 2))])
    truth = [0] * 30 + [1] * 20
    res = kmeans(x, 2, seed=3)
    assert adjusted_rand_index(res.assignments, truth) == 1.0


def test_kmeans_is_deterministic_and_ids_are_kept():
    x = np.random.default_rng(2).normal(size=(40, 4))
    ids = [f"s{i}" for i in range(40)]
    a, b = kmeans(x, 3, seed=5, ids=ids), kmeans(x, 3, seed=5, ids=ids)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert a.as_map()["s0"] == a.assignments[0] and len(a.as_map()) == 40
    assert set(a.assignments.tolist()) <= {0, 1, 2}


def test_kmeans_rejects_too_few_points():
    with pytest.raises(ConfigError):
        kmeans(np.zeros((2, 2)), 3)


def test_kmeans_inertia_matches_sklearn_within_restarts():
    from sklearn.cluster import KMeans

    x = np.random.default_rng(4).normal(size=(60, 3))
    ours = kmeans(x, 4, seed=0, restarts=10).inertia
    ref = KMeans(4, n_init=10, random_state=0).fit(x).inertia_
    assert ours <= ref * 1.05


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16), k=st.integers(1, 5))
def test_lloyd_inertia_never_increases(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(25, 2))
    _, _, _, trace = _lloyd(x, x[rng.choice(25, k, replace=False)].copy(), 100)
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


# -- regression ------------------------------------------------------------------
def test_mse_examples():
    t = np.random.default_rng(5).normal(size=(5, 3))
    assert mse(t, t) == 0.0
    assert mse(t + 1, t) == pytest.approx(1.0, abs=1e-12)
    p = np.random.default_rng(6).normal(size=(5, 3))
    oracle = sum((p[i, j] - t[i, j]) ** 2 for i in range(5) for j in range(3)) / 15
    assert abs(mse(p, t) - oracle) < 1e-12
    with pytest.raises(ShapeError):
        mse(p, t[:4])


def test_gene_head_fits_a_linear_map():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(80, 6))
    y = x @ rng.normal(size=(6, 3)) * 0.5
    head = fit_gene_head(x, y, hidden=32, epochs=1500, lr=1e-2, weight_decay=0.0)
    assert head.train_mse < 1e-3
    assert head.predict(x).shape == (80, 3)


def test_gene_head_learns_constants():
    x = np.random.default_rng(8).normal(size=(40, 4))
    y = np.tile([1.5, -2.0], (40, 1))
    head = fit_gene_head(x, y, hidden=8, epochs=1500, weight_decay=0.0)
    assert head.train_mse < 1e-4


def test_gene_head_with_zero_epochs_is_untouched():
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=(20, 4)), rng.normal(size=(20, 2))
    head = fit_gene_head(x, y, hidden=8, epochs=0, seed=3)
    again = fit_gene_head(x, y, hidden=8, epochs=0, seed=3)
    np.testing.assert_array_equal(head.predict(x), again.predict(x))
    assert head.train_mse == pytest.approx(mse(head.predict(x), y), rel=1e-12)
    with pytest.raises(ShapeError):
        fit_gene_head(x, y[:5])


# -- retrieval -------------------------------------------------------------------
def test_retrieval_trivial_cases():
    x = np.random.default_rng(10).normal(size=(16, 8))
    assert retrieval_topk(x, x, 1) == 1.0
    assert retrieval_topk(x, np.random.default_rng(11).normal(size=(16, 8)), 16) == 1.0
    with pytest.raises(ConfigError):
        retrieval_topk(x, x, 17)


def test_retrieval_of_independent_embeddings_is_at_chance():
    rng = np.random.default_rng(12)
    scores = [retrieval_topk(rng.normal(size=(32, 16)), rng.normal(size=(32, 16)), 1) for _ in range(100)]
    assert abs(np.mean(scores) - 1 / 32) < 0.01


def test_batched_retrieval_is_seeded():
    x = np.random.default_rng(13).normal(size=(64, 8))
    y = x + np.random.default_rng(14).normal(size=(64, 8))
    assert batched_retrieval(x, y, 32, 5, seed=1) == batched_retrieval(x, y, 32, 5, seed=1)


# -- reports ---------------------------------------------------------------------
def test_report_tsv_layout():
    text = report_tsv([("ari", "slide", 0.5, 3)])
    assert text.splitlines() == ["metric\tslide_id\tvalue\tseed", "ari\tslide\t0.5\t3"]


def test_cluster_map_svg_panels():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    one = cluster_map_svg(coords, [0, 1, 1])
    two = cluster_map_svg(coords, [0, 1, 1], truth=["a", "a", "b"])
    assert one.startswith("<svg") and one.count("<circle") == 3
    assert two.count("<circle") == 6


# -- protocols on a tiny trained model -------------------------------------------
@pytest.fixture(scope="module")
def tiny_state(tiny_slide):
    cfg = tiny_config(steps=5)
    data = prepare_pretrain_data(tiny_slide, cfg.model, cfg.data.niche_k)
    state = init_state(cfg, data)
    train(state, data)
    return state


def test_zero_shot_eval_uses_label_count(tiny_slide, tiny_state):
    ari, result = zero_shot_cluster_eval(tiny_slide, tiny_state, seed=0)
    assert result.k == 2 and -1.0 <= ari <= 1.0
    relabelled = tiny_slide.__class__(tiny_slide.slide_id, tiny_slide.spots, tiny_slide.gene_names,
                                      {sid: str(c) for sid, c in zip(tiny_slide.ids, result.assignments)})
    assert zero_shot_cluster_eval(relabelled, tiny_state, seed=0)[0] == 1.0


def test_zero_shot_eval_needs_labels(tiny_slide, tiny_state):
    unlabelled = tiny_slide.__class__(tiny_slide.slide_id, tiny_slide.spots, tiny_slide.gene_names)
    with pytest.raises(DataError):
        zero_shot_cluster_eval(unlabelled, tiny_state)


def test_gene_prediction_leaves_checkpoint_untouched(tiny_slide, tiny_state):
    before = checkpoint_bytes(tiny_state)
    res = gene_prediction_eval(tiny_slide, tiny_state, target_genes=["gene_000", "gene_003"])
    assert checkpoint_bytes(tiny_state) == before
    assert res.predictions.shape == (len(res.test_ids), 2)
    assert len(res.test_ids) == round(0.2 * tiny_slide.n_spots)
    assert res.mse >= 0 and res.baseline_mse > 0
