import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stalign.data import Coord2D, ImagePatch, Slide, Spot
from stalign.errors import ConfigError, DataError
from stalign.spatial import (
    build_niches,
    compose_mosaic,
    euclidean_distance,
    knn_indices,
    knn_neighbors,
    niche_gene_mean,
    read_niches_tsv,
    save_niches,
)


def brute_knn(coords, k):
    """Sort every other spot by (distance, index)."""
    out = []
    for i, (xi, yi) in enumerate(coords):
        cands = sorted((math.hypot(xi - xj, yi - yj), j) for j, (xj, yj) in enumerate(coords) if j != i)
        out.append([j for _, j in cands[:k]])
    return out


def brute_mean(rows):
    n, g = len(rows), len(rows[0])
    return [math.fsum(rows[i][j] for i in range(n)) / n for j in range(g)]


def _slide_from_coords(coords, genes=3):
    spots = [Spot(f"s{i}", Coord2D(float(x), float(y)), ImagePatch(np.full((2, 2, 3), i % 256, np.uint8)),
                  np.full(genes, float(i))) for i, (x, y) in enumerate(coords)]
    return Slide("t", spots, [f"g{j}" for j in range(genes)])


def test_knn_matches_brute_force_on_200_instances():
    rng = np.random.default_rng(21)
    for trial in range(200):
        n = int(rng.integers(2, 40))
        # half the instances sit on an integer lattice so distance ties are common
        if trial % 2:
            coords = rng.integers(0, 5, size=(n, 2)).astype(float)
        else:
            coords = rng.uniform(-100, 100, size=(n, 2))
        k = int(rng.integers(1, n))
        assert knn_indices(coords, k).tolist() == brute_knn(coords.tolist(), k)


def test_niche_gene_mean_matches_fsum_oracle_on_200_instances():
    rng = np.random.default_rng(22)
    for _ in range(200):
        rows = rng.normal(scale=10, size=(int(rng.integers(1, 12)), int(rng.integers(1, 30))))
        np.testing.assert_allclose(niche_gene_mean(rows), brute_mean(rows.tolist()), rtol=1e-12, atol=1e-12)


def test_knn_tie_breaks_by_lower_index():
    # spot 0 at the centre of a plus; all four arms at distance 1
    coords = np.array([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1]], dtype=float)
    assert knn_indices(coords, 3)[0].tolist() == [1, 2, 3]


def test_knn_neighbors_on_a_line():
    slide = _slide_from_coords([(0, 0), (1, 0), (3, 0), (7, 0)])
    assert knn_neighbors(slide.spots, 2) == {
        "s0": ["s1", "s2"], "s1": ["s0", "s2"], "s2": ["s1", "s0"], "s3": ["s2", "s1"]}


def test_knn_rejects_bad_k():
    coords = np.zeros((4, 2))
    for k in (0, 4, 9):
        with pytest.raises(ConfigError):
            knn_indices(coords, k)


def test_niche_gene_mean_rejects_empty():
    with pytest.raises(DataError):
        niche_gene_mean(np.zeros((0, 3)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=3))
def test_distance_is_a_metric(pts):
    a, b, c = (Coord2D(*p) for p in pts)
    assert euclidean_distance(a, a) == 0
    assert euclidean_distance(a, b) == euclidean_distance(b, a)
    assert euclidean_distance(a, c) <= euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-9


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 25), seed=st.integers(0, 2 ** 16), data=st.data())
def test_knn_rows_are_sorted_and_exclude_self(n, seed, data):
    coords = np.random.default_rng(seed).uniform(0, 10, (n, 2))
    k = data.draw(st.integers(1, n - 1))
    idx = knn_indices(coords, k)
    for i, row in enumerate(idx):
        assert i not in row and len(set(row)) == k
        d = np.linalg.norm(coords[row] - coords[i], axis=1)
        assert np.all(np.diff(d) >= 0)


def test_mosaic_tiles_row_major_and_pads_black():
    patches = [np.full((2, 2, 3), v, np.uint8) for v in (10, 20, 30)]
    canvas = compose_mosaic(patches, 4)
    assert canvas.shape == (4, 4, 3)
    assert canvas[0, 0, 0] == 10 and canvas[0, 2, 0] == 20 and canvas[2, 0, 0] == 30
    assert canvas[2, 2, 0] == 0


def test_mosaic_resizes_to_target():
    canvas = compose_mosaic([np.full((3, 3, 3), 9, np.uint8)] * 4, 5)
    assert canvas.shape == (5, 5, 3)


def test_build_niches_center_first_with_k_plus_one_members():
    slide = _slide_from_coords([(0, 0), (1, 0), (3, 0), (7, 0), (8, 0)])
    niches = build_niches(slide, k=3, target_size=4)
    assert [n.center_spot_id for n in niches] == slide.ids
    assert niches[0].member_ids == ("s0", "s1", "s2", "s3")
    assert all(len(n.member_ids) == 4 for n in niches)
    # expression row i is constant i, so the niche mean is the mean of member indices
    np.testing.assert_allclose(niches[4].niche_expression, np.mean([4, 3, 2, 1]))
    assert niches[0].niche_image.pixels.shape == (4, 4, 3)


def test_save_niches_writes_membership(tmp_path):
    slide = _slide_from_coords([(0, 0), (1, 0), (3, 0), (7, 0)])
    niches = build_niches(slide, k=2, target_size=4)
    save_niches(niches, tmp_path, slide.gene_names)
    header = (tmp_path / "niches.tsv").read_text().splitlines()[0]
    assert header == "center_id\tmember_id_1\tmember_id_2"
    members = read_niches_tsv(tmp_path / "niches.tsv")
    assert members["s3"] == ["s2", "s1"]
    assert (tmp_path / "niche_patches.stpx").read_bytes()[:4] == b"STPX"
