"""Spot neighbourhoods, niche membership and niche-level data."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    Coord2D,
    ImagePatch,
    Slide,
    Spot,
    _read_tsv,
    atomic_write_bytes,
    atomic_write_text,
    expression_tsv,
    write_patch_blob,
)
from .errors import ConfigError, DataError


@dataclass(frozen=True, eq=False)
class NicheAssignment:
    center_spot_id: str
    member_ids: tuple[str, ...]
    niche_expression: np.ndarray
    niche_image: ImagePatch


def euclidean_distance(a: Coord2D, b: Coord2D) -> float:
    return math.sqrt((a.x - b.x) ** 2 + (a.y - b.y) ** 2)


def _pairwise_sq_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return (diff * diff).sum(-1)


def knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    """``(N, k)`` neighbour indices, ascending distance, ties by lower index."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if k < 1 or k >= n:
        raise ConfigError(f"k must satisfy 1 <= k < number of spots ({n}), got {k}")
    if not np.all(np.isfinite(coords)):
        raise DataError("non-finite spot coordinates")
    d2 = _pairwise_sq_distances(coords)
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps index order among equal distances
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def knn_neighbors(spots: Sequence[Spot], k: int) -> dict[str, list[str]]:
    coords = np.array([[s.coord.x, s.coord.y] for s in spots], dtype=np.float64)
    idx = knn_indices(coords, k)
    return {spot.spot_id: [spots[j].spot_id for j in row] for spot, row in zip(spots, idx)}


def niche_gene_mean(expression_rows) -> np.ndarray:
    rows = np.asarray(expression_rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise DataError("niche_gene_mean needs a non-empty list of equal-length rows")
    return rows.mean(axis=0)


def mosaic_grid(n_members: int) -> int:
    return max(1, math.ceil(math.sqrt(n_members)))


def nearest_resize(pixels: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resample of an ``H x W x C`` array to ``target x target``."""
    h, w = pixels.shape[:2]
    rows = (np.arange(target) * h) // target
    cols = (np.arange(target) * w) // target
    return pixels[rows[:, None], cols[None, :]]


def compose_mosaic(patches: Sequence[np.ndarray], target_size: int) -> np.ndarray:
    """Tile member patches row-major on a square grid and resize.

    Unused grid cells (member count not a perfect square) stay black.
    """
    if not patches:
        raise DataError("cannot compose a niche image from zero patches")
    g = mosaic_grid(len(patches))
    ph, pw, c = patches[0].shape
    canvas = np.zeros((g * ph, g * pw, c), dtype=np.uint8)
    for t, patch in enumerate(patches):
        r, q = divmod(t, g)
        canvas[r * ph:(r + 1) * ph, q * pw:(q + 1) * pw] = patch
    if canvas.shape[0] == target_size and canvas.shape[1] == target_size:
        return canvas
    return nearest_resize(canvas, target_size)


def compose_niche_image(slide: Slide, members: Sequence[str], target_size: int) -> ImagePatch:
    index = slide.index()
    missing = [m for m in members if m not in index]
    if missing:
        raise DataError(f"no patch for niche member {missing[0]!r}")
    return ImagePatch(compose_mosaic([slide.spots[index[m]].patch.pixels for m in members], target_size))


def build_niches(slide: Slide, k: int = 3, target_size: int = 112,
                 expression: np.ndarray | None = None) -> list[NicheAssignment]:
    """One niche per spot: the spot itself followed by its ``k`` nearest neighbours.

    ``expression`` optionally overrides the slide's rows (e.g. preprocessed
    values); the niche vector is the mean over all member rows.
    """
    matrix = slide.expression_matrix() if expression is None else np.asarray(expression, dtype=np.float64)
    if matrix.shape[0] != slide.n_spots:
        raise DataError(f"expression override has {matrix.shape[0]} rows for {slide.n_spots} spots")
    idx = knn_indices(slide.coords(), k)
    ids = slide.ids
    pixels = [s.patch.pixels for s in slide.spots]
    niches = []
    for i, neigh in enumerate(idx):
        members = [i, *neigh.tolist()]
        niches.append(NicheAssignment(
            center_spot_id=ids[i],
            member_ids=tuple(ids[j] for j in members),
            niche_expression=niche_gene_mean(matrix[members]),
            niche_image=ImagePatch(compose_mosaic([pixels[j] for j in members], target_size)),
        ))
    return niches


def niche_member_matrix(slide: Slide, k: int) -> np.ndarray:
    """``(N, k+1)`` member indices, center first."""
    idx = knn_indices(slide.coords(), k)
    return np.concatenate([np.arange(slide.n_spots)[:, None], idx], axis=1)


def niches_tsv(niches: Sequence[NicheAssignment]) -> str:
    if not niches:
        return "center_id\n"
    k = len(niches[0].member_ids) - 1
    lines = ["\t".join(["center_id", *[f"member_id_{j + 1}" for j in range(k)]])]
    lines += ["\t".join(n.member_ids) for n in niches]
    return "\n".join(lines) + "\n"


def save_niches(niches: Sequence[NicheAssignment], directory, gene_names: Sequence[str]) -> None:
    """Write the membership TSV plus niche expression and niche image records."""
    d = Path(directory)
    ids = [n.center_spot_id for n in niches]
    atomic_write_text(d / "niches.tsv", niches_tsv(niches))
    atomic_write_text(d / "niche_expression.tsv",
                      expression_tsv(ids, gene_names, np.stack([n.niche_expression for n in niches])))
    atomic_write_bytes(d / "niche_patches.stpx", write_patch_blob(ids, [n.niche_image for n in niches]))


def read_niches_tsv(path) -> dict[str, list[str]]:
    _, rows = _read_tsv(path)
    return {row[0]: row[1:] for row in rows}
