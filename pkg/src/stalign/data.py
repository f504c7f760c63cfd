"""Slide data model, file formats and the synthetic slide generator."""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, IngestionError
from .numerics.rng import Rng

PATCH_MAGIC = b"STPX"

COORDS_FILE = "coords.tsv"
EXPRESSION_FILE = "expression.tsv"
PATCHES_FILE = "patches.stpx"
LABELS_FILE = "labels.tsv"


@dataclass(frozen=True, eq=False)
class ImagePatch:
    """RGB patch stored as a ``(height, width, channels)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise FormatError(f"patch must be HxWx3, got shape {px.shape}")
        px = np.ascontiguousarray(px, dtype=np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def data(self) -> bytes:
        return self.pixels.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, width: int, height: int, channels: int = 3) -> ImagePatch:
        if len(raw) != width * height * channels:
            raise FormatError(
                f"patch payload has {len(raw)} bytes, expected {width}*{height}*{channels}"
            )
        return cls(np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels))

    def __eq__(self, other) -> bool:
        return isinstance(other, ImagePatch) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class Coord2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"non-finite coordinate ({self.x}, {self.y})")


@dataclass(frozen=True, eq=False)
class Spot:
    spot_id: str
    coord: Coord2D
    patch: ImagePatch
    expression: np.ndarray

    def __post_init__(self):
        expr = np.array(self.expression, dtype=np.float64)
        if expr.ndim != 1:
            raise DataError(f"spot {self.spot_id}: expression must be a vector")
        if not np.all(np.isfinite(expr)):
            raise DataError(f"spot {self.spot_id}: expression has NaN/Inf entries")
        expr.setflags(write=False)
        object.__setattr__(self, "expression", expr)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Spot)
            and self.spot_id == other.spot_id
            and self.coord == other.coord
            and self.patch == other.patch
            and np.array_equal(self.expression, other.expression)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Slide:
    slide_id: str
    spots: tuple[Spot, ...]
    gene_names: tuple[str, ...]
    labels: Mapping[str, str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "spots", tuple(self.spots))
        object.__setattr__(self, "gene_names", tuple(self.gene_names))
        seen: set[str] = set()
        n_genes = len(self.gene_names)
        patch_shape = None
        for spot in self.spots:
            if spot.spot_id in seen:
                raise IngestionError(f"duplicate spot_id {spot.spot_id!r}")
            seen.add(spot.spot_id)
            if spot.expression.shape[0] != n_genes:
                raise DataError(
                    f"spot {spot.spot_id!r} has {spot.expression.shape[0]} genes, slide has {n_genes}"
                )
            if patch_shape is None:
                patch_shape = spot.patch.pixels.shape
            elif spot.patch.pixels.shape != patch_shape:
                raise FormatError(
                    f"spot {spot.spot_id!r} patch is {spot.patch.pixels.shape}, expected {patch_shape}"
                )
        if self.labels is not None:
            labels = {str(k): str(v) for k, v in self.labels.items()}
            for key in labels:
                if key not in seen:
                    raise DataError(f"label refers to unknown spot_id {key!r}")
            object.__setattr__(self, "labels", labels)

    @property
    def n_spots(self) -> int:
        return len(self.spots)

    @property
    def n_genes(self) -> int:
        return len(self.gene_names)

    @property
    def ids(self) -> list[str]:
        return [s.spot_id for s in self.spots]

    @property
    def patch_size(self) -> tuple[int, int]:
        p = self.spots[0].patch
        return p.width, p.height

    def index(self) -> dict[str, int]:
        return {s.spot_id: i for i, s in enumerate(self.spots)}

    def coords(self) -> np.ndarray:
        return np.array([[s.coord.x, s.coord.y] for s in self.spots], dtype=np.float64)

    def expression_matrix(self) -> np.ndarray:
        return np.stack([s.expression for s in self.spots]) if self.spots else np.zeros((0, self.n_genes))

    def patch_array(self) -> np.ndarray:
        """All patches as ``(N, H, W, 3)`` uint8."""
        return np.stack([s.patch.pixels for s in self.spots])

    def label_array(self) -> np.ndarray:
        if self.labels is None:
            raise DataError(f"slide {self.slide_id!r} has no ground-truth labels")
        missing = [sid for sid in self.ids if sid not in self.labels]
        if missing:
            raise DataError(f"slide {self.slide_id!r}: no label for spot {missing[0]!r}")
        return np.array([self.labels[sid] for sid in self.ids])

    def with_expression(self, matrix: np.ndarray) -> Slide:
        """Copy of this slide with every expression row replaced."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (self.n_spots, self.n_genes):
            raise DataError(f"expression matrix {matrix.shape} does not fit slide "
                            f"({self.n_spots}, {self.n_genes})")
        spots = [Spot(s.spot_id, s.coord, s.patch, row) for s, row in zip(self.spots, matrix)]
        return Slide(self.slide_id, spots, self.gene_names, self.labels)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Slide)
            and self.slide_id == other.slide_id
            and self.gene_names == other.gene_names
            and self.labels == other.labels
            and len(self.spots) == len(other.spots)
            and all(a == b for a, b in zip(self.spots, other.spots))
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# atomic output
# ---------------------------------------------------------------------------
def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# TSV formats
# ---------------------------------------------------------------------------
def _fmt(value: float) -> str:
    return repr(float(value))


def _read_tsv(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows:
        raise FormatError(f"{path}: empty file (missing header)")
    return rows[0], rows[1:]


def _parse_float(text: str, path, row_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"{path}: row {row_no}: {text!r} is not a number") from None


def read_coords(path) -> dict[str, Coord2D]:
    header, rows = _read_tsv(path)
    if header[:3] != ["spot_id", "x", "y"]:
        raise FormatError(f"{path}: header must be spot_id, x, y; got {header}")
    coords: dict[str, Coord2D] = {}
    for row_no, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise FormatError(f"{path}: row {row_no} has {len(row)} fields, expected 3")
        sid = row[0]
        if sid in coords:
            raise IngestionError(f"{path}: duplicate spot_id {sid!r}")
        coords[sid] = Coord2D(_parse_float(row[1], path, row_no), _parse_float(row[2], path, row_no))
    return coords


def read_expression(path) -> tuple[list[str], dict[str, np.ndarray]]:
    header, rows = _read_tsv(path)
    if not header or header[0] != "spot_id":
        raise FormatError(f"{path}: header must start with spot_id")
    genes = header[1:]
    expr: dict[str, np.ndarray] = {}
    for row_no, row in enumerate(rows, start=2):
        if len(row) != len(genes) + 1:
            raise FormatError(
                f"{path}: row {row_no} has {len(row) - 1} values, expected {len(genes)}"
            )
        sid = row[0]
        if sid in expr:
            raise IngestionError(f"{path}: duplicate spot_id {sid!r}")
        expr[sid] = np.array([_parse_float(v, path, row_no) for v in row[1:]], dtype=np.float64)
    return genes, expr


def read_labels(path) -> dict[str, str]:
    header, rows = _read_tsv(path)
    if header[:2] != ["spot_id", "label"]:
        raise FormatError(f"{path}: header must be spot_id, label; got {header}")
    labels = {}
    for row_no, row in enumerate(rows, start=2):
        if len(row) != 2:
            raise FormatError(f"{path}: row {row_no} has {len(row)} fields, expected 2")
        if row[0] in labels:
            raise IngestionError(f"{path}: duplicate spot_id {row[0]!r}")
        labels[row[0]] = row[1]
    return labels


def coords_tsv(slide: Slide) -> str:
    lines = ["spot_id\tx\ty"]
    lines += [f"{s.spot_id}\t{_fmt(s.coord.x)}\t{_fmt(s.coord.y)}" for s in slide.spots]
    return "\n".join(lines) + "\n"


def expression_tsv(ids: Sequence[str], gene_names: Sequence[str], matrix: np.ndarray) -> str:
    out = io.StringIO()
    out.write("\t".join(["spot_id", *gene_names]) + "\n")
    for sid, row in zip(ids, matrix):
        out.write(sid + "\t" + "\t".join(_fmt(v) for v in row) + "\n")
    return out.getvalue()


def labels_tsv(ids: Sequence[str], labels: Mapping[str, str]) -> str:
    lines = ["spot_id\tlabel"] + [f"{sid}\t{labels[sid]}" for sid in ids if sid in labels]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# patch blob
# ---------------------------------------------------------------------------
def write_patch_blob(ids: Sequence[str], patches: Sequence[ImagePatch]) -> bytes:
    if not patches:
        return PATCH_MAGIC + struct.pack("<IHHB", 0, 0, 0, 3)
    first = patches[0]
    buf = io.BytesIO()
    buf.write(PATCH_MAGIC)
    buf.write(struct.pack("<IHHB", len(patches), first.width, first.height, first.channels))
    for sid, patch in zip(ids, patches):
        if patch.pixels.shape != first.pixels.shape:
            raise FormatError(f"patch for {sid!r} is {patch.pixels.shape}, expected {first.pixels.shape}")
        encoded = sid.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(patch.data)
    return buf.getvalue()


def read_patch_blob(raw: bytes, expected_size: tuple[int, int] | None = None) -> dict[str, ImagePatch]:
    if raw[:4] != PATCH_MAGIC:
        raise FormatError(f"bad patch blob magic {raw[:4]!r}, expected {PATCH_MAGIC!r}")
    if len(raw) < 13:
        raise FormatError("truncated patch blob header")
    count, width, height, channels = struct.unpack_from("<IHHB", raw, 4)
    if expected_size is not None and (width, height) != tuple(expected_size):
        raise FormatError(f"patch blob holds {width}x{height} patches, expected "
                          f"{expected_size[0]}x{expected_size[1]}")
    offset = 13
    size = width * height * channels
    patches: dict[str, ImagePatch] = {}
    for _ in range(count):
        if offset + 2 > len(raw):
            raise FormatError("truncated patch blob")
        (id_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        sid = raw[offset:offset + id_len].decode("utf-8")
        offset += id_len
        body = raw[offset:offset + size]
        if len(body) != size:
            raise FormatError(f"truncated pixel data for spot {sid!r}")
        offset += size
        if sid in patches:
            raise IngestionError(f"patch blob: duplicate spot_id {sid!r}")
        patches[sid] = ImagePatch.from_bytes(body, width, height, channels)
    if offset != len(raw):
        raise FormatError(f"patch blob has {len(raw) - offset} trailing bytes")
    return patches


def read_patch_dir(directory, expected_size: tuple[int, int] | None = None) -> dict[str, ImagePatch]:
    """Read ``<spot_id>.png`` files from a directory."""
    from PIL import Image

    patches: dict[str, ImagePatch] = {}
    for path in sorted(Path(directory).glob("*.png")):
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
        patch = ImagePatch(arr)
        if expected_size is not None and (patch.width, patch.height) != tuple(expected_size):
            raise FormatError(f"{path}: patch is {patch.width}x{patch.height}, expected "
                              f"{expected_size[0]}x{expected_size[1]}")
        patches[path.stem] = patch
    return patches


def write_patch_dir(directory, ids: Sequence[str], patches: Sequence[ImagePatch]) -> None:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sid, patch in zip(ids, patches):
        Image.fromarray(patch.pixels, mode="RGB").save(directory / f"{sid}.png")


# ---------------------------------------------------------------------------
# slide IO
# ---------------------------------------------------------------------------
def load_slide(coords_path, expr_path, patches_path, labels_path=None,
               slide_id: str | None = None,
               patch_size: tuple[int, int] | None = None) -> Slide:
    """Assemble a :class:`Slide` from its three mandatory files.

    Spots keep the order of the coordinates file.  ``patches_path`` may be a
    ``STPX`` blob or a directory of PNG files.
    """
    coords = read_coords(coords_path)
    genes, expr = read_expression(expr_path)
    if Path(patches_path).is_dir():
        patches = read_patch_dir(patches_path, patch_size)
    else:
        patches = read_patch_blob(Path(patches_path).read_bytes(), patch_size)

    for sid in coords:
        if sid not in expr:
            raise IngestionError(f"spot_id {sid!r} missing from expression file {expr_path}")
        if sid not in patches:
            raise IngestionError(f"spot_id {sid!r} missing from patches {patches_path}")
    for source, table in ((expr_path, expr), (patches_path, patches)):
        for sid in table:
            if sid not in coords:
                raise IngestionError(f"spot_id {sid!r} in {source} is absent from coordinates")

    labels = read_labels(labels_path) if labels_path is not None else None
    spots = [Spot(sid, c, patches[sid], expr[sid]) for sid, c in coords.items()]
    if slide_id is None:
        slide_id = Path(coords_path).resolve().parent.name
    return Slide(slide_id, spots, genes, labels)


def load_slide_dir(directory, slide_id: str | None = None) -> Slide:
    """Load a slide saved by :func:`save_slide` (labels optional)."""
    d = Path(directory)
    patches = d / PATCHES_FILE if (d / PATCHES_FILE).exists() else d / "patches"
    labels = d / LABELS_FILE if (d / LABELS_FILE).exists() else None
    return load_slide(d / COORDS_FILE, d / EXPRESSION_FILE, patches, labels,
                      slide_id=slide_id or d.resolve().name)


def save_slide(slide: Slide, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write_text(d / COORDS_FILE, coords_tsv(slide))
    atomic_write_text(d / EXPRESSION_FILE,
                      expression_tsv(slide.ids, slide.gene_names, slide.expression_matrix()))
    atomic_write_bytes(d / PATCHES_FILE, write_patch_blob(slide.ids, [s.patch for s in slide.spots]))
    if slide.labels is not None:
        atomic_write_text(d / LABELS_FILE, labels_tsv(slide.ids, slide.labels))


# ---------------------------------------------------------------------------
# preprocessing and splitting
# ---------------------------------------------------------------------------
@dataclass
class ExpressionScaler:
    """log1p followed by per-gene standardization.

    Statistics come from whichever rows :meth:`fit` sees; constant genes get
    unit scale so they map to zero instead of NaN.
    """

    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def fit(self, counts: np.ndarray) -> ExpressionScaler:
        logged = np.log1p(np.asarray(counts, dtype=np.float64))
        self.mean = logged.mean(axis=0)
        std = logged.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)
        return self

    def transform(self, counts: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise DataError("ExpressionScaler used before fit()")
        counts = np.asarray(counts, dtype=np.float64)
        if np.any(counts < 0):
            raise DataError("log1p preprocessing needs non-negative expression values")
        return (np.log1p(counts) - self.mean) / self.std

    def fit_transform(self, counts: np.ndarray) -> np.ndarray:
        return self.fit(counts).transform(counts)


def train_val_split(slide: Slide, train_fraction: float, seed: int) -> tuple[set[str], set[str]]:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if slide.n_spots == 0:
        raise DataError("cannot split an empty slide")
    ids = slide.ids
    order = Rng(seed, "split").permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    train = {ids[i] for i in order[:n_train]}
    val = {ids[i] for i in order[n_train:]}
    return train, val


# ---------------------------------------------------------------------------
# synthetic slides
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for :func:`generate_synthetic_slide`.

    Besides the planted domains, spots carry a small continuous "cell state"
    shared by both modalities (``latent_*``) and per-modality technical
    variation (``depth_jitter`` for sequencing depth, ``stain_jitter`` for
    staining intensity) that a good embedding should learn to ignore.
    """

    grid_side: int = 16
    n_domains: int = 4
    n_genes: int = 64
    domain_expression_shift: float = 4.0
    patch_texture_contrast: float = 0.15
    noise_sigma: float = 0.5
    seed: int = 0
    patch_size: int = 28
    spot_spacing: float = 100.0
    latent_dims: int = 2
    latent_strength: float = 0.85
    depth_jitter: float = 0.3
    stain_jitter: float = 0.1
    pixel_noise_ratio: float = 0.1

    def validate(self) -> None:
        if self.n_domains < 2:
            raise ConfigError(f"n_domains must be >= 2, got {self.n_domains}")
        if self.grid_side < 1 or self.grid_side ** 2 < self.n_domains:
            raise ConfigError(f"grid_side**2 must be >= n_domains ({self.grid_side}, {self.n_domains})")
        if self.n_genes < self.n_domains:
            raise ConfigError("n_genes must be >= n_domains so each domain has a marker gene")
        if self.patch_size < 4:
            raise ConfigError(f"patch_size must be >= 4, got {self.patch_size}")
        for name in ("noise_sigma", "patch_texture_contrast", "latent_strength",
                     "depth_jitter", "stain_jitter", "pixel_noise_ratio", "domain_expression_shift"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.latent_dims < 0:
            raise ConfigError("latent_dims must be >= 0")
        if self.spot_spacing <= 0:
            raise ConfigError("spot_spacing must be positive")


def marker_genes(cfg: SyntheticConfig) -> dict[int, list[int]]:
    """Gene indices up-shifted in each domain."""
    per_domain = max(1, cfg.n_genes // (2 * cfg.n_domains))
    return {d: list(range(d * per_domain, (d + 1) * per_domain)) for d in range(cfg.n_domains)}


def _voronoi_domains(cfg: SyntheticConfig, rng: Rng) -> np.ndarray:
    side = cfg.grid_side
    rows, cols = np.divmod(np.arange(side * side), side)
    grid_rc = np.stack([rows, cols], axis=1).astype(np.float64)
    # one seed per cell of a coarse near-square layout, jittered inside the
    # cell; uniform seeds often leave a domain with only a dozen spots
    n_cols = math.ceil(math.sqrt(cfg.n_domains))
    n_rows = math.ceil(cfg.n_domains / n_cols)
    cell = np.arange(cfg.n_domains)
    cell_r, cell_c = np.divmod(cell, n_cols)
    frac = 0.25 + 0.5 * rng.random((cfg.n_domains, 2))
    seed_rc = np.stack([(cell_r + frac[:, 0]) * side / n_rows,
                        (cell_c + frac[:, 1]) * side / n_cols], axis=1) - 0.5
    d2 = ((grid_rc[:, None, :] - seed_rc[None, :, :]) ** 2).sum(-1)
    domains = d2.argmin(axis=1)  # ties go to the lower domain index
    # crowded small grids can starve a seed; hand it the closest spot whose
    # domain can spare one
    for d in range(cfg.n_domains):
        if not (domains == d).any():
            counts = np.bincount(domains, minlength=cfg.n_domains)
            spare = np.flatnonzero(counts[domains] > 1)
            domains[spare[d2[spare, d].argmin()]] = d
    return domains


def _domain_palette(cfg: SyntheticConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Base RGB colour, stripe angle and stripe frequency per domain."""
    # evenly spaced along an H&E-like purple-to-pink axis, in shuffled order
    pink = np.array([0.95, 0.65, 0.80])
    purple = np.array([0.35, 0.20, 0.60])
    mix = ((rng.permutation(cfg.n_domains) + 0.5) / cfg.n_domains)[:, None]
    colors = mix * pink + (1 - mix) * purple + rng.uniform(-0.05, 0.05, size=(cfg.n_domains, 3))
    angles = np.pi * np.arange(cfg.n_domains) / cfg.n_domains
    freqs = 2.0 + 2.0 * rng.random(cfg.n_domains)
    return colors, angles, freqs


def generate_synthetic_slide(cfg: SyntheticConfig, slide_id: str = "synthetic") -> tuple[Slide, dict[str, int]]:
    """Grid slide with Voronoi-block domains visible in both modalities.

    Returns the slide (labels attached as strings) and the integer domain map.
    Identical configs yield bitwise-identical slides.
    """
    cfg.validate()
    root = Rng(cfg.seed, "synthetic")
    domains = _voronoi_domains(cfg, root.split("domains"))
    n = cfg.grid_side ** 2
    markers = marker_genes(cfg)
    n_marker_genes = sum(len(v) for v in markers.values())

    # expression
    expr_rng = root.split("expression")
    base = 1.0 + 0.5 * expr_rng.random(cfg.n_genes)
    domain_means = np.tile(base, (cfg.n_domains, 1))
    for d, genes in markers.items():
        domain_means[d, genes] += cfg.domain_expression_shift
    state_genes = np.arange(n_marker_genes, cfg.n_genes)
    latent = root.split("latent").normal(size=(n, cfg.latent_dims))
    gene_loading = np.zeros((cfg.latent_dims, cfg.n_genes))
    if cfg.latent_dims and state_genes.size:
        gene_loading[:, state_genes] = expr_rng.normal(size=(cfg.latent_dims, state_genes.size))
        gene_loading /= np.sqrt(cfg.latent_dims)
    noise = expr_rng.normal(size=(n, cfg.n_genes)) * cfg.noise_sigma
    clean = domain_means[domains] + cfg.latent_strength * latent @ gene_loading
    depth = np.exp(cfg.depth_jitter * expr_rng.normal(size=(n, 1)))
    expression = np.maximum(clean + noise, 0.0) * depth

    # patches
    img_rng = root.split("image")
    colors, angles, freqs = _domain_palette(cfg, img_rng)
    color_loading = img_rng.normal(size=(cfg.latent_dims, 3)) * 0.05 / max(1.0, np.sqrt(cfg.latent_dims))
    size = cfg.patch_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phases = img_rng.uniform(0, 2 * np.pi, size=n)
    brightness = np.exp(cfg.stain_jitter * img_rng.normal(size=n))
    pixel_noise = img_rng.normal(size=(n, size, size, 3)) * (cfg.noise_sigma * cfg.pixel_noise_ratio)
    tint = cfg.latent_strength * latent @ color_loading
    patches = []
    for i in range(n):
        d = domains[i]
        proj = xx * np.cos(angles[d]) + yy * np.sin(angles[d])
        stripes = cfg.patch_texture_contrast * np.sin(2 * np.pi * freqs[d] * proj + phases[i])
        img = (colors[d] + tint[i]) * brightness[i] + stripes[..., None] + pixel_noise[i]
        patches.append(ImagePatch(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)))

    ids = [f"spot_{i:04d}" for i in range(n)]
    rows, cols = np.divmod(np.arange(n), cfg.grid_side)
    spots = [
        Spot(ids[i], Coord2D(float(cols[i] * cfg.spot_spacing), float(rows[i] * cfg.spot_spacing)),
             patches[i], expression[i])
        for i in range(n)
    ]
    genes = [f"gene_{g:03d}" for g in range(cfg.n_genes)]
    label_map = {ids[i]: int(domains[i]) for i in range(n)}
    slide = Slide(slide_id, spots, genes, {k: str(v) for k, v in label_map.items()})
    return slide, label_map


def synthetic_config_fields() -> list[str]:
    return [f.name for f in fields(SyntheticConfig)]
