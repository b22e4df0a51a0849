"""Tile enumeration over tissue masks and embedding-bag assembly.

Masks are ingested as binary rasters (PGM P5, 8-bit, nonzero = tissue) with a
sidecar text file ``<mask>.mpp`` holding the resolution in micrometers per
pixel. Tiles are enumerated on the full stride lattice, partial tiles at the
right/bottom edges are excluded, and the tissue-fraction filter is inclusive
(``>= min_tissue_fraction``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

KNOWN_ENCODERS = {"uni2": 1536, "virchow2": 2560, "conch": 512}


@dataclass(frozen=True)
class TissueMask:
    """Binary tissue raster with pixel resolution metadata."""

    bitmap: np.ndarray  # (height, width), nonzero = tissue
    resolution_um_per_px: float

    def __post_init__(self):
        if self.bitmap.ndim != 2 or self.bitmap.shape[0] < 1 or self.bitmap.shape[1] < 1:
            raise ValidationError("mask bitmap must be a 2-D array with positive extent")

    @property
    def height(self) -> int:
        return self.bitmap.shape[0]

    @property
    def width(self) -> int:
        return self.bitmap.shape[1]


@dataclass(frozen=True)
class TileGrid:
    """Retained tile positions plus the lattice they were drawn from."""

    tile_size: int
    stride: int
    positions: np.ndarray  # (n, 2) retained top-left (x, y)
    tissue_fraction: np.ndarray  # (n,) fraction for each retained position
    lattice_shape: tuple[int, int]  # (nx, ny) full lattice before filtering
    min_tissue_fraction: float

    def __len__(self) -> int:
        return len(self.positions)


def read_mask(path: str | Path) -> TissueMask:
    """Load a P5 PGM mask and its ``.mpp`` resolution sidecar."""
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary (P5) PGM file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: bad PGM header token {data[start:pos]!r}") from None
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    payload = data[pos : pos + width * height]
    if len(payload) != width * height:
        raise FormatError(
            f"{path}: payload truncated at byte offset {pos + len(payload)}"
            f" (expected {width * height} pixels)"
        )
    bitmap = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    sidecar = Path(str(path) + ".mpp")
    if not sidecar.exists():
        raise FormatError(f"{path}: missing resolution sidecar {sidecar.name}")
    resolution = float(sidecar.read_text().strip())
    return TissueMask(bitmap=bitmap, resolution_um_per_px=resolution)


def write_mask(mask: TissueMask, path: str | Path) -> None:
    path = Path(path)
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode()
    body = np.where(mask.bitmap != 0, 255, 0).astype(np.uint8).tobytes()
    path.write_bytes(header + body)
    Path(str(path) + ".mpp").write_text(f"{mask.resolution_um_per_px}\n")


def enumerate_tiles(
    mask: TissueMask, tile_size: int, stride: int, min_tissue_fraction: float
) -> TileGrid:
    """Lattice positions whose tissue fraction is >= the threshold.

    The lattice starts at (0, 0) and advances by ``stride``; positions whose
    tile would overhang the mask are not generated. Tissue fraction is the
    count of nonzero pixels in the tile divided by ``tile_size**2``.
    """
    if tile_size > min(mask.width, mask.height):
        raise ValidationError(
            f"tile_size {tile_size} exceeds mask extent {mask.width}x{mask.height}"
        )
    if not 0 < stride <= tile_size:
        raise ValidationError(f"stride must be in (0, tile_size], got {stride}")
    xs = np.arange(0, mask.width - tile_size + 1, stride)
    ys = np.arange(0, mask.height - tile_size + 1, stride)
    # Summed-area table makes each window sum O(1).
    binary = (mask.bitmap != 0).astype(np.int64)
    sat = np.zeros((mask.height + 1, mask.width + 1), dtype=np.int64)
    sat[1:, 1:] = binary.cumsum(axis=0).cumsum(axis=1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    counts = (
        sat[gy + tile_size, gx + tile_size]
        - sat[gy, gx + tile_size]
        - sat[gy + tile_size, gx]
        + sat[gy, gx]
    )
    fractions = counts / float(tile_size * tile_size)
    keep = fractions >= min_tissue_fraction
    positions = np.stack([gx[keep], gy[keep]], axis=1)
    return TileGrid(
        tile_size=tile_size,
        stride=stride,
        positions=positions,
        tissue_fraction=fractions[keep],
        lattice_shape=(len(xs), len(ys)),
        min_tissue_fraction=min_tissue_fraction,
    )


@dataclass(frozen=True)
class EmbeddingBag:
    """All tile embedding vectors for one patient (or one slide)."""

    patient_id: str
    tiles: np.ndarray  # (n_tiles, dim) float32
    provenance: str  # e.g. "uni2:1536", "synthetic:64", "ensemble:4608"
    slide_id: str | None = None

    def __post_init__(self):
        if self.tiles.ndim != 2 or self.tiles.shape[0] < 1:
            raise ValidationError("bag must hold a non-empty (n_tiles, dim) array")
        name, _, dim_tag = self.provenance.partition(":")
        if not dim_tag or int(dim_tag) != self.tiles.shape[1]:
            raise ValidationError(
                f"provenance {self.provenance!r} does not match dim {self.tiles.shape[1]}"
            )
        if name in KNOWN_ENCODERS and KNOWN_ENCODERS[name] != self.tiles.shape[1]:
            raise ValidationError(f"encoder {name!r} produces {KNOWN_ENCODERS[name]}-d tiles")

    @property
    def dim(self) -> int:
        return self.tiles.shape[1]

    @property
    def n_tiles(self) -> int:
        return self.tiles.shape[0]


def assemble_bag(
    bags_per_slide: list[EmbeddingBag], max_tiles: int, sampler_seed
) -> EmbeddingBag:
    """Pool slide bags into one patient bag, capping by uniform subsampling.

    Original tile order is preserved; when the pooled count exceeds
    ``max_tiles`` a without-replacement subsample is drawn with
    ``sampler_seed`` (deterministic) and kept in original order.
    """
    if not bags_per_slide:
        raise ValidationError("no slide bags supplied")
    pid = bags_per_slide[0].patient_id
    dim = bags_per_slide[0].dim
    for b in bags_per_slide[1:]:
        if b.patient_id != pid:
            raise ValidationError(f"mixed patients in bag assembly: {pid!r} vs {b.patient_id!r}")
        if b.dim != dim:
            raise ValidationError(f"mixed embedding dims in bag assembly: {dim} vs {b.dim}")
    tiles = np.concatenate([b.tiles for b in bags_per_slide], axis=0)
    if tiles.shape[0] > max_tiles:
        rng = np.random.default_rng(sampler_seed)
        keep = np.sort(rng.choice(tiles.shape[0], size=max_tiles, replace=False))
        tiles = tiles[keep]
    return EmbeddingBag(
        patient_id=pid, tiles=tiles, provenance=bags_per_slide[0].provenance
    )


def sample_training_slides(slide_ids: list[str], k: int, seed) -> list[str]:
    """Draw min(k, n) slide ids uniformly without replacement.

    ``seed`` feeds ``np.random.default_rng`` directly; callers wanting
    per-(seed, epoch) determinism pass the pair as a sequence.
    """
    if not slide_ids:
        raise ValidationError("patient has no slides to sample from")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k >= len(slide_ids):
        return list(slide_ids)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(slide_ids), size=k, replace=False)
    return [slide_ids[i] for i in sorted(idx)]


def concat_embeddings(bags: list[EmbeddingBag]) -> EmbeddingBag:
    """Tile-wise concatenation across encoders into one ensemble bag."""
    if not bags:
        raise ValidationError("no bags to concatenate")
    if len(bags) == 1:
        return bags[0]
    n = bags[0].n_tiles
    pid = bags[0].patient_id
    for b in bags[1:]:
        if b.n_tiles != n:
            raise ValidationError(f"tile-count mismatch: {n} vs {b.n_tiles}")
        if b.patient_id != pid:
            raise ValidationError("cannot concatenate bags from different patients")
    tiles = np.concatenate([b.tiles for b in bags], axis=1)
    return EmbeddingBag(
        patient_id=pid, tiles=tiles, provenance=f"ensemble:{tiles.shape[1]}"
    )
