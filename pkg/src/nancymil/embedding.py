"""Pluggable tile encoders and the on-disk embedding store.

Encoders stand in for the frozen pretrained foundation model: they map a
tile image to a d-dimensional vector, deterministically, and are never
updated. The store persists bags (manifest + packed float32 payload +
tile-ref table) so training and inference never touch image data.

Store layout (a directory):
    manifest.json   format_version, dim, profile, per-slide records
                    (slide_id, case_id, label, center, tile_count,
                    offset, length in bytes into the payload)
    payload.bin     per slide, tiles in row-major order, each vector d
                    consecutive little-endian float32 values
    tilerefs.tsv    slide_id, level, x, y, width, height, microns_per_pixel
                    (one row per tile, same order as the payload)
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import EmbeddingBag, TileRef
from .errors import DataError, NumericalError, UsageError

STORE_VERSION = 1
TILEREF_COLUMNS = ("slide_id", "level", "x", "y", "width", "height",
                   "microns_per_pixel")


class EncoderProvider:
    """Deterministic tile -> vector mapping. Same tile bytes, same vector."""

    name: str = "base"
    dim: int = 0
    tile_size: int | None = None  # None = any size accepted

    def encode_tile(self, tile: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SyntheticEncoder(EncoderProvider):
    """Seeded pseudo-random projection of tile summary statistics.

    The exact formula, so tests can recompute it:

    1. gray = mean of the three channels, per pixel.
    2. feature vector f (length 8), each entry divided by 255:
       [mean R, mean G, mean B, std of gray,
        mean |horizontal gray diff|, mean |vertical gray diff|,
        min gray, max gray]
       (the two gradient terms are 0 for 1-pixel-wide/tall tiles).
    3. v = P @ f with P an (d, 8) matrix drawn once as
       numpy.random.default_rng(seed).standard_normal((d, 8)).
    4. output = v / ||v||, or the first standard basis vector if ||v|| = 0.
    """

    def __init__(self, seed: int = 0, d: int = 64):
        if d <= 0:
            raise UsageError(f"synthetic encoder dim must be positive, got {d}")
        self.seed = seed
        self.dim = d
        self.name = f"synthetic:seed={seed}:d={d}"
        self._P = np.random.default_rng(seed).standard_normal((d, 8))

    def encode_tile(self, tile: np.ndarray) -> np.ndarray:
        tile = np.asarray(tile, dtype=np.float64)
        if tile.ndim == 2:
            tile = np.stack([tile] * 3, axis=-1)
        if tile.ndim != 3 or tile.shape[-1] != 3:
            raise DataError(f"expected (H, W, 3) tile, got {tile.shape}")
        gray = tile.mean(axis=-1)
        gx = np.abs(np.diff(gray, axis=1)).mean() if gray.shape[1] > 1 else 0.0
        gy = np.abs(np.diff(gray, axis=0)).mean() if gray.shape[0] > 1 else 0.0
        f = np.array([tile[..., 0].mean(), tile[..., 1].mean(),
                      tile[..., 2].mean(), gray.std(),
                      gx, gy, gray.min(), gray.max()]) / 255.0
        v = self._P @ f
        n = np.linalg.norm(v)
        if n == 0.0:
            v = np.zeros(self.dim)
            v[0] = 1.0
            return v
        return v / n


def encode_bag(tiles, provider: EncoderProvider) -> list[np.ndarray]:
    """One vector per tile, order preserved; the provider is never updated."""
    out = []
    for i, tile in enumerate(tiles):
        tile = np.asarray(tile)
        if provider.tile_size is not None and \
                tile.shape[:2] != (provider.tile_size, provider.tile_size):
            raise DataError(
                f"tile {i}: size {tile.shape[:2]} does not match provider's "
                f"expected {provider.tile_size}x{provider.tile_size}")
        v = np.asarray(provider.encode_tile(tile), dtype=np.float64)
        if v.shape != (provider.dim,):
            raise NumericalError(
                f"provider {provider.name} returned shape {v.shape}, "
                f"expected ({provider.dim},)")
        if not np.all(np.isfinite(v)):
            raise NumericalError(
                f"provider {provider.name} produced non-finite output "
                f"for tile {i}")
        out.append(v)
    return out


def resolve_provider(spec: str):
    """Parse a provider spec string.

    "synthetic:seed=<int>:d=<int>" -> SyntheticEncoder
    "file:<path>"                  -> ("file", path) marker; the caller
                                      imports an existing store instead of
                                      encoding images.
    """
    if spec.startswith("file:"):
        path = spec[len("file:"):]
        if not path:
            raise UsageError("file: provider needs a path")
        return ("file", path)
    if spec.startswith("synthetic"):
        seed, d = 0, 64
        for part in spec.split(":")[1:]:
            key, _, value = part.partition("=")
            try:
                if key == "seed":
                    seed = int(value)
                elif key == "d":
                    d = int(value)
                else:
                    raise UsageError(f"unknown synthetic option {key!r}")
            except ValueError as exc:
                raise UsageError(f"bad provider option {part!r}") from exc
        return SyntheticEncoder(seed=seed, d=d)
    raise UsageError(f"unknown provider spec {spec!r}; expected "
                     "'synthetic:seed=<n>:d=<n>' or 'file:<path>'")


@dataclass
class EmbeddingStore:
    """In-memory collection of bags plus the persisted format."""

    bags: list[EmbeddingBag] = field(default_factory=list)
    dim: int = 0
    profile: str = ""

    def __post_init__(self):
        for bag in self.bags:
            if self.dim == 0:
                self.dim = bag.dim
            elif bag.dim != self.dim:
                raise DataError(f"bag {bag.slide_id} has dim {bag.dim}, "
                                f"store dim is {self.dim}")

    def __len__(self):
        return len(self.bags)

    def get(self, slide_id: str) -> EmbeddingBag:
        for bag in self.bags:
            if bag.slide_id == slide_id:
                return bag
        raise DataError(f"slide {slide_id!r} not in store")

    def save(self, directory) -> None:
        """Atomic whole-directory replace: write to a temp dir, then rename
        files into place."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=directory.parent,
                                    prefix=directory.name + ".tmp"))
        try:
            slides = []
            offset = 0
            with open(tmp / "payload.bin", "wb") as payload, \
                    open(tmp / "tilerefs.tsv", "w") as refs:
                refs.write("\t".join(TILEREF_COLUMNS) + "\n")
                for bag in self.bags:
                    blob = np.ascontiguousarray(
                        bag.embeddings, dtype="<f4").tobytes()
                    payload.write(blob)
                    slides.append({
                        "slide_id": bag.slide_id,
                        "case_id": bag.case_id,
                        "label": int(bag.label),
                        "center": bag.center,
                        "tile_count": bag.n_tiles,
                        "dim": self.dim,
                        "offset": offset,
                        "length": len(blob),
                    })
                    offset += len(blob)
                    for t in bag.tiles:
                        refs.write(f"{t.slide_id}\t{t.level}\t{t.x}\t{t.y}\t"
                                   f"{t.width}\t{t.height}\t"
                                   f"{t.microns_per_pixel!r}\n")
            manifest = {"format_version": STORE_VERSION, "dim": self.dim,
                        "profile": self.profile, "slides": slides}
            with open(tmp / "manifest.json", "w") as fh:
                json.dump(manifest, fh, indent=1)
            for name in ("payload.bin", "tilerefs.tsv", "manifest.json"):
                os.replace(tmp / name, directory / name)
        finally:
            for leftover in tmp.glob("*"):
                leftover.unlink()
            tmp.rmdir()

    @classmethod
    def load(cls, directory) -> "EmbeddingStore":
        directory = Path(directory)
        mpath = directory / "manifest.json"
        if not mpath.exists():
            raise DataError(f"no store manifest at {mpath}")
        with open(mpath) as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != STORE_VERSION:
            raise DataError(f"unsupported store version "
                            f"{manifest.get('format_version')}")
        dim = int(manifest["dim"])
        payload = (directory / "payload.bin").read_bytes()
        refs_by_slide: dict[str, list[TileRef]] = {}
        with open(directory / "tilerefs.tsv") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if tuple(header) != TILEREF_COLUMNS:
                raise DataError(f"bad tilerefs header {header}")
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                ref = TileRef(slide_id=parts[0], level=int(parts[1]),
                              x=int(parts[2]), y=int(parts[3]),
                              width=int(parts[4]), height=int(parts[5]),
                              microns_per_pixel=float(parts[6]))
                refs_by_slide.setdefault(ref.slide_id, []).append(ref)
        bags = []
        for rec in manifest["slides"]:
            if int(rec.get("dim", dim)) != dim:
                raise DataError(
                    f"slide {rec['slide_id']}: dim {rec.get('dim')} does not "
                    f"match store dim {dim}")
            count = int(rec["tile_count"])
            offset, length = int(rec["offset"]), int(rec["length"])
            expected = count * dim * 4
            if length != expected or offset + length > len(payload):
                raise DataError(
                    f"slide {rec['slide_id']}: payload slice "
                    f"[{offset}, {offset + length}) invalid — expected "
                    f"{expected} bytes, payload file has {len(payload)}")
            vec = np.frombuffer(payload[offset:offset + length],
                                dtype="<f4").reshape(count, dim)
            tiles = refs_by_slide.get(rec["slide_id"], [])
            if len(tiles) != count:
                raise DataError(
                    f"slide {rec['slide_id']}: {len(tiles)} tile refs vs "
                    f"tile_count {count}")
            bags.append(EmbeddingBag(
                slide_id=rec["slide_id"], case_id=rec["case_id"],
                tiles=tiles, embeddings=vec.astype(np.float64),
                label=int(rec["label"]), center=rec.get("center", "")))
        return cls(bags=bags, dim=dim, profile=manifest.get("profile", ""))


def import_external(directory) -> EmbeddingStore:
    """Validate and load an externally produced store (e.g. embeddings
    exported from a real foundation-model encoder)."""
    return EmbeddingStore.load(directory)
