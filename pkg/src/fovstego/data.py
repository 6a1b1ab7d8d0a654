"""Dataset ingestion: manifest building, reproducible splits, preprocessing.

A manifest pins the train/val/test partition to disk as a line-oriented text
file so every later stage (training, evaluation) sees byte-identical splits.
Loading crops/pads images to the working resolution: random scale crop for
augmentation, deterministic center crop otherwise, mid-gray padding.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .domain import DataError, ValidationError, atomic_write, normalize

logger = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    source: str
    path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    sizes: tuple[int, int, int]
    resolution: int

    def paths(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return [e.path for e in self.entries if e.split == split]

    def save(self, path) -> None:
        def write(tmp):
            with open(tmp, "w") as fh:
                fh.write(f"# seed={self.seed}\n")
                fh.write(f"# sizes={self.sizes[0]}/{self.sizes[1]}/{self.sizes[2]}\n")
                fh.write(f"# resolution={self.resolution}\n")
                for e in self.entries:
                    fh.write(f"{e.split}\t{e.source}\t{e.path}\n")

        atomic_write(Path(path), write)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        header = {}
        entries = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"malformed manifest line: {line!r}")
            split, source, p = parts
            if split not in SPLITS:
                raise DataError(f"unknown split {split!r} in manifest")
            entries.append(ManifestEntry(split, source, p))
        try:
            seed = int(header["seed"])
            sizes = tuple(int(x) for x in header["sizes"].split("/"))
            resolution = int(header["resolution"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"manifest header incomplete or malformed: {exc}") from exc
        return cls(entries=entries, seed=seed, sizes=sizes, resolution=resolution)


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise DataError(f"image folder not found: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def assign_splits(n_total: int, sizes: tuple[int, int, int], rng: np.random.Generator) -> list[str]:
    """Random disjoint split labels for n_total items; raises if too few."""
    need = sum(sizes)
    if n_total < need:
        raise DataError(f"need {need} images for splits {sizes}, only {n_total} available")
    labels = np.array(
        ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2], dtype=object
    )
    picked = rng.permutation(n_total)[:need]
    out = [None] * n_total
    for label, idx in zip(labels, picked):
        out[idx] = label
    return out


def build_manifest(
    dirs,
    sizes: tuple[int, int, int],
    seed: int,
    resolution: int,
    out_path=None,
) -> DatasetManifest:
    """Balanced, seed-deterministic split over one or more source folders.

    With multiple sources, each contributes an equal share of the total draw
    (remainder spread over the first sources); an undersized source is an
    error reporting the available vs required counts.
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or any(s < 0 for s in sizes):
        raise ValidationError(f"sizes must be three non-negative counts, got {sizes}")
    dirs = [Path(d) for d in dirs]
    if not dirs:
        raise ValidationError("at least one source folder required")
    rng = np.random.default_rng(seed)
    need = sum(sizes)
    share = need // len(dirs)
    extras = need % len(dirs)

    pool: list[tuple[str, Path]] = []
    for i, folder in enumerate(dirs):
        quota = share + (1 if i < extras else 0)
        files = list_images(folder)
        if len(files) < quota:
            raise DataError(
                f"source {folder} has {len(files)} images but its balanced share is {quota}"
            )
        order = rng.permutation(len(files))[:quota]
        source = folder.name or str(folder)
        pool.extend((source, files[j]) for j in order)

    labels = assign_splits(len(pool), sizes, rng)
    entries = [
        ManifestEntry(split, source, str(path))
        for (source, path), split in zip(pool, labels)
        if split is not None
    ]
    order = {"train": 0, "val": 1, "test": 2}
    entries.sort(key=lambda e: (order[e.split], e.source, e.path))
    manifest = DatasetManifest(entries=entries, seed=seed, sizes=sizes, resolution=resolution)
    if out_path is not None:
        manifest.save(out_path)
    return manifest


def _decode(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def _fit_to_resolution(arr01: np.ndarray, resolution: int) -> np.ndarray:
    """Downscale an oversized crop; center-pad an undersized one with mid-gray."""
    h, w = arr01.shape[:2]
    if max(h, w) > resolution:
        img = Image.fromarray(np.round(arr01 * 255.0).astype(np.uint8))
        img = img.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0
    if (h, w) == (resolution, resolution):
        return arr01
    out = np.full((resolution, resolution, 3), 0.5, dtype=np.float32)
    top = (resolution - h) // 2
    left = (resolution - w) // 2
    out[top : top + h, left : left + w] = arr01
    return out


def load_example(
    path,
    resolution: int,
    augment: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Load one image as a canonical-range (R, R, 3) tensor.

    Augmentation takes a square crop at a uniform random scale in [0.8, 1.0]
    of the shorter side at a random position; otherwise a deterministic
    center crop. Crops smaller than the target are padded with mid-gray
    (canonical 0), larger ones downscaled.
    """
    arr = _decode(path)
    h, w = arr.shape[:2]
    if augment:
        if rng is None:
            rng = np.random.default_rng()
        side = max(1, round(rng.uniform(0.8, 1.0) * min(h, w)))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
    else:
        side = min(h, w, resolution)
        top = (h - side) // 2
        left = (w - side) // 2
    crop = arr[top : top + side, left : left + side]
    return normalize(_fit_to_resolution(crop, resolution))


def load_split(
    manifest: DatasetManifest,
    split: str,
    augment: bool = False,
    rng: np.random.Generator | None = None,
    skip_bad: bool = False,
) -> tuple[np.ndarray, list[str]]:
    """Stack a whole split into an (n, R, R, 3) array plus its paths.

    skip_bad logs and drops undecodable files (training); otherwise they
    raise (evaluation).
    """
    images = []
    ids = []
    for path in manifest.paths(split):
        try:
            images.append(load_example(path, manifest.resolution, augment=augment, rng=rng))
        except DataError as exc:
            if not skip_bad:
                raise
            logger.warning("skipping %s: %s", path, exc)
            continue
        ids.append(path)
    if not images:
        raise DataError(f"no loadable images in split {split!r}")
    return np.stack(images), ids
