"""Shared domain types, value-range conventions, and validation.

Images cross module boundaries as float32 numpy arrays of shape (h, w, 3),
channel-last. The canonical internal range is [-1, 1]; everything read from
or written to disk goes 8-bit [0, 255] <-> [0, 1] <-> [-1, 1] through the
helpers in this module so the conversion happens in exactly one place.

Payloads are numpy uint8 vectors of 0/1 bits, most-significant-bit first
when packed to/from bytes.
"""

import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

CHECKPOINT_VERSION = "1"


class StegoError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(StegoError):
    """Malformed value or argument."""


class PayloadError(ValidationError):
    """Payload cannot satisfy the requested bit length or syntax."""


class DataError(StegoError):
    """Dataset or image-file problem."""


class ModelMismatchError(StegoError):
    """Checkpoint metadata incompatible with the requested operation."""


class TrainingDivergedError(StegoError):
    """Non-finite loss encountered during optimization."""


@dataclass(frozen=True)
class GazePoint:
    """Normalized fixation point; (0.5, 0.5) is the image center.

    Coordinates are fractions of image width (x) and height (y) and are
    clamped to [0, 1] on construction.
    """

    x: float = 0.5
    y: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "x", float(min(max(self.x, 0.0), 1.0)))
        object.__setattr__(self, "y", float(min(max(self.y, 0.0), 1.0)))


CENTER_GAZE = GazePoint(0.5, 0.5)


@dataclass
class ModelMetadata:
    """Identity of a trained model; validated whenever a checkpoint is used."""

    k: int
    resolution: int
    f: int
    c_z: int
    gaze_policy: str
    lambda_i: float
    backbone_id: str
    version: str = CHECKPOINT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelMetadata":
        return cls(**d)


# -- payload bits -----------------------------------------------------------


def bits_from_bytes(raw: bytes, k: int) -> np.ndarray:
    """First k bits of a byte sequence, MSB-first, as a uint8 0/1 vector."""
    if k <= 0:
        raise PayloadError(f"payload length must be positive, got k={k}")
    if 8 * len(raw) < k:
        raise PayloadError(
            f"payload provides {8 * len(raw)} bits but {k} are required"
        )
    bits = np.unpackbits(np.frombuffer(bytes(raw), dtype=np.uint8))
    return bits[:k].copy()


def bytes_from_bits(bits: np.ndarray) -> bytes:
    """Pack a 0/1 bit vector to bytes, MSB-first, zero-padded to a byte edge."""
    arr = np.asarray(bits)
    if arr.ndim != 1 or arr.size == 0:
        raise PayloadError("payload must be a non-empty 1-d bit vector")
    if not np.isin(arr, (0, 1)).all():
        raise PayloadError("payload bits must all be 0 or 1")
    return np.packbits(arr.astype(np.uint8)).tobytes()


def payload_to_hex(bits: np.ndarray) -> str:
    return bytes_from_bits(bits).hex()


def parse_payload_spec(spec: str, k: int) -> np.ndarray:
    """Parse the CLI payload syntax: ``hex:<hexdigits>`` or ``file:<path>``."""
    if spec.startswith("hex:"):
        digits = spec[len("hex:"):]
        try:
            raw = bytes.fromhex(digits)
        except ValueError as exc:
            raise PayloadError(f"invalid hex payload {digits!r}: {exc}") from exc
    elif spec.startswith("file:"):
        path = Path(spec[len("file:"):])
        if not path.is_file():
            raise PayloadError(f"payload file not found: {path}")
        raw = path.read_bytes()
    else:
        raise PayloadError(
            f"payload must use 'hex:<digits>' or 'file:<path>' syntax, got {spec!r}"
        )
    return bits_from_bytes(raw, k)


# -- value ranges -----------------------------------------------------------


def normalize(image01: np.ndarray) -> np.ndarray:
    """Map a [0, 1] image to the canonical [-1, 1] range."""
    arr = np.asarray(image01, dtype=np.float32)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(
            f"image values outside [0, 1]: min={arr.min():.6g} max={arr.max():.6g}"
        )
    return arr * 2.0 - 1.0


def denormalize(image: np.ndarray) -> np.ndarray:
    """Map a canonical [-1, 1] image back to [0, 1]."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
        raise ValidationError(
            f"image values outside [-1, 1]: min={arr.min():.6g} max={arr.max():.6g}"
        )
    return (arr + 1.0) / 2.0


def validate_image(image: np.ndarray, resolution: int | None = None) -> np.ndarray:
    """Check canonical-range (h, w, 3) layout; returns the array unchanged."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected (h, w, 3) image, got shape {arr.shape}")
    if resolution is not None and arr.shape[:2] != (resolution, resolution):
        raise ValidationError(
            f"expected {resolution}x{resolution} image, got {arr.shape[0]}x{arr.shape[1]}"
        )
    if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
        raise ValidationError("image values outside canonical [-1, 1] range")
    return arr


# -- torch layout bridge ----------------------------------------------------


def to_torch(image: np.ndarray) -> torch.Tensor:
    """(h, w, 3) numpy image -> (1, 3, h, w) float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def from_torch(tensor: torch.Tensor) -> np.ndarray:
    """(1, 3, h, w) or (3, h, w) tensor -> (h, w, 3) float32 numpy image."""
    t = tensor.detach()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValidationError(f"expected a single image, got batch {t.shape[0]}")
        t = t[0]
    return np.ascontiguousarray(t.cpu().float().numpy().transpose(1, 2, 0))


# -- 8-bit file boundary ----------------------------------------------------


def quantize_u8(image: np.ndarray) -> np.ndarray:
    """Canonical-range image -> uint8, identical rounding to the eval bridge."""
    arr = np.asarray(image, dtype=np.float32)
    x01 = (np.clip(arr, -1.0, 1.0) + 1.0) / 2.0
    return np.round(x01 * 255.0).astype(np.uint8)


def atomic_write(path: Path, write_fn) -> None:
    """Write through a temp file in the same directory, then rename.

    Guarantees a failed write never leaves a partial file at `path`.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_png(path: Path, image: np.ndarray) -> None:
    """Write a canonical-range image as lossless 8-bit RGB PNG (atomic)."""
    u8 = quantize_u8(validate_image(image))
    atomic_write(Path(path), lambda tmp: Image.fromarray(u8, mode="RGB").save(tmp, format="PNG"))


def load_png(path: Path) -> np.ndarray:
    """Read an image file as a canonical-range (h, w, 3) float32 array."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return normalize(arr)
