"""Evaluation harness: bit accuracy, MSE, PSNR, SSIM, foveated loss, reports.

Image metrics are computed on [0, 1]-range (denormalized) images so PSNR and
SSIM use their conventional peak assumptions. An external learned perceptual
metric (LPIPS-style) can be plugged in as a callable; none is shipped.
"""

import json
import logging
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .data import DatasetManifest, load_example
from .domain import (
    CENTER_GAZE,
    GazePoint,
    ValidationError,
    atomic_write,
    denormalize,
    to_torch,
)
from .foveation import FoveationConfig, metameric_loss
from .stegonet import StegoNet, load_checkpoint, quantization_bridge

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = "1"

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-tap window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def bit_accuracy(expected: np.ndarray, recovered: np.ndarray) -> float:
    """Fraction of matching bit positions."""
    a = np.asarray(expected)
    b = np.asarray(recovered)
    if a.shape != b.shape:
        raise ValidationError(f"bit vector length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValidationError("empty payloads cannot be compared")
    return float(np.mean(a == b))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB, capped at the 100 dB identity sentinel."""
    err = mse(a, b)
    if err == 0.0:
        return 100.0
    return float(min(10.0 * np.log10(peak * peak / err), 100.0))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity on [0, 1] images, per channel, averaged.

    Gaussian window sigma 1.5 truncated to 11x11 taps, K1=0.01, K2=0.03,
    reflected boundaries, mean over the full map.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    truncate = SSIM_RADIUS / SSIM_SIGMA

    def win(img):
        return gaussian_filter(img, SSIM_SIGMA, mode="reflect", truncate=truncate)

    values = []
    for ch in range(x.shape[2]):
        xa, ya = x[..., ch], y[..., ch]
        mu_x = win(xa)
        mu_y = win(ya)
        var_x = win(xa * xa) - mu_x * mu_x
        var_y = win(ya * ya) - mu_y * mu_y
        cov = win(xa * ya) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def metameric_metric(
    a01: np.ndarray,
    b01: np.ndarray,
    gaze: GazePoint = CENTER_GAZE,
    cfg: FoveationConfig | None = None,
) -> float:
    """Foveated statistics loss between two [0, 1] numpy images."""
    at = torch.from_numpy(np.ascontiguousarray(np.asarray(a01, np.float32).transpose(2, 0, 1)))
    bt = torch.from_numpy(np.ascontiguousarray(np.asarray(b01, np.float32).transpose(2, 0, 1)))
    with torch.no_grad():
        return float(metameric_loss(at, bt, gaze, cfg).item())


@dataclass
class ImageRecord:
    cover_id: str
    bits_total: int
    bit_errors: int
    bit_acc: float
    mse: float
    psnr: float
    ssim: float
    metameric: float
    lpips: float | None = None


@dataclass
class MetricsReport:
    schema_version: str
    context: dict
    records: list[ImageRecord]
    aggregates: dict

    def to_json(self, path) -> None:
        doc = {
            "schema_version": self.schema_version,
            "context": self.context,
            "aggregates": self.aggregates,
            "records": [asdict(r) for r in self.records],
        }
        atomic_write(Path(path), lambda tmp: tmp.write_text(json.dumps(doc, indent=2) + "\n"))

    def to_csv(self, path) -> None:
        cols = ["cover_id", "bits_total", "bit_errors", "bit_acc", "mse", "psnr",
                "ssim", "metameric", "lpips"]

        def write(tmp):
            with open(tmp, "w") as fh:
                fh.write(",".join(cols) + "\n")
                for r in self.records:
                    d = asdict(r)
                    row = [
                        "" if d[c] is None else
                        (d[c] if isinstance(d[c], str) else f"{d[c]:.8g}")
                        for c in cols
                    ]
                    fh.write(",".join(str(v) for v in row) + "\n")

        atomic_write(Path(path), write)

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        doc = json.loads(Path(path).read_text())
        return cls(
            schema_version=doc["schema_version"],
            context=doc["context"],
            records=[ImageRecord(**r) for r in doc["records"]],
            aggregates=doc["aggregates"],
        )


def aggregate_records(records: list[ImageRecord]) -> dict:
    """Aggregates recomputed from rows; overall accuracy is exact-ratio."""
    total_bits = sum(r.bits_total for r in records)
    total_errors = sum(r.bit_errors for r in records)
    agg = {
        "images": len(records),
        "total_bits": total_bits,
        "total_bit_errors": total_errors,
        "bit_accuracy": 1.0 - total_errors / total_bits,
        "mean_bit_acc": float(np.mean([r.bit_acc for r in records])),
        "mean_mse": float(np.mean([r.mse for r in records])),
        "mean_psnr": float(np.mean([r.psnr for r in records])),
        "mean_ssim": float(np.mean([r.ssim for r in records])),
        "mean_metameric": float(np.mean([r.metameric for r in records])),
    }
    lpips_vals = [r.lpips for r in records if r.lpips is not None]
    agg["mean_lpips"] = float(np.mean(lpips_vals)) if lpips_vals else None
    return agg


def evaluate(
    checkpoint,
    manifest: DatasetManifest,
    split: str = "test",
    n_payloads_per_image: int = 1,
    payload_seed: int = 0,
    gaze: GazePoint = CENTER_GAZE,
    lpips_fn=None,
) -> MetricsReport:
    """Hide -> 8-bit quantization -> reveal over a manifest split.

    One record per cover (metrics over its n payload draws); deterministic
    given (checkpoint, manifest, payload_seed). `lpips_fn(a01, b01) -> float`
    fills the optional perceptual column when provided.
    """
    if isinstance(checkpoint, StegoNet):
        net = checkpoint
        ckpt_name = "<in-memory>"
    else:
        net = load_checkpoint(checkpoint)
        ckpt_name = str(checkpoint)
    if n_payloads_per_image < 1:
        raise ValidationError("n_payloads_per_image must be >= 1")
    k = net.metadata.k
    paths = sorted(manifest.paths(split))
    if not paths:
        raise ValidationError(f"manifest split {split!r} is empty")

    records = []
    for idx, path in enumerate(paths):
        cover = load_example(path, manifest.resolution, augment=False)
        cover01 = denormalize(cover)
        rng = np.random.default_rng([payload_seed, idx])
        errors = 0
        quality = None
        for _ in range(n_payloads_per_image):
            bits = rng.integers(0, 2, size=k).astype(np.uint8)
            stego = net.hide(cover, bits)
            with torch.no_grad():
                stego_q = quantization_bridge(to_torch(stego), "eval")[0]
            stego_q01 = np.ascontiguousarray(
                stego_q.numpy().transpose(1, 2, 0) * 0.5 + 0.5
            )
            recovered = net.reveal(np.asarray(stego_q.numpy().transpose(1, 2, 0)))
            errors += int(np.sum(bits != recovered))
            if quality is None:
                # hide() is payload-deterministic only through the merger, so
                # image quality can differ per payload; report the first draw.
                quality = {
                    "mse": mse(cover01, stego_q01),
                    "psnr": psnr(cover01, stego_q01, peak=1.0),
                    "ssim": ssim(cover01, stego_q01),
                    "metameric": metameric_metric(cover01, stego_q01, gaze, net.foveation),
                    "lpips": None if lpips_fn is None else float(lpips_fn(cover01, stego_q01)),
                }
        bits_total = k * n_payloads_per_image
        records.append(
            ImageRecord(
                cover_id=path,
                bits_total=bits_total,
                bit_errors=errors,
                bit_acc=1.0 - errors / bits_total,
                **quality,
            )
        )
    records.sort(key=lambda r: r.cover_id)
    return MetricsReport(
        schema_version=REPORT_SCHEMA_VERSION,
        context={
            "checkpoint": ckpt_name,
            "split": split,
            "payload_seed": payload_seed,
            "n_payloads_per_image": n_payloads_per_image,
            "gaze": {"x": gaze.x, "y": gaze.y},
            "k": k,
            "resolution": net.metadata.resolution,
        },
        records=records,
        aggregates=aggregate_records(records),
    )
