"""Optimization loop: combined payload/image loss, validation, checkpointing.

The total objective is BCE over recovered bit logits plus a warm-up-scheduled
multiple of the image-quality loss (foveated by default, plain MSE for the
vanilla baseline). Only embedder, merger, and retriever parameters are ever
optimized; the backbone stays frozen and its hash is asserted unchanged.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (
    BackboneSpec,
    DeskAutoencoder,
    PretrainConfig,
    backbone_hash,
    load_backbone,
    pretrain_desk_backbone,
)
from .data import DatasetManifest, build_manifest, load_split
from .domain import (
    CENTER_GAZE,
    GazePoint,
    ModelMetadata,
    TrainingDivergedError,
    ValidationError,
)
from .foveation import FoveationConfig, metameric_loss
from .stegonet import StegoNet, load_checkpoint, quantization_bridge, save_checkpoint

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_loss", "bce", "metameric", "val_bit_acc", "val_psnr")


@dataclass
class TrainConfig:
    k: int = 32
    resolution: int = 64
    lambda_i: float = 1.5
    warmup_start_epochs: int | None = None  # None: 10% of the epoch budget
    warmup_ramp_epochs: int | None = None  # None: 10% of the epoch budget
    batch_size: int = 8
    learning_rate: float = 2e-4
    epochs: int = 40
    gaze_policy: str = "fixed-center"
    quant_bridge: bool = True
    seed: int = 0
    image_loss: str = "metameric"
    retriever_profile: str = "desk"
    embed_hidden: int = 512
    gamma_init: float = 0.1
    augment: bool = False

    def __post_init__(self):
        if self.lambda_i < 0:
            raise ValidationError("lambda_i must be non-negative")
        for name in ("warmup_start_epochs", "warmup_ramp_epochs"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.gaze_policy not in ("fixed-center", "uniform-sampled"):
            raise ValidationError(f"unknown gaze policy {self.gaze_policy!r}")
        if self.image_loss not in ("metameric", "mse"):
            raise ValidationError(f"unknown image loss {self.image_loss!r}")
        if self.k < 1 or self.resolution < 1 or self.epochs < 0:
            raise ValidationError("k, resolution must be positive; epochs non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lambda_for_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Warm-up schedule: zero, then a linear ramp up to the full weight."""
    start = cfg.warmup_start_epochs
    ramp = cfg.warmup_ramp_epochs
    if start is None:
        start = math.ceil(0.1 * cfg.epochs)
    if ramp is None:
        ramp = math.ceil(0.1 * cfg.epochs)
    if epoch < start:
        return 0.0
    if ramp <= 0:
        return cfg.lambda_i
    return cfg.lambda_i * min(1.0, (epoch - start + 1) / ramp)


def total_loss(
    bits: torch.Tensor,
    logits: torch.Tensor,
    cover: torch.Tensor,
    stego: torch.Tensor,
    gaze: GazePoint,
    lambda_i: float,
    image_loss: str = "metameric",
    foveation: FoveationConfig | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Payload BCE plus weighted image loss; returns (total, bce, image term)."""
    if bits.shape != logits.shape:
        raise ValidationError(
            f"bits/logits shape mismatch: {tuple(bits.shape)} vs {tuple(logits.shape)}"
        )
    bce = F.binary_cross_entropy_with_logits(logits, bits)
    if lambda_i == 0.0:
        image_term = stego.new_zeros(())
    elif image_loss == "mse":
        image_term = torch.mean((cover - stego) ** 2)
    else:
        image_term = metameric_loss(cover, stego, gaze, foveation)
    total = bce + lambda_i * image_term
    if not torch.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss: bce={bce.item():g} image={image_term.item():g}"
        )
    return total, bce, image_term


@dataclass
class TrainResult:
    out_dir: str
    best_checkpoint: str
    last_checkpoint: str
    metrics_csv: str
    best: dict
    last_val: dict
    epochs_run: int
    backbone_hash: str


def _random_bits(rng: np.random.Generator, n: int, k: int) -> torch.Tensor:
    return torch.from_numpy(rng.integers(0, 2, size=(n, k)).astype(np.float32))


def _to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def _validate(
    net: StegoNet, covers: torch.Tensor, bits: torch.Tensor, batch_size: int
) -> dict:
    """Bit accuracy and stego PSNR over a validation set, on the eval path."""
    net.eval()
    errors = 0
    total_bits = 0
    psnr_sum = 0.0
    with torch.no_grad():
        for start in range(0, len(covers), batch_size):
            cb = covers[start : start + batch_size]
            bb = bits[start : start + batch_size]
            stego = quantization_bridge(net.hide_batch(cb, bb), "eval")
            logits = net.reveal_logits(stego)
            pred = (logits > 0).float()
            errors += int((pred != bb).sum().item())
            total_bits += bb.numel()
            a = (cb + 1.0) / 2.0
            b = (stego + 1.0) / 2.0
            mse = torch.mean((a - b) ** 2, dim=(1, 2, 3))
            psnr = torch.where(
                mse > 0, 10.0 * torch.log10(1.0 / mse), torch.full_like(mse, 100.0)
            )
            psnr_sum += torch.clamp(psnr, max=100.0).sum().item()
    return {
        "val_bit_acc": 1.0 - errors / total_bits,
        "val_psnr": psnr_sum / len(covers),
    }


def train_model(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    backbone: DeskAutoencoder,
    out_dir,
    foveation: FoveationConfig | None = None,
    backbone_path: str = "backbone.pt",
    resume_from=None,
) -> TrainResult:
    """Train embedder/merger/retriever against a frozen backbone.

    Saves the best-by-validation-bit-accuracy (PSNR tie-break) and last
    checkpoints under out_dir and appends per-epoch rows to metrics.csv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if foveation is None:
        foveation = FoveationConfig.for_resolution(cfg.resolution)
    if manifest.resolution != cfg.resolution:
        raise ValidationError(
            f"manifest resolution {manifest.resolution} != config resolution {cfg.resolution}"
        )
    hash_before = backbone_hash(backbone)

    torch.manual_seed(cfg.seed)
    metadata = ModelMetadata(
        k=cfg.k,
        resolution=cfg.resolution,
        f=backbone.spec.f,
        c_z=backbone.spec.c_z,
        gaze_policy=cfg.gaze_policy,
        lambda_i=cfg.lambda_i,
        backbone_id=f"{backbone.spec.variant}:{hash_before[:12]}",
    )
    net = StegoNet(
        backbone,
        metadata,
        foveation,
        embed_hidden=cfg.embed_hidden,
        gamma_init=cfg.gamma_init,
        retriever_profile=cfg.retriever_profile,
    )
    start_epoch = 0
    if resume_from is not None:
        prev = load_checkpoint(resume_from, backbone=backbone)
        net.embedder.load_state_dict(prev.embedder.state_dict())
        net.merger.load_state_dict(prev.merger.state_dict())
        net.retriever.load_state_dict(prev.retriever.state_dict())
        start_epoch = prev.extra["epochs_trained"]

    optimizer = torch.optim.Adam(net.trainable_parameters(), lr=cfg.learning_rate)

    # Fixed validation set and payloads: any validation pass over a given
    # config reproduces the same numbers, which resuming relies on.
    val_np, _ = load_split(manifest, "val", augment=False)
    val_covers = _to_nchw(val_np)
    val_bits = _random_bits(np.random.default_rng([cfg.seed, 4]), len(val_covers), cfg.k)

    train_np, _ = load_split(manifest, "train", augment=False, skip_bad=True)
    train_covers = _to_nchw(train_np)
    train_latents = None
    if not cfg.augment:
        with torch.no_grad():
            chunks = [
                backbone.encode(train_covers[i : i + cfg.batch_size])
                for i in range(0, len(train_covers), cfg.batch_size)
            ]
        train_latents = torch.cat(chunks)

    csv_path = out_dir / "metrics.csv"
    new_log = not csv_path.exists() or csv_path.stat().st_size == 0
    best_path = out_dir / "ckpt_best.pt"
    last_path = out_dir / "ckpt_last.pt"

    best = {"val_bit_acc": -1.0, "val_psnr": -math.inf, "epoch": -1}
    last_val = {}
    if start_epoch >= cfg.epochs:
        last_val = _validate(net, val_covers, val_bits, cfg.batch_size)
        logger.info(
            "no epochs remaining (%d trained, budget %d); validation only: %s",
            start_epoch, cfg.epochs, last_val,
        )
        return TrainResult(
            out_dir=str(out_dir),
            best_checkpoint=str(best_path),
            last_checkpoint=str(last_path),
            metrics_csv=str(csv_path),
            best=dict(last_val, epoch=start_epoch),
            last_val=last_val,
            epochs_run=0,
            backbone_hash=hash_before,
        )

    with open(csv_path, "a", newline="") as log:
        writer = csv.writer(log)
        if new_log:
            writer.writerow(METRICS_COLUMNS)
        for epoch in range(start_epoch, cfg.epochs):
            lam = lambda_for_epoch(epoch, cfg)
            shuffle_rng = np.random.default_rng([cfg.seed, 1, epoch])
            payload_rng = np.random.default_rng([cfg.seed, 2, epoch])
            gaze_rng = np.random.default_rng([cfg.seed, 3, epoch])
            if cfg.augment:
                aug_np, _ = load_split(
                    manifest, "train", augment=True,
                    rng=np.random.default_rng([cfg.seed, 5, epoch]), skip_bad=True,
                )
                epoch_covers = _to_nchw(aug_np)
            else:
                epoch_covers = train_covers

            net.train()
            order = shuffle_rng.permutation(len(epoch_covers))
            sums = {"loss": 0.0, "bce": 0.0, "image": 0.0}
            steps = 0
            for begin in range(0, len(order), cfg.batch_size):
                idx = torch.from_numpy(order[begin : begin + cfg.batch_size])
                covers = epoch_covers[idx]
                bits = _random_bits(payload_rng, len(idx), cfg.k)
                if train_latents is not None:
                    z_i = train_latents[idx]
                else:
                    with torch.no_grad():
                        z_i = backbone.encode(covers)
                stego = net.hide_from_latent(z_i, bits)
                retr_in = (
                    quantization_bridge(stego, "train") if cfg.quant_bridge else stego
                )
                logits = net.reveal_logits(retr_in)
                if cfg.gaze_policy == "uniform-sampled":
                    gaze = GazePoint(gaze_rng.uniform(), gaze_rng.uniform())
                else:
                    gaze = CENTER_GAZE
                try:
                    loss, bce, image_term = total_loss(
                        bits, logits, covers, stego, gaze, lam,
                        image_loss=cfg.image_loss, foveation=foveation,
                    )
                except TrainingDivergedError as exc:
                    raise TrainingDivergedError(
                        f"epoch {epoch} step {steps}: {exc}"
                    ) from None
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                sums["loss"] += loss.item()
                sums["bce"] += bce.item()
                sums["image"] += image_term.item()
                steps += 1

            last_val = _validate(net, val_covers, val_bits, cfg.batch_size)
            writer.writerow(
                [
                    epoch,
                    f"{sums['loss'] / steps:.6f}",
                    f"{sums['bce'] / steps:.6f}",
                    f"{sums['image'] / steps:.6f}",
                    f"{last_val['val_bit_acc']:.6f}",
                    f"{last_val['val_psnr']:.4f}",
                ]
            )
            log.flush()
            logger.info(
                "epoch %d/%d: loss %.4f bce %.4f image %.5f | val acc %.4f psnr %.2f",
                epoch + 1, cfg.epochs, sums["loss"] / steps, sums["bce"] / steps,
                sums["image"] / steps, last_val["val_bit_acc"], last_val["val_psnr"],
            )

            try:
                save_checkpoint(
                    last_path, net, backbone_path,
                    val_metrics=last_val, epochs_trained=epoch + 1,
                )
                better = last_val["val_bit_acc"] > best["val_bit_acc"] or (
                    last_val["val_bit_acc"] == best["val_bit_acc"]
                    and last_val["val_psnr"] > best["val_psnr"]
                )
                if better:
                    best = dict(last_val, epoch=epoch)
                    save_checkpoint(
                        best_path, net, backbone_path,
                        val_metrics=last_val, epochs_trained=epoch + 1,
                    )
            except OSError as exc:
                logger.error(
                    "checkpoint write failed (%s); state past the last good save is lost",
                    exc,
                )
                raise

    hash_after = backbone_hash(backbone)
    if hash_after != hash_before:
        raise TrainingDivergedError("frozen backbone parameters changed during training")
    return TrainResult(
        out_dir=str(out_dir),
        best_checkpoint=str(best_path),
        last_checkpoint=str(last_path),
        metrics_csv=str(csv_path),
        best=best,
        last_val=last_val,
        epochs_run=cfg.epochs - start_epoch,
        backbone_hash=hash_after,
    )


# -- experiment orchestration -------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything one training run needs, JSON round-trippable."""

    train: TrainConfig
    backbone: BackboneSpec
    pretrain: PretrainConfig
    data_sizes: tuple[int, int, int] = (200, 40, 40)
    data_seed: int = 42
    foveation: FoveationConfig | None = None

    def resolved_foveation(self) -> FoveationConfig:
        if self.foveation is not None:
            return self.foveation
        return FoveationConfig.for_resolution(self.train.resolution)

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "backbone": self.backbone.to_dict(),
            "pretrain": asdict(self.pretrain),
            "data": {"sizes": list(self.data_sizes), "seed": self.data_seed},
            "foveation": None if self.foveation is None else self.foveation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            data = d.get("data", {})
            fov = d.get("foveation")
            return cls(
                train=TrainConfig.from_dict(d["train"]),
                backbone=BackboneSpec.from_dict(d.get("backbone", {})),
                pretrain=PretrainConfig(**d.get("pretrain", {})),
                data_sizes=tuple(data.get("sizes", (200, 40, 40))),
                data_seed=int(data.get("seed", 42)),
                foveation=None if fov is None else FoveationConfig.from_dict(fov),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed experiment config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def run_experiment(
    exp: ExperimentConfig,
    data_dirs,
    out_dir,
    manifest_path=None,
) -> tuple[DatasetManifest, DeskAutoencoder, TrainResult]:
    """Manifest -> frozen backbone -> stego training, all under out_dir.

    Reuses out_dir/manifest.tsv and out_dir/backbone.pt when they already
    exist (or when an explicit manifest is given), so reruns are incremental.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest_file = Path(manifest_path) if manifest_path else out_dir / "manifest.tsv"
    if manifest_file.exists():
        manifest = DatasetManifest.load(manifest_file)
        if manifest.resolution != exp.train.resolution:
            raise ValidationError(
                f"existing manifest resolution {manifest.resolution} != "
                f"config resolution {exp.train.resolution}"
            )
    else:
        if not data_dirs:
            raise ValidationError("no data folders given and no existing manifest found")
        manifest = build_manifest(
            data_dirs, exp.data_sizes, exp.data_seed, exp.train.resolution,
            out_path=manifest_file,
        )

    backbone_file = out_dir / "backbone.pt"
    if exp.backbone.weights_path:
        backbone = load_backbone(exp.backbone.weights_path, expected=exp.backbone)
        backbone_ref = str(exp.backbone.weights_path)
    elif backbone_file.exists():
        backbone = load_backbone(backbone_file, expected=exp.backbone)
        backbone_ref = backbone_file.name
    else:
        train_np, _ = load_split(manifest, "train", skip_bad=True)
        val_np, _ = load_split(manifest, "val", skip_bad=True)
        backbone = pretrain_desk_backbone(
            train_np, val_np, exp.backbone, exp.pretrain, out_path=backbone_file
        )
        backbone_ref = backbone_file.name
    result = train_model(
        exp.train,
        manifest,
        backbone,
        out_dir,
        foveation=exp.resolved_foveation(),
        backbone_path=backbone_ref,
    )
    return manifest, backbone, result
