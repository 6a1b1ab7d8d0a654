"""Trainable steganography network: payload embedder, latent merger, retriever.

Hiding composes the frozen backbone with the trainable parts:
stego = decode(merge(encode(cover), embed(payload))). The merger is a
residual refinement of the cover latent whose final convolution starts at
zero, so an untrained model reproduces the backbone reconstruction exactly
regardless of the payload. Revealing thresholds retriever logits at zero.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneSpec, DeskAutoencoder, backbone_hash, load_backbone
from .domain import (
    CHECKPOINT_VERSION,
    ModelMetadata,
    ModelMismatchError,
    ValidationError,
    atomic_write,
    from_torch,
    to_torch,
    validate_image,
)
from .foveation import FoveationConfig

logger = logging.getLogger(__name__)

QUANT_STEP = 2.0 / 255.0  # one 8-bit step in canonical [-1, 1] units


class PayloadEmbedder(nn.Module):
    """Maps a k-bit payload to a latent-shaped tensor.

    Bits enter as +-1; the first projection is bias-free so complementary
    payloads produce opposite pre-activations. A learnable scalar gain scales
    the output, keeping the payload perturbation small at initialization.
    """

    def __init__(self, k: int, latent_shape: tuple[int, int, int], hidden: int = 512,
                 gamma_init: float = 0.1):
        super().__init__()
        self.k = k
        self.latent_shape = tuple(latent_shape)  # (c_z, h/f, w/f)
        c, h, w = self.latent_shape
        self.fc1 = nn.Linear(k, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, c * h * w)
        self.act = nn.SiLU()
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init)))

    def forward(self, bits: torch.Tensor) -> torch.Tensor:
        if bits.ndim != 2 or bits.shape[1] != self.k:
            raise ValidationError(f"expected (b, {self.k}) bit tensor, got {tuple(bits.shape)}")
        signs = bits * 2.0 - 1.0
        z = self.fc2(self.act(self.fc1(signs)))
        return self.gamma * z.view(-1, *self.latent_shape)


class LatentMerger(nn.Module):
    """Two convolutions around the latent sum, as a zero-initialized residual.

    z_m = z_i + conv_b(act(conv_a(z_i + z_p))); conv_b starts at zero so the
    merged latent equals the cover latent before any training.
    """

    def __init__(self, c_z: int):
        super().__init__()
        self.conv_a = nn.Conv2d(c_z, c_z, 3, padding=1)
        self.conv_b = nn.Conv2d(c_z, c_z, 3, padding=1)
        self.act = nn.SiLU()
        nn.init.zeros_(self.conv_b.weight)
        nn.init.zeros_(self.conv_b.bias)

    def forward(self, z_i: torch.Tensor, z_p: torch.Tensor) -> torch.Tensor:
        if z_i.shape != z_p.shape:
            raise ValidationError(
                f"latent shape mismatch: {tuple(z_i.shape)} vs {tuple(z_p.shape)}"
            )
        return z_i + self.conv_b(self.act(self.conv_a(z_i + z_p)))


class _RetrieverBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.act = nn.SiLU()
        self.skip = (
            nn.Conv2d(c_in, c_out, 1, stride=stride)
            if (stride != 1 or c_in != c_out)
            else nn.Identity()
        )

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class DeskRetriever(nn.Module):
    """Compact residual classifier emitting k logits; about ten conv layers.

    The head reads the final 4x-downsampled feature map position-wise
    (flatten, not average-pool): the embedded payload is a spatial pattern,
    and positional readout decodes it far faster on small budgets.
    """

    def __init__(self, k: int, resolution: int = 64, width: int = 32):
        super().__init__()
        if resolution % 16:
            raise ValidationError("retriever needs the resolution divisible by 16")
        w = width
        self.stem = nn.Conv2d(3, w, 3, padding=1)
        self.blocks = nn.Sequential(
            _RetrieverBlock(w, w, stride=2),
            _RetrieverBlock(w, 2 * w, stride=2),
            _RetrieverBlock(2 * w, 2 * w, stride=2),
            _RetrieverBlock(2 * w, 4 * w, stride=2),
        )
        side = resolution // 16
        self.head = nn.Linear(4 * w * side * side, k)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = self.blocks(self.stem(image))
        return self.head(x.flatten(1))


def build_retriever(profile: str, k: int, resolution: int) -> nn.Module:
    """`desk` is the reduced profile; `resnet50` the 50-layer residual one."""
    if profile == "desk":
        return DeskRetriever(k, resolution)
    if profile == "resnet50":
        from torchvision.models import resnet50

        return resnet50(weights=None, num_classes=k)
    raise ValidationError(f"unknown retriever profile {profile!r}")


def quantization_bridge(image: torch.Tensor, mode: str) -> torch.Tensor:
    """Training surrogate / eval twin of the 8-bit PNG file boundary.

    train: adds uniform noise one quantization step wide (straight-through,
    the noise is a constant of the graph). eval: true round-trip through
    8-bit codes, identical arithmetic to the PNG writer.
    """
    if mode == "train":
        noise = (torch.rand_like(image) - 0.5) * QUANT_STEP
        return image + noise.detach()
    if mode == "eval":
        x01 = (torch.clamp(image, -1.0, 1.0) + 1.0) / 2.0
        return torch.round(x01 * 255.0) / 255.0 * 2.0 - 1.0
    raise ValidationError(f"quantization mode must be 'train' or 'eval', got {mode!r}")


class StegoNet(nn.Module):
    """Composite hide/reveal model over a frozen backbone."""

    def __init__(
        self,
        backbone: DeskAutoencoder,
        metadata: ModelMetadata,
        foveation: FoveationConfig,
        embed_hidden: int = 512,
        gamma_init: float = 0.1,
        retriever_profile: str = "desk",
    ):
        super().__init__()
        if backbone.spec.c_z != metadata.c_z or backbone.spec.f != metadata.f:
            raise ModelMismatchError(
                f"backbone (f={backbone.spec.f}, c_z={backbone.spec.c_z}) does not match "
                f"metadata (f={metadata.f}, c_z={metadata.c_z})"
            )
        if metadata.resolution % metadata.f:
            raise ValidationError("resolution must be divisible by the downsample factor")
        self.backbone = backbone  # kept out of state_dict via __setattr__ below
        self.metadata = metadata
        self.foveation = foveation
        self.retriever_profile = retriever_profile
        self.embed_hidden = embed_hidden
        self.gamma_init = gamma_init
        side = metadata.resolution // metadata.f
        self.embedder = PayloadEmbedder(
            metadata.k, (metadata.c_z, side, side), hidden=embed_hidden, gamma_init=gamma_init
        )
        self.merger = LatentMerger(metadata.c_z)
        self.retriever = build_retriever(retriever_profile, metadata.k, metadata.resolution)

    # nn.Module.__setattr__ would register the backbone as a submodule and
    # drag its (frozen) weights into this model's state_dict; bypass it.
    def __setattr__(self, name, value):
        if name == "backbone":
            object.__setattr__(self, name, value)
        else:
            super().__setattr__(name, value)

    def trainable_parameters(self):
        yield from self.embedder.parameters()
        yield from self.merger.parameters()
        yield from self.retriever.parameters()

    # -- batched tensor paths (training) ------------------------------------

    def hide_batch(self, covers: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            z_i = self.backbone.encode(covers)
        return self.hide_from_latent(z_i, bits)

    def hide_from_latent(self, z_i: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        z_p = self.embedder(bits)
        z_m = self.merger(z_i, z_p)
        return self.backbone.decode(z_m)

    def reveal_logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.retriever(images)

    # -- single-image numpy boundary (inference) -----------------------------

    def _check_resolution(self, image: np.ndarray) -> None:
        res = self.metadata.resolution
        if image.shape[:2] != (res, res):
            raise ModelMismatchError(
                f"model expects {res}x{res} images, got {image.shape[0]}x{image.shape[1]}"
            )

    def hide(self, cover: np.ndarray, payload: np.ndarray) -> np.ndarray:
        """Embed a payload into a cover image; returns the stego image."""
        validate_image(cover)
        self._check_resolution(cover)
        bits = np.asarray(payload)
        if bits.ndim != 1 or bits.size != self.metadata.k:
            raise ModelMismatchError(
                f"model embeds k={self.metadata.k} bits, payload has {bits.size}"
            )
        self.eval()
        with torch.no_grad():
            bt = torch.from_numpy(bits.astype(np.float32))[None]
            stego = self.hide_batch(to_torch(cover), bt)
        return from_torch(stego)

    def reveal(self, stego: np.ndarray) -> np.ndarray:
        """Recover the payload bits from a stego image."""
        validate_image(stego)
        self._check_resolution(stego)
        self.eval()
        with torch.no_grad():
            logits = self.reveal_logits(to_torch(stego))[0]
        return (logits > 0).numpy().astype(np.uint8)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(
    path,
    net: StegoNet,
    backbone_path: str,
    val_metrics: dict | None = None,
    epochs_trained: int = 0,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "metadata": net.metadata.to_dict(),
        "foveation": net.foveation.to_dict(),
        "embed_hidden": net.embed_hidden,
        "gamma_init": net.gamma_init,
        "retriever_profile": net.retriever_profile,
        "embedder_state": net.embedder.state_dict(),
        "merger_state": net.merger.state_dict(),
        "retriever_state": net.retriever.state_dict(),
        "backbone_spec": net.backbone.spec.to_dict(),
        "backbone_hash": backbone_hash(net.backbone),
        "backbone_path": str(backbone_path),
        "val_metrics": dict(val_metrics or {}),
        "epochs_trained": epochs_trained,
    }
    atomic_write(path, lambda tmp: torch.save(payload, tmp))


def load_checkpoint(path, backbone: DeskAutoencoder | None = None) -> StegoNet:
    """Rebuild a StegoNet from a checkpoint, verifying the backbone hash.

    Without an explicit backbone, the recorded weights path is loaded,
    resolved relative to the checkpoint directory if not absolute.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise ModelMismatchError(f"checkpoint not found: {path}") from None
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ModelMismatchError(
            f"checkpoint version {version!r} unsupported (expected {CHECKPOINT_VERSION!r})"
        )
    spec = BackboneSpec.from_dict(payload["backbone_spec"])
    if backbone is None:
        weights = Path(payload["backbone_path"])
        if not weights.is_absolute():
            weights = path.parent / weights
        backbone = load_backbone(weights, expected=spec)
    found = backbone_hash(backbone)
    if found != payload["backbone_hash"]:
        raise ModelMismatchError(
            f"backbone weight hash {found[:12]} does not match the hash recorded "
            f"at training time {payload['backbone_hash'][:12]}"
        )
    net = StegoNet(
        backbone,
        ModelMetadata.from_dict(payload["metadata"]),
        FoveationConfig.from_dict(payload["foveation"]),
        embed_hidden=payload["embed_hidden"],
        gamma_init=payload["gamma_init"],
        retriever_profile=payload["retriever_profile"],
    )
    net.embedder.load_state_dict(payload["embedder_state"])
    net.merger.load_state_dict(payload["merger_state"])
    net.retriever.load_state_dict(payload["retriever_state"])
    net.eval()
    net.extra = {
        "val_metrics": payload.get("val_metrics", {}),
        "epochs_trained": payload.get("epochs_trained", 0),
        "backbone_path": payload.get("backbone_path"),
    }
    return net
