"""Frozen image encoder/generator pair providing the latent space.

Ships a desk-scale convolutional autoencoder (stride-2 downsampling to reach
the configured factor, optional bottleneck self-attention, continuous latent)
that is pretrained on plain reconstruction MSE and then frozen, plus an
adapter for loading externally pretrained weights of the same topology.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn

from .domain import ModelMismatchError, ValidationError, atomic_write

logger = logging.getLogger(__name__)


@dataclass
class BackboneSpec:
    f: int = 4
    c_z: int = 4
    base_width: int = 24
    attention: bool = True
    variant: str = "desk-autoencoder"
    weights_path: str | None = None
    frozen: bool = True

    def __post_init__(self):
        if self.f < 2 or (self.f & (self.f - 1)) != 0:
            raise ValidationError(f"downsample factor must be a power of two >= 2, got {self.f}")
        if self.c_z < 1:
            raise ValidationError("latent channel count must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)


@dataclass
class PretrainConfig:
    epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 2e-3
    psnr_target: float = 30.5
    seed: int = 0


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(min(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = _norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class SelfAttention2d(nn.Module):
    """Single-head self-attention over the spatial grid."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        q = q.reshape(b, c, h * w).transpose(1, 2)
        k = k.reshape(b, c, h * w)
        v = v.reshape(b, c, h * w).transpose(1, 2)
        attn = torch.softmax(q @ k / math.sqrt(c), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj(out)


class DeskAutoencoder(nn.Module):
    """Small continuous autoencoder; frozen during steganography training."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        n_down = int(math.log2(spec.f))

        # Downsample immediately and keep residual blocks off full resolution;
        # full-res 3x3 stacks dominate CPU cost and add little for this codec.
        enc: list[nn.Module] = [nn.Conv2d(3, w, 3, stride=2, padding=1), ResidualBlock(w)]
        ch = w
        for _ in range(n_down - 1):
            nxt = min(ch * 2, 4 * w)
            enc += [nn.Conv2d(ch, nxt, 3, stride=2, padding=1), ResidualBlock(nxt)]
            ch = nxt
        if spec.attention:
            enc.append(SelfAttention2d(ch))
        enc += [_norm(ch), nn.SiLU(), nn.Conv2d(ch, spec.c_z, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(spec.c_z, ch, 3, padding=1)]
        if spec.attention:
            dec.append(SelfAttention2d(ch))
        dec.append(ResidualBlock(ch))
        for stage in range(n_down):
            last = stage == n_down - 1
            nxt = ch if last else max(ch // 2, w)
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, nxt, 3, padding=1),
            ]
            if not last:
                dec.append(ResidualBlock(nxt))
            ch = nxt
        dec += [_norm(ch), nn.SiLU(), nn.Conv2d(ch, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValidationError(f"expected (b, 3, h, w) input, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % self.spec.f or w % self.spec.f:
            raise ValidationError(
                f"image dims {h}x{w} not divisible by f={self.spec.f}; "
                f"pad to a multiple of {self.spec.f} first"
            )
        return self.encoder(image)

    def decode(self, latent: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if latent.ndim != 4 or latent.shape[1] != self.spec.c_z:
            raise ValidationError(
                f"expected (b, {self.spec.c_z}, h, w) latent, got {tuple(latent.shape)}"
            )
        out = self.decoder(latent)
        return torch.clamp(out, -1.0, 1.0) if clamp else out

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(image), clamp=False)

    def freeze(self) -> "DeskAutoencoder":
        self.eval()
        self.requires_grad_(False)
        return self


def backbone_hash(model: nn.Module) -> str:
    """Content hash of all parameters and buffers, order-stable."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def save_backbone(path, model: DeskAutoencoder) -> None:
    payload = {"spec": model.spec.to_dict(), "state_dict": model.state_dict()}
    atomic_write(path, lambda tmp: torch.save(payload, tmp))


def load_backbone(path, expected: BackboneSpec | None = None) -> DeskAutoencoder:
    """Load desk weights; raises if the file disagrees with `expected`."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise ModelMismatchError(f"backbone weights not found: {path}") from None
    spec = BackboneSpec.from_dict(payload["spec"])
    if expected is not None and (spec.f != expected.f or spec.c_z != expected.c_z):
        raise ModelMismatchError(
            f"backbone weights declare f={spec.f}, c_z={spec.c_z}; "
            f"expected f={expected.f}, c_z={expected.c_z}"
        )
    model = DeskAutoencoder(spec)
    _load_state_checked(model, payload["state_dict"])
    if spec.frozen:
        model.freeze()
    return model


def load_external_backbone(weights_path, spec: BackboneSpec) -> DeskAutoencoder:
    """Adapter for externally pretrained weights matching the declared topology."""
    try:
        payload = torch.load(weights_path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise ModelMismatchError(f"backbone weights not found: {weights_path}") from None
    state = payload.get("state_dict", payload) if isinstance(payload, dict) else payload
    model = DeskAutoencoder(spec)
    _load_state_checked(model, state)
    model.spec.variant = "external-pretrained"
    model.spec.weights_path = str(weights_path)
    if spec.frozen:
        model.freeze()
    return model


def _load_state_checked(model: nn.Module, state: dict) -> None:
    expected = model.state_dict()
    problems = []
    for name, tensor in expected.items():
        if name not in state:
            problems.append(f"missing tensor {name} (expected {tuple(tensor.shape)})")
        elif tuple(state[name].shape) != tuple(tensor.shape):
            problems.append(
                f"{name}: expected {tuple(tensor.shape)}, found {tuple(state[name].shape)}"
            )
    for name in state:
        if name not in expected:
            problems.append(f"unexpected tensor {name} {tuple(state[name].shape)}")
    if problems:
        raise ModelMismatchError("backbone weight mismatch: " + "; ".join(problems))
    model.load_state_dict(state)


def pretrain_desk_backbone(
    train_images: np.ndarray,
    val_images: np.ndarray,
    spec: BackboneSpec,
    cfg: PretrainConfig,
    out_path=None,
) -> DeskAutoencoder:
    """Train the desk autoencoder on reconstruction MSE, then freeze it.

    Stops early once held-out PSNR reaches the target; if the epoch budget
    runs out first, logs a warning with the achieved value and keeps the
    weights anyway.

    train_images / val_images: (n, h, w, 3) float32 arrays in [-1, 1].
    """
    torch.manual_seed(cfg.seed)
    model = DeskAutoencoder(spec)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    train = torch.from_numpy(np.ascontiguousarray(train_images.transpose(0, 3, 1, 2)))
    val = torch.from_numpy(np.ascontiguousarray(val_images.transpose(0, 3, 1, 2)))
    rng = np.random.default_rng(cfg.seed)

    best_psnr = -math.inf
    best_state = None
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = train[order[start : start + cfg.batch_size]]
            recon = model(batch)
            loss = torch.mean((recon - batch) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
        psnr = reconstruction_psnr(model, val, cfg.batch_size)
        if psnr > best_psnr:
            best_psnr = psnr
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        logger.info("backbone pretrain epoch %d: val PSNR %.2f dB", epoch + 1, psnr)
        if psnr >= cfg.psnr_target:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    if best_psnr < cfg.psnr_target:
        logger.warning(
            "backbone pretraining reached %.2f dB, below the %.2f dB target; "
            "saving weights anyway",
            best_psnr,
            cfg.psnr_target,
        )
    model.freeze()
    if out_path is not None:
        save_backbone(out_path, model)
    return model


def reconstruction_psnr(model: DeskAutoencoder, images: torch.Tensor, batch_size: int = 16) -> float:
    """Mean reconstruction PSNR over a (n, 3, h, w) canonical-range batch."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images[start : start + batch_size]
            recon = model.decode(model.encode(batch))
            a = (batch + 1.0) / 2.0
            b = (recon + 1.0) / 2.0
            mse = torch.mean((a - b) ** 2, dim=(1, 2, 3))
            psnr = torch.where(
                mse > 0, 10.0 * torch.log10(1.0 / mse), torch.full_like(mse, 100.0)
            )
            total += torch.clamp(psnr, max=100.0).sum().item()
    return total / len(images)
