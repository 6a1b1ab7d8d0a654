"""Differentiable foveated perceptual loss over pooled local statistics.

The loss compares two images through Gaussian-pooled local mean and standard
deviation, where the pooling width grows linearly with eccentricity from the
gaze point: full acuity at fixation, progressively heavier pooling toward the
periphery. Two images that differ only where pooling is wide produce nearly
identical statistics and thus a small loss.

All operations here take (b, c, h, w) torch tensors (an unbatched (c, h, w)
is accepted and promoted) and are differentiable with respect to image
values. Eccentricity, pooling sigmas, and level-blend weights depend only on
shape, gaze, and config, so they are constants of the gradient graph.
"""

import math
from dataclasses import dataclass, asdict

import torch

from .domain import GazePoint, ValidationError

VAR_EPS = 1e-6


@dataclass(frozen=True)
class FoveationConfig:
    """Parameters of the pooled-statistics loss.

    alpha       pooling growth: sigma in pixels per unit normalized eccentricity
    sigma_min   pooling floor in pixels (acuity at fixation)
    sigma_max   pooling ceiling in pixels
    levels      number of blur-stack levels
    sigma_0     sigma of stack level 0; level l uses sigma_0 * 2**l
    w_mean      weight of the pooled-mean matching term
    w_std       weight of the pooled-std matching term

    Defaults are tuned for 256x256 inputs; use :meth:`for_resolution` to
    scale them to another working size.
    """

    alpha: float = 32.0
    sigma_min: float = 0.5
    sigma_max: float = 8.0
    levels: int = 5
    sigma_0: float = 0.5
    w_mean: float = 1.0
    w_std: float = 0.5

    def __post_init__(self):
        if self.sigma_0 <= 0:
            raise ValidationError("sigma_0 must be positive")
        if self.sigma_min > self.sigma_max:
            raise ValidationError("sigma_min must not exceed sigma_max")
        if self.levels < 2:
            raise ValidationError("at least 2 stack levels required")
        if self.sigma_0 > self.sigma_min + 1e-12:
            raise ValidationError("stack must start at or below sigma_min")
        if self.sigma_0 * 2 ** (self.levels - 1) < self.sigma_max - 1e-12:
            raise ValidationError("stack top level must reach sigma_max")
        if self.w_mean < 0 or self.w_std < 0:
            raise ValidationError("statistic weights must be non-negative")
        if self.alpha < 0:
            raise ValidationError("alpha must be non-negative")

    @classmethod
    def for_resolution(cls, width: int, **overrides) -> "FoveationConfig":
        """Scale the 256px defaults to a working width; kwargs override fields."""
        fields = {
            "alpha": 0.125 * width,
            "sigma_min": 0.5,
            "sigma_max": max(1.0, 8.0 * width / 256.0),
            "sigma_0": 0.5,
            "w_mean": 1.0,
            "w_std": 0.5,
        }
        fields.update(overrides)
        if "levels" not in fields:
            span = fields["sigma_max"] / fields["sigma_0"]
            fields["levels"] = max(2, math.ceil(math.log2(span)) + 1)
        return cls(**fields)

    def sigmas(self) -> tuple[float, ...]:
        return tuple(self.sigma_0 * 2.0 ** l for l in range(self.levels))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FoveationConfig":
        return cls(**d)


def _as_batched(image: torch.Tensor) -> torch.Tensor:
    if image.ndim == 3:
        return image[None]
    if image.ndim != 4:
        raise ValidationError(f"expected (b, c, h, w) or (c, h, w), got {tuple(image.shape)}")
    return image


def eccentricity_map(
    shape: tuple[int, int],
    gaze: GazePoint,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str = "cpu",
) -> torch.Tensor:
    """Per-pixel distance to the gaze point in units of the image diagonal.

    Pixel positions are grid indices, so the value at the pixel farthest from
    a corner gaze is exactly 1 and a corner seen from the center is 0.5.
    """
    h, w = shape
    if h < 1 or w < 1:
        raise ValidationError(f"invalid image shape {shape}")
    rows = torch.arange(h, dtype=dtype, device=device)
    cols = torch.arange(w, dtype=dtype, device=device)
    gy = gaze.y * (h - 1)
    gx = gaze.x * (w - 1)
    dy = (rows - gy)[:, None]
    dx = (cols - gx)[None, :]
    diag = math.hypot(h - 1, w - 1)
    if diag == 0.0:
        return torch.zeros(h, w, dtype=dtype, device=device)
    return torch.sqrt(dy * dy + dx * dx) / diag


def pooling_sigma_map(ecc: torch.Tensor, cfg: FoveationConfig) -> torch.Tensor:
    """Pooling sigma per pixel: clamp(alpha * e, sigma_min, sigma_max)."""
    return torch.clamp(cfg.alpha * ecc, cfg.sigma_min, cfg.sigma_max)


# 1-d kernels keyed by (sigma, dtype); read-only after first insertion.
_KERNEL_CACHE: dict[tuple[float, torch.dtype], torch.Tensor] = {}


def gaussian_kernel1d(sigma: float, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Normalized 1-d Gaussian with kernel radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    key = (float(sigma), dtype)
    cached = _KERNEL_CACHE.get(key)
    if cached is not None:
        return cached
    radius = math.ceil(3.0 * sigma)
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    kernel = (g / g.sum()).to(dtype)
    _KERNEL_CACHE[key] = kernel
    return kernel


def _reflect_indices(n: int, pad: int, device) -> torch.Tensor:
    """Source indices for reflect padding (edge not repeated), any pad size."""
    idx = torch.arange(-pad, n + pad, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = torch.abs(idx) % period
    return torch.where(idx >= n, period - idx, idx)


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable isotropic Gaussian blur with reflected boundaries."""
    x = _as_batched(image)
    b, c, h, w = x.shape
    kernel = gaussian_kernel1d(sigma, x.dtype).to(x.device)
    radius = (kernel.numel() - 1) // 2
    if radius > 0:
        x = x.index_select(3, _reflect_indices(w, radius, x.device))
        x = torch.nn.functional.conv2d(
            x, kernel.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c
        )
        x = x.index_select(2, _reflect_indices(h, radius, x.device))
        x = torch.nn.functional.conv2d(
            x, kernel.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c
        )
    if image.ndim == 3:
        return x[0]
    return x


def gaussian_stack(image: torch.Tensor, cfg: FoveationConfig) -> list[torch.Tensor]:
    """Full-resolution blur stack; level l blurred with sigma_0 * 2**l."""
    return [gaussian_blur(image, s) for s in cfg.sigmas()]


def _level_weights(
    shape: tuple[int, int],
    gaze: GazePoint,
    cfg: FoveationConfig,
    dtype: torch.dtype,
    device,
) -> torch.Tensor:
    """(L, h, w) blend weights: hat functions around the fractional level index."""
    ecc = eccentricity_map(shape, gaze, dtype=dtype, device=device)
    sigma = pooling_sigma_map(ecc, cfg)
    level = torch.clamp(torch.log2(sigma / cfg.sigma_0), 0.0, cfg.levels - 1.0)
    idx = torch.arange(cfg.levels, dtype=dtype, device=device).view(-1, 1, 1)
    return torch.clamp(1.0 - torch.abs(level[None] - idx), min=0.0)


def foveated_statistics(
    image: torch.Tensor, gaze: GazePoint, cfg: FoveationConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Eccentricity-pooled local mean and std of an image.

    The fractional level index l(p) = clamp(log2(s(p)/sigma_0), 0, L-1)
    linearly blends the two adjacent stack levels of the blurred image and
    of the blurred squared image; std comes from the pooled second moment
    with an epsilon floor guarding the sqrt.
    """
    x = _as_batched(image)
    h, w = x.shape[-2:]
    weights = _level_weights((h, w), gaze, cfg, x.dtype, x.device)
    mean = x.new_zeros(x.shape)
    m2 = x.new_zeros(x.shape)
    for lvl, sigma in enumerate(cfg.sigmas()):
        w_l = weights[lvl]
        if not torch.any(w_l > 0):
            continue
        mean = mean + w_l * gaussian_blur(x, sigma)
        m2 = m2 + w_l * gaussian_blur(x * x, sigma)
    std = torch.sqrt(torch.clamp(m2 - mean * mean, min=VAR_EPS))
    if image.ndim == 3:
        return mean[0], std[0]
    return mean, std


def metameric_loss(
    reference: torch.Tensor,
    test: torch.Tensor,
    gaze: GazePoint = GazePoint(),
    cfg: FoveationConfig | None = None,
) -> torch.Tensor:
    """Foveated statistics-matching loss; symmetric, zero for identical inputs."""
    if reference.shape != test.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(reference.shape)} vs {tuple(test.shape)}"
        )
    if cfg is None:
        cfg = FoveationConfig.for_resolution(reference.shape[-1])
    mean_r, std_r = foveated_statistics(reference, gaze, cfg)
    mean_t, std_t = foveated_statistics(test, gaze, cfg)
    loss = cfg.w_mean * torch.mean((mean_r - mean_t) ** 2)
    loss = loss + cfg.w_std * torch.mean((std_r - std_t) ** 2)
    return loss
