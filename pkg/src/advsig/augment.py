"""Image transformations applied before the detector, plus the fixed evaluation battery.

All transforms are differentiable in the image argument so classification
gradients can flow back through them into the injector. Per-image parameters
are drawn independently; the application order is rotate -> flip -> blur.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .core import CoreError, ImageTensor, RngState


@dataclass
class TransformSpec:
    rotation_range: tuple[float, float] = (-30.0, 30.0)
    hflip_prob: float = 0.5
    blur_variance_range: tuple[float, float] = (0.01, 10.0)
    rotation_enabled: bool = True
    hflip_enabled: bool = True
    blur_enabled: bool = True

    def __post_init__(self) -> None:
        if self.rotation_range[0] > self.rotation_range[1]:
            raise CoreError(f"rotation range not ordered: {self.rotation_range}")
        if self.blur_variance_range[0] > self.blur_variance_range[1]:
            raise CoreError(f"blur variance range not ordered: {self.blur_variance_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise CoreError(f"hflip_prob outside [0, 1]: {self.hflip_prob}")

    @property
    def any_enabled(self) -> bool:
        return self.rotation_enabled or self.hflip_enabled or self.blur_enabled

    @staticmethod
    def disabled() -> "TransformSpec":
        return TransformSpec(rotation_enabled=False, hflip_enabled=False, blur_enabled=False)


def rotate(x: torch.Tensor, angles_deg: torch.Tensor) -> torch.Tensor:
    """Rotate each image by its own angle; bilinear sampling, reflection padding."""
    b = x.shape[0]
    rad = angles_deg.to(x.dtype) * (math.pi / 180.0)
    cos, sin = torch.cos(rad), torch.sin(rad)
    theta = torch.zeros(b, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = cos
    theta[:, 0, 1] = -sin
    theta[:, 1, 0] = sin
    theta[:, 1, 1] = cos
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def hflip(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    if mask is None:
        return x.flip(-1)
    return torch.where(mask.view(-1, 1, 1, 1), x.flip(-1), x)


def _gaussian_kernels(sigmas: torch.Tensor, halfwidth: int) -> torch.Tensor:
    """[B, 2*halfwidth+1] normalized 1-D kernels; zero taps beyond each ceil(3*sigma)."""
    taps = torch.arange(-halfwidth, halfwidth + 1, dtype=torch.float32)
    sig = sigmas.view(-1, 1).clamp_min(1e-8)
    k = torch.exp(-0.5 * (taps.view(1, -1) / sig) ** 2)
    per_hw = torch.ceil(3.0 * sig).clamp(min=1, max=halfwidth)
    k = torch.where(taps.view(1, -1).abs() <= per_hw, k, torch.zeros_like(k))
    return k / k.sum(dim=1, keepdim=True)


def gaussian_blur(x: torch.Tensor, sigmas: torch.Tensor) -> torch.Tensor:
    """Per-image separable Gaussian blur; kernel half-width ceil(3*sigma), reflect edges."""
    b, c, h, w = x.shape
    hw = max(1, int(torch.ceil(3.0 * sigmas.max()).item()))
    kern = _gaussian_kernels(sigmas, hw)  # [B, K]
    weight = kern.repeat_interleave(c, dim=0)  # [B*C, K]
    xx = x.reshape(1, b * c, h, w)
    xx = F.pad(xx, (0, 0, hw, hw), mode="reflect")
    xx = F.conv2d(xx, weight.view(b * c, 1, -1, 1), groups=b * c)
    xx = F.pad(xx, (hw, hw, 0, 0), mode="reflect")
    xx = F.conv2d(xx, weight.view(b * c, 1, 1, -1), groups=b * c)
    return xx.reshape(b, c, h, w)


def transform_batch(x: torch.Tensor, spec: TransformSpec, gen: torch.Generator) -> torch.Tensor:
    """Tensor-level pipeline used inside training loops. Clips to [0, 1]."""
    b = x.shape[0]
    lo, hi = spec.rotation_range
    angles = torch.rand(b, generator=gen) * (hi - lo) + lo
    flips = torch.rand(b, generator=gen) < spec.hflip_prob
    vlo, vhi = spec.blur_variance_range
    variances = torch.rand(b, generator=gen) * (vhi - vlo) + vlo
    if not spec.any_enabled:
        return x
    out = x
    if spec.rotation_enabled:
        out = rotate(out, angles)
    if spec.hflip_enabled:
        out = hflip(out, flips)
    if spec.blur_enabled:
        out = gaussian_blur(out, variances.sqrt())
    return out.clamp(0.0, 1.0)


def random_transform(x: ImageTensor, spec: TransformSpec, rng: RngState) -> ImageTensor:
    """Randomized rotate/flip/blur of a batch; independent draws per image."""
    if not spec.any_enabled:
        return ImageTensor(x.data, quantized=x.quantized)
    out = transform_batch(x.data, spec, rng.torch)
    return ImageTensor(out, quantized=False)


BATTERY_BLUR_VARIANCE = 4.0
BATTERY_ROTATION_DEG = 15.0
BATTERY_NAMES = ("gaussian_blur", "hflip", "rotation")


def battery(x: ImageTensor) -> list[tuple[str, ImageTensor]]:
    """Deterministic named variants used by the robustness table."""
    b = x.batch_size
    sig = torch.full((b,), math.sqrt(BATTERY_BLUR_VARIANCE))
    blurred = gaussian_blur(x.data, sig).clamp(0.0, 1.0)
    flipped = hflip(x.data)
    rotated = rotate(x.data, torch.full((b,), BATTERY_ROTATION_DEG)).clamp(0.0, 1.0)
    return [
        ("gaussian_blur", ImageTensor(blurred)),
        ("hflip", ImageTensor(flipped, quantized=x.quantized)),
        ("rotation", ImageTensor(rotated)),
    ]
