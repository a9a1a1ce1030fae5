"""Input-denoising transforms applied to (already attacked) images at test time.

Attacks never see these transforms: adversarial images are generated on
the undefended encoder and the defense is applied afterwards.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

KINDS = ("identity", "rescale", "super_resolution")


@dataclass(frozen=True)
class DefenseTransform:
    """``rescale`` resizes to a random scale in [scale_low, scale_high] and back.

    ``super_resolution`` is an interpolation stand-in for a learned SR model:
    bicubic upscale by ``factor``, Gaussian smoothing with standard deviation
    ``sigma * factor`` upscaled pixels, area downsample to the input size.
    """

    kind: str = "identity"
    scale_low: float = 0.9
    scale_high: float = 1.1
    factor: int = 2
    sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown defense {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.scale_low <= self.scale_high:
            raise ConfigError(f"scale range must satisfy 0 < low <= high, got [{self.scale_low}, {self.scale_high}]")
        if int(self.factor) != self.factor or self.factor < 1:
            raise ConfigError("factor must be a positive integer")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")

    @property
    def name(self) -> str:
        return "none" if self.kind == "identity" else self.kind

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "DefenseTransform":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown defense keys: {sorted(unknown)}")
        return cls(**d)


def _gaussian_kernel(std: float) -> torch.Tensor:
    radius = max(1, math.ceil(3 * std))
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / std) ** 2)
    return k / k.sum()


def gaussian_blur(x: torch.Tensor, std: float) -> torch.Tensor:
    if std <= 0:
        return x
    k = _gaussian_kernel(std).to(x.dtype)
    C, r = x.shape[1], len(k) // 2
    h = F.conv2d(F.pad(x, (r, r, 0, 0), mode="replicate"), k.view(1, 1, 1, -1).repeat(C, 1, 1, 1), groups=C)
    return F.conv2d(F.pad(h, (0, 0, r, r), mode="replicate"), k.view(1, 1, -1, 1).repeat(C, 1, 1, 1), groups=C)


def _rescale(x: torch.Tensor, d: DefenseTransform, index: int) -> torch.Tensor:
    H, W = x.shape[-2:]
    s = np.random.default_rng([d.seed, index]).uniform(d.scale_low, d.scale_high)
    size = (max(1, round(H * s)), max(1, round(W * s)))
    y = F.interpolate(x[None], size=size, mode="bilinear", align_corners=False)
    return F.interpolate(y, size=(H, W), mode="bilinear", align_corners=False)[0]


def _super_resolution(x: torch.Tensor, d: DefenseTransform) -> torch.Tensor:
    H, W = x.shape[-2:]
    up = F.interpolate(x, scale_factor=d.factor, mode="bicubic", align_corners=False).clamp(0, 1)
    up = gaussian_blur(up, d.sigma * d.factor)
    return F.interpolate(up, size=(H, W), mode="area")


def apply_defense(d: DefenseTransform, x: torch.Tensor, start_index: int = 0) -> torch.Tensor:
    """h(x) for a (C, H, W) image or an (N, C, H, W) batch.

    The random scale of image ``i`` in a batch is drawn from ``(seed, start_index + i)``.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4:
        raise InputError(f"expected (C, H, W) or (N, C, H, W), got {tuple(x.shape)}")
    if d.kind == "identity":
        return x.clone()
    if d.kind == "rescale":
        out = torch.stack([_rescale(img, d, start_index + i) for i, img in enumerate(xb)]) if len(xb) else xb.clone()
    else:
        out = _super_resolution(xb, d)
    out = out.clamp(0.0, 1.0)
    return out[0] if single else out


def evaluate_defended(pair, T: torch.Tensor, adversarials: torch.Tensor, labels: torch.Tensor,
                      d: DefenseTransform) -> float:
    """Accuracy of argmax_j cos(E(h(x')), w_j) against labels.

    ``adversarials`` were produced on the undefended encoder; ``T`` is (L, K)
    from either the fixed prompt or a tuned context.
    """
    from .prompts import accuracy

    return accuracy(pair.encode_image(apply_defense(d, adversarials)), T, labels)
