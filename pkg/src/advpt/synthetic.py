"""Seeded renderer for the synthetic shapes x colors x textures data.

Every image carries three kinds of evidence about its class: the shape
colour and outline (coarse, survives small perturbations), and a faint
class-specific grating texture (fine, perfectly predictive, easily
overwritten by an l-inf perturbation). Nuisance attributes (size,
background brightness, position) are sampled independently of the class.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

COLORS = {
    "red": (0.90, 0.15, 0.10),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.90, 0.85, 0.15),
    "purple": (0.60, 0.20, 0.80),
    "orange": (0.95, 0.55, 0.10),
}
SHAPES = ("bar", "column", "circle", "square", "triangle", "cross")
SIZES = ("small", "big")
BACKGROUNDS = ("dark", "light")
STYLES = ("standard", "jitter", "sketch")

DEFAULT_CLASSES = tuple((c, s) for c in ("red", "green", "blue", "yellow") for s in ("bar", "column"))


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple = DEFAULT_CLASSES
    image_size: int = 16
    texture_amp: float = 0.05
    color_jitter: float = 0.1
    style: str = "standard"
    contrast: float = 0.5
    gray_prob: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(tuple(c) for c in self.classes))
        for color, shape in self.classes:
            if color not in COLORS or shape not in SHAPES:
                raise ValueError(f"unknown class ({color!r}, {shape!r})")
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast must lie in (0, 1]")

    @property
    def class_names(self) -> list[str]:
        return [f"{c} {s}" for c, s in self.classes]

    def renderer_params(self) -> dict:
        """Settings a checkpoint records so evaluation renders the data it was trained on."""
        return {"texture_amp": self.texture_amp, "color_jitter": self.color_jitter, "contrast": self.contrast}

    def shifted(self, style: str) -> "SyntheticSpec":
        return dataclasses.replace(self, style=style)


@dataclass
class RenderedImages:
    images: torch.Tensor
    labels: torch.Tensor
    sizes: torch.Tensor
    backgrounds: torch.Tensor
    class_names: list = field(default_factory=list)


def _mask(shape: str, dx, dy, r):
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r * 0.35)
    if shape == "column":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r * 0.35)
    w = r * 0.35
    return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))


def _outline(m):
    inner = m.copy()
    inner[1:-1, 1:-1] = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return m & ~inner


def texture(label: int, num_classes: int, size: int, phase: float) -> np.ndarray:
    """Unit-amplitude grating whose orientation and frequency encode the class."""
    yy, xx = np.mgrid[0:size, 0:size]
    theta = np.pi * label / num_classes
    freq = 0.25 + 0.1 * (label % 3)
    return np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def render_one(spec: SyntheticSpec, label: int, size_attr: int, bg_attr: int, rng: np.random.Generator) -> np.ndarray:
    S = spec.image_size
    color, shape = spec.classes[label]
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    cx, cy = rng.uniform(5 * S / 16, 11 * S / 16, 2)
    r = (rng.uniform(2.5, 3.8) if size_attr == 0 else rng.uniform(4.5, 6.0)) * S / 16
    m = _mask(shape, xx - cx, yy - cy, r)
    jitter = spec.color_jitter * (2.0 if spec.style == "jitter" else 1.0)
    col = np.array(COLORS[color])[:, None, None] + rng.normal(0, jitter, (3, 1, 1))
    if spec.gray_prob and rng.random() < spec.gray_prob:
        col = np.full((3, 1, 1), rng.uniform(0.35, 0.65))
    if spec.style == "sketch":
        m = _outline(m)
        base = rng.uniform(0.8, 0.95)
    else:
        base = rng.uniform(0.0, 0.25) if bg_attr == 0 else rng.uniform(0.55, 0.75)
    bg = base + rng.normal(0, 0.05, (3, S, S))
    if spec.style == "jitter":
        bg = bg + rng.normal(0, 0.08, (3, 1, 1))
    img = np.where(m[None], col, bg) + rng.normal(0, 0.03, (3, S, S))
    tex = texture(label, len(spec.classes), S, rng.uniform(0, 2 * np.pi))
    img = img + spec.texture_amp * tex[None]
    img = 0.5 + spec.contrast * (np.clip(img, 0.0, 1.0) - 0.5)
    return img.astype(np.float32)


def render(spec: SyntheticSpec, n: int, seed: int) -> RenderedImages:
    rng = np.random.default_rng(seed)
    K = len(spec.classes)
    labels = rng.integers(0, K, n)
    sizes = rng.integers(0, 2, n)
    bgs = rng.integers(0, 2, n)
    imgs = np.stack([render_one(spec, int(y), int(s), int(b), rng) for y, s, b in zip(labels, sizes, bgs)]) if n else np.zeros((0, 3, spec.image_size, spec.image_size), np.float32)
    return RenderedImages(torch.from_numpy(imgs), torch.from_numpy(labels).long(),
                          torch.from_numpy(sizes).long(), torch.from_numpy(bgs).long(), spec.class_names)
