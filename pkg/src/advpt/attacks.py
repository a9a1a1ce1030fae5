"""l-inf PGD against the frozen image encoder.

Two objectives are supported: ``kl_embedding`` pushes the adversarial
embedding away from the clean one (KL between coordinate softmaxes, as in
TRADES) and needs no text; ``contrastive`` ascends the zero-shot
cross-entropy against the ground-truth text embedding.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError

OBJECTIVES = ("kl_embedding", "contrastive")
START_MODES = ("none", "normal", "uniform")
# TRADES-style start: x + 0.001 * N(0, 1). The KL objective has a zero
# gradient at x' = x, so a non-trivial start is required for it to move.
NORMAL_START_STD = 1e-3
BOUND_TOL = 1e-6


def parse_fraction(value) -> float:
    """Accept ``8/255``, ``"8/255"``, ``0.0314`` or ``"0.0314"``."""
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse {value!r} as a fraction or decimal") from exc


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: Optional[float] = None
    iterations: int = 10
    objective: str = "kl_embedding"
    temperature_kl: float = 1.0
    random_start: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "epsilon", parse_fraction(self.epsilon))
        if self.alpha is not None:
            object.__setattr__(self, "alpha", parse_fraction(self.alpha))
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ConfigError(f"iterations must be a non-negative integer, got {self.iterations}")
        object.__setattr__(self, "iterations", int(self.iterations))
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if not self.temperature_kl > 0:
            raise ConfigError("temperature_kl must be positive")
        if self.random_start is not None and self.random_start not in START_MODES:
            raise ConfigError(f"random_start must be one of {START_MODES}")
        # resolve defaults so equal attacks compare and hash equal
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 4)
        if self.random_start is None:
            object.__setattr__(self, "random_start", "normal" if self.objective == "kl_embedding" else "none")

    @property
    def step_size(self) -> float:
        return self.alpha

    @property
    def start_mode(self) -> str:
        return self.random_start

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d)


def bank_attack(**overrides) -> AttackConfig:
    """PGD-10 at 8/255 with step eps/4, used to build the embedding bank."""
    kw = dict(epsilon=8 / 255, alpha=2 / 255, iterations=10)
    kw.update(overrides)
    return AttackConfig(**kw)


def eval_attack(**overrides) -> AttackConfig:
    """PGD-40 at 16/255 with step eps/10, used for robust evaluation."""
    kw = dict(epsilon=16 / 255, alpha=1.6 / 255, iterations=40)
    kw.update(overrides)
    return AttackConfig(**kw)


@dataclass
class AdversarialBatch:
    originals: torch.Tensor
    adversarials: torch.Tensor
    labels: torch.Tensor
    config: AttackConfig

    def check(self) -> None:
        dev = (self.adversarials - self.originals).abs().max().item() if len(self.originals) else 0.0
        if dev > self.config.epsilon + BOUND_TOL:
            raise NumericError(f"perturbation {dev} exceeds epsilon {self.config.epsilon}")
        if len(self.adversarials) and (self.adversarials.min() < 0 or self.adversarials.max() > 1):
            raise NumericError("adversarial pixels outside [0, 1]")


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in loss input")


def kl_embedding_loss(e_adv: torch.Tensor, e_clean: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """KL(softmax(e_clean / T) || softmax(e_adv / T)) over the last axis.

    Returns one value per leading index (a scalar for 1-D inputs).
    """
    if e_adv.shape != e_clean.shape:
        raise InputError(f"shape mismatch {tuple(e_adv.shape)} vs {tuple(e_clean.shape)}")
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    _check_finite(e_adv, e_clean)
    log_p = F.log_softmax(e_clean / temperature, dim=-1)
    log_q = F.log_softmax(e_adv / temperature, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1).clamp_min(0.0)


def cosine_logits(e: torch.Tensor, text_embeddings: torch.Tensor, tau: float) -> torch.Tensor:
    """cos(e_i, w_j) / tau for e of shape (..., L) and text_embeddings (L, K)."""
    en = e.norm(dim=-1, keepdim=True)
    wn = text_embeddings.norm(dim=0, keepdim=True)
    if (en == 0).any() or (wn == 0).any():
        raise NumericError("cosine similarity undefined for a zero-norm embedding")
    return (e / en) @ (text_embeddings / wn) / tau


def contrastive_attack_loss(e_adv: torch.Tensor, text_embeddings: torch.Tensor, label, tau: float) -> torch.Tensor:
    """-log p(label | e_adv) under cosine/temperature zero-shot probabilities.

    ``e_adv`` is (L,) or (n, L); ``text_embeddings`` is (L, K).
    """
    if text_embeddings.ndim != 2 or text_embeddings.shape[1] == 0:
        raise InputError("text_embeddings must be a non-empty (L, K) matrix")
    K = text_embeddings.shape[1]
    label = torch.as_tensor(label, dtype=torch.long)
    if (label < 0).any() or (label >= K).any():
        raise InputError(f"label outside [0, {K})")
    _check_finite(e_adv, text_embeddings)
    logits = cosine_logits(e_adv, text_embeddings, tau)
    logp = F.log_softmax(logits, dim=-1)
    if logp.ndim == 1:
        return -logp[label]
    return -logp.gather(1, label.view(-1, 1)).squeeze(1)


def _start_point(x: torch.Tensor, cfg: AttackConfig, seeds: Sequence[int]) -> torch.Tensor:
    mode = cfg.start_mode
    if mode == "none" or cfg.epsilon == 0:
        return x.clone()
    noise = torch.empty_like(x)
    for i, s in enumerate(seeds):
        g = torch.Generator().manual_seed(int(s))
        if mode == "normal":
            noise[i] = torch.randn(x.shape[1:], generator=g, dtype=x.dtype) * NORMAL_START_STD
        else:
            noise[i] = (torch.rand(x.shape[1:], generator=g, dtype=x.dtype) * 2 - 1) * cfg.epsilon
    return _project(x + noise, x, cfg.epsilon)


def _project(x_adv: torch.Tensor, x: torch.Tensor, eps: float) -> torch.Tensor:
    return (x + (x_adv - x).clamp(-eps, eps)).clamp(0.0, 1.0)


def _objective(pair, cfg: AttackConfig, e_clean, text_embeddings, labels):
    if cfg.objective == "kl_embedding":
        return lambda e: kl_embedding_loss(e, e_clean, cfg.temperature_kl)
    return lambda e: contrastive_attack_loss(e, text_embeddings, labels, pair.tau)


def _pgd(pair, x: torch.Tensor, labels: torch.Tensor, cfg: AttackConfig, text_embeddings, seeds) -> torch.Tensor:
    if cfg.objective == "contrastive" and text_embeddings is None:
        raise ConfigError("the contrastive objective requires text_embeddings")
    pair.check_images(x)
    if cfg.epsilon == 0:
        return x.clone()
    x_adv = _start_point(x, cfg, seeds)
    if cfg.iterations == 0:
        return x_adv
    e_clean = pair.encode_image(x) if cfg.objective == "kl_embedding" else None
    loss_fn = _objective(pair, cfg, e_clean, text_embeddings, labels)
    for _ in range(cfg.iterations):
        _, grad = pair.image_loss_grad(x_adv, loss_fn)
        x_adv = _project(x_adv + cfg.step_size * grad.sign(), x, cfg.epsilon)
    return x_adv


def pgd_attack(pair, x: torch.Tensor, label: int, cfg: AttackConfig, text_embeddings=None, seed: Optional[int] = None) -> torch.Tensor:
    """Attack a single (C, H, W) image; the start noise is drawn from ``seed`` (default cfg.seed)."""
    if x.ndim != 3:
        raise InputError(f"expected a single (C, H, W) image, got shape {tuple(x.shape)}")
    s = cfg.seed if seed is None else seed
    out = _pgd(pair, x[None], torch.tensor([int(label)]), cfg, text_embeddings, [s])
    return out[0]


def pgd_attack_batch(pair, images: torch.Tensor, labels, cfg: AttackConfig, text_embeddings=None,
                     seeds: Optional[Sequence[int]] = None, chunk_size: int = 256) -> AdversarialBatch:
    """Attack a batch. Image ``i`` uses start seed ``seeds[i]`` (default ``cfg.seed + i``),
    so results follow the image rather than its position."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = len(images)
    if seeds is None:
        seeds = [cfg.seed + i for i in range(n)]
    if len(seeds) != n or len(labels) != n:
        raise InputError("images, labels and seeds must have equal length")
    chunks = []
    for lo in range(0, n, chunk_size):
        hi = min(n, lo + chunk_size)
        try:
            chunks.append(_pgd(pair, images[lo:hi], labels[lo:hi], cfg, text_embeddings, seeds[lo:hi]))
        except InputError as exc:
            bad = _first_bad_index(pair, images[lo:hi])
            raise InputError(f"image {lo + bad}: {exc}") from exc
    adv = torch.cat(chunks) if chunks else images.clone()
    batch = AdversarialBatch(images, adv, labels, cfg)
    batch.check()
    return batch


def _first_bad_index(pair, images) -> int:
    for i in range(len(images)):
        try:
            pair.check_images(images[i:i + 1])
        except InputError:
            return i
    return 0
