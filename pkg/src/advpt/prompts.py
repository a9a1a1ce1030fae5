"""Learnable context vectors, prompt encoding and the tuning loop.

A prompt for class j is the sequence ``[v_1, ..., v_M, c_j]``: M shared
learnable d-dim vectors followed by the class-name token embeddings. Only
V is ever optimised; the text encoder is used frozen.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import _container
from .attacks import cosine_logits
from .bank import AdversarialEmbeddingBank, MiniBatch, iterate_minibatches
from .encoders import EncoderPair, TokenEmbeddingTable
from .errors import ConfigError, DimensionError, DivergenceError, InputError, IntegrityError

CONTEXT_MAGIC = b"ADVPTCTX"
CONTEXT_VERSION = 1
FIXED_TEMPLATE = "a photo of a {}"
INIT_STD = 0.02


@dataclass
class PromptContext:
    V: torch.Tensor
    class_names: list[str]
    class_tokens: list[torch.Tensor]
    init_spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.V.ndim != 2 or self.V.shape[0] < 1:
            raise InputError("V must be an (M, d) matrix with M >= 1")
        if len(self.class_tokens) != len(self.class_names):
            raise InputError("one token sequence per class is required")
        for name, c in zip(self.class_names, self.class_tokens):
            if c.ndim != 2 or c.shape[0] == 0:
                raise InputError(f"empty token sequence for class {name!r}")
            if c.shape[1] != self.V.shape[1]:
                raise DimensionError(f"class {name!r} tokens have dim {c.shape[1]}, context has {self.V.shape[1]}")

    @property
    def M(self) -> int:
        return self.V.shape[0]

    @property
    def dim(self) -> int:
        return self.V.shape[1]

    def with_V(self, V: torch.Tensor) -> "PromptContext":
        return PromptContext(V, list(self.class_names), self.class_tokens, dict(self.init_spec))

    def to(self, dtype: torch.dtype) -> "PromptContext":
        return PromptContext(self.V.to(dtype), list(self.class_names),
                             [c.to(dtype) for c in self.class_tokens], dict(self.init_spec))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PromptContext):
            return NotImplemented
        return context_bytes(self) == context_bytes(other)


def init_context(table: TokenEmbeddingTable, class_names: Sequence[str], M: int = 32, seed: int = 0,
                 std: float = INIT_STD) -> PromptContext:
    """V ~ N(0, std^2), drawn from a generator seeded with ``seed``."""
    if M < 1:
        raise ConfigError(f"context length must be >= 1, got {M}")
    tokens = [table.embed(n) for n in class_names]
    g = torch.Generator().manual_seed(int(seed))
    V = torch.randn(M, table.dim, generator=g) * std
    return PromptContext(V, list(class_names), tokens, {"distribution": "normal", "std": std, "seed": int(seed)})


def _encode_sequences(pair: EncoderPair, seqs: list[torch.Tensor]) -> torch.Tensor:
    """Columns G(seq_j) as an (L, K) matrix; sequences of equal length share one call."""
    groups: dict[int, list[int]] = {}
    for j, s in enumerate(seqs):
        groups.setdefault(s.shape[0], []).append(j)
    cols: list[Optional[torch.Tensor]] = [None] * len(seqs)
    for ids in groups.values():
        out = pair.encode_text(torch.stack([seqs[j] for j in ids]))
        for k, j in enumerate(ids):
            cols[j] = out[k]
    return torch.stack(cols, dim=1)


def encode_prompts(ctx: PromptContext, pair: EncoderPair, V: Optional[torch.Tensor] = None) -> torch.Tensor:
    """T with column j = G([V, c_j]); differentiable in V."""
    V = ctx.V if V is None else V
    if V.shape[1] != pair.token_dim:
        raise DimensionError(f"context dim {V.shape[1]} does not match encoder token dim {pair.token_dim}")
    if not ctx.class_tokens:
        raise InputError("no classes")
    return _encode_sequences(pair, [torch.cat([V, c.to(V.dtype)]) for c in ctx.class_tokens])


def fixed_prompt_embeddings(pair: EncoderPair, table: TokenEmbeddingTable, class_names: Sequence[str],
                            template: str = FIXED_TEMPLATE) -> torch.Tensor:
    """T for the hand-crafted prompt, e.g. "a photo of a <class>"."""
    if "{}" not in template:
        raise ConfigError("prompt template must contain '{}'")
    with torch.no_grad():
        return _encode_sequences(pair, [table.embed(template.format(n)).to(pair.dtype) for n in class_names])


def predict_prob(B, T: torch.Tensor, tau: float) -> torch.Tensor:
    """p(i, j) = softmax_j(cos(e_i, w_j) / tau) for B (b, L) and T (L, K)."""
    if isinstance(B, MiniBatch):
        B = B.embeddings
    if not tau > 0:
        raise ConfigError("tau must be positive")
    if B.ndim != 2 or T.ndim != 2 or B.shape[1] != T.shape[0]:
        raise DimensionError(f"incompatible shapes {tuple(B.shape)} and {tuple(T.shape)}")
    return torch.softmax(cosine_logits(B, T, tau), dim=-1)


def prompt_loss(B: torch.Tensor, labels: torch.Tensor, T: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean cross-entropy of the cosine/temperature softmax."""
    return F.cross_entropy(cosine_logits(B, T, tau), labels)


def accuracy(E: torch.Tensor, T: torch.Tensor, labels: torch.Tensor) -> float:
    if len(labels) == 0:
        raise InputError("no samples")
    with torch.no_grad():
        pred = cosine_logits(E.to(T.dtype), T, 1.0).argmax(1)
    return (pred == labels).double().mean().item()


@dataclass(frozen=True)
class TuneConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.005
    momentum: float = 0.9
    context_length: int = 32
    tau: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError("epochs must be a non-negative integer")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError("batch_size must be a positive integer")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be finite and non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if int(self.context_length) != self.context_length or self.context_length < 1:
            raise ConfigError("context_length must be a positive integer")
        if self.tau is not None and not self.tau > 0:
            raise ConfigError("tau must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TuneConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown tune config keys: {sorted(unknown)}")
        return cls(**d)


def tune(ctx: PromptContext, bank: AdversarialEmbeddingBank, pair: EncoderPair, cfg: TuneConfig):
    """Optimise V by SGD with a per-epoch cosine-annealed learning rate.

    Returns the tuned context and the mean loss of every epoch. Only the
    text encoder is used; the image encoder is never called.
    """
    if list(bank.class_names) != list(ctx.class_names):
        raise InputError(f"bank classes {bank.class_names} do not match context classes {ctx.class_names}")
    if bank.dim != pair.embed_dim:
        raise DimensionError(f"bank dim {bank.dim} does not match encoder dim {pair.embed_dim}")
    tau = pair.tau if cfg.tau is None else cfg.tau
    before = pair.theta_hash()
    V = ctx.V.detach().clone().to(pair.dtype).requires_grad_(True)
    opt = torch.optim.SGD([V], lr=cfg.lr, momentum=cfg.momentum)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    b = min(cfg.batch_size, len(bank))
    trace = []
    for epoch in range(cfg.epochs):
        # per-row losses stored by bank index, so the epoch mean does not depend on the shuffle
        row_loss = np.zeros(len(bank))
        for i, mb in enumerate(iterate_minibatches(bank, b, cfg.seed, epoch)):
            T = encode_prompts(ctx, pair, V)
            losses = F.cross_entropy(cosine_logits(mb.embeddings.to(V.dtype), T, tau), mb.labels, reduction="none")
            loss = losses.mean()
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, i, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not torch.isfinite(V).all():
                raise DivergenceError(epoch, i, float("nan"))
            row_loss[mb.indices] = losses.detach().double().numpy()
        sched.step()
        trace.append(float(row_loss.mean()))
    if pair.theta_hash() != before:
        raise IntegrityError("encoder parameters changed during tuning")
    return ctx.with_V(V.detach().to(ctx.V.dtype)), trace


def context_bytes(ctx: PromptContext) -> bytes:
    """Layout: JSON header (M, d, dtype, class names, token counts, init spec),
    then V and each class token block as little-endian floats."""
    dtype = "f8" if ctx.V.dtype == torch.float64 else "f4"
    w = _container.Writer(CONTEXT_MAGIC, CONTEXT_VERSION)
    w.json({"M": ctx.M, "d": ctx.dim, "dtype": dtype, "class_names": ctx.class_names,
            "token_counts": [int(c.shape[0]) for c in ctx.class_tokens], "init_spec": ctx.init_spec})
    w.array(ctx.V.detach().numpy(), dtype)
    for c in ctx.class_tokens:
        w.array(c.detach().numpy(), dtype)
    return w.getvalue()


def save_context(ctx: PromptContext, path) -> None:
    _container.write_atomic(path, context_bytes(ctx))


def load_context(path, expected_dim: Optional[int] = None) -> PromptContext:
    r = _container.read_file(path, CONTEXT_MAGIC, CONTEXT_VERSION, "prompt context")
    h = r.json()
    if expected_dim is not None and h["d"] != expected_dim:
        raise DimensionError(f"context has token dim {h['d']}, encoder expects {expected_dim}")
    V = torch.from_numpy(r.array((h["M"], h["d"]), h["dtype"]))
    tokens = [torch.from_numpy(r.array((n, h["d"]), h["dtype"])) for n in h["token_counts"]]
    r.done()
    return PromptContext(V, h["class_names"], tokens, h["init_spec"])
