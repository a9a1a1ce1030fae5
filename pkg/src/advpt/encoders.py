"""Frozen dual encoders, the token embedding table and the MiniCLIP stand-in.

``EncoderPair`` wraps any image module ``(N, C, H, W) -> (N, L)`` and text
module ``(K, T, d) -> (K, L)``; a real pretrained dual encoder can be
plugged in the same way as MiniCLIP. Parameters are frozen on wrap, and
every image-encoder forward/backward is counted so callers can assert that
a stage never touched it.

MiniCLIP layers are written with ``unfold`` + ``bmm`` so that each sample
goes through its own identically shaped GEMM: results are bit-identical
whether an image is processed alone or inside a batch.
"""

from __future__ import annotations

import copy
import hashlib
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _container
from .errors import DimensionError, InputError, IntegrityError, VocabularyError

CHECKPOINT_MAGIC = b"MINICLIP"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# batch-invariant primitives

def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``x @ weight.T + bias`` over the last axis, one GEMM per leading index."""
    lead = x.shape[:-1]
    x3 = x.reshape(-1, 1, x.shape[-1]) if x.ndim <= 2 else x.reshape(lead[0], -1, x.shape[-1])
    w = weight.t().unsqueeze(0).expand(x3.shape[0], -1, -1)
    y = torch.bmm(x3, w)
    if bias is not None:
        y = y + bias
    return y.reshape(*lead, weight.shape[0])


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, stride: int = 1, padding: int = 1) -> torch.Tensor:
    n, _, h, w = x.shape
    k = weight.shape[-1]
    cols = F.unfold(x, k, padding=padding, stride=stride)
    out = torch.bmm(weight.reshape(1, weight.shape[0], -1).expand(n, -1, -1), cols)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    return out.reshape(n, weight.shape[0], ho, wo) + bias.view(1, -1, 1, 1)


def _param(*shape, fan_in: int, generator: torch.Generator) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter((torch.rand(*shape, generator=generator) * 2 - 1) * bound)


# --------------------------------------------------------------------------
# MiniCLIP modules

@dataclass(frozen=True)
class MiniCLIPConfig:
    embed_dim: int = 64
    token_dim: int = 16
    image_size: int = 16
    coarse_dim: int = 32
    conv_width: int = 16
    hidden: int = 64
    pool: int = 4
    text_width: int = 32
    text_heads: int = 4
    text_layers: int = 2
    max_tokens: int = 80
    tau: float = 0.05

    def __post_init__(self):
        for name in ("embed_dim", "token_dim", "image_size", "coarse_dim", "conv_width", "hidden",
                     "pool", "text_width", "text_heads", "text_layers", "max_tokens"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.coarse_dim >= self.embed_dim:
            raise ValueError("coarse_dim must be smaller than embed_dim")
        if self.image_size % 4 or self.image_size % self.pool:
            raise ValueError("image_size must be divisible by 4 and by pool")
        if self.text_width % self.text_heads:
            raise ValueError("text_width must be divisible by text_heads")


class MiniImageEncoder(nn.Module):
    """Two branches concatenated into the embedding.

    The coarse branch sees an average-pooled image through Lipschitz-bounded
    layers (spectral norm enforced while training, baked in afterwards); the
    fine branch is a small strided CNN at full resolution.
    """

    def __init__(self, cfg: MiniCLIPConfig, generator: torch.Generator):
        super().__init__()
        g, W, H = generator, cfg.conv_width, cfg.hidden
        self.cfg = cfg
        self.lipschitz = False
        self.c1_w = _param(W, 3, 3, 3, fan_in=27, generator=g)
        self.c1_b = _param(W, fan_in=27, generator=g)
        self.c2_w = _param(2 * W, W, 3, 3, fan_in=9 * W, generator=g)
        self.c2_b = _param(2 * W, fan_in=9 * W, generator=g)
        self.c3_w = _param(2 * W, 2 * W, 3, 3, fan_in=18 * W, generator=g)
        self.c3_b = _param(2 * W, fan_in=18 * W, generator=g)
        flat = 2 * W * (cfg.image_size // 4) ** 2
        self.fc_w = _param(H, flat, fan_in=flat, generator=g)
        self.fc_b = _param(H, fan_in=flat, generator=g)
        self.fine_proj = _param(cfg.embed_dim - cfg.coarse_dim, H, fan_in=H, generator=g)
        n_in = 3 * (cfg.image_size // cfg.pool) ** 2
        self.co1_w = _param(H, n_in, fan_in=n_in, generator=g)
        self.co1_b = _param(H, fan_in=n_in, generator=g)
        self.co2_w = _param(cfg.coarse_dim, H, fan_in=H, generator=g)
        self.gain = nn.Parameter(torch.tensor(1.0))

    def _lip(self, w: torch.Tensor) -> torch.Tensor:
        return w / torch.linalg.matrix_norm(w, ord=2) if self.lipschitz else w

    def bake(self) -> None:
        """Fold the spectral normalisation into the stored weights."""
        with torch.no_grad():
            self.co1_w.copy_(self._lip(self.co1_w))
            self.co2_w.copy_(self._lip(self.co2_w))
        self.lipschitz = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.gelu(conv2d(x, self.c1_w, self.c1_b, 1, 1))
        h = F.gelu(conv2d(h, self.c2_w, self.c2_b, 2, 1))
        h = F.gelu(conv2d(h, self.c3_w, self.c3_b, 2, 1))
        fine = linear(F.gelu(linear(h.flatten(1), self.fc_w, self.fc_b)), self.fine_proj)
        p = F.avg_pool2d(x, self.cfg.pool).flatten(1)
        coarse = self.gain * linear(F.gelu(linear(p, self._lip(self.co1_w), self.co1_b)), self._lip(self.co2_w))
        return torch.cat([coarse, fine], dim=-1)


class _Block(nn.Module):
    def __init__(self, width: int, heads: int, g: torch.Generator):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.ln2 = nn.LayerNorm(width)
        self.qkv_w = _param(3 * width, width, fan_in=width, generator=g)
        self.qkv_b = nn.Parameter(torch.zeros(3 * width))
        self.out_w = _param(width, width, fan_in=width, generator=g)
        self.out_b = nn.Parameter(torch.zeros(width))
        self.fc1_w = _param(4 * width, width, fan_in=width, generator=g)
        self.fc1_b = nn.Parameter(torch.zeros(4 * width))
        self.fc2_w = _param(width, 4 * width, fan_in=4 * width, generator=g)
        self.fc2_b = nn.Parameter(torch.zeros(width))

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        K, T, W = h.shape
        nh, dh = self.heads, W // self.heads
        q, k, v = linear(self.ln1(h), self.qkv_w, self.qkv_b).split(W, dim=-1)
        q, k, v = (t.reshape(K, T, nh, dh).transpose(1, 2).reshape(K * nh, T, dh) for t in (q, k, v))
        att = torch.softmax(torch.bmm(q, k.transpose(1, 2)) / math.sqrt(dh) + mask, dim=-1)
        a = torch.bmm(att, v).reshape(K, nh, T, dh).transpose(1, 2).reshape(K, T, W)
        h = h + linear(a, self.out_w, self.out_b)
        return h + linear(F.gelu(linear(self.ln2(h), self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b)


class MiniTextEncoder(nn.Module):
    """Causal transformer over token embeddings; the last position is pooled."""

    def __init__(self, cfg: MiniCLIPConfig, generator: torch.Generator):
        super().__init__()
        g = generator
        self.cfg = cfg
        self.inp_w = _param(cfg.text_width, cfg.token_dim, fan_in=cfg.token_dim, generator=g)
        self.inp_b = nn.Parameter(torch.zeros(cfg.text_width))
        self.pos = nn.Parameter(torch.randn(cfg.max_tokens, cfg.text_width, generator=g) * 0.02)
        self.blocks = nn.ModuleList(_Block(cfg.text_width, cfg.text_heads, g) for _ in range(cfg.text_layers))
        self.ln = nn.LayerNorm(cfg.text_width)
        self.proj = _param(cfg.embed_dim, cfg.text_width, fan_in=cfg.text_width, generator=g)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        T = seq.shape[1]
        if T > self.cfg.max_tokens:
            raise InputError(f"sequence length {T} exceeds max_tokens={self.cfg.max_tokens}")
        h = linear(seq, self.inp_w, self.inp_b) + self.pos[:T]
        mask = torch.triu(torch.full((T, T), float("-inf"), dtype=h.dtype), diagonal=1)
        for blk in self.blocks:
            h = blk(h, mask)
        return linear(self.ln(h[:, -1]), self.proj)


# --------------------------------------------------------------------------
# public types

def module_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        a = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(np.asarray(a.shape, dtype=np.int64).tobytes())
        h.update(a.tobytes())
    return h.hexdigest()


class EncoderPair:
    """Frozen image encoder E and text encoder G sharing an L-dim space."""

    def __init__(self, image_encoder: nn.Module, text_encoder: nn.Module, *, embed_dim: int,
                 token_dim: int, image_shape: Sequence[int], tau: float, max_tokens: int = 80):
        self.image_encoder = image_encoder.eval()
        self.text_encoder = text_encoder.eval()
        for p in list(image_encoder.parameters()) + list(text_encoder.parameters()):
            p.requires_grad_(False)
        self.embed_dim = int(embed_dim)
        self.token_dim = int(token_dim)
        self.image_shape = tuple(int(s) for s in image_shape)
        self.tau = float(tau)
        self.max_tokens = int(max_tokens)
        self.calls: Counter = Counter()
        self.image_encoder.register_forward_pre_hook(self._count_forward)
        self.image_encoder.register_full_backward_hook(self._count_backward)

    def _count_forward(self, module, args):
        self.calls["image_forward"] += int(args[0].shape[0])

    def _count_backward(self, module, grad_input, grad_output):
        self.calls["image_backward"] += int(grad_output[0].shape[0])

    @property
    def dtype(self) -> torch.dtype:
        return next(self.text_encoder.parameters()).dtype

    def theta_hash(self, part: str = "all") -> str:
        if part == "image":
            return module_hash(self.image_encoder)
        if part == "text":
            return module_hash(self.text_encoder)
        if part != "all":
            raise ValueError(f"unknown part {part!r}")
        return hashlib.sha256((module_hash(self.image_encoder) + module_hash(self.text_encoder)).encode()).hexdigest()

    def check_images(self, x: torch.Tensor) -> None:
        if not isinstance(x, torch.Tensor) or x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            shape = tuple(x.shape) if isinstance(x, torch.Tensor) else type(x).__name__
            raise InputError(f"expected images of shape (N, {', '.join(map(str, self.image_shape))}), got {shape}")
        if not torch.isfinite(x).all():
            raise InputError("non-finite pixel values")

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        """E(x) for one (C, H, W) image or a (N, C, H, W) batch; no gradient."""
        single = isinstance(x, torch.Tensor) and x.ndim == 3
        xb = x[None] if single else x
        self.check_images(xb)
        with torch.no_grad():
            e = self.image_encoder(xb.to(self.dtype))
        return e[0] if single else e

    def image_loss_grad(self, x: torch.Tensor, loss_fn):
        """Per-sample losses ``loss_fn(E(x))`` and the gradient of their sum w.r.t. x."""
        xg = x.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            losses = loss_fn(self.image_encoder(xg))
            (grad,) = torch.autograd.grad(losses.sum(), xg)
        return losses.detach(), grad

    def encode_text(self, seq: torch.Tensor) -> torch.Tensor:
        """G(seq) for a (T, d) sequence or a (K, T, d) batch; differentiable in seq."""
        single = seq.ndim == 2
        sb = seq[None] if single else seq
        if sb.ndim != 3 or sb.shape[-1] != self.token_dim:
            raise DimensionError(f"expected token dim {self.token_dim}, got shape {tuple(seq.shape)}")
        if sb.shape[1] == 0:
            raise InputError("empty token sequence")
        e = self.text_encoder(sb)
        return e[0] if single else e

    def to_dtype(self, dtype: torch.dtype) -> "EncoderPair":
        """Independent copy in another precision (the original is untouched)."""
        img = copy.deepcopy(self.image_encoder)
        txt = copy.deepcopy(self.text_encoder)
        img._forward_pre_hooks.clear()
        img._backward_hooks.clear()
        return EncoderPair(img.to(dtype), txt.to(dtype), embed_dim=self.embed_dim, token_dim=self.token_dim,
                           image_shape=self.image_shape, tau=self.tau, max_tokens=self.max_tokens)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class TokenEmbeddingTable:
    """Closed vocabulary with one d-dim embedding row per word."""

    def __init__(self, vocab: Sequence[str], embeddings: torch.Tensor):
        vocab = list(vocab)
        if embeddings.ndim != 2 or embeddings.shape[0] != len(vocab):
            raise InputError("embeddings must have one row per vocab entry")
        if len(set(vocab)) != len(vocab):
            raise InputError("duplicate vocab entries")
        self.vocab = vocab
        self.embeddings = embeddings.detach().clone()
        self._index = {w: i for i, w in enumerate(vocab)}

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.vocab)

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(token) from None

    def indices(self, text: str) -> list[int]:
        return [self.index(t) for t in tokenize(text)]

    def embed(self, text: str) -> torch.Tensor:
        """Concatenated rows for the whitespace/lowercase tokens of ``text``."""
        idx = self.indices(text)
        if not idx:
            raise InputError("empty name")
        return self.embeddings[idx]


def embed_class_name(table: TokenEmbeddingTable, name: str) -> torch.Tensor:
    return table.embed(name)


def encode_image(pair: EncoderPair, x: torch.Tensor) -> torch.Tensor:
    return pair.encode_image(x)


@dataclass
class LabeledImageDataset:
    images: torch.Tensor
    labels: torch.Tensor
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InputError("images must be (N, C, H, W) with one label each")
        K = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= K):
            raise InputError(f"labels must lie in [0, {K})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "LabeledImageDataset":
        return LabeledImageDataset(self.images[index], self.labels[index], list(self.class_names))

    def head(self, n: int) -> "LabeledImageDataset":
        return self.subset(slice(0, n))


# --------------------------------------------------------------------------
# checkpoint

def save_checkpoint(path, pair: EncoderPair, table: TokenEmbeddingTable, config: MiniCLIPConfig, seed: int, extra: Optional[dict] = None) -> None:
    tensors = [("image." + k, v) for k, v in sorted(pair.image_encoder.state_dict().items())]
    tensors += [("text." + k, v) for k, v in sorted(pair.text_encoder.state_dict().items())]
    tensors.append(("token_embeddings", table.embeddings))
    header = {
        "config": asdict(config),
        "seed": int(seed),
        "vocab": table.vocab,
        "tensors": [[name, list(t.shape)] for name, t in tensors],
        "theta_sha256": pair.theta_hash(),
        "extra": extra or {},
    }
    w = _container.Writer(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    w.json(header)
    for _, t in tensors:
        w.array(t.detach().cpu().numpy(), "f4")
    w.write(path)


class LoadedCheckpoint(NamedTuple):
    pair: EncoderPair
    table: TokenEmbeddingTable
    config: MiniCLIPConfig
    seed: int
    extra: dict


def build_modules(config: MiniCLIPConfig, seed: int):
    g = torch.Generator().manual_seed(seed)
    return MiniImageEncoder(config, g), MiniTextEncoder(config, g)


def make_pair(image: nn.Module, text: nn.Module, config: MiniCLIPConfig) -> EncoderPair:
    return EncoderPair(image, text, embed_dim=config.embed_dim, token_dim=config.token_dim,
                       image_shape=(3, config.image_size, config.image_size), tau=config.tau,
                       max_tokens=config.max_tokens)


def load_checkpoint(path) -> LoadedCheckpoint:
    r = _container.read_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "MiniCLIP checkpoint")
    header = r.json()
    config = MiniCLIPConfig(**header["config"])
    arrays = {name: torch.from_numpy(r.array(tuple(shape), "f4")) for name, shape in header["tensors"]}
    r.done()
    image, text = build_modules(config, 0)
    image.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("image.")})
    text.load_state_dict({k[5:]: v for k, v in arrays.items() if k.startswith("text.")})
    pair = make_pair(image, text, config)
    if pair.theta_hash() != header["theta_sha256"]:
        raise IntegrityError("checkpoint parameters do not match their recorded checksum")
    table = TokenEmbeddingTable(header["vocab"], arrays["token_embeddings"])
    return LoadedCheckpoint(pair, table, config, int(header["seed"]), header.get("extra", {}))
