"""Contrastive pretraining of MiniCLIP on rendered captions.

Captions mention the class and, optionally, size, background and an image
quality word. A fraction of images is blurred or noised and captioned
"a blurry/noisy photo of a ...", which teaches the text encoder that the
context in front of a class name can shift which image features matter.
Another fraction has its shape painted gray, so the faint class texture
is the only colour evidence; this makes the encoder pick up that fragile
cue the way large models pick up non-robust features.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import (EncoderPair, MiniCLIPConfig, TokenEmbeddingTable, build_modules, make_pair)
from .synthetic import BACKGROUNDS, COLORS, SHAPES, SIZES, SyntheticSpec, render

FUNCTION_WORDS = ("a", "an", "the", "photo", "of", "picture", "image", "shape", "small", "big",
                  "on", "dark", "light", "background", "blurry", "noisy", "clean")
PREFIXES = ("a photo of a", "a picture of a", "an image of the", "the", "a")
QUALITY = ("", "blurry", "noisy")


def default_vocab(n_filler: int = 60, seed: int = 1) -> list[str]:
    rng = np.random.default_rng(seed)
    letters = list("abcdefghijklmnopqrstuvwxyz")
    base = list(FUNCTION_WORDS) + list(COLORS) + list(SHAPES)
    filler = []
    while len(filler) < n_filler:
        w = "".join(rng.choice(letters, 5))
        if w not in base and w not in filler:
            filler.append(w)
    return base + filler


@dataclass(frozen=True)
class PretrainConfig:
    n_images: int = 8000
    epochs: int = 15
    batch_size: int = 128
    lr: float = 2e-3
    blur_prob: float = 0.15
    noisy_prob: float = 0.15
    noise_sigma: float = 0.05
    gray_prob: float = 0.3
    data_seed: int = 0


def _caption(name, size, bg, q, rng):
    use_b = rng.random() < 0.5
    tail = f" on a {BACKGROUNDS[bg]} background" if use_b else ""
    if q:
        return f"a {QUALITY[q]} photo of a {name}{tail}", -1, (bg if use_b else -1)
    use_s = rng.random() < 0.5
    size_word = f" {SIZES[size]}" if use_s else ""
    return f"{PREFIXES[rng.integers(len(PREFIXES))]}{size_word} {name}{tail}", (size if use_s else -1), (bg if use_b else -1)


def _encode_texts(text, tok, vocab_index, texts):
    """Group captions by length so each group is one batched forward."""
    seqs = [tok[[vocab_index[w] for w in t.split()]] for t in texts]
    out = [None] * len(texts)
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault(len(s), []).append(i)
    for ids in groups.values():
        e = text(torch.stack([seqs[i] for i in ids]))
        for j, i in enumerate(ids):
            out[i] = e[j]
    return torch.stack(out)


def _multi_positive_nll(logits, ok):
    return -(torch.logsumexp(logits.masked_fill(~ok, -1e9), 1) - torch.logsumexp(logits, 1)).mean()


def pretrain(config: MiniCLIPConfig, seed: int, spec: SyntheticSpec | None = None,
             train: PretrainConfig | None = None, log=print):
    """Train MiniCLIP from scratch; returns (pair, table)."""
    spec = spec or SyntheticSpec(image_size=config.image_size)
    train = train or PretrainConfig()
    torch.manual_seed(seed)
    image, text = build_modules(config, seed)
    image.lipschitz = True
    vocab = default_vocab()
    index = {w: i for i, w in enumerate(vocab)}
    g = torch.Generator().manual_seed(seed)
    tok = torch.nn.Parameter(torch.randn(len(vocab), config.token_dim, generator=g))
    data = render(dataclasses.replace(spec, gray_prob=train.gray_prob), train.n_images, train.data_seed)
    X, Y, Sz, Bg = data.images, data.labels, data.sizes, data.backgrounds
    names = spec.class_names
    params = list(image.parameters()) + list(text.parameters()) + [tok]
    opt = torch.optim.Adam(params, train.lr)
    rng = np.random.default_rng(seed)
    p_clean = 1 - train.blur_prob - train.noisy_prob
    t0 = time.time()
    for ep in range(train.epochs):
        perm = torch.randperm(len(X), generator=g)
        for lo in range(0, len(X), train.batch_size):
            idx = perm[lo:lo + train.batch_size]
            x, y, s, b = X[idx], Y[idx], Sz[idx], Bg[idx]
            qs = torch.from_numpy(rng.choice(3, len(idx), p=[p_clean, train.blur_prob, train.noisy_prob]))
            blur = F.interpolate(F.avg_pool2d(x, config.pool), scale_factor=config.pool, mode="bilinear", align_corners=False)
            x = torch.where((qs == 1)[:, None, None, None], blur, x)
            noisy = (x + train.noise_sigma * torch.randn(x.shape, generator=g)).clamp(0, 1)
            x = torch.where((qs == 2)[:, None, None, None], noisy, x)
            caps = sorted({(*_caption(names[int(y[j])], int(s[j]), int(b[j]), int(qs[j]), rng), int(y[j]), int(qs[j]))
                           for j in range(len(idx))})
            T = _encode_texts(text, tok, index, [c[0] for c in caps])
            cs, cb, ck, cq = (torch.tensor([c[i] for c in caps]) for i in (1, 2, 3, 4))
            ok = (cq == qs[:, None]) & (ck == y[:, None]) & ((cs == -1) | (cs == s[:, None])) & ((cb == -1) | (cb == b[:, None]))
            logits = F.normalize(image(x), dim=-1) @ F.normalize(T, dim=-1).t() / config.tau
            loss = _multi_positive_nll(logits, ok) + _multi_positive_nll(logits.t(), ok.t())
            opt.zero_grad()
            loss.backward()
            opt.step()
        log(f"epoch {ep + 1}/{train.epochs} loss {loss.item():.4f} ({time.time() - t0:.0f}s)")
    image.bake()
    pair = make_pair(image, text, config)
    return pair, TokenEmbeddingTable(vocab, tok.detach())
