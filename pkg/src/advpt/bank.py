"""The adversarial embedding bank: built in one pass, then served in batches.

File layout (little-endian)::

    magic  b"ADVBANK\\0"   8 bytes
    version               u32
    N, L, K               u32 x 3
    dtype tag             u8   (1 = float32)
    embeddings            N*L float32, row-major
    labels                N int32
    class names           K x (u32 length + UTF-8 bytes)
    provenance            u32 length + UTF-8 JSON (attack config, theta sha256, seed)
    sha256                32 bytes over everything above
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import torch

from . import _container
from .attacks import AttackConfig, pgd_attack_batch
from .encoders import EncoderPair, LabeledImageDataset
from .errors import FormatError, InputError, IntegrityError, NumericError

BANK_MAGIC = b"ADVBANK\0"
BANK_VERSION = 1
DTYPE_F32 = 1


@dataclass
class AdversarialEmbeddingBank:
    embeddings: torch.Tensor
    labels: torch.Tensor
    class_names: list[str]
    provenance: dict = field(default_factory=dict)
    format_version: int = BANK_VERSION

    def __post_init__(self):
        self.embeddings = torch.as_tensor(self.embeddings, dtype=torch.float32)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise InputError("bank needs an (N, L) matrix and N labels")
        if not torch.isfinite(self.embeddings).all():
            raise NumericError("non-finite bank embedding")
        K = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= K):
            raise InputError(f"bank labels must lie in [0, {K})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def theta_sha256(self) -> str:
        return self.provenance.get("theta_sha256", "")

    def to_bytes(self) -> bytes:
        w = _container.Writer(BANK_MAGIC, self.format_version)
        N, L = self.embeddings.shape
        w.pack("IIIB", N, L, len(self.class_names), DTYPE_F32)
        w.array(self.embeddings.numpy(), "f4")
        w.array(self.labels.numpy(), "i4")
        for name in self.class_names:
            w.string(name)
        w.json(self.provenance)
        return w.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, AdversarialEmbeddingBank):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


@dataclass
class MiniBatch:
    embeddings: torch.Tensor
    labels: torch.Tensor
    indices: np.ndarray


def build_bank(pair: EncoderPair, dataset: LabeledImageDataset, cfg: AttackConfig,
               chunk_size: int = 256) -> AdversarialEmbeddingBank:
    """A[i] = E(attack(x_i)); image ``i`` uses start seed ``cfg.seed + i``."""
    if len(dataset) == 0:
        raise InputError("cannot build a bank from an empty dataset")
    before = pair.theta_hash()
    rows = []
    for lo in range(0, len(dataset), chunk_size):
        hi = min(len(dataset), lo + chunk_size)
        seeds = list(range(cfg.seed + lo, cfg.seed + hi))
        adv = pgd_attack_batch(pair, dataset.images[lo:hi], dataset.labels[lo:hi], cfg, seeds=seeds).adversarials
        rows.append(pair.encode_image(adv).float())
    if pair.theta_hash() != before:
        raise IntegrityError("encoder parameters changed while building the bank")
    provenance = {"attack": cfg.to_dict(), "theta_sha256": before, "seed": cfg.seed}
    return AdversarialEmbeddingBank(torch.cat(rows), dataset.labels.clone(), list(dataset.class_names), provenance)


def clean_bank(pair: EncoderPair, dataset: LabeledImageDataset) -> AdversarialEmbeddingBank:
    """Clean embeddings in bank form (the epsilon = 0 case), for clean-objective tuning."""
    return build_bank(pair, dataset, AttackConfig(epsilon=0.0, iterations=0))


def save_bank(bank: AdversarialEmbeddingBank, path) -> None:
    _container.write_atomic(path, bank.to_bytes())


def load_bank(path) -> AdversarialEmbeddingBank:
    r = _container.read_file(path, BANK_MAGIC, BANK_VERSION, "embedding bank")
    N, L, K, tag = r.unpack("IIIB")
    if tag != DTYPE_F32:
        raise FormatError(f"embedding bank: unsupported dtype tag {tag}")
    emb = r.array((N, L), "f4")
    labels = r.array((N,), "i4").astype(np.int64)
    names = [r.string() for _ in range(K)]
    provenance = r.json()
    r.done()
    return AdversarialEmbeddingBank(torch.from_numpy(emb), torch.from_numpy(labels), names, provenance)


def verify_provenance(bank: AdversarialEmbeddingBank, pair: EncoderPair) -> None:
    """Raise IntegrityError if the bank was built with different encoder parameters."""
    current = pair.theta_hash()
    if bank.theta_sha256 != current:
        raise IntegrityError(f"bank built with encoder {bank.theta_sha256[:12] or '?'}, "
                             f"current encoder is {current[:12]}")


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def iterate_minibatches(bank: AdversarialEmbeddingBank, b: int, seed: int = 0, epoch: int = 0) -> Iterator[MiniBatch]:
    """One epoch: a seeded permutation of all rows cut into batches of ``b`` (the last may be short)."""
    N = len(bank)
    if not 1 <= b <= N:
        raise InputError(f"batch size must lie in [1, {N}], got {b}")
    perm = epoch_permutation(N, seed, epoch)
    for lo in range(0, N, b):
        idx = perm[lo:lo + b]
        t = torch.from_numpy(idx)
        yield MiniBatch(bank.embeddings[t], bank.labels[t], idx)
