"""The bundled MiniCLIP checkpoint and ``build_mini_clip``."""

from __future__ import annotations

from importlib import resources
from typing import NamedTuple, Optional

from .encoders import (EncoderPair, LabeledImageDataset, LoadedCheckpoint, MiniCLIPConfig, TokenEmbeddingTable,
                       load_checkpoint)
from .synthetic import SyntheticSpec, render

BUNDLED_NAME = "miniclip.bin"
HELDOUT_SEED = 99
HELDOUT_SIZE = 256


class MiniCLIP(NamedTuple):
    pair: EncoderPair
    table: TokenEmbeddingTable
    dataset: LabeledImageDataset
    spec: SyntheticSpec


def bundled_path():
    return resources.files("advpt").joinpath("data", BUNDLED_NAME)


def load_bundled() -> LoadedCheckpoint:
    """A fresh copy of the shipped checkpoint (callers never share module state)."""
    with resources.as_file(bundled_path()) as p:
        return load_checkpoint(p)


def build_mini_clip(seed: int = 0, config: Optional[MiniCLIPConfig] = None, pretrain=None,
                    heldout_size: int = HELDOUT_SIZE) -> MiniCLIP:
    """Frozen MiniCLIP, its token table and a held-out synthetic split.

    The shipped checkpoint is returned when ``seed`` and ``config`` match it;
    otherwise a model is trained from scratch (about a minute at default size,
    pass a small ``PretrainConfig`` for quick experiments).
    """
    config = config or MiniCLIPConfig()
    ck = load_bundled()
    spec = SyntheticSpec(image_size=config.image_size, **ck.extra.get("synthetic", {}))
    if seed == ck.seed and config == ck.config and pretrain is None:
        pair, table = ck.pair, ck.table
    else:
        from ._pretrain import PretrainConfig, pretrain as run

        pair, table = run(config, seed, spec, pretrain or PretrainConfig(), log=lambda *_: None)
    r = render(spec, heldout_size, HELDOUT_SEED)
    return MiniCLIP(pair, table, LabeledImageDataset(r.images, r.labels, r.class_names), spec)
