import pytest
import torch
import torch.nn as nn

from advpt.encoders import EncoderPair, LabeledImageDataset, TokenEmbeddingTable
from advpt.miniclip import build_mini_clip

torch.set_num_threads(1)


class LinearImage(nn.Module):
    """E(x) = W vec(x)."""

    def __init__(self, W):
        super().__init__()
        self.W = nn.Parameter(W)

    def forward(self, x):
        return x.flatten(1) @ self.W.t()


class MeanText(nn.Module):
    """G(s) = P mean_t(s_t) + Q s_last."""

    def __init__(self, P, Q):
        super().__init__()
        self.P = nn.Parameter(P)
        self.Q = nn.Parameter(Q)

    def forward(self, seq):
        return seq.mean(1) @ self.P.t() + seq[:, -1] @ self.Q.t()


def linear_pair(W, L=None, d=3, shape=None, tau=1.0, seed=0, dtype=torch.float64):
    L = W.shape[0]
    g = torch.Generator().manual_seed(seed)
    P = torch.randn(L, d, generator=g, dtype=dtype)
    Q = torch.randn(L, d, generator=g, dtype=dtype)
    shape = shape or (1, 1, W.shape[1])
    return EncoderPair(LinearImage(W.to(dtype)), MeanText(P, Q), embed_dim=L, token_dim=d, image_shape=shape, tau=tau)


@pytest.fixture
def toy_pair():
    g = torch.Generator().manual_seed(3)
    return linear_pair(torch.randn(4, 2, generator=g, dtype=torch.float64))


@pytest.fixture
def toy_table():
    g = torch.Generator().manual_seed(4)
    vocab = ["a", "photo", "of", "red", "blue", "bar", "column"]
    return TokenEmbeddingTable(vocab, torch.randn(len(vocab), 3, generator=g, dtype=torch.float64))


@pytest.fixture(scope="session")
def mini():
    return build_mini_clip(0)


@pytest.fixture(scope="session")
def mini64(mini):
    """Float64 copy for finite-difference checks."""
    return mini.pair.to_dtype(torch.float64)


def small_dataset(mini, n):
    d = mini.dataset
    return LabeledImageDataset(d.images[:n], d.labels[:n], list(d.class_names))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
