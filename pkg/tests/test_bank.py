import struct

import numpy as np
import pytest
import torch

from advpt.attacks import AttackConfig, bank_attack, pgd_attack
from advpt.bank import (AdversarialEmbeddingBank, BANK_MAGIC, build_bank, clean_bank, iterate_minibatches, load_bank,
                        save_bank, verify_provenance)
from advpt.encoders import EncoderPair, LabeledImageDataset
from advpt.errors import CorruptionError, FormatError, InputError, IntegrityError

from conftest import small_dataset

# content hash of the seed-0 bank over the first 128 held-out images, recorded on the first verified build
PINNED_BANK_128 = "f47bfceb97803cf516f45209d553f054fbea28a51c91ee2b861145cd6bec4683"


@pytest.fixture(scope="module")
def bank16(mini):
    return build_bank(mini.pair, small_dataset(mini, 16), bank_attack())


def test_zero_epsilon_bank_is_clean(mini):
    d = small_dataset(mini, 8)
    bank = build_bank(mini.pair, d, AttackConfig(epsilon=0.0))
    assert torch.equal(bank.embeddings, mini.pair.encode_image(d.images))
    assert torch.equal(clean_bank(mini.pair, d).embeddings, bank.embeddings)


def test_single_image_bank(mini):
    d = small_dataset(mini, 1)
    cfg = bank_attack()
    bank = build_bank(mini.pair, d, cfg)
    want = mini.pair.encode_image(pgd_attack(mini.pair, d.images[0], int(d.labels[0]), cfg))
    assert bank.embeddings.shape == (1, mini.pair.embed_dim)
    assert torch.equal(bank.embeddings[0], want)


def test_pinned_bank_hash(mini):
    bank = build_bank(mini.pair, small_dataset(mini, 128), bank_attack())
    assert bank.content_hash() == PINNED_BANK_128


def test_one_pass_invocation_budget(mini):
    d = small_dataset(mini, 5)
    cfg = bank_attack()
    start = dict(mini.pair.calls)
    build_bank(mini.pair, d, cfg)
    fwd = mini.pair.calls["image_forward"] - start.get("image_forward", 0)
    bwd = mini.pair.calls["image_backward"] - start.get("image_backward", 0)
    # t attack steps, one final embedding and one clean reference for the KL objective
    assert fwd <= (cfg.iterations + 2) * len(d)
    assert bwd == cfg.iterations * len(d)


def test_empty_dataset(mini):
    with pytest.raises(InputError):
        build_bank(mini.pair, small_dataset(mini, 0), bank_attack())


class _Drifting(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.W = torch.nn.Parameter(torch.ones(2, 2))

    def forward(self, x):
        with torch.no_grad():
            self.W.add_(1e-3)
        return x.flatten(1) @ self.W.t()


def test_parameter_drift_is_detected():
    pair = EncoderPair(_Drifting(), torch.nn.Linear(1, 2), embed_dim=2, token_dim=1, image_shape=(1, 1, 2), tau=1.0)
    d = LabeledImageDataset(torch.full((2, 1, 1, 2), 0.5), torch.tensor([0, 1]), ["a", "b"])
    with pytest.raises(IntegrityError):
        build_bank(pair, d, AttackConfig(epsilon=0.1, iterations=1))


def test_round_trip_is_bit_exact(tmp_path, bank16):
    save_bank(bank16, tmp_path / "b.bin")
    back = load_bank(tmp_path / "b.bin")
    assert back == bank16
    assert back.embeddings.numpy().tobytes() == bank16.embeddings.numpy().tobytes()
    assert back.provenance == bank16.provenance and back.class_names == bank16.class_names


def test_file_header_layout(tmp_path, bank16):
    save_bank(bank16, tmp_path / "b.bin")
    raw = (tmp_path / "b.bin").read_bytes()
    assert raw[:8] == BANK_MAGIC
    version, N, L, K, tag = struct.unpack_from("<IIIIB", raw, 8)
    assert (version, N, L, K, tag) == (1, 16, bank16.dim, 8, 1)
    first = np.frombuffer(raw, "<f4", count=L, offset=25)
    assert np.array_equal(first, bank16.embeddings[0].numpy())


def test_corrupted_files_fail_closed(tmp_path, bank16):
    save_bank(bank16, tmp_path / "b.bin")
    raw = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptionError):
        load_bank(tmp_path / "t.bin")
    flipped = bytearray(raw)
    flipped[40] ^= 0x10
    (tmp_path / "f.bin").write_bytes(bytes(flipped))
    with pytest.raises(CorruptionError):
        load_bank(tmp_path / "f.bin")
    from advpt import _container

    w = _container.Writer(BANK_MAGIC, 2)
    w.raw(raw[12:-32])
    w.write(tmp_path / "v.bin")
    with pytest.raises(FormatError):
        load_bank(tmp_path / "v.bin")


def test_provenance_mismatch_after_theta_byte_change(mini, bank16):
    verify_provenance(bank16, mini.pair)
    other = mini.pair.to_dtype(torch.float32)
    with torch.no_grad():
        p = next(other.image_encoder.parameters())
        raw = bytearray(p.numpy().tobytes())
        raw[0] ^= 1
        p.copy_(torch.from_numpy(np.frombuffer(bytes(raw), dtype=np.float32).reshape(p.shape).copy()))
    with pytest.raises(IntegrityError):
        verify_provenance(bank16, other)


def test_minibatch_partition(bank16):
    (only,) = list(iterate_minibatches(bank16, 16, seed=0))
    assert sorted(only.indices.tolist()) == list(range(16))
    for epoch in range(3):
        batches = list(iterate_minibatches(bank16, 5, seed=1, epoch=epoch))
        assert [len(b.labels) for b in batches] == [5, 5, 5, 1]
        idx = np.concatenate([b.indices for b in batches])
        assert sorted(idx.tolist()) == list(range(16))
        for b in batches:
            assert torch.equal(b.embeddings, bank16.embeddings[torch.from_numpy(b.indices)])
    a = [b.indices.tolist() for b in iterate_minibatches(bank16, 4, seed=7, epoch=2)]
    b = [b.indices.tolist() for b in iterate_minibatches(bank16, 4, seed=7, epoch=2)]
    c = [b.indices.tolist() for b in iterate_minibatches(bank16, 4, seed=7, epoch=3)]
    assert a == b and a != c


def test_minibatch_size_bounds(bank16):
    with pytest.raises(InputError):
        list(iterate_minibatches(bank16, 17))
    with pytest.raises(InputError):
        list(iterate_minibatches(bank16, 0))


def test_bank_invariants():
    with pytest.raises(InputError):
        AdversarialEmbeddingBank(torch.zeros(3, 4), torch.zeros(2), ["a"])
    with pytest.raises(InputError):
        AdversarialEmbeddingBank(torch.zeros(2, 4), torch.tensor([0, 1]), ["a"])
