import numpy as np
import pytest

from lifi.adapters import AdapterBank
from lifi.artifacts import load_classifier, load_fusion, load_lm, save_classifier, save_fusion, save_lm
from lifi.checkpoint import (BadMagicError, Checkpoint, CheckpointError, ChecksumMismatchError,
                             TruncatedCheckpointError, VersionMismatchError, decode_checkpoint, encode_checkpoint,
                             load_checkpoint, save_checkpoint)
from lifi.classifier import AttributeClassifier
from lifi.fusion import AdapterFusion, FusionGate
from lifi.transformer import ModelConfig, Transformer
from lifi.vocab import Vocab


def blob(rng):
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b/c": rng.normal(size=(5,)).astype(np.float32),
               "s": np.asarray(1.5, dtype=np.float32)}
    return encode_checkpoint(Checkpoint({"kind": "x", "n": 3}, tensors)), tensors


def test_round_trip_bit_exact(tmp_path, small_cfg):
    m = Transformer(small_cfg, seed=4)
    save_lm(tmp_path / "m.ckpt", m, Vocab("abcdefghi"))
    m2, vocab, _ = load_lm(tmp_path / "m.ckpt")
    assert vocab == Vocab("abcdefghi")
    for k, t in m.params.items():
        assert t.data.tobytes() == m2.params[k].data.tobytes()
    assert m.checksum() == m2.checksum()


def test_special_values_round_trip(rng):
    x = np.array([0.0, -0.0, 1e-45, 3.4e38, -1.17549435e-38], dtype=np.float32)
    ck = decode_checkpoint(encode_checkpoint(Checkpoint({}, {"x": x})))
    assert ck.tensors["x"].tobytes() == x.tobytes()


def test_empty_directory(tmp_path):
    save_checkpoint(tmp_path / "e.ckpt", {})
    ck = load_checkpoint(tmp_path / "e.ckpt")
    assert ck.tensors == {} and ck.config == {}


def test_payload_byte_flip(rng):
    buf, tensors = blob(rng)
    payload_start = len(buf) - 32 - sum(t.nbytes for t in tensors.values())
    for pos in rng.integers(payload_start, len(buf) - 32, size=20):
        bad = bytearray(buf)
        bad[pos] ^= 0x01
        with pytest.raises(ChecksumMismatchError):
            decode_checkpoint(bytes(bad))


def test_any_byte_flip_rejected(rng):
    buf, _ = blob(rng)
    for pos in range(len(buf)):
        bad = bytearray(buf)
        bad[pos] ^= 0x40
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(bad))


def test_truncation(rng):
    buf, _ = blob(rng)
    for n in range(len(buf)):
        with pytest.raises(CheckpointError):
            decode_checkpoint(buf[:n])
    with pytest.raises(TruncatedCheckpointError):
        decode_checkpoint(buf[:len(buf) // 2])
    with pytest.raises(TruncatedCheckpointError):
        decode_checkpoint(buf[:-5])


def test_version_and_magic(rng):
    buf, _ = blob(rng)
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(encode_checkpoint(Checkpoint({}, {}, version=2)))
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"NOPE" + buf[4:])


def test_trailing_garbage(rng):
    buf, _ = blob(rng)
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf + b"\0" * 40)


def test_non_finite_refused(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", {"x": np.array([np.inf])})


def test_kind_checked(tmp_path, small_cfg):
    save_lm(tmp_path / "m.ckpt", Transformer(small_cfg), Vocab("abcdefghi"))
    with pytest.raises(CheckpointError, match="classifier"):
        load_classifier(tmp_path / "m.ckpt")


def test_fusion_round_trip(tmp_path, small_cfg, rng):
    bank = AdapterBank(["p", "q"], small_cfg, r_ffn=2, seed=3)
    for p in bank.adapters.values():
        p.w_up.data = rng.normal(size=p.w_up.shape).astype(np.float32)
    gate = FusionGate(small_cfg.n_layers)
    gate.taus[(1, "mha")].data = np.asarray(0.7, dtype=np.float32)
    save_fusion(tmp_path / "a.ckpt", AdapterFusion(bank, gate), small_cfg)
    f2, meta = load_fusion(tmp_path / "a.ckpt")
    assert meta["attributes"] == ["p", "q"]
    for k, t in AdapterFusion(bank, gate).parameters().items():
        assert t.data.tobytes() == f2.parameters()[k].data.tobytes()


def test_classifier_round_trip(tmp_path):
    vocab = Vocab("abc ")
    clf = AttributeClassifier(vocab, ["p", "q"], ModelConfig(n_layers=1, d_model=8, n_heads=2,
                                                             vocab_size=len(vocab), n_ctx=8), seed=1)
    with pytest.raises(CheckpointError):
        save_classifier(tmp_path / "c.ckpt", clf)
    clf.trained = True
    save_classifier(tmp_path / "c.ckpt", clf)
    c2, _ = load_classifier(tmp_path / "c.ckpt")
    np.testing.assert_array_equal(c2.control_codes(["ab c"]), clf.control_codes(["ab c"]))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")
