import numpy as np
import pytest

from lifi import autodiff as ad
from lifi.transformer import ModelConfig, Transformer, param_count, sequence_nll

from gradcheck import check
from oracles import reference_logits


def test_param_count_closed_form(rng):
    for _ in range(5):
        d = int(rng.choice([8, 16, 24]))
        cfg = ModelConfig(n_layers=int(rng.integers(1, 4)), d_model=d, n_heads=int(rng.choice([1, 2, 4])),
                          vocab_size=int(rng.integers(5, 40)), n_ctx=int(rng.integers(2, 50)))
        m = Transformer(cfg, seed=1)
        assert m.num_params() == param_count(cfg)


def test_desk_config_size():
    cfg = ModelConfig(n_layers=4, d_model=64, n_heads=4, vocab_size=40, n_ctx=128)
    assert cfg.d_ff == 256
    assert param_count(cfg) == Transformer(cfg).num_params()


def test_forward_matches_reference(small_cfg, rng):
    m = Transformer(small_cfg, seed=3, dtype=np.float64)
    # perturb the zero biases and unit gains so the reference sees every term
    for t in m.params.values():
        t.data = t.data + rng.normal(0, 0.05, size=t.shape)
    ids = rng.integers(0, small_cfg.vocab_size, size=9)
    got = m.logits(ids).data
    np.testing.assert_allclose(got, reference_logits(m.params, small_cfg, ids), atol=1e-9)


def test_bidirectional_matches_reference(small_cfg, rng):
    m = Transformer(small_cfg, seed=4, dtype=np.float64, causal=False)
    ids = rng.integers(0, small_cfg.vocab_size, size=7)
    np.testing.assert_allclose(m.logits(ids).data, reference_logits(m.params, small_cfg, ids, causal=False),
                               atol=1e-9)


def test_causality(small_cfg, rng):
    m = Transformer(small_cfg, seed=5)
    ids = rng.integers(0, small_cfg.vocab_size, size=10)
    other = ids.copy()
    other[6:] = (other[6:] + 1) % small_cfg.vocab_size
    a, b = m.logits(ids).data, m.logits(other).data
    np.testing.assert_array_equal(a[:6], b[:6])
    assert not np.allclose(a[6:], b[6:])


def test_batch_equals_single(small_cfg, rng):
    m = Transformer(small_cfg, seed=6)
    ids = rng.integers(0, small_cfg.vocab_size, size=(3, 8))
    batch = m.logits(ids).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], m.logits(ids[i]).data, rtol=1e-5, atol=1e-6)


def test_loss_is_mean_next_token_nll(small_cfg, rng):
    m = Transformer(small_cfg, seed=7, dtype=np.float64)
    ids = rng.integers(0, small_cfg.vocab_size, size=12)
    z = reference_logits(m.params, small_cfg, ids[:-1])
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    want = -np.mean([logp[i, ids[i + 1]] for i in range(len(ids) - 1)])
    assert sequence_nll(m, ids) == pytest.approx(want, rel=1e-9)


def test_gradients_all_params(tiny_cfg, rng):
    m = Transformer(tiny_cfg, seed=8, dtype=np.float64)
    for t in m.params.values():
        t.data = t.data + rng.normal(0, 0.1, size=t.shape)
    m.unfreeze()
    ids = rng.integers(0, tiny_cfg.vocab_size, size=(2, 6))
    errs = check(lambda: m.loss(ids), m.params, max_entries=12)
    assert max(errs.values()) < 1e-4, errs


def test_freeze_blocks_gradients(tiny_cfg, rng):
    m = Transformer(tiny_cfg, seed=9)
    m.freeze()
    x = ad.Tensor(np.float32(0.0), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.add(m.loss(rng.integers(0, tiny_cfg.vocab_size, size=5)), x)
    tape.backward(loss)
    assert all(t.grad is None for t in m.params.values())


def test_checksum_tracks_values(tiny_cfg):
    a, b = Transformer(tiny_cfg, seed=1), Transformer(tiny_cfg, seed=1)
    assert a.checksum() == b.checksum()
    b.params["tok_emb"].data[0, 0] += 1e-3
    assert a.checksum() != b.checksum()


@pytest.mark.parametrize("kwargs", [dict(d_model=10, n_heads=3), dict(n_layers=0), dict(n_ctx=1)])
def test_bad_config(kwargs):
    base = dict(n_layers=1, d_model=8, n_heads=2, vocab_size=10, n_ctx=8)
    base.update(kwargs)
    with pytest.raises(ValueError):
        ModelConfig(**base)


def test_input_errors(tiny_cfg):
    m = Transformer(tiny_cfg)
    with pytest.raises(ValueError, match="n_ctx"):
        m.logits(np.zeros(tiny_cfg.n_ctx + 1, dtype=int))
    with pytest.raises(ValueError, match="out of range"):
        m.logits(np.array([0, tiny_cfg.vocab_size]))
    with pytest.raises(ValueError):
        m.loss(np.array([1]))


def test_config_round_trip(small_cfg):
    assert ModelConfig.from_dict(small_cfg.to_dict()) == small_cfg
