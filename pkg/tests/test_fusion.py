import numpy as np
import pytest

from lifi.adapters import AdapterBank
from lifi.autodiff import Tensor
from lifi.fusion import (AdapterFusion, ControlCode, FusionGate, fused_adapter_output, fusion_weights,
                         make_test_code, weights_at_temperature)
from lifi.transformer import Transformer

from gradcheck import check
from oracles import fusion_weights_ref, reference_logits


def random_pairs(rng, n):
    for _ in range(n):
        K = int(rng.integers(2, 7))
        yield rng.normal(0, 4, size=K), float(np.exp(rng.uniform(-2, 2)))


def test_matches_reference(rng):
    for c, T in random_pairs(rng, 200):
        np.testing.assert_allclose(weights_at_temperature(c, T), fusion_weights_ref(c, T), atol=1e-12)


def test_simplex_shift_argmax_flattening(rng):
    for c, T in random_pairs(rng, 1000):
        w = weights_at_temperature(c, T)
        assert abs(w.sum() - 1) < 1e-6 and np.all(w >= 0)
        np.testing.assert_allclose(weights_at_temperature(c + rng.normal() * 5, T), w, atol=1e-9)
        if np.sort(c)[-1] - np.sort(c)[-2] > 1e-9:
            assert w.argmax() == c.argmax()
        w2 = weights_at_temperature(c, 2 * T)
        ent = lambda p: -(p * np.log(np.clip(p, 1e-300, None))).sum()
        assert w2.max() <= w.max() + 1e-12
        assert ent(w2) >= ent(w) - 1e-12


def test_temperature_limits():
    c = np.array([1.0, 3.0, 2.0])
    np.testing.assert_allclose(weights_at_temperature(c, 1e4), np.full(3, 1 / 3), atol=1e-3)
    np.testing.assert_allclose(weights_at_temperature(c, 1e-3), [0, 1, 0], atol=1e-9)


def test_batched_codes(rng):
    C = rng.normal(size=(4, 3))
    w = fusion_weights(C, 0.3).data
    for i in range(4):
        np.testing.assert_allclose(w[i], fusion_weights_ref(C[i], np.exp(0.3)), atol=1e-12)


def test_tau_gradient(rng):
    tau = Tensor(np.asarray(0.2), requires_grad=True, dtype=np.float64)
    c = rng.normal(size=(3, 4))
    v = Tensor(rng.normal(size=(3, 4)))
    from lifi import autodiff as ad
    assert check(lambda: ad.sum(ad.mul(fusion_weights(c, tau), v)), {"tau": tau})["tau"] < 1e-4


def test_make_test_code():
    c = make_test_code(1, 4.0, 3)
    np.testing.assert_array_equal(c.values, [0, 4, 0])
    with pytest.raises(ValueError):
        make_test_code(3, 4.0, 3)
    with pytest.raises(ValueError):
        make_test_code(0, 0.0, 3)


def test_code_validation():
    with pytest.raises(ValueError):
        ControlCode(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        ControlCode(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        weights_at_temperature([1.0, 2.0], 0.0)


def _trained_like(small_cfg, rng, attrs=("a", "b", "c")):
    bank = AdapterBank(list(attrs), small_cfg, r_ffn=2, seed=1, dtype=np.float64)
    for p in bank.adapters.values():
        p.w_up.data = rng.normal(0, 0.3, size=p.w_up.shape)
    gate = FusionGate(small_cfg.n_layers, dtype=np.float64)
    for t in gate.taus.values():
        t.data = np.asarray(rng.uniform(-1, 1))
    return AdapterFusion(bank, gate)


def test_fused_site_output_matches_sum(small_cfg, rng):
    fusion = _trained_like(small_cfg, rng)
    x = rng.normal(size=(2, 5, small_cfg.d_model))
    code = rng.normal(size=3)
    got = fused_adapter_output(fusion, Tensor(x), 1, "ffn", code).data
    w = fusion_weights_ref(code, fusion.gate.temperature(1, "ffn"))
    want = sum(w[k] * (np.maximum(x @ fusion.bank.get(k, 1, "ffn").w_down.data, 0)
                       @ fusion.bank.get(k, 1, "ffn").w_up.data) for k in range(3))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_fused_model_matches_reference(small_cfg, rng):
    m = Transformer(small_cfg, seed=2, dtype=np.float64)
    fusion = _trained_like(small_cfg, rng)
    code = rng.normal(0, 2, size=3)
    ids = rng.integers(0, small_cfg.vocab_size, size=8)
    adapters = {key: (p.w_down.data, p.w_up.data) for key, p in fusion.bank.adapters.items()}
    weights = {key: fusion_weights_ref(code, np.exp(t.data)) for key, t in fusion.gate.taus.items()}
    want = reference_logits(m.params, small_cfg, ids, adapters, weights)
    np.testing.assert_allclose(m.logits(ids, code=code, fusion=fusion).data, want, atol=1e-9)


def test_identity_at_init(small_cfg, rng):
    m = Transformer(small_cfg, seed=2)
    fusion = AdapterFusion(AdapterBank(["a", "b"], small_cfg, r_ffn=2, seed=5), FusionGate(small_cfg.n_layers))
    ids = rng.integers(0, small_cfg.vocab_size, size=(2, 9))
    np.testing.assert_array_equal(m.logits(ids, code=rng.normal(size=2), fusion=fusion).data, m.logits(ids).data)


def test_batch_code_count_mismatch(small_cfg, rng):
    fusion = _trained_like(small_cfg, rng)
    with pytest.raises(ValueError):
        fusion.site_weights(rng.normal(size=(3, 3)), batch=2)
    with pytest.raises(ValueError):
        fusion.site_weights(rng.normal(size=2), batch=1)


def test_gate_named_round_trip(small_cfg, rng):
    g = FusionGate(2)
    for t in g.taus.values():
        t.data = np.asarray(rng.normal(), dtype=np.float32)
    h = FusionGate(2)
    h.load_named({k: t.data for k, t in g.named_tensors().items()})
    assert all(h.temperature(l, s) == g.temperature(l, s) for (l, s) in g.taus)
    assert len(g.taus) == 4
