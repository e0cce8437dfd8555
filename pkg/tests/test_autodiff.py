import numpy as np
import pytest

from lifi import autodiff as ad
from lifi.autodiff import ShapeError, Tensor

from gradcheck import check

TOL = 1e-4


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, dtype=np.float64)


def assert_grads(f, tensors):
    errs = check(f, tensors)
    for name, e in errs.items():
        assert e < TOL, f"{name}: relative error {e:.2e}"


def test_add_mul_suffix_broadcast(rng):
    a, b, c = t64(rng, 3, 4, 5), t64(rng, 5), t64(rng, 4, 5)
    assert_grads(lambda: ad.sum(ad.mul(ad.add(a, b), c)), {"a": a, "b": b, "c": c})


def test_sub_scale(rng):
    a, b = t64(rng, 2, 3), t64(rng, 3)
    assert_grads(lambda: ad.sum(ad.scale(ad.mul(ad.sub(a, b), ad.sub(a, b)), 0.7)), {"a": a, "b": b})


@pytest.mark.parametrize("op", ["relu", "tanh"])
def test_unary(rng, op):
    a = t64(rng, 4, 6)
    # keep relu away from its kink so finite differences are well defined
    if op == "relu":
        a.data[np.abs(a.data) < 1e-2] = 0.5
    w = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
    assert_grads(lambda: ad.sum(ad.mul(ad.elementwise(op, a), w)), {"a": a})


def test_exp_mean(rng):
    a = t64(rng, 3, 5, scale=0.5)
    assert_grads(lambda: ad.mean(ad.exp(a)), {"a": a})
    w = Tensor(rng.normal(size=(3,)), dtype=np.float64)
    assert_grads(lambda: ad.sum(ad.mul(ad.mean(a, axis=1), w)), {"a": a})


def test_reshape_transpose(rng):
    a = t64(rng, 2, 3, 4)
    w = Tensor(rng.normal(size=(4, 2, 3)), dtype=np.float64)
    assert_grads(lambda: ad.sum(ad.mul(ad.transpose(ad.reshape(a, (2, 3, 4)), (2, 0, 1)), w)), {"a": a})
    w2 = Tensor(rng.normal(size=(2, 4, 3)), dtype=np.float64)
    assert_grads(lambda: ad.sum(ad.mul(ad.swap_last(a), w2)), {"a": a})


@pytest.mark.parametrize("shapes", [((3, 4), (4, 5)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 6)),
                                    ((2, 2, 3, 4), (4, 2))])
def test_matmul(rng, shapes):
    a, b = t64(rng, *shapes[0]), t64(rng, *shapes[1])
    out_shape = (a.data @ b.data).shape
    w = Tensor(rng.normal(size=out_shape), dtype=np.float64)
    assert_grads(lambda: ad.sum(ad.mul(ad.matmul(a, b), w)), {"a": a, "b": b})


def test_matmul_flat_matches_numpy(rng):
    a, b = rng.normal(size=(3, 5, 7)), rng.normal(size=(7, 2))
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-6)


def test_linear(rng):
    x, w, b = t64(rng, 2, 3, 4), t64(rng, 4, 5), t64(rng, 5)
    assert_grads(lambda: ad.sum(ad.tanh(ad.linear(x, w, b))), {"x": x, "w": w, "b": b})


def test_embedding_repeated_ids(rng):
    W = t64(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 0, 2]])
    w = Tensor(rng.normal(size=(2, 3, 3)), dtype=np.float64)
    assert_grads(lambda: ad.sum(ad.mul(ad.embedding(W, ids), w)), {"W": W})


def test_embedding_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        ad.embedding(Tensor(np.zeros((4, 2))), np.array([1, 4]))


def test_softmax_causal(rng):
    s = t64(rng, 2, 4, 4)
    w = Tensor(rng.normal(size=(2, 4, 4)), dtype=np.float64)
    assert_grads(lambda: ad.sum(ad.mul(ad.softmax(ad.causal_mask(s)), w)), {"s": s})
    p = ad.softmax(ad.causal_mask(Tensor(s.data))).data
    assert np.all(np.triu(p[0], 1) == 0)
    np.testing.assert_allclose(p.sum(-1), 1.0)


def test_layernorm(rng):
    x, g, b = t64(rng, 3, 4, 6), t64(rng, 6), t64(rng, 6)
    w = Tensor(rng.normal(size=(3, 4, 6)), dtype=np.float64)
    assert_grads(lambda: ad.sum(ad.mul(ad.layernorm(x, g, b), w)), {"x": x, "g": g, "b": b})


def test_cross_entropy(rng):
    z = t64(rng, 7, 5)
    y = rng.integers(0, 5, size=7)
    assert_grads(lambda: ad.cross_entropy(z, y), {"z": z})
    # brute-force reference
    logp = z.data - np.log(np.exp(z.data).sum(1, keepdims=True))
    assert ad.cross_entropy(Tensor(z.data), y).item() == pytest.approx(-logp[np.arange(7), y].mean())


def test_cross_entropy_errors():
    with pytest.raises(ShapeError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_weighted_sum(rng):
    w, p0, p1, p2 = t64(rng, 2, 3), t64(rng, 2, 4, 5), t64(rng, 2, 4, 5), t64(rng, 2, 4, 5)
    v = Tensor(rng.normal(size=(2, 4, 5)), dtype=np.float64)
    assert_grads(lambda: ad.sum(ad.mul(ad.weighted_sum(w, [p0, p1, p2]), v)),
                 {"w": w, "p0": p0, "p1": p1, "p2": p2})
    ref = sum(w.data[:, k, None, None] * p.data for k, p in enumerate([p0, p1, p2]))
    np.testing.assert_allclose(ad.weighted_sum(Tensor(w.data), [Tensor(p0.data), Tensor(p1.data),
                                                                 Tensor(p2.data)]).data, ref)


def test_composite_shared_subexpression(rng):
    # a tensor used along several paths accumulates all of them
    x, W = t64(rng, 3, 4), t64(rng, 4, 4)
    def f():
        h = ad.matmul(x, W)
        return ad.sum(ad.mul(ad.tanh(h), ad.add(h, x)))
    assert_grads(f, {"x": x, "W": W})


def test_shape_errors():
    a = Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError, match="suffix"):
        ad.add(a, Tensor(np.zeros(2)))
    with pytest.raises(ShapeError, match="inner dimensions"):
        ad.matmul(a, Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ad.weighted_sum(Tensor(np.zeros((2, 3))), [a, a])


def test_tape_replay_once(rng):
    x = t64(rng, 3)
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)
    with pytest.raises(RuntimeError):
        tape.backward(loss)
    tape.reset()
    assert len(tape) == 0


def test_backward_needs_scalar(rng):
    x = t64(rng, 3)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_no_recording_outside_tape(rng):
    x = t64(rng, 3)
    y = ad.sum(ad.mul(x, x))
    with pytest.raises(RuntimeError):
        ad.backward(y)


def test_frozen_inputs_get_no_grad(rng):
    x, w = t64(rng, 2, 3), Tensor(rng.normal(size=(3, 2)))
    with ad.Tape() as tape:
        loss = ad.sum(ad.matmul(x, w))
    tape.backward(loss)
    assert w.grad is None and x.grad is not None


def test_float32_default():
    assert Tensor([1, 2]).dtype == np.float32
