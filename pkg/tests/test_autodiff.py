import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmpg import autodiff as ad
from mmpg.autodiff import Tensor
from mmpg.errors import BadMagic, NotScalar, ShapeMismatch, TruncatedPayload


def _leaf(values, name="x"):
    return Tensor(values, requires_grad=True, name=name)


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    """Scalar sum(out * proj) so every output entry contributes."""
    return ad.sum(ad.mul(out, Tensor(proj.reshape(out.shape))))


def _check(build, leaves, seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=build().shape)
    rows = ad.finite_difference_check(lambda: _projected(build(), proj), leaves, rng, n_samples=30)
    worst = max(r[4] for r in rows)
    assert worst < tol, rows


def _away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)




@pytest.mark.parametrize("seed", range(3))
def test_binary_ops(seed):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng.normal(size=(4, 3)), "a"), _leaf(rng.normal(size=(3, 5)), "b")
    _check(lambda: ad.matmul(a, b), [a, b], seed)
    c, d = _leaf(rng.normal(size=(4, 3)), "c"), _leaf(rng.normal(size=(4, 3)), "d")
    _check(lambda: ad.add(c, d), [c, d], seed)
    _check(lambda: ad.mul(c, d), [c, d], seed)
    row = _leaf(rng.normal(size=(1, 3)), "row")
    _check(lambda: ad.add(c, row), [c, row], seed)
    _check(lambda: ad.concat([c, d], axis=1), [c, d], seed)
    _check(lambda: ad.concat([c, row], axis=0), [c, row], seed)


@pytest.mark.parametrize("seed", range(3))
def test_unary_ops(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(_away_from_zero(rng, (3, 5)))
    pos = _leaf(rng.uniform(0.5, 3.0, size=(3, 5)), "pos")
    _check(lambda: ad.relu(x), [x], seed)
    _check(lambda: ad.sigmoid(x), [x], seed)
    _check(lambda: ad.softmax(x), [x], seed)
    _check(lambda: ad.log_softmax(x), [x], seed)
    _check(lambda: ad.log(pos), [pos], seed)
    _check(lambda: ad.scale(x, -2.5), [x], seed)
    _check(lambda: ad.mean(x, axis=0), [x], seed)
    _check(lambda: ad.reshape(ad.mean(x), (1, 1)), [x], seed)
    _check(lambda: ad.sum(x, axis=0), [x], seed)
    _check(lambda: ad.reshape(x, (5, 3)), [x], seed)
    _check(lambda: ad.reshape(ad.cv_squared(pos), (1, 1)), [pos], seed)


@pytest.mark.parametrize("seed", range(3))
def test_indexing_and_mixing_ops(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng.normal(size=(6, 4)))
    idx = rng.integers(0, 6, size=9)
    _check(lambda: ad.gather(x, idx), [x], seed)
    _check(lambda: ad.scatter_add(x, np.array([0, 2, 2, 1, 0, 2]), 3), [x], seed)
    row = _leaf(rng.permutation(np.linspace(-1, 1, 7)).reshape(1, 7), "row")
    _check(lambda: ad.top_k(row, 3)[0], [row], seed)
    parts = [_leaf(rng.normal(size=(4, 2)), f"p{k}") for k in range(3)]
    w = _leaf(rng.uniform(0.1, 1, size=(1, 3)), "w")
    _check(lambda: ad.weighted_sum(parts, w), [*parts, w], seed)
    logits = _leaf(rng.normal(size=(1, 5)), "logits")
    _check(lambda: ad.reshape(ad.nll(ad.log_softmax(logits), 2), (1, 1)), [logits], seed)
    _check(lambda: ad.reshape(ad.bce_with_logits(logits, [1, 0, 0, 1, 1]), (1, 1)), [logits], seed)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_mean_relu_wx_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    W = _leaf(rng.normal(size=(5, 4)), "W")
    x = _leaf(rng.normal(size=(4, 3)), "x")
    pre = W.values @ x.values
    if np.abs(pre).min() < 1e-3:  # a kink within reach of the finite-difference step
        return
    rows = ad.finite_difference_check(lambda: ad.mean(ad.relu(ad.matmul(W, x))), [W, x], rng, n_samples=20)
    assert max(r[4] for r in rows) < 1e-6


def test_sum_and_square_examples():
    x = _leaf([[1.0, 2.0, 3.0]])
    ad.backward(ad.sum(x))
    assert x.grad.tolist() == [[1.0, 1.0, 1.0]]
    y = _leaf([[3.0]])
    ad.backward(ad.sum(ad.mul(y, y)))
    assert y.grad.tolist() == [[6.0]]


def test_gradients_accumulate_and_shared_nodes():
    x = _leaf([[2.0]])
    loss = ad.sum(ad.add(ad.mul(x, x), x))  # x^2 + x, x used three times
    ad.backward(loss)
    assert x.grad[0, 0] == 5.0
    ad.backward(ad.sum(ad.mul(x, x)))
    assert x.grad[0, 0] == 9.0
    x.zero_grad()
    assert x.grad is None


def test_not_scalar():
    with pytest.raises(NotScalar):
        ad.backward(_leaf(np.ones((2, 2))))


def test_shape_errors():
    a = _leaf(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        ad.matmul(a, a)
    with pytest.raises(ShapeMismatch):
        ad.add(a, Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeMismatch):
        ad.mul(a, Tensor(np.ones((2, 2))))
    with pytest.raises(ShapeMismatch):
        ad.gather(a, [5])
    with pytest.raises(ShapeMismatch):
        ad.top_k(a, 1)
    with pytest.raises(ShapeMismatch):
        ad.weighted_sum([a, a], Tensor(np.ones((1, 3))))
    with pytest.raises(ShapeMismatch):
        ad.concat([a, Tensor(np.ones((3, 3)))], axis=1)


def test_softmax_uniform():
    out = ad.softmax(Tensor(np.full((1, 10), 3.7)))
    np.testing.assert_allclose(out.values, 0.1, atol=1e-15)


def test_top_k_gradient_is_zero_off_selection():
    a = _leaf([[0.5, 2.0, -1.0, 2.0, 0.1]])
    vals, idx = ad.top_k(a, 2)
    assert idx.tolist() == [1, 3]  # tie broken by lower index
    ad.backward(ad.sum(ad.mul(vals, Tensor([[3.0, 4.0]]))))
    assert a.grad.tolist() == [[0.0, 3.0, 0.0, 4.0, 0.0]]


def test_gather_scatter_adjoint():
    rng = np.random.default_rng(0)
    idx = rng.permutation(7)
    x = _leaf(rng.normal(size=(7, 3)))
    g = rng.normal(size=(7, 3))
    ad.backward(ad.sum(ad.mul(ad.scatter_add(ad.gather(x, idx), idx, 7), Tensor(g))))
    np.testing.assert_allclose(x.grad, g, atol=1e-15)
    # <gather(x), y> == <x, scatter(y)>
    y = rng.normal(size=(5, 3))
    j = rng.integers(0, 7, size=5)
    lhs = np.sum(ad.gather(Tensor(x.values), j).values * y)
    rhs = np.sum(x.values * ad.scatter_add(Tensor(y), j, 7).values)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(3)
        W = _leaf(rng.normal(size=(6, 6)))
        x = Tensor(rng.normal(size=(4, 6)))
        ad.backward(ad.mean(ad.softmax(ad.relu(ad.matmul(x, W)))))
        return W.grad

    assert np.array_equal(run(), run())


# --------------------------------------------------------------------------- optimiser


def test_sgd_examples():
    p, v = ad.sgd_momentum_step([np.array([1.0])], [np.array([1.0])], [np.zeros(1)], 0.1, 0.0, 0.0)
    assert p[0][0] == pytest.approx(0.9)
    p, v = ad.sgd_momentum_step([np.array([2.0])], [np.zeros(1)], [np.array([4.0])], 0.1, 0.9, 0.0)
    assert v[0][0] == pytest.approx(3.6)
    p0 = np.array([2.0])
    p, _ = ad.sgd_momentum_step([p0], [np.zeros(1)], [np.zeros(1)], 0.1, 0.9, 0.0)
    assert p[0][0] == 2.0
    with pytest.raises(ShapeMismatch):
        ad.sgd_momentum_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9, 0.0)


def test_sgd_three_steps_on_quadratic():
    # f(x) = 0.5 * a * x^2, grad = a x
    a, lr, mu, wd = 3.0, 0.05, 0.9, 0.01
    x = _leaf([[1.5]])
    opt = ad.SGD([x], lr=lr, momentum=mu, weight_decay=wd)
    ref_x, ref_v = 1.5, 0.0
    for _ in range(3):
        opt.zero_grad()
        ad.backward(ad.scale(ad.sum(ad.mul(x, x)), 0.5 * a))
        opt.step()
        ref_v = mu * ref_v + (a * ref_x + wd * ref_x)
        ref_x = ref_x - lr * ref_v
        assert x.values[0, 0] == pytest.approx(ref_x, abs=1e-14)


def test_multistep_schedule():
    lrs = [ad.multistep_lr(1e-2, e, 20) for e in range(20)]
    assert lrs[11] == 1e-2 and lrs[12] == pytest.approx(1e-3) and lrs[16] == pytest.approx(1e-3)
    assert lrs[17] == pytest.approx(1e-4) and lrs[19] == pytest.approx(1e-4)


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "m.ckpt"
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([[np.pi]]), "empty": np.zeros((0, 4))}
    ad.save_checkpoint(path, tensors, {"note": "x"})
    back, meta = ad.load_checkpoint(path)
    assert meta == {"note": "x"}
    for k, v in tensors.items():
        assert back[k].shape == v.shape and np.array_equal(back[k], v)
    raw = path.read_bytes()
    assert raw[:8] == ad.CKPT_MAGIC
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(BadMagic):
        ad.load_checkpoint(tmp_path / "bad")
    for cut in (12, 40, len(raw) - 1):
        (tmp_path / "cut").write_bytes(raw[:cut])
        with pytest.raises(TruncatedPayload):
            ad.load_checkpoint(tmp_path / "cut")
