"""Autodiff correctness against central finite differences and, for the
softmax backward, a high-precision mpmath oracle."""

import numpy as np
import pytest

from relvid import tensor as tz
from relvid.errors import GraphError
from relvid.tensor import Tensor


def fd_grad(f, x, eps=1e-6):
    """Central finite differences of a scalar function over array x.

    ``f`` must recompute the forward pass from the (mutated) buffer.
    """
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2.0 * eps)
    return g


def check_grads(build, params, tol=1e-6):
    """backward() grads vs finite differences for every named param."""
    loss = build()
    loss.backward()
    got = {name: p.grad.copy() for name, p in params.items()}
    for name, p in params.items():
        want = fd_grad(lambda: build().item(), p.data)
        err = np.abs(got[name] - want).max()
        scale = max(np.abs(want).max(), 1.0)
        assert err / scale < tol, f"{name}: max abs err {err}"


def test_add_mul_broadcasting():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    c = Tensor(rng.standard_normal(()), requires_grad=True)

    def build():
        return ((a * b + c) * (a + 2.0)).sum()

    check_grads(build, {"a": a, "b": b, "c": c})


def test_sub_div_neg_pow():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((2, 3)) + 3.0, requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)) + 3.0, requires_grad=True)

    def build():
        return ((a - b) / (b * b) + (-a) ** 3).mean()

    check_grads(build, {"a": a, "b": b})


def test_exp_log_sqrt_tanh_gelu():
    rng = np.random.default_rng(2)
    a = Tensor(rng.uniform(0.5, 2.0, (4, 2)), requires_grad=True)

    def build():
        return (tz.exp(a) + tz.log(a) + tz.sqrt(a)
                + tz.tanh(a) + tz.gelu(a)).sum()

    check_grads(build, {"a": a}, tol=1e-5)


def test_matmul_grads():
    rng = np.random.default_rng(3)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

    def build():
        return tz.matmul(a, b).sum()

    check_grads(build, {"a": a, "b": b})


def test_matmul_batched():
    rng = np.random.default_rng(4)
    a = Tensor(rng.standard_normal((5, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((5, 4, 2)), requires_grad=True)

    def build():
        return (tz.matmul(a, b) ** 2).mean()

    check_grads(build, {"a": a, "b": b})


def test_matmul_t_matches_explicit_transpose():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((7, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    np.testing.assert_array_equal(
        tz.matmul_t(x, w).data, x.data @ w.data.T
    )

    def build():
        return (tz.matmul_t(x, w) * 0.3).sum()

    check_grads(build, {"x": x, "w": w})


def test_matmul_t_batched_input():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)

    def build():
        return (tz.matmul_t(x, w) ** 2).sum()

    check_grads(build, {"x": x, "w": w})


def test_transpose_reshape_getitem_concat():
    rng = np.random.default_rng(7)
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)

    def build():
        at = tz.transpose(a, (1, 0, 2)).reshape((3, 8))
        cat = tz.concat([at, b[:, :4], b[:, :4]], axis=1)
        return (cat[1:, 2:7] * 1.7).sum()

    check_grads(build, {"a": a, "b": b})


def test_gather_rows_grad():
    rng = np.random.default_rng(8)
    table = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    ids = [0, 2, 2, 4]

    def build():
        return (tz.gather_rows(table, ids) ** 2).sum()

    loss = build()
    loss.backward()
    # row 2 is gathered twice so its gradient doubles
    want = np.zeros((5, 3))
    for i in ids:
        want[i] += 2.0 * table.data[i]
    np.testing.assert_allclose(table.grad, want, atol=1e-12)


def test_sum_mean_axis_keepdims():
    rng = np.random.default_rng(9)
    a = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)

    def build():
        s = tz.sum_(a, axis=1, keepdims=True)
        m = tz.mean(a, axis=(0, 2))
        return (s * s).sum() + (m * 3.0).sum()

    check_grads(build, {"a": a})


def test_softmax_grad_against_mpmath():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 30
    x = np.array([0.3, -1.2, 2.0, 0.05])
    w = np.array([1.0, -0.5, 0.25, 2.0])

    t = Tensor(x, requires_grad=True)
    loss = (tz.softmax(t, axis=-1) * Tensor(w)).sum()
    loss.backward()

    xs = [mp.mpf(float(v)) for v in x]
    exps = [mp.e ** v for v in xs]
    z = sum(exps)
    p = [e / z for e in exps]
    dot = sum(wi * pi for wi, pi in zip(w, p))
    want = np.array([float(p[j] * (w[j] - dot)) for j in range(4)])
    np.testing.assert_allclose(t.grad, want, rtol=1e-12, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(10)
    s = tz.softmax(Tensor(rng.standard_normal((6, 9))), axis=-1)
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)


def test_l2_normalize_grad_and_zero_row():
    rng = np.random.default_rng(11)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)

    def build():
        return (tz.l2_normalize(a, axis=-1) * Tensor(np.arange(4.0))).sum()

    check_grads(build, {"a": a}, tol=1e-5)

    z = Tensor(np.zeros((2, 3)))
    with pytest.warns(RuntimeWarning):
        out = tz.l2_normalize(z, axis=-1)
    np.testing.assert_array_equal(out.data, np.zeros((2, 3)))


def test_reuse_accumulates_gradient():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = (x * x + x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0, atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()


def test_backward_twice_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with tz.no_grad():
        assert not tz.grad_enabled()
        y = (x * 2.0).sum()
    assert tz.grad_enabled()
    assert y._parents == () and y._bw is None
    assert not y.requires_grad


def test_detach_cuts_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 3.0).detach()
    assert y._parents == ()
    loss = (y * Tensor(np.ones(3), requires_grad=True)).sum()
    loss.backward()
    assert x.grad is None


def test_initializer_determinism():
    a = tz.gaussian((4, 5), np.random.default_rng(42), std=0.5)
    b = tz.gaussian((4, 5), np.random.default_rng(42), std=0.5)
    np.testing.assert_array_equal(a.data, b.data)
    u = tz.uniform((3,), np.random.default_rng(7), low=-1, high=1)
    v = tz.uniform((3,), np.random.default_rng(7), low=-1, high=1)
    np.testing.assert_array_equal(u.data, v.data)
