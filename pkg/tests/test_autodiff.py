"""Tests for the reverse-mode tape engine."""

import numpy as np
import pytest

from smoothlearn import autodiff as ad
from smoothlearn.errors import ContractError, NumericError

from oracles import central_diff, rel_err


def test_forward_values():
    t = ad.Tape()
    x = t.input(2.0)
    y = t.input(3.0)
    assert float(ad.mul(x, y)) == 6.0
    assert float(ad.relu(t.input(-1.0))) == 0.0
    assert float(ad.relu(t.input(1.5))) == 1.5


def test_relu_subgradient_zero_at_kink():
    t = ad.Tape()
    x = t.input(0.0)
    y = ad.relu(x)
    (g,) = ad.backward(ad.vsum(y), [x])
    assert g == 0.0


def test_matvec_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 3))
    x = rng.normal(size=3)
    t = ad.Tape()
    out = ad.matvec(t.input(a), t.input(x))
    expected = np.array([sum(a[i, j] * x[j] for j in range(3)) for i in range(2)])
    np.testing.assert_allclose(out.value, expected, atol=1e-14)


def test_backward_square():
    t = ad.Tape()
    x = t.input(3.0)
    loss = ad.mul(x, x)
    (g,) = ad.backward(loss, [x])
    assert g == pytest.approx(6.0)


def test_backward_requires_scalar():
    t = ad.Tape()
    x = t.input(np.ones(3))
    with pytest.raises(ContractError):
        ad.backward(x, [x])


def test_untouched_leaf_gets_zero():
    t = ad.Tape()
    x = t.input(2.0)
    unused = t.input(np.ones(4))
    loss = ad.mul(x, x)
    gx, gu = ad.backward(loss, [x, unused])
    assert gx == pytest.approx(4.0)
    np.testing.assert_array_equal(gu, np.zeros(4))


def test_least_squares_gradient_matches_fd():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4))
    b = rng.normal(size=4)
    x0 = rng.normal(size=4)

    def loss_fn(x):
        r = a @ x - b
        return r @ r

    t = ad.Tape()
    x = t.input(x0)
    r = ad.sub(ad.matvec(t.constant(a), x), b)
    loss = ad.dot(r, r)
    (g,) = ad.backward(loss, [x])
    assert rel_err(g, central_diff(loss_fn, x0)) < 1e-6


@pytest.mark.parametrize(
    "name",
    ["exp", "log", "sqrt", "sin", "cos", "tanh", "absval", "relu"],
)
def test_unary_gradients_match_fd(name):
    rng = np.random.default_rng(hash(name) % 2**31)
    fn = getattr(ad, name)
    npfn = {
        "exp": np.exp,
        "log": np.log,
        "sqrt": np.sqrt,
        "sin": np.sin,
        "cos": np.cos,
        "tanh": np.tanh,
        "absval": np.abs,
        "relu": lambda v: np.maximum(v, 0.0),
    }[name]
    for _ in range(100):
        x0 = rng.uniform(0.2, 2.0, size=3)
        if name not in ("log", "sqrt"):
            x0 = x0 * rng.choice([-1.0, 1.0], size=3)
        t = ad.Tape()
        x = t.input(x0)
        loss = ad.vsum(fn(x))
        (g,) = ad.backward(loss, [x])
        fd = central_diff(lambda v: np.sum(npfn(v)), x0)
        assert rel_err(g, fd) < 1e-5


def test_atan2_gradient_matches_fd():
    rng = np.random.default_rng(7)
    for _ in range(50):
        y0, x0 = rng.normal(size=2)
        if abs(x0) < 0.1 and abs(y0) < 0.1:
            continue
        t = ad.Tape()
        y = t.input(y0)
        x = t.input(x0)
        loss = ad.atan2(y, x)
        gy, gx = ad.backward(loss, [y, x])
        fd = central_diff(lambda v: np.arctan2(v[0], v[1]), np.array([y0, x0]))
        assert rel_err(np.array([gy, gx]), fd) < 1e-5


def test_matrix_ops_gradients_match_fd():
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))
    v0 = rng.normal(size=4)

    def loss_a(aflat):
        a = aflat.reshape(3, 4)
        return np.sum((a @ b0) ** 2) + np.sum((a @ v0) ** 2)

    t = ad.Tape()
    a = t.input(a0)
    mm = ad.matmul(a, t.constant(b0))
    mv = ad.matvec(a, t.constant(v0))
    loss = ad.add(ad.vsum(ad.mul(mm, mm)), ad.dot(mv, mv))
    (g,) = ad.backward(loss, [a])
    assert rel_err(g.ravel(), central_diff(loss_a, a0.ravel())) < 1e-6


def test_structural_ops_gradients():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=5)

    def loss_fn(x):
        parts = np.concatenate([x[1:3] * 2.0, x[3:4]])
        return np.sum(parts**2) + x[0] ** 2

    t = ad.Tape()
    x = t.input(x0)
    parts = ad.concat([ad.mul(x[slice(1, 3)], 2.0), x[slice(3, 4)]])
    loss = ad.add(ad.dot(parts, parts), ad.mul(x[0], x[0]))
    (g,) = ad.backward(loss, [x])
    assert rel_err(g, central_diff(loss_fn, x0)) < 1e-6


def test_scale_rows_and_stack_gradients():
    rng = np.random.default_rng(5)
    m0 = rng.normal(size=(3, 2))
    w0 = rng.normal(size=3)

    def loss_fn(theta):
        m = theta[:6].reshape(3, 2)
        w = theta[6:]
        return np.sum((m * w[:, None]) ** 2)

    t = ad.Tape()
    m = t.input(m0)
    w = t.input(w0)
    s = ad.scale_rows(m, w)
    loss = ad.vsum(ad.mul(s, s))
    gm, gw = ad.backward(loss, [m, w])
    fd = central_diff(loss_fn, np.concatenate([m0.ravel(), w0]))
    assert rel_err(np.concatenate([gm.ravel(), gw]), fd) < 1e-6


def _random_spd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def test_solve_identity():
    t = ad.Tape()
    b = t.input(np.array([1.0, -2.0, 3.0]))
    x = ad.solve_spd(t.constant(np.eye(3)), b)
    np.testing.assert_allclose(x.value, b.value, atol=1e-14)
    (g,) = ad.backward(ad.dot(x, x), [b])
    np.testing.assert_allclose(g, 2 * b.value, atol=1e-12)


def test_solve_gradient_matches_fd():
    rng = np.random.default_rng(11)
    a0 = _random_spd(rng, 3)
    b0 = rng.normal(size=3)

    def loss_fn(theta):
        a = theta[:9].reshape(3, 3)
        a = 0.5 * (a + a.T)
        b = theta[9:]
        x = np.linalg.solve(a, b)
        return x @ x

    t = ad.Tape()
    a = t.input(a0)
    asym = ad.mul(0.5, ad.add(a, ad.transpose(a)))
    b = t.input(b0)
    x = ad.solve_spd(asym, b)
    loss = ad.dot(x, x)
    ga, gb = ad.backward(loss, [a, b])
    fd = central_diff(loss_fn, np.concatenate([a0.ravel(), b0]))
    assert rel_err(np.concatenate([ga.ravel(), gb]), fd) < 1e-5


def test_solve_gradient_wrt_diagonal_matches_symbolic():
    # For diagonal A and loss x^T x with x = A^-1 b: d loss / d A_ii = -2 x_i^2 / A_ii.
    rng = np.random.default_rng(13)
    d0 = rng.uniform(1.0, 3.0, 3)
    b0 = rng.normal(size=3)
    t = ad.Tape()
    a = t.input(np.diag(d0))
    x = ad.solve_spd(a, t.constant(b0))
    loss = ad.dot(x, x)
    (ga,) = ad.backward(loss, [a])
    xs = b0 / d0
    np.testing.assert_allclose(np.diag(ga), -2 * xs**2 / d0, rtol=1e-10)


def test_chain_solve_gradient_matches_fd():
    rng = np.random.default_rng(17)
    b1 = _random_spd(rng, 2)
    b2 = _random_spd(rng, 2)
    off = rng.normal(size=(2, 2)) * 0.3
    g0 = rng.normal(size=4)

    def assemble(theta):
        h = np.zeros((4, 4))
        h[:2, :2] = theta[:4].reshape(2, 2)
        h[2:, 2:] = theta[4:8].reshape(2, 2)
        h[:2, 2:] = theta[8:12].reshape(2, 2)
        h[2:, :2] = theta[8:12].reshape(2, 2).T
        return h

    def loss_fn(theta):
        x = np.linalg.solve(assemble(theta), theta[12:])
        return x @ x

    from smoothlearn.solvers import _cholesky_resolver

    t = ad.Tape()
    vb1 = t.input(b1)
    vb2 = t.input(b2)
    voff = t.input(off)
    vg = t.input(g0)
    placements = [(0, 0), (2, 2), (0, 2), (2, 0)]
    blocks = [vb1, vb2, voff, ad.transpose(voff)]
    x = ad.chain_solve(vg, blocks, placements, _cholesky_resolver(4, placements), 4)
    loss = ad.dot(x, x)
    g_b1, g_b2, g_off, g_g = ad.backward(loss, [vb1, vb2, voff, vg])
    theta0 = np.concatenate([b1.ravel(), b2.ravel(), off.ravel(), g0])
    fd = central_diff(loss_fn, theta0)
    got = np.concatenate([g_b1.ravel(), g_b2.ravel(), g_off.ravel(), g_g])
    assert rel_err(got, fd) < 1e-5


def test_jacobian_blocks_match_fd():
    rng = np.random.default_rng(19)
    x0 = rng.normal(size=3)
    t = ad.Tape()
    x = t.input(x0)
    r = ad.stack(
        [
            ad.mul(x[0], x[1]),
            ad.add(ad.exp(x[2]), x[0]),
        ]
    )
    (jac,) = ad.jacobian_blocks(r, [x])
    expected = np.array(
        [[x0[1], x0[0], 0.0], [1.0, 0.0, np.exp(x0[2])]]
    )
    np.testing.assert_allclose(jac, expected, rtol=1e-12)


def test_lifted_jacobian_is_differentiable():
    # r(x, w) = w * x^2 so J = dr/dx = 2 w x; then d(sum J)/dw must be 2x.
    t = ad.Tape()
    w = t.input(1.5)
    x = t.input(np.array([2.0]))
    r = ad.stack([ad.mul(w, ad.mul(x[0], x[0]))])
    (jac,) = ad.jacobian_blocks(r, [x], lift=True)
    assert isinstance(jac, ad.Var)
    assert float(jac.value[0, 0]) == pytest.approx(2 * 1.5 * 2.0)
    (gw,) = ad.backward(ad.vsum(jac), [w])
    assert gw == pytest.approx(2 * 2.0)


def test_adjoint_linearity():
    rng = np.random.default_rng(23)
    x0 = rng.normal(size=4)
    alpha, beta = 0.7, -1.3

    def grads_of(fn):
        t = ad.Tape()
        x = t.input(x0)
        (g,) = ad.backward(fn(x), [x])
        return g

    f = lambda x: ad.dot(x, x)
    g = lambda x: ad.vsum(ad.exp(ad.mul(0.3, x)))
    combo = lambda x: ad.add(ad.mul(alpha, f(x)), ad.mul(beta, g(x)))
    lhs = grads_of(combo)
    rhs = alpha * grads_of(f) + beta * grads_of(g)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_gradient_determinism():
    def run():
        rng = np.random.default_rng(29)
        t = ad.Tape()
        x = t.input(rng.normal(size=6))
        a = t.constant(rng.normal(size=(6, 6)))
        r = ad.matvec(a, ad.tanh(x))
        (g,) = ad.backward(ad.dot(r, r), [x])
        return g

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_nan_raises_numeric_error():
    t = ad.Tape()
    x = t.input(-1.0)
    with pytest.raises(NumericError):
        ad.log(x)


def test_shape_mismatch_raises():
    t = ad.Tape()
    with pytest.raises(ContractError):
        ad.add(t.input(np.ones(2)), t.input(np.ones(3)))
