"""Tests for discretization rules, kernel materialization, and recurrences."""

import numpy as np
import pytest

from lsvae import numerics as nm
from lsvae import ssm


def make_dense(n, seed=0, dt=0.25):
    rng = np.random.default_rng(seed)
    cont = ssm.ContinuousSSM(
        a=ssm.hippo_legs(n),
        b=rng.standard_normal(n),
        c=rng.standard_normal(n),
        d=float(rng.standard_normal()),
        e=rng.standard_normal(n),
        f=float(rng.standard_normal()),
    )
    return ssm.discretize_bilinear(cont, dt)


def make_diag(n, seed=1, dt=0.25):
    rng = np.random.default_rng(seed)
    cont = ssm.ContinuousSSM(
        a=-(np.arange(n) + 1.0),
        b=rng.standard_normal(n),
        c=rng.standard_normal(n),
        d=float(rng.standard_normal()),
        e=rng.standard_normal(n),
        f=float(rng.standard_normal()),
    )
    return ssm.discretize_bilinear(cont, dt)


# ---------------------------------------------------------------------------
# memory matrix


def test_hippo_frozen_values():
    assert np.array_equal(ssm.hippo_legs(1), [[-1.0]])
    s3 = np.sqrt(3.0)
    assert np.allclose(ssm.hippo_legs(2), [[-1.0, 0.0], [-s3, -2.0]], atol=1e-15)
    expected4 = np.array(
        [
            [-1.0, 0.0, 0.0, 0.0],
            [-np.sqrt(3.0), -2.0, 0.0, 0.0],
            [-np.sqrt(5.0), -np.sqrt(15.0), -3.0, 0.0],
            [-np.sqrt(7.0), -np.sqrt(21.0), -np.sqrt(35.0), -4.0],
        ]
    )
    assert np.allclose(ssm.hippo_legs(4), expected4, atol=1e-14)


def test_hippo_structure():
    a = ssm.hippo_legs(8)
    assert np.allclose(np.triu(a, 1), 0.0)
    assert np.allclose(np.diag(a), -(np.arange(8) + 1.0))
    assert np.isclose(a[5, 2], -np.sqrt(11.0) * np.sqrt(5.0))
    with pytest.raises(ValueError):
        ssm.hippo_legs(0)


# ---------------------------------------------------------------------------
# discretization


def test_bilinear_frozen_scalar():
    cont = ssm.ContinuousSSM(
        a=np.array([[-1.0]]), b=np.array([2.0]), c=np.array([1.0]),
        d=0.3, e=np.array([0.5]), f=0.7,
    )
    d = ssm.discretize_bilinear(cont, 1.0)
    assert np.allclose(d.abar, [[1.0 / 3.0]], atol=1e-15)
    assert np.allclose(d.bbar, [4.0 / 3.0], atol=1e-15)
    assert np.allclose(d.ebar, [1.0 / 3.0], atol=1e-15)
    assert d.d == 0.3 and d.f == 0.7


def test_bilinear_dense_matches_solve():
    n = 5
    a = ssm.hippo_legs(n)
    rng = np.random.default_rng(2)
    b = rng.standard_normal(n)
    cont = ssm.ContinuousSSM(a=a, b=b, c=b, d=0.0, e=b, f=0.0)
    d = ssm.discretize_bilinear(cont, 0.1)
    m = np.eye(n) - 0.05 * a
    assert np.allclose(d.abar, np.linalg.solve(m, np.eye(n) + 0.05 * a), atol=1e-12)
    assert np.allclose(d.bbar, np.linalg.solve(m, 0.1 * b), atol=1e-12)


def test_bilinear_singular_names_dt():
    cont = ssm.ContinuousSSM(
        a=np.array([[2.0]]), b=np.array([1.0]), c=np.array([1.0]),
        d=0.0, e=np.array([1.0]), f=0.0,
    )
    with pytest.raises(ValueError, match="dt=1.0"):
        ssm.discretize_bilinear(cont, 1.0)
    diag = ssm.ContinuousSSM(
        a=np.array([2.0]), b=np.array([1.0]), c=np.array([1.0]),
        d=0.0, e=np.array([1.0]), f=0.0,
    )
    with pytest.raises(ValueError, match="dt=1.0"):
        ssm.discretize_bilinear(diag, 1.0)
    with pytest.raises(ValueError):
        ssm.discretize_bilinear(diag, -0.5)


def test_zoh_frozen_scalar():
    cont = ssm.ContinuousSSM(
        a=np.array([[-1.0]]), b=np.array([2.0]), c=np.array([1.0]),
        d=0.0, e=np.array([0.5]), f=0.0,
    )
    d = ssm.discretize_zoh(cont, 1.0)
    assert np.allclose(d.abar, [[np.exp(-1.0)]], atol=1e-15)
    assert np.allclose(d.bbar, [2.0 * (1.0 - np.exp(-1.0))], atol=1e-14)
    assert np.allclose(d.ebar, [0.5 * (1.0 - np.exp(-1.0))], atol=1e-14)


def test_zoh_close_to_bilinear_at_small_dt():
    cont = ssm.ContinuousSSM(
        a=np.array([-1.0, -3.0]), b=np.ones(2), c=np.ones(2),
        d=0.0, e=np.ones(2), f=0.0,
    )
    bt = ssm.discretize_bilinear(cont, 0.01)
    zh = ssm.discretize_zoh(cont, 0.01)
    assert np.max(np.abs(bt.abar - zh.abar)) < 1e-5
    assert np.max(np.abs(bt.bbar - zh.bbar)) < 1e-4


# ---------------------------------------------------------------------------
# kernels and representations


def test_kernel_matches_matrix_powers():
    d = make_dense(4, dt=0.2)
    kern = ssm.materialize_kernel(d, 12)
    for m in range(12):
        am = np.linalg.matrix_power(d.abar, m)
        assert np.isclose(kern.kx[m], d.c @ am @ d.bbar, atol=1e-12)
        assert np.isclose(kern.kz[m], d.c @ am @ d.ebar, atol=1e-12)


def test_conv_equals_recurrent():
    rng = np.random.default_rng(3)
    for d in [make_dense(6, dt=0.05), make_dense(6, dt=0.2), make_diag(6)]:
        x = rng.standard_normal(40)
        z = rng.standard_normal(40)
        yc = ssm.ssm_conv_forward(d, x, z)
        yr = ssm.ssm_recurrent_forward(d, x, z)
        assert np.max(np.abs(yc - yr)) < 1e-8


def test_step_matches_recurrent():
    d = make_dense(4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal(10)
    z = rng.standard_normal(10)
    h = np.zeros(4)
    ys = []
    for k in range(10):
        yk, h = ssm.ssm_step(d, h, x[k], z[k])
        ys.append(yk)
    assert np.array_equal(np.asarray(ys), ssm.ssm_recurrent_forward(d, x, z))


def test_first_output_sees_first_input_through_state():
    d = make_dense(3, seed=5)
    x = np.array([1.7])
    z = np.array([-0.9])
    expected = d.c @ (d.bbar * x[0] + d.ebar * z[0]) + d.d * x[0] + d.f * z[0]
    assert np.isclose(ssm.ssm_recurrent_forward(d, x, z)[0], expected, atol=1e-14)
    assert np.isclose(ssm.ssm_conv_forward(d, x, z)[0], expected, atol=1e-12)


def test_stability_and_kernel_decay():
    for n in [2, 8, 32]:
        d = make_dense(n, dt=1.0)
        eig = np.linalg.eigvals(d.abar)
        assert np.max(np.abs(eig)) < 1.0
        # non-normal transients decay slower than the spectral rate, so the
        # strict tail check needs a long horizon
        kern = ssm.materialize_kernel(d, 1024)
        head = np.sum(np.abs(kern.kx[:256]))
        tail = np.sum(np.abs(kern.kx[768:]))
        assert tail < head
        assert np.abs(kern.kx[-1]) < 1e-6 * np.max(np.abs(kern.kx))


def test_conv_forward_grads():
    d = make_dense(3, seed=6, dt=0.3)
    rng = np.random.default_rng(7)
    z = rng.standard_normal(8)
    x = rng.standard_normal(8)
    w = rng.standard_normal(8)
    err = nm.grad_check(lambda v: nm.sum_(nm.mul(ssm.ssm_conv_forward(d, v, z), w)), x)
    assert err < 1e-4
    err = nm.grad_check(lambda v: nm.sum_(nm.mul(ssm.ssm_conv_forward(d, x, v), w)), z)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# banked heads


def test_bank_discretize_matches_single_diag():
    rng = np.random.default_rng(8)
    a = -rng.uniform(0.5, 4.0, size=(3, 5))
    abar, tin = ssm.bank_discretize(a, 0.2, diag=True)
    for h in range(3):
        cont = ssm.ContinuousSSM(
            a=a[h], b=np.ones(5), c=np.ones(5), d=0.0, e=np.ones(5), f=0.0
        )
        d = ssm.discretize_bilinear(cont, 0.2)
        assert np.allclose(abar[h], d.abar, atol=1e-13)
        assert np.allclose(tin[h] * np.ones(5), d.bbar, atol=1e-13)


def test_bank_discretize_matches_single_dense():
    a = np.stack([ssm.hippo_legs(4), 2.0 * ssm.hippo_legs(4)])
    rng = np.random.default_rng(9)
    b = rng.standard_normal((2, 4))
    abar, tin = ssm.bank_discretize(a, 0.3, diag=False)
    for h in range(2):
        cont = ssm.ContinuousSSM(a=a[h], b=b[h], c=b[h], d=0.0, e=b[h], f=0.0)
        d = ssm.discretize_bilinear(cont, 0.3)
        assert np.allclose(abar[h], d.abar, atol=1e-12)
        assert np.allclose(ssm.bank_input(tin, b, diag=False)[h], d.bbar, atol=1e-12)


def test_bank_discretize_singular():
    with pytest.raises(ValueError, match="dt=1.0"):
        ssm.bank_discretize(np.array([[2.0, -1.0]]), 1.0, diag=True)


def test_bank_kernel_matches_single():
    rng = np.random.default_rng(10)
    n, L = 4, 9
    for diag in [True, False]:
        if diag:
            a = -rng.uniform(0.5, 3.0, size=(2, n))
        else:
            a = np.stack([ssm.hippo_legs(n), 1.5 * ssm.hippo_legs(n)])
        b = rng.standard_normal((2, n))
        c = rng.standard_normal((2, n))
        abar, tin = ssm.bank_discretize(a, 0.25, diag=diag)
        v0 = ssm.bank_input(tin, b, diag=diag)
        kern = ssm.bank_kernel(abar, c, v0, L, diag=diag)
        for h in range(2):
            cont = ssm.ContinuousSSM(a=a[h], b=b[h], c=c[h], d=0.0, e=b[h], f=0.0)
            single = ssm.materialize_kernel(ssm.discretize_bilinear(cont, 0.25), L)
            assert np.allclose(kern[h], single.kx, atol=1e-11), f"diag={diag} h={h}"


def test_bank_kernel_lead_shifts_power():
    rng = np.random.default_rng(11)
    n, L = 3, 7
    a = np.stack([ssm.hippo_legs(n)])
    abar, tin = ssm.bank_discretize(a, 0.4, diag=False)
    c = rng.standard_normal((1, n))
    v0 = rng.standard_normal((1, n))
    k1 = ssm.bank_kernel(abar, c, v0, L, diag=False, lead=1)
    ab = nm.value_of(abar)[0]
    for m in range(L):
        ref = c[0] @ np.linalg.matrix_power(ab, m + 1) @ v0[0]
        assert np.isclose(k1[0, m], ref, atol=1e-11)


def test_bank_kernel_grads_through_discretization():
    rng = np.random.default_rng(12)
    H, n, L = 2, 3, 6
    b = rng.standard_normal((H, n))
    c = rng.standard_normal((H, n))
    w = rng.standard_normal((H, L))

    def loss_diag(av):
        abar, tin = ssm.bank_discretize(av, 0.2, diag=True)
        kern = ssm.bank_kernel(abar, c, ssm.bank_input(tin, b, diag=True), L, diag=True)
        return nm.sum_(nm.mul(kern, w))

    err = nm.grad_check(loss_diag, -rng.uniform(0.5, 2.0, size=(H, n)))
    assert err < 1e-4

    def loss_dense(av):
        abar, tin = ssm.bank_discretize(av, 0.2, diag=False)
        kern = ssm.bank_kernel(abar, c, ssm.bank_input(tin, b, diag=False), L, diag=False, lead=1)
        return nm.sum_(nm.mul(kern, w))

    dense = np.stack([ssm.hippo_legs(n) for _ in range(H)])
    dense += 0.05 * rng.standard_normal(dense.shape)
    err = nm.grad_check(loss_dense, dense, h=1e-6)
    assert err < 1e-4


def test_bank_scan_and_step_agree_with_kernel():
    # one head, one driver: scan output read against c equals kernel conv
    rng = np.random.default_rng(13)
    n, L, B = 4, 16, 2
    a = -rng.uniform(0.5, 3.0, size=(1, n))
    b = rng.standard_normal((1, n))
    c = rng.standard_normal((1, n))
    abar, tin = ssm.bank_discretize(a, 0.3, diag=True)
    v0 = ssm.bank_input(tin, b, diag=True)
    u = rng.standard_normal((B, L, 1))

    states = nm.state_scan(abar, [(v0, u)], diag=True)
    y_scan = ssm.bank_read(states, c)

    kern = ssm.bank_kernel(abar, c, v0, L, diag=True)
    y_conv = nm.conv_heads(u, kern)
    assert np.max(np.abs(y_scan - y_conv)) < 1e-10

    s = np.zeros((B, 1, n))
    for k in range(L):
        s = ssm.bank_step(abar, s, [(v0, u[:, k, :])], diag=True)
        yk = ssm.bank_step_read(s, c)
        assert np.allclose(yk, y_scan[:, k], atol=1e-12)
