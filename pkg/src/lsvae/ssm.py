"""State-space machinery: discretization, kernels, and recurrences.

The continuous-time system has one latent state driven by two signals,

    dh/dt = A h + B x + E z,        y = C h + D x + F z.

Discretizing with step ``dt`` gives

    h_k = Abar h_{k-1} + Bbar x_k + Ebar z_k,
    y_k = C h_k + D x_k + F z_k,

with the state updated before the readout, so y_0 already sees x_0 and z_0
through the state. With h_{-1} = 0 the input-output map is a pair of causal
convolutions,

    y = k_x * x + D x + k_z * z + F z,
    k_x[m] = C Abar^m Bbar,   k_z[m] = C Abar^m Ebar,

which is what makes parallel training over the whole sequence possible. The
banked helpers at the bottom handle many independent heads at once and stay
differentiable through the tape in `numerics`; the single-head functions are
plain numpy and serve as oracles and generation-time steppers.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import numerics as nm
from .numerics import value_of


@dataclass
class ContinuousSSM:
    """Continuous-time parameters. ``a`` is (N, N) dense or (N,) diagonal."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float
    e: np.ndarray
    f: float

    @property
    def diag(self):
        return self.a.ndim == 1


@dataclass
class DiscreteSSM:
    """Discrete-time parameters produced by a discretization rule."""

    abar: np.ndarray
    bbar: np.ndarray
    ebar: np.ndarray
    c: np.ndarray
    d: float
    f: float

    @property
    def diag(self):
        return self.abar.ndim == 1


@dataclass
class ConvKernel:
    """Materialized convolution kernels plus passthrough gains."""

    kx: np.ndarray
    kz: np.ndarray
    d: float
    f: float


def hippo_legs(n):
    """Scaled-Legendre memory matrix, lower triangular with diagonal -(i+1).

    Entry (i, j) is -sqrt(2i+1) sqrt(2j+1) below the diagonal, -(i+1) on it,
    zero above. Its eigenvalues are the diagonal, so every bilinear step size
    keeps the discrete system strictly stable.
    """
    if n < 1:
        raise ValueError("state size must be >= 1")
    r = np.sqrt(2.0 * np.arange(n) + 1.0)
    a = -np.tril(np.outer(r, r), -1)
    a[np.diag_indices(n)] = -(np.arange(n) + 1.0)
    return a


def discretize_bilinear(ssm, dt):
    """Tustin discretization: Abar = (I - dt/2 A)^-1 (I + dt/2 A).

    Input matrices pick up the step size: Bbar = (I - dt/2 A)^-1 dt B and
    likewise for E. Raises ValueError when I - dt/2 A is (near) singular,
    naming the offending dt.
    """
    if dt <= 0:
        raise ValueError(f"step size must be positive, got dt={dt}")
    if ssm.diag:
        den = 1.0 - 0.5 * dt * ssm.a
        if np.any(np.abs(den) < 1e-12):
            raise ValueError(f"bilinear discretization singular at dt={dt}")
        abar = (1.0 + 0.5 * dt * ssm.a) / den
        bbar = dt * ssm.b / den
        ebar = dt * ssm.e / den
    else:
        n = ssm.a.shape[0]
        m = np.eye(n) - 0.5 * dt * ssm.a
        if np.linalg.cond(m) > 1e12:
            raise ValueError(f"bilinear discretization singular at dt={dt}")
        minv = np.linalg.inv(m)
        abar = minv @ (np.eye(n) + 0.5 * dt * ssm.a)
        bbar = dt * (minv @ ssm.b)
        ebar = dt * (minv @ ssm.e)
    return DiscreteSSM(abar, bbar, ebar, ssm.c, ssm.d, ssm.f)


def discretize_zoh(ssm, dt):
    """Zero-order-hold discretization, exact for piecewise-constant inputs.

    Abar = exp(A dt), Bbar = A^-1 (Abar - I) B. Evaluation-time alternative
    to the bilinear rule; not used on the training path.
    """
    if dt <= 0:
        raise ValueError(f"step size must be positive, got dt={dt}")
    if ssm.diag:
        if np.any(np.abs(ssm.a) < 1e-12):
            raise ValueError("hold discretization needs nonzero diagonal entries")
        abar = np.exp(dt * ssm.a)
        g = (abar - 1.0) / ssm.a
        bbar = g * ssm.b
        ebar = g * ssm.e
    else:
        n = ssm.a.shape[0]
        if np.linalg.cond(ssm.a) > 1e12:
            raise ValueError("hold discretization needs an invertible state matrix")
        abar = expm(dt * ssm.a)
        g = np.linalg.solve(ssm.a, abar - np.eye(n))
        bbar = g @ ssm.b
        ebar = g @ ssm.e
    return DiscreteSSM(abar, bbar, ebar, ssm.c, ssm.d, ssm.f)


def materialize_kernel(dssm, length):
    """Unroll k_x[m] = C Abar^m Bbar and k_z[m] = C Abar^m Ebar for m < length."""
    kx = np.empty(length)
    kz = np.empty(length)
    vb = dssm.bbar.astype(float).copy()
    ve = dssm.ebar.astype(float).copy()
    for m in range(length):
        kx[m] = dssm.c @ vb
        kz[m] = dssm.c @ ve
        if dssm.diag:
            vb = dssm.abar * vb
            ve = dssm.abar * ve
        else:
            vb = dssm.abar @ vb
            ve = dssm.abar @ ve
    return ConvKernel(kx, kz, dssm.d, dssm.f)


def ssm_conv_forward(dssm, x, z):
    """Full-sequence output via causal convolution; differentiable in x, z."""
    length = value_of(x).shape[0]
    kern = materialize_kernel(dssm, length)
    yx = nm.add(nm.causal_conv(x, kern.kx), nm.mul(x, kern.d))
    yz = nm.add(nm.causal_conv(z, kern.kz), nm.mul(z, kern.f))
    return nm.add(yx, yz)


def ssm_recurrent_forward(dssm, x, z, h0=None):
    """Full-sequence output via the stepwise recurrence (plain numpy)."""
    length = len(x)
    n = dssm.abar.shape[-1]
    h = np.zeros(n) if h0 is None else np.asarray(h0, dtype=float).copy()
    y = np.empty(length)
    for k in range(length):
        y[k], h = ssm_step(dssm, h, x[k], z[k])
    return y


def ssm_step(dssm, h, xk, zk):
    """Advance one step; returns (y_k, new state). State updates before readout."""
    if dssm.diag:
        h = dssm.abar * h + dssm.bbar * xk + dssm.ebar * zk
    else:
        h = dssm.abar @ h + dssm.bbar * xk + dssm.ebar * zk
    y = dssm.c @ h + dssm.d * xk + dssm.f * zk
    return y, h


# ---------------------------------------------------------------------------
# banked heads: H independent systems evaluated together, tape-differentiable


def bank_discretize(a, dt, diag):
    """Bilinear rule for a bank of heads; differentiable in ``a``.

    Returns (abar, tin) where tin maps continuous input vectors to discrete
    ones: bbar = tin * b elementwise when diag, tin @ b when dense. ``a`` is
    (H, N) diagonal or (H, N, N) dense. ``dt`` may be a scalar or a per-head
    array broadcastable against ``a``.
    """
    if np.any(np.asarray(dt) <= 0):
        raise ValueError(f"step size must be positive, got dt={dt}")
    av = value_of(a)
    if diag:
        if np.any(np.abs(1.0 - 0.5 * dt * av) < 1e-12):
            raise ValueError(f"bilinear discretization singular at dt={dt}")
        den = nm.sub(1.0, nm.mul(a, 0.5 * dt))
        abar = nm.div(nm.add(1.0, nm.mul(a, 0.5 * dt)), den)
        tin = nm.div(dt, den)
    else:
        n = av.shape[-1]
        eye = np.eye(n)
        mv = eye - 0.5 * dt * av
        if max(np.linalg.cond(m) for m in mv) > 1e12:
            raise ValueError(f"bilinear discretization singular at dt={dt}")
        minv = nm.inv(nm.sub(eye, nm.mul(a, 0.5 * dt)))
        abar = nm.matmul(minv, nm.add(eye, nm.mul(a, 0.5 * dt)))
        tin = nm.mul(minv, dt)
    return abar, tin


def bank_input(tin, v, diag):
    """Apply the input transform from `bank_discretize` to a bank of vectors."""
    if diag:
        return nm.mul(tin, v)
    return nm.pair_einsum("hij,hj->hi", tin, v)


def bank_kernel(abar, cvec, v0, length, diag, lead=0):
    """Kernels k[h, m] = c_h . Abar_h^(m+lead) v0_h for a bank of heads.

    ``lead`` inserts extra state-advance factors in front of the power, which
    is how a kernel that starts one step into the past is expressed.
    """
    if diag:
        w = nm.mul(cvec, v0)
        for _ in range(lead):
            w = nm.mul(w, abar)
        powers = nm.geom_powers(abar, length)
        return nm.pair_einsum("hln,hn->hl", powers, w)
    for _ in range(lead):
        v0 = nm.pair_einsum("hij,hj->hi", abar, v0)
    states = nm.kernel_scan(abar, v0, length)
    return nm.pair_einsum("hln,hn->hl", states, cvec)


def bank_read(states, cvec):
    """Project scanned states (B, L, H, N) onto per-head readouts (B, L, H)."""
    return nm.pair_einsum("blhn,hn->blh", states, cvec)


def bank_step(abar, s, drivers, diag):
    """One plain-numpy bank update: s <- Abar s + sum_i u_i[:, :, None] * coef_i.

    ``s`` is (B, H, N); each driver is (coef (H, N), u (B, H)).
    """
    if diag:
        s = abar * s
    else:
        s = np.einsum("hij,bhj->bhi", abar, s)
    for coef, u in drivers:
        s = s + u[:, :, None] * coef
    return s


def bank_step_read(s, cvec):
    """Readout (B, H) of a stepped bank state against per-head c vectors."""
    return np.einsum("bhn,hn->bh", s, cvec)
