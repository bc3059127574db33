"""Dense float64 tensor ops with reverse-mode autodiff on a dynamic tape.

All differentiable functions below accept either plain ``numpy.ndarray``
inputs (returning plain arrays, nothing recorded) or :class:`Var` handles
bound to a :class:`Tape` (recording one node per primitive with an explicit
gradient rule). Writing model code once against these functions gives both a
fast inference path and an exact reverse-mode gradient path.

The FFT is an iterative radix-2 transform and only accepts power-of-two
lengths; convolution helpers zero-pad to the next power of two themselves.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

SQRT1_2 = float(np.sqrt(0.5))
INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


class Node:
    """One recorded primitive: forward value, parent handles, gradient rule."""

    __slots__ = ("value", "parents", "vjp", "adjoint")

    def __init__(self, value, parents, vjp):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.adjoint = None


class Tape:
    """Append-only list of nodes; append order is a topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def var(self, value):
        """Record a leaf (parameter or input) and return its handle."""
        return self.record(_f64(value), (), None)

    def record(self, value, parents, vjp):
        """Record one primitive. ``vjp(adjoint) -> tuple`` aligned with parents."""
        for p in parents:
            if p.tape is not self:
                raise ValueError("cannot mix variables from different tapes")
        self.nodes.append(Node(value, parents, vjp))
        return Var(self, len(self.nodes) - 1)

    def release(self):
        """Drop all recorded nodes so their buffers free by refcount alone.

        Nodes, their parent handles, and their vjp closures form reference
        cycles through the tape, so a discarded tape waits for the cycle
        collector; on large graphs that lag accumulates gigabytes across a
        training loop. Call this once per step after reading the gradients
        off the leaves. The tape and any outstanding Vars must not be used
        afterwards.
        """
        self.nodes.clear()


class Var:
    """Handle to a tape node. Supports arithmetic operators."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.nodes[self.index].value

    @property
    def grad(self):
        return self.tape.nodes[self.index].adjoint

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


def value_of(x):
    """Underlying ndarray of a Var, or the array itself."""
    return x.value if isinstance(x, Var) else _f64(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g, shape):
    """Reduce a broadcasted adjoint back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root):
    """Reverse-mode sweep seeding the scalar ``root`` with adjoint 1.

    Walks the tape in reverse append order (valid because inputs always
    precede their consumers). After the sweep every node carries an adjoint
    of the same shape as its value; unreached nodes get zeros.
    """
    if not isinstance(root, Var):
        raise ValueError("backward expects a Var recorded on a tape")
    if root.value.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    nodes = root.tape.nodes
    for n in nodes:
        n.adjoint = None
    nodes[root.index].adjoint = np.ones(())
    for i in range(root.index, -1, -1):
        node = nodes[i]
        if node.adjoint is None or node.vjp is None:
            continue
        grads = node.vjp(node.adjoint)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            pn = nodes[parent.index]
            pn.adjoint = g if pn.adjoint is None else pn.adjoint + g
    for n in nodes:
        if n.adjoint is None:
            n.adjoint = np.zeros_like(n.value)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    t = _tape_of(a, b)
    if t is None:
        return out
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a)
        rules.append(lambda g: _unbroadcast(g, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        rules.append(lambda g: _unbroadcast(g, bv.shape))
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    t = _tape_of(a, b)
    if t is None:
        return out
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a)
        rules.append(lambda g: _unbroadcast(g, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        rules.append(lambda g: _unbroadcast(-g, bv.shape))
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    t = _tape_of(a, b)
    if t is None:
        return out
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a)
        rules.append(lambda g: _unbroadcast(g * bv, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        rules.append(lambda g: _unbroadcast(g * av, bv.shape))
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    t = _tape_of(a, b)
    if t is None:
        return out
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a)
        rules.append(lambda g: _unbroadcast(g / bv, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        rules.append(lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


def neg(a):
    av = value_of(a)
    out = -av
    t = _tape_of(a)
    if t is None:
        return out
    return t.record(out, (a,), lambda g: (-g,))


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    t = _tape_of(a)
    if t is None:
        return out
    return t.record(out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    out = np.log(av)
    t = _tape_of(a)
    if t is None:
        return out
    return t.record(out, (a,), lambda g: (g / av,))


def softplus(a):
    """log(1 + e^x), computed stably."""
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    t = _tape_of(a)
    if t is None:
        return out
    return t.record(out, (a,), lambda g: (g * expit(av),))


def gelu(a):
    """Exact GELU x * Phi(x) via the error function."""
    av = value_of(a)
    cdf = 0.5 * (1.0 + erf(av * SQRT1_2))
    out = av * cdf
    t = _tape_of(a)
    if t is None:
        return out

    def vjp(g):
        pdf = INV_SQRT_2PI * np.exp(-0.5 * av * av)
        return (g * (cdf + av * pdf),)

    return t.record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# contractions and shape ops


def matmul(a, b):
    """Matrix product for operands with ndim >= 2 (numpy broadcast rules)."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul requires ndim >= 2 on both operands")
    out = av @ bv
    t = _tape_of(a, b)
    if t is None:
        return out
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a)
        rules.append(lambda g: _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape))
    if isinstance(b, Var):
        parents.append(b)
        rules.append(lambda g: _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape))
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


def pair_einsum(subs, a, b):
    """Two-operand einsum with explicit subscripts (no ellipsis).

    The gradient swaps the output subscript with the missing operand's, which
    is valid as long as every index of each operand appears in the output or
    in the other operand (true for plain contractions).
    """
    if "." in subs:
        raise ValueError("pair_einsum needs explicit subscripts without ellipsis")
    lhs, so = subs.split("->")
    sa, sb = lhs.split(",")
    av, bv = value_of(a), value_of(b)
    out = np.einsum(subs, av, bv)
    t = _tape_of(a, b)
    if t is None:
        return out
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a)
        rules.append(lambda g: np.einsum(f"{so},{sb}->{sa}", g, bv))
    if isinstance(b, Var):
        parents.append(b)
        rules.append(lambda g: np.einsum(f"{so},{sa}->{sb}", g, av))
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


def linear(x, w, b=None):
    """Affine map on the last axis: x @ w + b, for 2-D or 3-D x."""
    nd = value_of(x).ndim
    if nd == 3:
        out = pair_einsum("bli,io->blo", x, w)
    elif nd == 2:
        out = pair_einsum("bi,io->bo", x, w)
    else:
        raise ValueError(f"linear expects 2-D or 3-D input, got ndim {nd}")
    return out if b is None else add(out, b)


def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    t = _tape_of(a)
    if t is None:
        return out

    def vjp(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return t.record(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    t = _tape_of(a)
    if t is None:
        return out
    return t.record(out, (a,), lambda g: (g.reshape(av.shape),))


def concat_last(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.concatenate([av, bv], axis=-1)
    t = _tape_of(a, b)
    if t is None:
        return out
    na = av.shape[-1]
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a)
        rules.append(lambda g: g[..., :na])
    if isinstance(b, Var):
        parents.append(b)
        rules.append(lambda g: g[..., na:])
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


def slice_last(a, lo, hi):
    av = value_of(a)
    out = av[..., lo:hi]
    t = _tape_of(a)
    if t is None:
        return out

    def vjp(g):
        full = np.zeros_like(av)
        full[..., lo:hi] = g
        return (full,)

    return t.record(out, (a,), vjp)


def shift_time(a):
    """Right-shift along axis 1 by one step with zero fill (drops the last)."""
    av = value_of(a)
    if av.ndim < 2:
        raise ValueError("shift_time expects a (batch, time, ...) array")
    out = np.zeros_like(av)
    out[:, 1:] = av[:, :-1]
    t = _tape_of(a)
    if t is None:
        return out

    def vjp(g):
        gx = np.zeros_like(av)
        gx[:, :-1] = g[:, 1:]
        return (gx,)

    return t.record(out, (a,), vjp)


def layernorm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis with affine parameters."""
    xv, gv, bv = value_of(x), value_of(gamma), value_of(beta)
    n = xv.shape[-1]
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gv + bv
    t = _tape_of(x, gamma, beta)
    if t is None:
        return out
    parents, rules = [], []
    if isinstance(x, Var):
        def gx(g):
            dxhat = g * gv
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            return (inv_std / n) * (n * dxhat - s1 - xhat * s2)

        parents.append(x)
        rules.append(gx)
    if isinstance(gamma, Var):
        parents.append(gamma)
        rules.append(lambda g: _unbroadcast(g * xhat, gv.shape))
    if isinstance(beta, Var):
        parents.append(beta)
        rules.append(lambda g: _unbroadcast(g, bv.shape))
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


def inv(a):
    """Batched matrix inverse of (..., N, N)."""
    av = value_of(a)
    try:
        out = np.linalg.inv(av)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"matrix inverse failed: {e}") from e
    t = _tape_of(a)
    if t is None:
        return out

    def vjp(g):
        it = out.swapaxes(-1, -2)
        return (-it @ g @ it,)

    return t.record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# FFT and convolution


def _bit_reversal(n):
    rev = np.zeros(n, dtype=np.intp)
    idx = np.arange(n)
    for _ in range(n.bit_length() - 1):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _fft_core(a, inverse=False):
    """Iterative radix-2 transform along the last axis (length power of two)."""
    n = a.shape[-1]
    out = np.ascontiguousarray(a[..., _bit_reversal(n)], dtype=np.complex128)
    sign = 2j if inverse else -2j
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(sign * np.pi * np.arange(half) / m)
        blk = out.reshape(out.shape[:-1] + (n // m, m))
        lo = blk[..., :half].copy()
        hi = blk[..., half:] * tw
        blk[..., :half] = lo + hi
        blk[..., half:] = lo - hi
        m *= 2
    return out


def fft(buf):
    """Forward DFT of a 1-D complex buffer whose length is a power of two."""
    a = np.asarray(buf, dtype=np.complex128)
    if a.ndim != 1:
        raise ValueError("fft expects a 1-D buffer")
    if not _is_pow2(a.shape[0]):
        raise ValueError(f"fft length must be a power of two, got {a.shape[0]}")
    return _fft_core(a)


def ifft(buf):
    """Inverse DFT (scaled by 1/n) of a 1-D power-of-two complex buffer."""
    a = np.asarray(buf, dtype=np.complex128)
    if a.ndim != 1:
        raise ValueError("ifft expects a 1-D buffer")
    if not _is_pow2(a.shape[0]):
        raise ValueError(f"ifft length must be a power of two, got {a.shape[0]}")
    return _fft_core(a, inverse=True) / a.shape[0]


def _pad_pow2(n):
    # next power of two >= 2n, so the circular product equals linear convolution
    return 1 << max(1, (2 * n - 1).bit_length())


def _causal_conv_plain(x, k):
    L = x.shape[-1]
    p = _pad_pow2(L)
    xf = _fft_core(np.concatenate([x, np.zeros(x.shape[:-1] + (p - L,))], axis=-1))
    kf = _fft_core(np.concatenate([k, np.zeros(k.shape[:-1] + (p - L,))], axis=-1))
    full = _fft_core(xf * kf, inverse=True) / p
    return full.real[..., :L]


def causal_conv(signal, kernel):
    """Causal convolution y[m] = sum_{j<=m} signal[j] * kernel[m-j].

    Both inputs must share length L; internally both are zero-padded to the
    next power of two >= 2L and multiplied in the frequency domain.
    """
    xv, kv = value_of(signal), value_of(kernel)
    if xv.shape != kv.shape or xv.ndim != 1:
        raise ValueError("causal_conv expects two 1-D arrays of equal length")
    out = _causal_conv_plain(xv, kv)
    t = _tape_of(signal, kernel)
    if t is None:
        return out
    parents, rules = [], []
    if isinstance(signal, Var):
        parents.append(signal)
        rules.append(lambda g: _causal_conv_plain(g[::-1], kv)[::-1])
    if isinstance(kernel, Var):
        parents.append(kernel)
        rules.append(lambda g: _causal_conv_plain(g[::-1], xv)[::-1])
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


def _conv_heads_plain(x, k):
    # x: (B, L, H) signals, k: (H, L) per-head kernels
    L = x.shape[1]
    p = _pad_pow2(L)
    xf = np.fft.rfft(x, n=p, axis=1)
    kf = np.fft.rfft(k, n=p, axis=1)
    y = np.fft.irfft(xf * kf.T[None], n=p, axis=1)
    return y[:, :L, :]


def conv_heads(x, k):
    """Per-head causal convolution: (B, L, H) signals with (H, L) kernels."""
    xv, kv = value_of(x), value_of(k)
    if xv.ndim != 3 or kv.ndim != 2 or xv.shape[1] != kv.shape[1] or xv.shape[2] != kv.shape[0]:
        raise ValueError("conv_heads expects x (B, L, H) and kernels (H, L)")
    out = _conv_heads_plain(xv, kv)
    t = _tape_of(x, k)
    if t is None:
        return out
    L = xv.shape[1]
    p = _pad_pow2(L)
    parents, rules = [], []
    if isinstance(x, Var):
        parents.append(x)
        rules.append(lambda g: _conv_heads_plain(g[:, ::-1, :], kv)[:, ::-1, :])
    if isinstance(k, Var):
        def gk(g):
            gf = np.fft.rfft(g[:, ::-1, :], n=p, axis=1)
            xf = np.fft.rfft(xv, n=p, axis=1)
            z = np.fft.irfft(gf * xf, n=p, axis=1)[:, :L, :]
            return z[:, ::-1, :].sum(axis=0).T

        parents.append(k)
        rules.append(gk)
    return t.record(out, tuple(parents), lambda g: tuple(r(g) for r in rules))


# ---------------------------------------------------------------------------
# fused state-space primitives (one tape node for a whole scan)


def geom_powers(a, length):
    """Stack of elementwise powers: out[..., k, n] = a[..., n]**k, k < length."""
    av = value_of(a)
    shape = av.shape[:-1] + (length,) + av.shape[-1:]
    out = np.empty(shape)
    out[..., 0, :] = 1.0
    if length > 1:
        out[..., 1:, :] = av[..., None, :]
        np.cumprod(out, axis=-2, out=out)
    t = _tape_of(a)
    if t is None:
        return out

    def vjp(g):
        if length == 1:
            return (np.zeros_like(av),)
        ks = np.arange(1, length, dtype=np.float64)[:, None]
        return ((g[..., 1:, :] * ks * out[..., :-1, :]).sum(axis=-2),)

    return t.record(out, (a,), vjp)


def kernel_scan(abar, v0, length):
    """Iterated dense propagation V[:, k] = Abar^k @ v0 for a bank of heads.

    abar: (H, N, N), v0: (H, N); returns (H, length, N).
    """
    av, vv = value_of(abar), value_of(v0)
    H, N = vv.shape
    V = np.empty((H, length, N))
    V[:, 0] = vv
    for k in range(1, length):
        V[:, k] = np.einsum("hij,hj->hi", av, V[:, k - 1])
    t = _tape_of(abar, v0)
    if t is None:
        return V

    def vjp(g):
        lam = g[:, length - 1].copy()
        ga = np.zeros_like(av)
        for k in range(length - 1, 0, -1):
            ga += np.einsum("hi,hj->hij", lam, V[:, k - 1])
            lam = g[:, k - 1] + np.einsum("hij,hi->hj", av, lam)
        grads = []
        if isinstance(abar, Var):
            grads.append(ga)
        if isinstance(v0, Var):
            grads.append(lam)
        return tuple(grads)

    parents = tuple(v for v in (abar, v0) if isinstance(v, Var))
    return t.record(V, parents, vjp)


def state_scan(abar, drivers, diag):
    """Sequential state recursion over a bank of single-input heads.

    s_k = Abar s_{k-1} + sum_i coef_i * u_i[:, k, :, None]; returns all states
    (B, L, H, N). ``drivers`` is a list of (coef (H, N), seq (B, L, H)) pairs.
    ``abar`` is (H, N) when diag else (H, N, N). One tape node for the whole
    scan keeps recurrent-mode training memory at O(N L).
    """
    av = value_of(abar)
    pairs = [(value_of(c), value_of(u)) for c, u in drivers]
    B, L, H = pairs[0][1].shape
    N = av.shape[-1]
    S = np.empty((B, L, H, N))
    s = np.zeros((B, H, N))
    for k in range(L):
        if diag:
            s = av * s
        else:
            s = np.einsum("hij,bhj->bhi", av, s)
        for cv, uv in pairs:
            s = s + uv[:, k, :, None] * cv
        S[:, k] = s
    t = _tape_of(abar, *[v for pair in drivers for v in pair])
    if t is None:
        return S

    def vjp(g):
        lam_next = np.zeros((B, H, N))
        ga = np.zeros_like(av)
        gc = [np.zeros_like(cv) for cv, _ in pairs]
        gu = [np.empty((B, L, H)) for _ in pairs]
        for k in range(L - 1, -1, -1):
            if diag:
                lam = g[:, k] + av * lam_next
            else:
                lam = g[:, k] + np.einsum("hij,bhi->bhj", av, lam_next)
            s_prev = S[:, k - 1] if k > 0 else np.zeros((B, H, N))
            if diag:
                ga += (lam * s_prev).sum(axis=0)
            else:
                ga += np.einsum("bhi,bhj->hij", lam, s_prev)
            for i, (cv, uv) in enumerate(pairs):
                gc[i] += np.einsum("bhn,bh->hn", lam, uv[:, k])
                gu[i][:, k] = np.einsum("bhn,hn->bh", lam, cv)
            lam_next = lam
        grads = []
        if isinstance(abar, Var):
            grads.append(ga)
        for i, (c, u) in enumerate(drivers):
            if isinstance(c, Var):
                grads.append(gc[i])
            if isinstance(u, Var):
                grads.append(gu[i])
        return tuple(grads)

    parents = tuple(
        v for v in [abar] + [v for pair in drivers for v in pair] if isinstance(v, Var)
    )
    return t.record(S, parents, vjp)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(f, x, h=1e-5):
    """Max relative error between tape gradients of f and central differences.

    ``f`` must map a single array-like argument to a scalar and work on both
    plain arrays and Vars. Relative error uses max(1, |numeric|) as scale.
    """
    x = _f64(x)
    tape = Tape()
    xv = tape.var(x)
    out = f(xv)
    if not isinstance(out, Var) or out.value.shape != ():
        raise ValueError("grad_check expects f to return a scalar Var")
    backward(out)
    analytic = xv.grad
    worst = 0.0
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        numeric = (float(f(xp)) - float(f(xm))) / (2.0 * h)
        err = abs(float(analytic[idx]) - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
