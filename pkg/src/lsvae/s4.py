"""Autoregressive reduction of the sequence VAE.

Zeroing every pathway by which the latent stream can reach the observation
readout, and pinning the prior and the posterior to the standard normal,
collapses the sequence VAE onto a plain autoregressive state-space model
over the observations: the KL term vanishes identically, the sampled
latents are ignored bitwise, and the evidence bound equals that model's
exact log likelihood.

`embed_autoregressive` performs the parameter surgery on a trained or
freshly initialized parameter set. The rest of the module is a flat numpy
reimplementation of the resulting autoregressive density, written directly
against the recurrence and readout equations rather than on top of the
package's differentiable ops, so tests can compare the two routes without
sharing code.
"""

import numpy as np
from scipy.special import erf


def softplus_inv(y):
    return float(np.log(np.expm1(y)))


def embed_autoregressive(params, cfg):
    """Return a copy of ``params`` with the latent influence removed.

    The decoder must have observation feedback enabled, otherwise nothing
    autoregressive remains after the surgery.
    """
    if not cfg.decoder_uses_x:
        raise ValueError("autoregressive embedding requires decoder_uses_x")
    out = {k: v.copy() for k, v in params.items()}
    for name, v in out.items():
        if not name.startswith("gen."):
            continue
        # latent drive into the shared state, and the latent passthrough
        # into the observation readout
        if name.endswith(".evec") or name.endswith(".fx"):
            out[name] = np.zeros_like(v)
        # the observation half of each residual unit must not read the
        # latent half of its input
        if name.endswith(".r.l1.w"):
            w = v.shape[0] // 2
            v[w:, :] = 0.0
    for s in ("prior", "inf"):
        out[f"{s}.mu.out.w"] = np.zeros_like(out[f"{s}.mu.out.w"])
        out[f"{s}.mu.out.b"] = np.zeros_like(out[f"{s}.mu.out.b"])
        out[f"{s}.sig.out.w"] = np.zeros_like(out[f"{s}.sig.out.w"])
        out[f"{s}.sig.out.b"] = np.full_like(
            out[f"{s}.sig.out.b"], softplus_inv(1.0 - cfg.sigma_floor)
        )
    return out


# ---------------------------------------------------------------------------
# independent reimplementation of the embedded autoregressive model


def _gelu(x):
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _layernorm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + eps)) * g + b


def _kernels(p, pre, cfg, width, length):
    """Causal kernels k[h, m] = c_h . Abar_h^m v0_h for each head."""
    dt = np.geomspace(cfg.dt_min, cfg.dt_max, width)[:, None]
    a = p[pre + ".a"]
    den = 1.0 - 0.5 * a * dt
    abar = (1.0 + 0.5 * a * dt) / den
    v0 = (dt / den) * p[pre + ".bvec"]
    pows = abar[:, None, :] ** np.arange(length)[None, :, None]
    return np.einsum("hn,hmn->hm", p[pre + ".cx"] * v0, pows)


def _conv(u, k):
    out = np.zeros_like(u)
    length = u.shape[1]
    for m in range(length):
        out[:, m:, :] += u[:, : length - m, :] * k[:, m][None, None, :]
    return out


def _block(p, pre, u, cfg):
    k = _kernels(p, pre, cfg, u.shape[-1], u.shape[1])
    g = _gelu(_conv(u, k) + u * p[pre + ".dx"])
    o = g @ p[pre + ".mixx.w"] + p[pre + ".mixx.b"]
    return _layernorm(o, p[pre + ".lnx.g"], p[pre + ".lnx.b"]) + u


def _res(p, pre, h):
    w = h.shape[-1]
    t = _gelu(h @ p[pre + ".l1.w"][:w] + p[pre + ".l1.b"])
    return t @ p[pre + ".l2.w"][:, :w] + p[pre + ".l2.b"][:w] + h


def ar_forward(params, cfg, x):
    """Per-step Gaussian over x given strictly earlier observations."""
    u = np.zeros_like(x)
    u[:, 1:] = x[:, :-1]
    u = u @ params["gen.encx.w"] + params["gen.encx.b"]
    skips = []
    for lvl in range(cfg.num_levels):
        skips.append(u)
        u = u @ params[f"gen.down{lvl}.x.w"] + params[f"gen.down{lvl}.x.b"]
    skips.append(u)
    for j in range(cfg.blocks_per_level):
        u = _block(params, f"gen.bot{j}", u, cfg)
        u = _res(params, f"gen.bot{j}.r", u)
    u = u + skips.pop()
    for lvl in range(cfg.num_levels):
        u = u @ params[f"gen.up{lvl}.lin.x.w"] + params[f"gen.up{lvl}.lin.x.b"]
        u = u + skips.pop()
        r = u
        for j in range(cfg.blocks_per_level):
            u = _block(params, f"gen.up{lvl}.blk{j}", u, cfg)
            u = _res(params, f"gen.up{lvl}.blk{j}.r", u)
        u = u + r
        u = _layernorm(u, params[f"gen.up{lvl}.lnx.g"], params[f"gen.up{lvl}.lnx.b"])
    hm = _res(params, "gen.mu.blk.r", _block(params, "gen.mu.blk", u, cfg))
    mu = hm @ params["gen.mu.out.w"] + params["gen.mu.out.b"]
    hs = _res(params, "gen.sig.blk.r", _block(params, "gen.sig.blk", u, cfg))
    raw = hs @ params["gen.sig.out.w"] + params["gen.sig.out.b"]
    sigma = np.logaddexp(0.0, raw) + cfg.sigma_floor
    return mu, sigma


def ar_log_likelihood(params, cfg, x):
    """Exact log density of ``x``, summed per sequence, averaged over the batch."""
    mu, sigma = ar_forward(params, cfg, x)
    z = (x - mu) / sigma
    logp = -0.5 * z * z - np.log(sigma) - 0.5 * np.log(2.0 * np.pi)
    return float(logp.sum(axis=(1, 2)).mean())
