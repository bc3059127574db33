"""Variational objectives, optimizer, training loop, and samplers.

The model is trained by maximizing a per-sequence evidence bound

    E_q [ log p(x | z) ] - KL( q(z | x) || p(z) ),

with the reconstruction term summed over steps and channels and averaged
over the batch. The KL is computed in closed form between the per-step
diagonal Gaussians by default; a sampled variant and a multi-sample
importance-weighted bound are also provided. Missing data is handled by a
mask: masked entries must be zero-filled in the inputs, reconstruction
terms are dropped per element, and KL terms are dropped for steps with no
observed channel.

Optimization is Adam with decoupled weight decay, global-norm gradient
clipping, and an exponential moving average of the weights kept for
evaluation.
"""

from dataclasses import dataclass

import numpy as np

from . import net
from . import numerics as nm
from .numerics import value_of
from .series import SeriesBatch

LOG2PI = float(np.log(2.0 * np.pi))


def gauss_log_prob(x, mu, sigma):
    """Elementwise log density of x under a diagonal Gaussian."""
    zsc = nm.div(nm.sub(x, mu), sigma)
    return nm.sub(nm.mul(nm.mul(zsc, zsc), -0.5), nm.add(nm.log(sigma), 0.5 * LOG2PI))


def kl_diag_gauss(mu_q, sigma_q, mu_p, sigma_p):
    """Elementwise KL( N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2) )."""
    ratio = nm.div(sigma_q, sigma_p)
    dm = nm.div(nm.sub(mu_q, mu_p), sigma_p)
    quad = nm.mul(nm.add(nm.mul(ratio, ratio), nm.mul(dm, dm)), 0.5)
    return nm.sub(quad, nm.add(nm.log(ratio), 0.5))


def _masked_total(term, mask):
    """Sum over steps and channels (masked), then average over the batch."""
    if mask is not None:
        term = nm.mul(term, mask)
    return nm.mean(nm.sum_(term, axis=(1, 2)))


def step_mask(mask):
    """Per-step weights: a step counts if any of its channels is observed."""
    if mask is None:
        return None
    return (mask.max(axis=2, keepdims=True) > 0).astype(float)


def elbo(params, cfg, x, eps, mask=None, analytic_kl=True, mode="conv"):
    """Single-sample evidence bound; returns {"elbo", "recon", "kl"}.

    Works on plain arrays (returns plain scalars) or on tape Vars (returns
    Vars suitable for `numerics.backward`). ``eps`` is the fixed posterior
    noise with the latent shape (B, L, latent_dim).
    """
    x = value_of(x)
    q = net.inf_forward(params, cfg, x, mode=mode)
    z = nm.add(q.mu, nm.mul(q.sigma, eps))
    pr = net.prior_forward(params, cfg, z, mode=mode)
    g = net.gen_forward(params, cfg, z, x=x if cfg.decoder_uses_x else None, mode=mode)

    recon = _masked_total(gauss_log_prob(x, g.mu, g.sigma), mask)
    if analytic_kl:
        kl_el = kl_diag_gauss(q.mu, q.sigma, pr.mu, pr.sigma)
    else:
        kl_el = nm.sub(gauss_log_prob(z, q.mu, q.sigma), gauss_log_prob(z, pr.mu, pr.sigma))
    kl = _masked_total(kl_el, step_mask(mask))
    return {"elbo": nm.sub(recon, kl), "recon": recon, "kl": kl}


def iwae_bound(params, cfg, x, eps_k, mask=None, mode="conv"):
    """K-sample importance-weighted bound (plain arrays, no tape).

    ``eps_k`` is (K, B, L, latent_dim). With K = 1 this equals the
    single-sample bound with the sampled (non-analytic) KL on the same
    noise.
    """
    params = {k: value_of(v) for k, v in params.items()}
    x = value_of(x)
    smask = step_mask(mask)
    q = net.inf_forward(params, cfg, x, mode=mode)
    K = eps_k.shape[0]
    w = np.empty((K, x.shape[0]))
    for k in range(K):
        z = q.mu + q.sigma * eps_k[k]
        pr = net.prior_forward(params, cfg, z, mode=mode)
        g = net.gen_forward(params, cfg, z, x=x if cfg.decoder_uses_x else None, mode=mode)
        recon = gauss_log_prob(x, g.mu, g.sigma)
        if mask is not None:
            recon = recon * mask
        lq = gauss_log_prob(z, q.mu, q.sigma)
        lp = gauss_log_prob(z, pr.mu, pr.sigma)
        ratio = lp - lq
        if smask is not None:
            ratio = ratio * smask
        w[k] = recon.sum(axis=(1, 2)) + ratio.sum(axis=(1, 2))
    wmax = w.max(axis=0)
    lme = wmax + np.log(np.mean(np.exp(w - wmax), axis=0))
    return float(np.mean(lme))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    m: dict
    v: dict
    ema: dict
    step: int = 0
    ema_decay: float = 0.999


def init_opt(params, ema_decay=0.999):
    return OptState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        ema={k: v.copy() for k, v in params.items()},
        step=0,
        ema_decay=ema_decay,
    )


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint norm is at most ``max_norm``."""
    gn = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and gn > max_norm:
        s = max_norm / gn
        grads = {k: g * s for k, g in grads.items()}
    return grads, gn


def adamw_update(params, grads, opt, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
    """One Adam step with decoupled weight decay; returns the new params.

    Moment buffers and the weight EMA inside ``opt`` are updated in place.
    """
    opt.step += 1
    bc1 = 1.0 - beta1 ** opt.step
    bc2 = 1.0 - beta2 ** opt.step
    # warm-up schedule: without it the average stays glued to the random
    # initialization for the first ~1/(1-decay) steps of a short run
    ed = min(opt.ema_decay, (1.0 + opt.step) / (10.0 + opt.step))
    out = {}
    for k in params:
        g = grads[k]
        opt.m[k] = beta1 * opt.m[k] + (1.0 - beta1) * g
        opt.v[k] = beta2 * opt.v[k] + (1.0 - beta2) * g * g
        mhat = opt.m[k] / bc1
        vhat = opt.v[k] / bc2
        w = params[k] - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * params[k])
        opt.ema[k] = ed * opt.ema[k] + (1.0 - ed) * w
        out[k] = w
    return out


def train_step(params, opt, cfg, batch, rng, lr=1e-3, weight_decay=0.0,
               clip=1.0, analytic_kl=True, mode="conv", kl_scale=1.0):
    """One optimization step on a batch; returns (new_params, stats).

    ``kl_scale`` reweights the divergence term in the optimization objective
    only (annealing device); reported stats are always the unweighted bound.
    """
    tape = nm.Tape()
    pv = {k: tape.var(v) for k, v in params.items()}
    eps = rng.standard_normal((batch.batch, batch.length, cfg.latent_dim))
    out = elbo(pv, cfg, batch.values, eps, batch.mask, analytic_kl, mode)
    if kl_scale == 1.0:
        loss = nm.neg(out["elbo"])
    else:
        loss = nm.sub(nm.mul(out["kl"], kl_scale), out["recon"])
    nm.backward(loss)
    grads = {k: pv[k].grad for k in params}
    stats = {
        "elbo": float(value_of(out["elbo"])),
        "recon": float(value_of(out["recon"])),
        "kl": float(value_of(out["kl"])),
        "grad_norm": 0.0,
    }
    tape.release()
    grads, stats["grad_norm"] = clip_global_norm(grads, clip)
    new_params = adamw_update(params, grads, opt, lr=lr, weight_decay=weight_decay)
    return new_params, stats


def evaluate_elbo(params, cfg, data, mode="conv", batch_size=64):
    """Deterministic bound proxy: posterior noise fixed at zero."""
    totals = 0.0
    count = 0
    for i in range(0, data.batch, batch_size):
        vals = data.values[i:i + batch_size]
        mask = None if data.mask is None else data.mask[i:i + batch_size]
        eps = np.zeros((vals.shape[0], vals.shape[1], cfg.latent_dim))
        out = elbo(params, cfg, vals, eps, mask, analytic_kl=True, mode=mode)
        totals += float(value_of(out["elbo"])) * vals.shape[0]
        count += vals.shape[0]
    return totals / count


def fit(params, cfg, train, val=None, epochs=10, batch_size=32, seed=0,
        lr=1e-3, weight_decay=0.0, clip=1.0, analytic_kl=True, mode="conv",
        callback=None):
    """Epoch loop with shuffling; returns (params, opt, history).

    History rows carry the running train bound and, when a validation set
    is given, the deterministic bound of the EMA weights on it.
    """
    rng = np.random.default_rng(seed)
    opt = init_opt(params)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(train.batch)
        esum, nb = 0.0, 0
        for i in range(0, train.batch, batch_size):
            idx = order[i:i + batch_size]
            sub = SeriesBatch(
                train.values[idx],
                None if train.mask is None else train.mask[idx],
            )
            params, stats = train_step(
                params, opt, cfg, sub, rng, lr=lr, weight_decay=weight_decay,
                clip=clip, analytic_kl=analytic_kl, mode=mode,
            )
            esum += stats["elbo"]
            nb += 1
        row = {"epoch": epoch, "train_elbo": esum / max(nb, 1)}
        if val is not None:
            row["val_elbo"] = evaluate_elbo(opt.ema, cfg, val, mode=mode)
        history.append(row)
        if callback is not None:
            callback(row)
    return params, opt, history


# ---------------------------------------------------------------------------
# sampling


def generate(params, cfg, n, length, rng, temp=1.0, sample_obs=True):
    """Draw n sequences of the given length; returns (x, z).

    Latents are rolled out step by step from the prior; observations are
    decoded in one batched pass unless the decoder feeds back on its own
    output, in which case they are rolled out as well. ``temp`` scales the
    sampling noise (0 gives the mean path).
    """
    params = {k: value_of(v) for k, v in params.items()}
    stepper = net.StackStepper(params, cfg, "prior", n)
    z = np.empty((n, length, cfg.latent_dim))
    prev = np.zeros((n, cfg.latent_dim))
    for t in range(length):
        mu, sg = stepper.step(prev)
        prev = mu + temp * sg * rng.standard_normal(mu.shape)
        z[:, t] = prev
    if cfg.decoder_uses_x:
        gstep = net.StackStepper(params, cfg, "gen", n)
        x = np.empty((n, length, cfg.data_dim))
        xprev = np.zeros((n, cfg.data_dim))
        for t in range(length):
            mu, sg = gstep.step(z[:, t], xprev)
            xprev = mu + (temp * sg * rng.standard_normal(mu.shape) if sample_obs else 0.0)
            x[:, t] = xprev
    else:
        g = net.gen_forward(params, cfg, z, mode="conv")
        x = value_of(g.mu)
        if sample_obs:
            x = x + temp * value_of(g.sigma) * rng.standard_normal(x.shape)
    return x, z


def extrapolate(params, cfg, prefix, total_length, rng, temp=1.0, sample_obs=True):
    """Continue observed prefixes out to ``total_length`` steps.

    The prefix is encoded to posterior-mean latents, the prior state is
    warmed through them, and the remainder is sampled. Output keeps the
    observed prefix verbatim.
    """
    params = {k: value_of(v) for k, v in params.items()}
    prefix = np.asarray(prefix, dtype=float)
    B, lp, _ = prefix.shape
    if total_length < lp:
        raise ValueError("total_length is shorter than the prefix")
    q = net.inf_forward(params, cfg, prefix, mode="conv")
    z = np.empty((B, total_length, cfg.latent_dim))
    z[:, :lp] = value_of(q.mu)
    stepper = net.StackStepper(params, cfg, "prior", B)
    for t in range(lp):
        stepper.step(z[:, t - 1] if t > 0 else np.zeros((B, cfg.latent_dim)))
    prev = z[:, lp - 1]
    for t in range(lp, total_length):
        mu, sg = stepper.step(prev)
        prev = mu + temp * sg * rng.standard_normal(mu.shape)
        z[:, t] = prev
    x = np.empty((B, total_length, cfg.data_dim))
    x[:, :lp] = prefix
    if cfg.decoder_uses_x:
        gstep = net.StackStepper(params, cfg, "gen", B)
        xprev = np.zeros((B, cfg.data_dim))
        for t in range(total_length):
            mu, sg = gstep.step(z[:, t], xprev)
            out = mu + (temp * sg * rng.standard_normal(mu.shape) if sample_obs else 0.0)
            xprev = prefix[:, t] if t < lp else out
            if t >= lp:
                x[:, t] = out
    else:
        g = net.gen_forward(params, cfg, z, mode="conv")
        tail = value_of(g.mu)[:, lp:]
        if sample_obs:
            tail = tail + temp * value_of(g.sigma)[:, lp:] * rng.standard_normal(tail.shape)
        x[:, lp:] = tail
    return x, z


def interpolate(params, cfg, x, mask):
    """Fill masked-out entries with decoder means under posterior-mean latents.

    ``x`` must have missing entries zero-filled; observed entries are
    returned unchanged.
    """
    params = {k: value_of(v) for k, v in params.items()}
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=float)
    q = net.inf_forward(params, cfg, x * mask, mode="conv")
    z = value_of(q.mu)
    g = net.gen_forward(params, cfg, z, x=x * mask if cfg.decoder_uses_x else None, mode="conv")
    return x * mask + (1.0 - mask) * value_of(g.mu)


# ---------------------------------------------------------------------------
# training-state checkpoints


def save_training(path, cfg, params, opt, rng, epoch=0, extra=None):
    """Persist weights, optimizer state, EMA, and the RNG state.

    extra, when given, is a dict of JSON-friendly fields merged into the
    checkpoint metadata (run provenance such as the normalization mode).
    """
    meta = {
        "step": opt.step,
        "epoch": epoch,
        "ema_decay": opt.ema_decay,
        "rng_state": rng.bit_generator.state,
    }
    if extra:
        meta.update(extra)
    groups = {"params": params, "ema": opt.ema, "adam_m": opt.m, "adam_v": opt.v}
    net.save_checkpoint(path, cfg, groups, meta)


def load_training(path):
    """Restore (cfg, params, opt, rng, epoch) for a bitwise-identical resume."""
    cfg, groups, meta = net.load_checkpoint(path)
    opt = OptState(
        m=groups["adam_m"],
        v=groups["adam_v"],
        ema=groups["ema"],
        step=int(meta["step"]),
        ema_decay=float(meta["ema_decay"]),
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return cfg, groups["params"], opt, rng, int(meta["epoch"])
