"""Generation-quality metrics and forecasting scores.

Three sample-quality scores compare a generated set against real data:

- marginal: per-step histogram distance between pooled real and generated
  values on shared uniform bins. 0 for identical samples, 2 for disjoint
  supports.
- classification: held-out cross-entropy of a small sequence classifier
  trained to tell real from generated. Values near log 2 mean the two sets
  are indistinguishable to the evaluator; near 0 means trivially separable.
- prediction: a small seq2seq model is trained on generated data to
  forecast a fixed number of steps ahead, then scored by MSE on real data.

The evaluator is a fixed-capacity model (linear encoder, one bank of
state-space heads, linear readout) built from this package's own pieces so
scores are self-contained and deterministic per seed. Point metrics (MSE
on masked entries, sample-ensemble CRPS) live here too.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import ssm
from . import vae
from .numerics import value_of
from .series import SeriesBatch


@dataclass
class Histogram:
    edges: np.ndarray
    density: np.ndarray


def histogram(values, lo=None, hi=None, bins=50):
    """Normalized density histogram on uniform bins over [lo, hi]."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("cannot histogram an empty sample")
    lo = float(values.min()) if lo is None else float(lo)
    hi = float(values.max()) if hi is None else float(hi)
    if hi <= lo:
        hi = lo + 1.0
    density, edges = np.histogram(values, bins=bins, range=(lo, hi), density=True)
    return Histogram(edges, density)


def _values3(batch):
    if isinstance(batch, SeriesBatch):
        return batch.values
    values = np.asarray(batch, dtype=float)
    if values.ndim != 3:
        raise ValueError(f"expected (batch, length, channels), got {values.shape}")
    return values


def _hist_distance(a, b, bins):
    lo = float(min(a.min(), b.min()))
    hi = float(max(a.max(), b.max()))
    if hi <= lo:
        return 0.0
    width = (hi - lo) / bins
    ha = histogram(a, lo, hi, bins)
    hb = histogram(b, lo, hi, bins)
    return float(np.abs(ha.density - hb.density).sum() * width)


def log_probe_steps(length, count=4, lo_frac=0.005, hi_frac=0.10):
    """Log-spaced step indices between the 0.5% and 10% marks of a sequence."""
    lo = max(lo_frac * length, 1.0)
    hi = max(hi_frac * length, lo + 1.0)
    idx = np.unique(np.round(np.geomspace(lo, hi, count)).astype(int))
    return idx[idx < length]


def marginal_score(real, gen, bins=50, probe_steps=None, pooled=False):
    """Mean over time steps of the histogram distance at each step.

    ``probe_steps`` restricts the average to chosen step indices; ``pooled``
    instead pools every (step, value) pair into one histogram per channel.
    Lower is better; the score lives in [0, 2] and is symmetric.
    """
    rv = _values3(real)
    gv = _values3(gen)
    if rv.shape[0] == 0 or gv.shape[0] == 0:
        raise ValueError("empty batch")
    if rv.shape[1:] != gv.shape[1:]:
        raise ValueError(f"shape mismatch {rv.shape[1:]} vs {gv.shape[1:]}")
    length, channels = rv.shape[1:]
    steps = range(length) if probe_steps is None else probe_steps
    scores = []
    for c in range(channels):
        if pooled:
            scores.append(_hist_distance(rv[:, :, c].ravel(), gv[:, :, c].ravel(), bins))
        else:
            for t in steps:
                scores.append(_hist_distance(rv[:, t, c], gv[:, t, c], bins))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# fixed evaluator model


@dataclass
class EvalModelConfig:
    hidden: int = 16
    state_size: int = 16
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 128
    horizon: int = 10
    holdout: float = 0.2
    max_imbalance: float = 0.1
    dt_min: float = 0.01
    dt_max: float = 1.0


def _eval_dt(cfg):
    return np.geomspace(cfg.dt_min, cfg.dt_max, cfg.hidden)[:, None]


def init_eval_params(cfg, channels, out_dim, seed):
    rng = np.random.default_rng(seed)
    h, n = cfg.hidden, cfg.state_size
    return {
        "enc.w": rng.standard_normal((channels, h)) / np.sqrt(channels),
        "enc.b": np.zeros(h),
        "a": np.tile(-(np.arange(n) + 1.0), (h, 1)),
        "v": rng.standard_normal((h, n)),
        "c": rng.standard_normal((h, n)) / np.sqrt(n),
        "f": 0.1 * rng.standard_normal(h),
        "out.w": rng.standard_normal((h, out_dim)) / np.sqrt(h),
        "out.b": np.zeros(out_dim),
    }


def _eval_trunk(p, x, cfg):
    """Linear encoder then one bank of diagonal state-space heads."""
    u = nm.linear(x, p["enc.w"], p["enc.b"])
    abar, tin = ssm.bank_discretize(p["a"], _eval_dt(cfg), True)
    v0 = ssm.bank_input(tin, p["v"], True)
    kern = ssm.bank_kernel(abar, p["c"], v0, value_of(x).shape[1], True)
    acc = nm.conv_heads(u, kern)
    return nm.gelu(nm.add(acc, nm.mul(u, p["f"])))


def _classifier_logits(p, x, cfg):
    pooled = nm.mean(_eval_trunk(p, x, cfg), axis=1)
    return nm.linear(pooled, p["out.w"], p["out.b"])


def _predictor_out(p, x, cfg):
    return nm.linear(_eval_trunk(p, x, cfg), p["out.w"], p["out.b"])


def _bce_with_logits(logits, labels):
    # softplus(l) - y*l == -[y log s(l) + (1-y) log(1-s(l))]
    return nm.mean(nm.sub(nm.softplus(logits), nm.mul(logits, labels)))


def _train_eval_model(params, loss_fn, n_items, cfg, rng):
    opt = vae.init_opt(params)
    for _ in range(cfg.epochs):
        order = rng.permutation(n_items)
        for i in range(0, n_items, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            tape = nm.Tape()
            pv = {k: tape.var(v) for k, v in params.items()}
            nm.backward(loss_fn(pv, idx))
            grads = {k: pv[k].grad for k in params}
            tape.release()
            grads, _ = vae.clip_global_norm(grads, 1.0)
            params = vae.adamw_update(params, grads, opt, lr=cfg.lr)
    return params


def _stratified_split(n, holdout, rng):
    idx = rng.permutation(n)
    n_test = max(1, int(round(n * holdout)))
    return idx[n_test:], idx[:n_test]


def classification_score(real, gen, cfg=None, seed=0):
    """Held-out real-vs-generated cross-entropy of the fixed evaluator.

    Higher (near log 2) means the sets are indistinguishable; lower means
    the evaluator separates them easily.
    """
    cfg = cfg or EvalModelConfig()
    rv = _values3(real)
    gv = _values3(gen)
    if rv.shape[1:] != gv.shape[1:]:
        raise ValueError(f"shape mismatch {rv.shape[1:]} vs {gv.shape[1:]}")
    n_r, n_g = rv.shape[0], gv.shape[0]
    if abs(n_r - n_g) > cfg.max_imbalance * max(n_r, n_g):
        raise ValueError(f"class imbalance beyond configured bound: {n_r} real vs {n_g} generated")
    rng = np.random.default_rng(seed)
    # stratified holdout so both classes appear in train and test
    rtr, rte = _stratified_split(n_r, cfg.holdout, rng)
    gtr, gte = _stratified_split(n_g, cfg.holdout, rng)
    xtr = np.concatenate([rv[rtr], gv[gtr]])
    ytr = np.concatenate([np.ones((len(rtr), 1)), np.zeros((len(gtr), 1))])
    xte = np.concatenate([rv[rte], gv[gte]])
    yte = np.concatenate([np.ones((len(rte), 1)), np.zeros((len(gte), 1))])

    params = init_eval_params(cfg, rv.shape[2], 1, seed)

    def loss_fn(pv, idx):
        return _bce_with_logits(_classifier_logits(pv, xtr[idx], cfg), ytr[idx])

    params = _train_eval_model(params, loss_fn, xtr.shape[0], cfg, rng)
    return float(value_of(_bce_with_logits(_classifier_logits(params, xte, cfg), yte)))


def prediction_score(real_test, gen, cfg=None, seed=0):
    """Train the evaluator on generated data to forecast ``horizon`` steps
    ahead at every position, then return its MSE on the real test set."""
    cfg = cfg or EvalModelConfig()
    rv = _values3(real_test)
    gv = _values3(gen)
    if rv.shape[1:] != gv.shape[1:]:
        raise ValueError(f"shape mismatch {rv.shape[1:]} vs {gv.shape[1:]}")
    k = cfg.horizon
    if rv.shape[1] <= k:
        raise ValueError(f"sequences of length {rv.shape[1]} cannot be forecast {k} ahead")
    rng = np.random.default_rng(seed)
    params = init_eval_params(cfg, rv.shape[2], rv.shape[2], seed)
    # the last k positions have no target; a weight mask keeps shapes static
    valid = np.zeros((1,) + gv.shape[1:])
    valid[:, :-k] = 1.0
    shifted = np.zeros_like(gv)
    shifted[:, :-k] = gv[:, k:]

    def loss_fn(pv, idx):
        out = _predictor_out(pv, gv[idx], cfg)
        err = nm.mul(nm.sub(out, shifted[idx]), valid)
        return nm.mul(nm.sum_(nm.mul(err, err)), 1.0 / (valid.sum() * len(idx)))

    params = _train_eval_model(params, loss_fn, gv.shape[0], cfg, rng)
    pred = value_of(_predictor_out(params, rv, cfg))
    return float(np.mean((pred[:, :-k] - rv[:, k:]) ** 2))


# ---------------------------------------------------------------------------
# point metrics


def mse(pred, target, mask=None):
    """Mean squared error over observed entries."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    err = (pred - target) ** 2
    if mask is None:
        return float(err.mean())
    mask = np.asarray(mask, dtype=float)
    total = mask.sum()
    if total == 0:
        raise ValueError("mask selects no entries")
    return float((err * mask).sum() / total)


def crps(ensemble, target, mask=None):
    """Sample-based continuous ranked probability score, averaged over points.

    ``ensemble`` holds m sampled forecasts along axis 0 for every target
    point: mean_i |X_i - y| - (1/2) mean_{i,j} |X_i - X_j|, with the pair
    mean over all ordered pairs. A single-member ensemble reduces to the
    absolute error.
    """
    ensemble = np.asarray(ensemble, dtype=float)
    target = np.asarray(target, dtype=float)
    if ensemble.shape[1:] != target.shape:
        raise ValueError(f"ensemble {ensemble.shape} does not stack over target {target.shape}")
    m = ensemble.shape[0]
    term1 = np.abs(ensemble - target[None]).mean(axis=0)
    srt = np.sort(ensemble, axis=0)
    coef = (2.0 * np.arange(m) - m + 1.0).reshape((m,) + (1,) * target.ndim)
    # sum over unordered pairs of |x_i - x_j| via the sorted prefix identity
    pair_sum = (coef * srt).sum(axis=0)
    term2 = pair_sum / (m * m)
    per_point = term1 - term2
    if mask is None:
        return float(per_point.mean())
    mask = np.asarray(mask, dtype=float)
    total = mask.sum()
    if total == 0:
        raise ValueError("mask selects no entries")
    return float((per_point * mask).sum() / total)
