"""Tests for the block architecture: path equivalence, causality, gradients."""

import numpy as np
import pytest

from lsvae import net
from lsvae import numerics as nm
from lsvae.numerics import value_of


def small_cfg(**kw):
    base = dict(
        data_dim=2, latent_dim=3, hidden=4, state_size=3,
        num_levels=2, blocks_per_level=1, diag=True, dt_min=0.05, dt_max=0.5,
    )
    base.update(kw)
    return net.ModelConfig(**base)


def tiny_cfg(**kw):
    base = dict(
        data_dim=1, latent_dim=2, hidden=3, state_size=2,
        num_levels=1, blocks_per_level=1, diag=True, dt_min=0.1, dt_max=0.5,
    )
    base.update(kw)
    return net.ModelConfig(**base)


def noisy_params(cfg, seed):
    # zero-init biases leave position 0 constant across channels, where
    # LayerNorm amplifies FFT roundoff; jitter everything so comparisons
    # between execution paths run at generic parameter values
    rng = np.random.default_rng(seed + 1000)
    p = net.init_params(cfg, seed=seed)
    return {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in p.items()}


def test_block_plan_widths():
    cfg = small_cfg(blocks_per_level=2)
    assert net.block_plan(cfg) == [
        ("bot0", 16), ("bot1", 16),
        ("up0.blk0", 8), ("up0.blk1", 8),
        ("up1.blk0", 4), ("up1.blk1", 4),
        ("mu.blk", 4), ("sig.blk", 4),
    ]


# ---------------------------------------------------------------------------
# convolution and recurrent paths agree


@pytest.mark.parametrize("diag", [True, False])
def test_conv_scan_agree(diag):
    cfg = small_cfg(diag=diag, num_levels=1 if not diag else 2)
    p = noisy_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    z = rng.standard_normal((2, 12, cfg.latent_dim))
    x = rng.standard_normal((2, 12, cfg.data_dim))

    for fwd, args in [
        (net.prior_forward, (z,)),
        (net.inf_forward, (x,)),
        (net.gen_forward, (z,)),
    ]:
        gc = fwd(p, cfg, *args, mode="conv")
        gs = fwd(p, cfg, *args, mode="scan")
        assert np.max(np.abs(gc.mu - gs.mu)) < 1e-8
        assert np.max(np.abs(gc.sigma - gs.sigma)) < 1e-8


def test_conv_scan_agree_with_x_feedback():
    cfg = small_cfg(decoder_uses_x=True)
    p = noisy_params(cfg, seed=2)
    rng = np.random.default_rng(3)
    z = rng.standard_normal((2, 10, cfg.latent_dim))
    x = rng.standard_normal((2, 10, cfg.data_dim))
    gc = net.gen_forward(p, cfg, z, x=x, mode="conv")
    gs = net.gen_forward(p, cfg, z, x=x, mode="scan")
    assert np.max(np.abs(gc.mu - gs.mu)) < 1e-8


def test_unknown_mode_rejected():
    cfg = tiny_cfg()
    p = net.init_params(cfg)
    z = np.zeros((1, 4, cfg.latent_dim))
    with pytest.raises(ValueError):
        net.prior_forward(p, cfg, z, mode="banana")


# ---------------------------------------------------------------------------
# steppers reproduce the batch paths


def test_prior_stepper_matches_batch():
    cfg = small_cfg()
    p = net.init_params(cfg, seed=4)
    rng = np.random.default_rng(5)
    B, L = 3, 9
    z = rng.standard_normal((B, L, cfg.latent_dim))
    ref = net.prior_forward(p, cfg, z, mode="scan")
    stepper = net.StackStepper(p, cfg, "prior", B)
    for n in range(L):
        z_prev = z[:, n - 1] if n > 0 else np.zeros((B, cfg.latent_dim))
        mu, sg = stepper.step(z_prev)
        assert np.max(np.abs(mu - ref.mu[:, n])) < 1e-9, f"step {n}"
        assert np.max(np.abs(sg - ref.sigma[:, n])) < 1e-9


def test_inf_stepper_matches_batch():
    cfg = small_cfg()
    p = net.init_params(cfg, seed=6)
    rng = np.random.default_rng(7)
    B, L = 2, 7
    x = rng.standard_normal((B, L, cfg.data_dim))
    ref = net.inf_forward(p, cfg, x, mode="scan")
    stepper = net.StackStepper(p, cfg, "inf", B)
    for n in range(L):
        mu, sg = stepper.step(x[:, n])
        assert np.max(np.abs(mu - ref.mu[:, n])) < 1e-9
        assert np.max(np.abs(sg - ref.sigma[:, n])) < 1e-9


@pytest.mark.parametrize("uses_x", [False, True])
def test_gen_stepper_matches_batch(uses_x):
    cfg = small_cfg(decoder_uses_x=uses_x)
    p = net.init_params(cfg, seed=8)
    rng = np.random.default_rng(9)
    B, L = 2, 8
    z = rng.standard_normal((B, L, cfg.latent_dim))
    x = rng.standard_normal((B, L, cfg.data_dim))
    ref = net.gen_forward(p, cfg, z, x=x if uses_x else None, mode="scan")
    stepper = net.StackStepper(p, cfg, "gen", B)
    for n in range(L):
        if uses_x:
            x_prev = x[:, n - 1] if n > 0 else np.zeros((B, cfg.data_dim))
            mu, sg = stepper.step(z[:, n], x_prev)
        else:
            mu, sg = stepper.step(z[:, n])
        assert np.max(np.abs(mu - ref.mu[:, n])) < 1e-9, f"step {n}"
        assert np.max(np.abs(sg - ref.sigma[:, n])) < 1e-9


def test_stepper_rejects_unknown_kind():
    cfg = tiny_cfg()
    p = net.init_params(cfg)
    with pytest.raises(ValueError):
        net.StackStepper(p, cfg, "decoder", 1)


# ---------------------------------------------------------------------------
# causality of standalone block operations


def perturbed(arr, k, seed=0):
    out = arr.copy()
    out[:, k] += 1.0 + np.random.default_rng(seed).standard_normal(arr.shape[2])
    return out


def test_prior_block_strictly_causal():
    cfg = tiny_cfg()
    p = net.init_params(cfg, seed=10)
    rng = np.random.default_rng(11)
    z = rng.standard_normal((2, 8, cfg.hidden))
    base = net.prior_block_forward(p, "prior.mu.blk", z, cfg, mode="scan")
    out = net.prior_block_forward(p, "prior.mu.blk", perturbed(z, 3), cfg, mode="scan")
    assert np.array_equal(base[:, :4], out[:, :4])
    assert np.max(np.abs(base[:, 4:] - out[:, 4:])) > 1e-10
    # FFT mode is causal up to roundoff only
    cbase = net.prior_block_forward(p, "prior.mu.blk", z, cfg, mode="conv")
    cout = net.prior_block_forward(p, "prior.mu.blk", perturbed(z, 3), cfg, mode="conv")
    assert np.max(np.abs(cbase[:, :4] - cout[:, :4])) < 1e-10


def test_inf_block_causal_inclusive():
    cfg = tiny_cfg()
    p = net.init_params(cfg, seed=12)
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 8, cfg.hidden))
    base = net.inf_block_forward(p, "inf.mu.blk", x, cfg, mode="scan")
    out = net.inf_block_forward(p, "inf.mu.blk", perturbed(x, 3), cfg, mode="scan")
    assert np.array_equal(base[:, :3], out[:, :3])
    assert np.max(np.abs(base[:, 3] - out[:, 3])) > 1e-10


def test_gen_block_causality_split():
    cfg = tiny_cfg()
    p = net.init_params(cfg, seed=14)
    rng = np.random.default_rng(15)
    x = rng.standard_normal((2, 8, cfg.hidden))
    z = rng.standard_normal((2, 8, cfg.hidden))
    bx, bz = net.gen_block_forward(p, "gen.mu.blk", x, z, cfg, mode="scan")
    # strictly causal in x: step 3 perturbation invisible through step 3
    ox, oz = net.gen_block_forward(p, "gen.mu.blk", perturbed(x, 3), z, cfg, mode="scan")
    assert np.array_equal(bx[:, :4], ox[:, :4])
    assert np.array_equal(bz[:, :4], oz[:, :4])
    assert np.max(np.abs(bx[:, 4:] - ox[:, 4:])) > 1e-10
    # inclusive in z: current step leaks through the passthrough immediately
    ox, oz = net.gen_block_forward(p, "gen.mu.blk", x, perturbed(z, 3), cfg, mode="scan")
    assert np.array_equal(bx[:, :3], ox[:, :3])
    assert np.array_equal(bz[:, :3], oz[:, :3])
    assert np.max(np.abs(bx[:, 3] - ox[:, 3])) > 1e-10
    assert np.max(np.abs(bz[:, 3] - oz[:, 3])) > 1e-10


# ---------------------------------------------------------------------------
# causality of whole stacks


def test_prior_forward_strictly_causal():
    cfg = small_cfg()
    p = net.init_params(cfg, seed=16)
    rng = np.random.default_rng(17)
    z = rng.standard_normal((2, 10, cfg.latent_dim))
    base = net.prior_forward(p, cfg, z, mode="scan")
    out = net.prior_forward(p, cfg, perturbed(z, 4), mode="scan")
    assert np.array_equal(base.mu[:, :5], out.mu[:, :5])
    assert np.array_equal(base.sigma[:, :5], out.sigma[:, :5])
    assert np.max(np.abs(base.mu[:, 5:] - out.mu[:, 5:])) > 1e-10


def test_prior_first_step_ignores_input():
    cfg = small_cfg()
    p = net.init_params(cfg, seed=18)
    rng = np.random.default_rng(19)
    a = net.prior_forward(p, cfg, rng.standard_normal((2, 6, cfg.latent_dim)), mode="scan")
    b = net.prior_forward(p, cfg, rng.standard_normal((2, 6, cfg.latent_dim)), mode="scan")
    assert np.array_equal(a.mu[:, 0], b.mu[:, 0])
    assert np.array_equal(a.sigma[:, 0], b.sigma[:, 0])


def test_inf_forward_causal_inclusive():
    cfg = small_cfg()
    p = net.init_params(cfg, seed=20)
    rng = np.random.default_rng(21)
    x = rng.standard_normal((2, 10, cfg.data_dim))
    base = net.inf_forward(p, cfg, x, mode="scan")
    out = net.inf_forward(p, cfg, perturbed(x, 4), mode="scan")
    assert np.array_equal(base.mu[:, :4], out.mu[:, :4])
    assert np.max(np.abs(base.mu[:, 4] - out.mu[:, 4])) > 1e-10


def test_gen_forward_causality():
    cfg = small_cfg()
    p = net.init_params(cfg, seed=22)
    rng = np.random.default_rng(23)
    z = rng.standard_normal((2, 10, cfg.latent_dim))
    base = net.gen_forward(p, cfg, z, mode="scan")
    out = net.gen_forward(p, cfg, perturbed(z, 4), mode="scan")
    assert np.array_equal(base.mu[:, :4], out.mu[:, :4])
    assert np.max(np.abs(base.mu[:, 4] - out.mu[:, 4])) > 1e-10

    cfg = small_cfg(decoder_uses_x=True)
    p = net.init_params(cfg, seed=24)
    x = rng.standard_normal((2, 10, cfg.data_dim))
    base = net.gen_forward(p, cfg, z, x=x, mode="scan")
    out = net.gen_forward(p, cfg, z, x=perturbed(x, 4), mode="scan")
    assert np.array_equal(base.mu[:, :5], out.mu[:, :5])
    assert np.max(np.abs(base.mu[:, 5:] - out.mu[:, 5:])) > 1e-10


def test_gen_forward_ignores_x_without_feedback():
    cfg = small_cfg(decoder_uses_x=False)
    p = net.init_params(cfg, seed=25)
    rng = np.random.default_rng(26)
    z = rng.standard_normal((2, 6, cfg.latent_dim))
    a = net.gen_forward(p, cfg, z, x=rng.standard_normal((2, 6, cfg.data_dim)))
    b = net.gen_forward(p, cfg, z, x=rng.standard_normal((2, 6, cfg.data_dim)))
    c = net.gen_forward(p, cfg, z, x=None)
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.mu, c.mu)
    assert np.array_equal(a.sigma, c.sigma)


def test_gen_forward_requires_x_with_feedback():
    cfg = tiny_cfg(decoder_uses_x=True)
    p = net.init_params(cfg)
    z = np.zeros((1, 4, cfg.latent_dim))
    with pytest.raises(ValueError):
        net.gen_forward(p, cfg, z)


def test_sigma_floor():
    cfg = small_cfg(sigma_floor=1e-4)
    p = net.init_params(cfg, seed=27)
    rng = np.random.default_rng(28)
    z = rng.standard_normal((2, 6, cfg.latent_dim))
    g = net.prior_forward(p, cfg, z)
    assert np.all(value_of(g.sigma) >= 1e-4)


# ---------------------------------------------------------------------------
# gradients flow to parameters in both modes


def _stack_loss(fwd, p, cfg, name, args, mode):
    def f(v):
        q = dict(p)
        q[name] = v
        g = fwd(q, cfg, *args, mode=mode)
        return nm.add(nm.sum_(g.mu), nm.sum_(g.sigma))

    return f


def test_grads_through_stacks():
    cfg = tiny_cfg()
    p = net.init_params(cfg, seed=29)
    rng = np.random.default_rng(30)
    z = rng.standard_normal((1, 5, cfg.latent_dim))
    x = rng.standard_normal((1, 5, cfg.data_dim))

    for name in ["prior.enc.w", "prior.bot0.a", "prior.up0.blk0.mix.w", "prior.mu.out.w"]:
        err = nm.grad_check(_stack_loss(net.prior_forward, p, cfg, name, (z,), "conv"), p[name])
        assert err < 1e-4, f"{name}: {err:.2e}"
    err = nm.grad_check(_stack_loss(net.prior_forward, p, cfg, "prior.bot0.a", (z,), "scan"), p["prior.bot0.a"])
    assert err < 1e-4

    err = nm.grad_check(_stack_loss(net.inf_forward, p, cfg, "inf.enc.w", (x,), "conv"), p["inf.enc.w"])
    assert err < 1e-4

    for name in ["gen.x0", "gen.bot0.evec", "gen.bot0.r.l1.w", "gen.mu.out.w"]:
        err = nm.grad_check(_stack_loss(net.gen_forward, p, cfg, name, (z,), "conv"), p[name])
        assert err < 1e-4, f"{name}: {err:.2e}"
    err = nm.grad_check(_stack_loss(net.gen_forward, p, cfg, "gen.bot0.evec", (z,), "scan"), p["gen.bot0.evec"])
    assert err < 1e-4


def test_grads_dense_mode():
    cfg = tiny_cfg(diag=False)
    p = net.init_params(cfg, seed=31)
    rng = np.random.default_rng(32)
    z = rng.standard_normal((1, 4, cfg.latent_dim))
    err = nm.grad_check(
        _stack_loss(net.prior_forward, p, cfg, "prior.bot0.a", (z,), "conv"),
        p["prior.bot0.a"], h=1e-4,
    )
    assert err < 1e-4


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg(decoder_uses_x=True)
    params = net.init_params(cfg, seed=33)
    ema = {k: v + 0.25 for k, v in params.items()}
    meta = {"step": 17, "epoch": 3, "rng": "state-blob"}
    path = tmp_path / "ckpt.npz"
    net.save_checkpoint(path, cfg, {"params": params, "ema": ema}, meta)

    cfg2, groups, meta2 = net.load_checkpoint(path)
    assert cfg2 == cfg
    assert meta2 == meta
    assert set(groups) == {"params", "ema"}
    assert set(groups["params"]) == set(params)
    for k, v in params.items():
        got = groups["params"][k]
        assert got.dtype == v.dtype and np.array_equal(got, v)
    for k, v in ema.items():
        assert np.array_equal(groups["ema"][k], v)


def test_checkpoint_version_guard(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "ckpt.npz"
    net.save_checkpoint(path, cfg, {"params": net.init_params(cfg)})
    import numpy as _np
    import json as _json
    with _np.load(path) as npz:
        data = {k: npz[k] for k in npz.files}
    data["__format_version__"] = _np.int64(99)
    _np.savez(path, **data)
    with pytest.raises(ValueError):
        net.load_checkpoint(path)


def test_param_count_positive():
    cfg = tiny_cfg()
    p = net.init_params(cfg)
    assert net.count_params(p) == sum(v.size for v in p.values()) > 0
