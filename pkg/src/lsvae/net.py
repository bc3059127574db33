"""Block architecture tying banked state-space heads into three stacks.

The model is a sequence VAE built from three stacks of residual blocks:

* prior:     z -> Gaussian over the next latent step, strictly causal in z.
* inference: x -> Gaussian over the current latent step, causal in x with
             the current step included.
* generative: (z [, x]) -> Gaussian over the current observation, with the
             current z included and only strictly past x.

Each block wraps a bank of state-space heads (one head per channel) with a
GELU, a channel-mixing linear map, a LayerNorm, and a residual connection,
followed by a two-layer MLP residual unit. Stacks arrange blocks in a
U-shape: widths double on the way down through linear maps whose inputs are
kept as skip connections, a group of blocks runs at the widest point, and
each level on the way up halves the width, adds the matching skip, and runs
another group of blocks inside a residual wrapper.

Causality is handled once per stack rather than once per block: the prior
shifts z right at the entrance (the encoder bias acts as a learned start
token), the generative stack shifts x the same way, and inside the stacks
every block consumes its streams as-is, except that the generative block
delays its z stream by one step on the state path only. The standalone
block functions exported here apply their own shifts so each is causal in
isolation.

All batch-mode forwards run either in convolution mode ("conv", kernels
applied with FFTs) or recurrent mode ("scan", a fused sequential state
update); both are differentiable through the tape in `numerics` and agree
to numerical precision. `StackStepper` evaluates one step at a time with
plain arrays for generation.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from . import ssm
from .numerics import value_of
from .series import GaussianSeq

FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    data_dim: int = 1
    latent_dim: int = 4
    hidden: int = 16
    state_size: int = 16
    num_levels: int = 1
    blocks_per_level: int = 1
    diag: bool = True
    dt_min: float = 0.01
    dt_max: float = 1.0
    decoder_uses_x: bool = False
    sigma_floor: float = 1e-4

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _dt_bank(cfg, width):
    """Per-head step sizes, log-spaced so heads cover several timescales."""
    steps = np.geomspace(cfg.dt_min, cfg.dt_max, width)
    return steps[:, None] if cfg.diag else steps[:, None, None]


def _a_init(cfg, width):
    if cfg.diag:
        return np.tile(-(np.arange(cfg.state_size) + 1.0), (width, 1))
    return np.tile(ssm.hippo_legs(cfg.state_size), (width, 1, 1))


def block_plan(cfg):
    """Ordered (name, width) pairs for every block position in one stack."""
    wide = cfg.hidden * (2 ** cfg.num_levels)
    plan = [(f"bot{j}", wide) for j in range(cfg.blocks_per_level)]
    w = wide
    for lvl in range(cfg.num_levels):
        w //= 2
        plan += [(f"up{lvl}.blk{j}", w) for j in range(cfg.blocks_per_level)]
    plan += [("mu.blk", cfg.hidden), ("sig.blk", cfg.hidden)]
    return plan


# ---------------------------------------------------------------------------
# initialization


def init_params(cfg, seed=0):
    """Flat name -> array dictionary holding every trainable parameter."""
    rng = np.random.default_rng(seed)
    p = {}

    def lin(pre, i, o):
        p[pre + ".w"] = rng.standard_normal((i, o)) / np.sqrt(i)
        p[pre + ".b"] = np.zeros(o)

    def res(pre, w):
        lin(pre + ".l1", w, 2 * w)
        lin(pre + ".l2", 2 * w, w)

    def single_block(pre, w):
        n = cfg.state_size
        p[pre + ".a"] = _a_init(cfg, w)
        p[pre + ".v"] = rng.standard_normal((w, n))
        p[pre + ".c"] = rng.standard_normal((w, n)) / np.sqrt(n)
        p[pre + ".f"] = 0.1 * rng.standard_normal(w)
        lin(pre + ".mix", w, w)
        p[pre + ".ln.g"] = np.ones(w)
        p[pre + ".ln.b"] = np.zeros(w)
        res(pre + ".r", w)

    def gen_block(pre, w):
        n = cfg.state_size
        p[pre + ".a"] = _a_init(cfg, w)
        p[pre + ".bvec"] = rng.standard_normal((w, n))
        p[pre + ".evec"] = rng.standard_normal((w, n))
        p[pre + ".cx"] = rng.standard_normal((w, n)) / np.sqrt(n)
        p[pre + ".cz"] = rng.standard_normal((w, n)) / np.sqrt(n)
        for name in ["dx", "fx", "dz", "fz"]:
            p[pre + f".{name}"] = 0.1 * rng.standard_normal(w)
        lin(pre + ".mixx", w, w)
        lin(pre + ".mixz", w, w)
        for ln in ["lnx", "lnz"]:
            p[pre + f".{ln}.g"] = np.ones(w)
            p[pre + f".{ln}.b"] = np.zeros(w)
        lin(pre + ".r.l1", 2 * w, 4 * w)
        lin(pre + ".r.l2", 4 * w, 2 * w)

    plan = block_plan(cfg)

    for s, in_dim in [("prior", cfg.latent_dim), ("inf", cfg.data_dim)]:
        lin(f"{s}.enc", in_dim, cfg.hidden)
        w = cfg.hidden
        for lvl in range(cfg.num_levels):
            lin(f"{s}.down{lvl}", w, 2 * w)
            w *= 2
        for lvl in range(cfg.num_levels):
            lin(f"{s}.up{lvl}.lin", w, w // 2)
            w //= 2
            p[f"{s}.up{lvl}.ln.g"] = np.ones(w)
            p[f"{s}.up{lvl}.ln.b"] = np.zeros(w)
        for name, width in plan:
            single_block(f"{s}.{name}", width)
        lin(f"{s}.mu.out", cfg.hidden, cfg.latent_dim)
        lin(f"{s}.sig.out", cfg.hidden, cfg.latent_dim)

    lin("gen.encz", cfg.latent_dim, cfg.hidden)
    if cfg.decoder_uses_x:
        lin("gen.encx", cfg.data_dim, cfg.hidden)
    else:
        p["gen.x0"] = rng.standard_normal(cfg.hidden) / np.sqrt(cfg.hidden)
    w = cfg.hidden
    for lvl in range(cfg.num_levels):
        lin(f"gen.down{lvl}.x", w, 2 * w)
        lin(f"gen.down{lvl}.z", w, 2 * w)
        w *= 2
    for lvl in range(cfg.num_levels):
        lin(f"gen.up{lvl}.lin.x", w, w // 2)
        lin(f"gen.up{lvl}.lin.z", w, w // 2)
        w //= 2
        for ln in ["lnx", "lnz"]:
            p[f"gen.up{lvl}.{ln}.g"] = np.ones(w)
            p[f"gen.up{lvl}.{ln}.b"] = np.zeros(w)
    for name, width in plan:
        gen_block(f"gen.{name}", width)
    lin("gen.mu.out", cfg.hidden, cfg.data_dim)
    lin("gen.sig.out", cfg.hidden, cfg.data_dim)
    return p


def count_params(params):
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------------------
# block forwards (batch mode)


def _block_core(p, pre, u, cfg, width, mode):
    """Single-stream block on a pre-aligned input stream (B, L, width)."""
    abar, tin = ssm.bank_discretize(p[pre + ".a"], _dt_bank(cfg, width), cfg.diag)
    v0 = ssm.bank_input(tin, p[pre + ".v"], cfg.diag)
    c = p[pre + ".c"]
    if mode == "conv":
        length = value_of(u).shape[1]
        acc = nm.conv_heads(u, ssm.bank_kernel(abar, c, v0, length, cfg.diag))
    elif mode == "scan":
        acc = ssm.bank_read(nm.state_scan(abar, [(v0, u)], cfg.diag), c)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    y = nm.gelu(nm.add(acc, nm.mul(u, p[pre + ".f"])))
    mixed = nm.linear(y, p[pre + ".mix.w"], p[pre + ".mix.b"])
    return nm.add(nm.layernorm(mixed, p[pre + ".ln.g"], p[pre + ".ln.b"]), u)


def _gen_block_core(p, pre, hx, hz, cfg, width, mode):
    """Two-stream block: inclusive in its x stream, state path one step behind in z.

    The shared state is driven by the current x value and the previous z
    value; both readouts additionally see the current step of each stream
    directly, so the z stream contributes its current step through the
    passthrough terms only.
    """
    abar, tin = ssm.bank_discretize(p[pre + ".a"], _dt_bank(cfg, width), cfg.diag)
    bv = ssm.bank_input(tin, p[pre + ".bvec"], cfg.diag)
    ev = ssm.bank_input(tin, p[pre + ".evec"], cfg.diag)
    cx, cz = p[pre + ".cx"], p[pre + ".cz"]
    uz = nm.shift_time(hz)
    if mode == "conv":
        length = value_of(hx).shape[1]
        kxb = ssm.bank_kernel(abar, cx, bv, length, cfg.diag)
        kxe = ssm.bank_kernel(abar, cx, ev, length, cfg.diag)
        kzb = ssm.bank_kernel(abar, cz, bv, length, cfg.diag)
        kze = ssm.bank_kernel(abar, cz, ev, length, cfg.diag)
        accx = nm.add(nm.conv_heads(hx, kxb), nm.conv_heads(uz, kxe))
        accz = nm.add(nm.conv_heads(hx, kzb), nm.conv_heads(uz, kze))
    elif mode == "scan":
        states = nm.state_scan(abar, [(bv, hx), (ev, uz)], cfg.diag)
        accx = ssm.bank_read(states, cx)
        accz = ssm.bank_read(states, cz)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    gx = nm.gelu(nm.add(accx, nm.add(nm.mul(hx, p[pre + ".dx"]), nm.mul(hz, p[pre + ".fx"]))))
    gz = nm.gelu(nm.add(accz, nm.add(nm.mul(hx, p[pre + ".dz"]), nm.mul(hz, p[pre + ".fz"]))))
    ox = nm.linear(gx, p[pre + ".mixx.w"], p[pre + ".mixx.b"])
    oz = nm.linear(gz, p[pre + ".mixz.w"], p[pre + ".mixz.b"])
    outx = nm.add(nm.layernorm(ox, p[pre + ".lnx.g"], p[pre + ".lnx.b"]), hx)
    outz = nm.add(nm.layernorm(oz, p[pre + ".lnz.g"], p[pre + ".lnz.b"]), hz)
    return outx, outz


def _res_mlp(p, pre, h):
    t = nm.gelu(nm.linear(h, p[pre + ".l1.w"], p[pre + ".l1.b"]))
    return nm.add(nm.linear(t, p[pre + ".l2.w"], p[pre + ".l2.b"]), h)


def _res_pair(p, pre, hx, hz):
    width = value_of(hx).shape[-1]
    h = nm.concat_last(hx, hz)
    o = _res_mlp(p, pre, h)
    return nm.slice_last(o, 0, width), nm.slice_last(o, width, 2 * width)


# standalone causal block operations; each applies its own alignment


def prior_block_forward(p, pre, z, cfg, mode="conv"):
    """Strictly causal block: output step n depends on z[:, :n] only."""
    width = value_of(z).shape[-1]
    return _block_core(p, pre, nm.shift_time(z), cfg, width, mode)


def inf_block_forward(p, pre, x, cfg, mode="conv"):
    """Causal block including the current step: output n sees x[:, :n+1]."""
    width = value_of(x).shape[-1]
    return _block_core(p, pre, x, cfg, width, mode)


def gen_block_forward(p, pre, x, z, cfg, mode="conv"):
    """Block pair op: strictly causal in x, current step included for z."""
    width = value_of(x).shape[-1]
    return _gen_block_core(p, pre, nm.shift_time(x), z, cfg, width, mode)


# ---------------------------------------------------------------------------
# stacks


def _body_single(p, s, cfg, u, mode):
    skips = []
    w = cfg.hidden
    for lvl in range(cfg.num_levels):
        skips.append(u)
        u = nm.linear(u, p[f"{s}.down{lvl}.w"], p[f"{s}.down{lvl}.b"])
        w *= 2
    skips.append(u)
    for j in range(cfg.blocks_per_level):
        u = _block_core(p, f"{s}.bot{j}", u, cfg, w, mode)
        u = _res_mlp(p, f"{s}.bot{j}.r", u)
    u = nm.add(u, skips.pop())
    for lvl in range(cfg.num_levels):
        w //= 2
        u = nm.linear(u, p[f"{s}.up{lvl}.lin.w"], p[f"{s}.up{lvl}.lin.b"])
        u = nm.add(u, skips.pop())
        r = u
        for j in range(cfg.blocks_per_level):
            u = _block_core(p, f"{s}.up{lvl}.blk{j}", u, cfg, w, mode)
            u = _res_mlp(p, f"{s}.up{lvl}.blk{j}.r", u)
        u = nm.add(u, r)
        u = nm.layernorm(u, p[f"{s}.up{lvl}.ln.g"], p[f"{s}.up{lvl}.ln.b"])
    return u


def _body_pair(p, cfg, hx, hz, mode):
    skips = []
    w = cfg.hidden
    for lvl in range(cfg.num_levels):
        skips.append((hx, hz))
        hx = nm.linear(hx, p[f"gen.down{lvl}.x.w"], p[f"gen.down{lvl}.x.b"])
        hz = nm.linear(hz, p[f"gen.down{lvl}.z.w"], p[f"gen.down{lvl}.z.b"])
        w *= 2
    skips.append((hx, hz))
    for j in range(cfg.blocks_per_level):
        hx, hz = _gen_block_core(p, f"gen.bot{j}", hx, hz, cfg, w, mode)
        hx, hz = _res_pair(p, f"gen.bot{j}.r", hx, hz)
    sx, sz = skips.pop()
    hx, hz = nm.add(hx, sx), nm.add(hz, sz)
    for lvl in range(cfg.num_levels):
        w //= 2
        hx = nm.linear(hx, p[f"gen.up{lvl}.lin.x.w"], p[f"gen.up{lvl}.lin.x.b"])
        hz = nm.linear(hz, p[f"gen.up{lvl}.lin.z.w"], p[f"gen.up{lvl}.lin.z.b"])
        sx, sz = skips.pop()
        hx, hz = nm.add(hx, sx), nm.add(hz, sz)
        rx, rz = hx, hz
        for j in range(cfg.blocks_per_level):
            hx, hz = _gen_block_core(p, f"gen.up{lvl}.blk{j}", hx, hz, cfg, w, mode)
            hx, hz = _res_pair(p, f"gen.up{lvl}.blk{j}.r", hx, hz)
        hx, hz = nm.add(hx, rx), nm.add(hz, rz)
        hx = nm.layernorm(hx, p[f"gen.up{lvl}.lnx.g"], p[f"gen.up{lvl}.lnx.b"])
        hz = nm.layernorm(hz, p[f"gen.up{lvl}.lnz.g"], p[f"gen.up{lvl}.lnz.b"])
    return hx, hz


def _head_single(p, s, cfg, u, mode):
    hm = _block_core(p, f"{s}.mu.blk", u, cfg, cfg.hidden, mode)
    hm = _res_mlp(p, f"{s}.mu.blk.r", hm)
    mu = nm.linear(hm, p[f"{s}.mu.out.w"], p[f"{s}.mu.out.b"])
    hs = _block_core(p, f"{s}.sig.blk", u, cfg, cfg.hidden, mode)
    hs = _res_mlp(p, f"{s}.sig.blk.r", hs)
    raw = nm.linear(hs, p[f"{s}.sig.out.w"], p[f"{s}.sig.out.b"])
    return mu, nm.add(nm.softplus(raw), cfg.sigma_floor)


def _head_pair(p, cfg, hx, hz, mode):
    hmx, hmz = _gen_block_core(p, "gen.mu.blk", hx, hz, cfg, cfg.hidden, mode)
    hmx, _ = _res_pair(p, "gen.mu.blk.r", hmx, hmz)
    mu = nm.linear(hmx, p["gen.mu.out.w"], p["gen.mu.out.b"])
    hsx, hsz = _gen_block_core(p, "gen.sig.blk", hx, hz, cfg, cfg.hidden, mode)
    hsx, _ = _res_pair(p, "gen.sig.blk.r", hsx, hsz)
    raw = nm.linear(hsx, p["gen.sig.out.w"], p["gen.sig.out.b"])
    return mu, nm.add(nm.softplus(raw), cfg.sigma_floor)


def prior_forward(p, cfg, z, mode="conv"):
    """Gaussian over each latent step given strictly earlier latents."""
    u = nm.linear(nm.shift_time(z), p["prior.enc.w"], p["prior.enc.b"])
    u = _body_single(p, "prior", cfg, u, mode)
    return GaussianSeq(*_head_single(p, "prior", cfg, u, mode))


def inf_forward(p, cfg, x, mode="conv"):
    """Gaussian over each latent step given observations up to that step."""
    u = nm.linear(x, p["inf.enc.w"], p["inf.enc.b"])
    u = _body_single(p, "inf", cfg, u, mode)
    return GaussianSeq(*_head_single(p, "inf", cfg, u, mode))


def gen_forward(p, cfg, z, x=None, mode="conv"):
    """Gaussian over each observation given latents up to that step.

    When the config enables observation feedback the strictly earlier
    observations condition the output as well; otherwise ``x`` is ignored
    and the observation stream starts from a learned constant.
    """
    zv = value_of(z)
    B, L = zv.shape[0], zv.shape[1]
    if cfg.decoder_uses_x:
        if x is None:
            raise ValueError("decoder_uses_x requires the observation argument")
        hx = nm.linear(nm.shift_time(x), p["gen.encx.w"], p["gen.encx.b"])
    else:
        hx = nm.mul(p["gen.x0"], np.ones((B, L, 1)))
    hz = nm.linear(z, p["gen.encz.w"], p["gen.encz.b"])
    hx, hz = _body_pair(p, cfg, hx, hz, mode)
    return GaussianSeq(*_head_pair(p, cfg, hx, hz, mode))


# ---------------------------------------------------------------------------
# step-at-a-time evaluation


class StackStepper:
    """Incremental evaluator for one stack, mirroring the batch forwards.

    Holds one state bank per block plus, for generative blocks, the previous
    step of the block's z stream. Per-step cost does not grow with how many
    steps have been taken. All arithmetic is plain numpy.
    """

    def __init__(self, params, cfg, kind, batch):
        if kind not in ("prior", "inf", "gen"):
            raise ValueError(f"unknown stack kind {kind!r}")
        self.cfg = cfg
        self.kind = kind
        self.batch = batch
        self.p = {k: value_of(v) for k, v in params.items()}
        self.disc = {}
        self.state = {}
        self.zprev = {}
        for name, width in block_plan(cfg):
            pre = f"{kind}.{name}"
            abar, tin = ssm.bank_discretize(self.p[pre + ".a"], _dt_bank(cfg, width), cfg.diag)
            if kind == "gen":
                self.disc[pre] = {
                    "abar": abar,
                    "bv": ssm.bank_input(tin, self.p[pre + ".bvec"], cfg.diag),
                    "ev": ssm.bank_input(tin, self.p[pre + ".evec"], cfg.diag),
                }
                self.zprev[pre] = np.zeros((batch, width))
            else:
                self.disc[pre] = {
                    "abar": abar,
                    "v0": ssm.bank_input(tin, self.p[pre + ".v"], cfg.diag),
                }
            self.state[pre] = np.zeros((batch, width, cfg.state_size))

    # single-stream pieces

    def _block(self, pre, u):
        d = self.disc[pre]
        s = ssm.bank_step(d["abar"], self.state[pre], [(d["v0"], u)], self.cfg.diag)
        self.state[pre] = s
        acc = ssm.bank_step_read(s, self.p[pre + ".c"])
        y = nm.gelu(acc + self.p[pre + ".f"] * u)
        mixed = nm.linear(y, self.p[pre + ".mix.w"], self.p[pre + ".mix.b"])
        return nm.layernorm(mixed, self.p[pre + ".ln.g"], self.p[pre + ".ln.b"]) + u

    def _res(self, pre, h):
        t = nm.gelu(nm.linear(h, self.p[pre + ".l1.w"], self.p[pre + ".l1.b"]))
        return nm.linear(t, self.p[pre + ".l2.w"], self.p[pre + ".l2.b"]) + h

    def _body_single(self, s, u):
        cfg = self.cfg
        skips = []
        for lvl in range(cfg.num_levels):
            skips.append(u)
            u = nm.linear(u, self.p[f"{s}.down{lvl}.w"], self.p[f"{s}.down{lvl}.b"])
        skips.append(u)
        for j in range(cfg.blocks_per_level):
            u = self._res(f"{s}.bot{j}.r", self._block(f"{s}.bot{j}", u))
        u = u + skips.pop()
        for lvl in range(cfg.num_levels):
            u = nm.linear(u, self.p[f"{s}.up{lvl}.lin.w"], self.p[f"{s}.up{lvl}.lin.b"])
            u = u + skips.pop()
            r = u
            for j in range(cfg.blocks_per_level):
                u = self._res(f"{s}.up{lvl}.blk{j}.r", self._block(f"{s}.up{lvl}.blk{j}", u))
            u = u + r
            u = nm.layernorm(u, self.p[f"{s}.up{lvl}.ln.g"], self.p[f"{s}.up{lvl}.ln.b"])
        return u

    def _head_single(self, s, u):
        hm = self._res(f"{s}.mu.blk.r", self._block(f"{s}.mu.blk", u))
        mu = nm.linear(hm, self.p[f"{s}.mu.out.w"], self.p[f"{s}.mu.out.b"])
        hs = self._res(f"{s}.sig.blk.r", self._block(f"{s}.sig.blk", u))
        raw = nm.linear(hs, self.p[f"{s}.sig.out.w"], self.p[f"{s}.sig.out.b"])
        return mu, nm.softplus(raw) + self.cfg.sigma_floor

    # two-stream pieces

    def _gen_block(self, pre, hx, hz):
        d = self.disc[pre]
        drivers = [(d["bv"], hx), (d["ev"], self.zprev[pre])]
        s = ssm.bank_step(d["abar"], self.state[pre], drivers, self.cfg.diag)
        self.state[pre] = s
        self.zprev[pre] = hz
        p = self.p
        accx = ssm.bank_step_read(s, p[pre + ".cx"])
        accz = ssm.bank_step_read(s, p[pre + ".cz"])
        gx = nm.gelu(accx + p[pre + ".dx"] * hx + p[pre + ".fx"] * hz)
        gz = nm.gelu(accz + p[pre + ".dz"] * hx + p[pre + ".fz"] * hz)
        ox = nm.linear(gx, p[pre + ".mixx.w"], p[pre + ".mixx.b"])
        oz = nm.linear(gz, p[pre + ".mixz.w"], p[pre + ".mixz.b"])
        outx = nm.layernorm(ox, p[pre + ".lnx.g"], p[pre + ".lnx.b"]) + hx
        outz = nm.layernorm(oz, p[pre + ".lnz.g"], p[pre + ".lnz.b"]) + hz
        return outx, outz

    def _res_pair(self, pre, hx, hz):
        width = hx.shape[-1]
        o = self._res(pre, np.concatenate([hx, hz], axis=-1))
        return o[:, :width], o[:, width:]

    def _body_pair(self, hx, hz):
        cfg = self.cfg
        p = self.p
        skips = []
        for lvl in range(cfg.num_levels):
            skips.append((hx, hz))
            hx = nm.linear(hx, p[f"gen.down{lvl}.x.w"], p[f"gen.down{lvl}.x.b"])
            hz = nm.linear(hz, p[f"gen.down{lvl}.z.w"], p[f"gen.down{lvl}.z.b"])
        skips.append((hx, hz))
        for j in range(cfg.blocks_per_level):
            hx, hz = self._gen_block(f"gen.bot{j}", hx, hz)
            hx, hz = self._res_pair(f"gen.bot{j}.r", hx, hz)
        sx, sz = skips.pop()
        hx, hz = hx + sx, hz + sz
        for lvl in range(cfg.num_levels):
            hx = nm.linear(hx, p[f"gen.up{lvl}.lin.x.w"], p[f"gen.up{lvl}.lin.x.b"])
            hz = nm.linear(hz, p[f"gen.up{lvl}.lin.z.w"], p[f"gen.up{lvl}.lin.z.b"])
            sx, sz = skips.pop()
            hx, hz = hx + sx, hz + sz
            rx, rz = hx, hz
            for j in range(cfg.blocks_per_level):
                hx, hz = self._gen_block(f"gen.up{lvl}.blk{j}", hx, hz)
                hx, hz = self._res_pair(f"gen.up{lvl}.blk{j}.r", hx, hz)
            hx, hz = hx + rx, hz + rz
            hx = nm.layernorm(hx, p[f"gen.up{lvl}.lnx.g"], p[f"gen.up{lvl}.lnx.b"])
            hz = nm.layernorm(hz, p[f"gen.up{lvl}.lnz.g"], p[f"gen.up{lvl}.lnz.b"])
        return hx, hz

    def _head_pair(self, hx, hz):
        p = self.p
        hmx, hmz = self._gen_block("gen.mu.blk", hx, hz)
        hmx, _ = self._res_pair("gen.mu.blk.r", hmx, hmz)
        mu = nm.linear(hmx, p["gen.mu.out.w"], p["gen.mu.out.b"])
        hsx, hsz = self._gen_block("gen.sig.blk", hx, hz)
        hsx, _ = self._res_pair("gen.sig.blk.r", hsx, hsz)
        raw = nm.linear(hsx, p["gen.sig.out.w"], p["gen.sig.out.b"])
        return mu, nm.softplus(raw) + self.cfg.sigma_floor

    def step(self, *inputs):
        """Advance one step.

        prior: step(z_prev) with the previous latent (zeros at the start).
        inf:   step(x_cur) with the current observation.
        gen:   step(z_cur) or step(z_cur, x_prev) with feedback enabled.
        Returns (mu, sigma) arrays of shape (batch, out_channels).
        """
        p = self.p
        if self.kind == "prior":
            (z_prev,) = inputs
            u = nm.linear(z_prev, p["prior.enc.w"], p["prior.enc.b"])
            return self._head_single("prior", self._body_single("prior", u))
        if self.kind == "inf":
            (x_cur,) = inputs
            u = nm.linear(x_cur, p["inf.enc.w"], p["inf.enc.b"])
            return self._head_single("inf", self._body_single("inf", u))
        if self.cfg.decoder_uses_x:
            z_cur, x_prev = inputs
            hx = nm.linear(x_prev, p["gen.encx.w"], p["gen.encx.b"])
        else:
            (z_cur,) = inputs
            hx = np.broadcast_to(p["gen.x0"], (self.batch, self.cfg.hidden)).copy()
        hz = nm.linear(z_cur, p["gen.encz.w"], p["gen.encz.b"])
        return self._head_pair(*self._body_pair(hx, hz))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, cfg, groups, meta=None):
    """Write config, named array groups, and JSON metadata to one npz file.

    ``groups`` maps a group name (e.g. "params", "ema") to a flat name ->
    array dict. Round trips are byte exact for float64 arrays.
    """
    data = {
        "__format_version__": np.int64(FORMAT_VERSION),
        "__config__": np.array(json.dumps(cfg.to_dict())),
        "__meta__": np.array(json.dumps(meta if meta is not None else {})),
    }
    for gname, arrs in groups.items():
        for k, v in arrs.items():
            data[f"{gname}/{k}"] = np.asarray(v)
    np.savez(path, **data)


def load_checkpoint(path):
    """Read back (cfg, groups, meta) written by `save_checkpoint`."""
    with np.load(path, allow_pickle=False) as npz:
        version = int(npz["__format_version__"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        cfg = ModelConfig.from_dict(json.loads(str(npz["__config__"])))
        meta = json.loads(str(npz["__meta__"]))
        groups = {}
        for key in npz.files:
            if key.startswith("__"):
                continue
            gname, name = key.split("/", 1)
            groups.setdefault(gname, {})[name] = npz[key]
    return cfg, groups, meta
