"""Command line interface.

Subcommands: datagen, train, generate, eval, task, bench. Outputs land
under --out, resolved against the LSVAE_OUT environment variable when the
path is relative. Emitted records are JSON lines, each carrying a
schema_version field. Exit codes: 0 success, 1 usage error, 2 runtime
failure.

Training reads a flat key = value config file (with an embedded
schema_version); command line flags override file values, and --set
KEY=VALUE covers every remaining field. Every command is reproducible from
its resolved config and seed in --deterministic mode, which pins BLAS
thread pools before numpy is first imported; for that reason this module
imports the numerical stack lazily inside the command bodies.
"""

import argparse
import json
import os
import statistics
import sys
import time
from pathlib import Path

SCHEMA_VERSION = 1

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pin_threads():
    for var in _THREAD_VARS:
        os.environ[var] = "1"


def record(kind, **fields):
    return {"schema_version": SCHEMA_VERSION, "record": kind, **fields}


def write_jsonl(path, records, append=False):
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def out_root():
    return Path(os.environ.get("LSVAE_OUT", "."))


def resolve_out(out):
    path = Path(out)
    return path if path.is_absolute() else out_root() / path


# ---------------------------------------------------------------------------
# flat key = value configs


def parse_config_file(path):
    raw = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    if "schema_version" not in raw:
        raise UsageError(f"{path}: missing schema_version")
    return raw


def _coerce(key, value, defaults):
    if key not in defaults:
        raise UsageError(f"unknown config field {key!r}")
    ref = defaults[key]
    if not isinstance(value, str):
        return value
    if isinstance(ref, bool):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise UsageError(f"config field {key!r} expects a boolean, got {value!r}")
    try:
        if isinstance(ref, int):
            return int(value)
        if isinstance(ref, float):
            return float(value)
    except ValueError:
        raise UsageError(f"config field {key!r} expects a number, got {value!r}") from None
    return value


def resolve_config(defaults, config_path, overrides):
    """Defaults <- config file <- explicit overrides, validated against defaults."""
    out = dict(defaults)
    if config_path:
        for k, v in parse_config_file(config_path).items():
            out[k] = _coerce(k, v, defaults)
    for k, v in overrides.items():
        out[k] = _coerce(k, v, defaults)
    if out["schema_version"] != SCHEMA_VERSION:
        raise UsageError(f"unsupported schema_version {out['schema_version']}")
    return out


def write_flat_config(path, cfgd):
    with open(path, "w") as fh:
        for k, v in cfgd.items():
            fh.write(f"{k} = {v}\n")


def _set_overrides(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# datagen


def cmd_datagen_flame(args):
    from . import datagen as dg

    spec = dg.FlameSpec(p=args.p, n_traj=args.n, t_end=args.t_end,
                        dt_out=args.dt_out, step_tol=args.step_tol)
    outdir = resolve_out(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    batch = dg.flame_generate(spec, seed=args.seed)
    path = outdir / "flame.csv"
    dg.save_csv(path, batch, fmt=args.format)
    dg.flame_manifest(spec, args.seed, path=outdir / "flame.manifest.json")
    print(f"wrote {batch.batch}x{batch.length} dataset to {path}")
    return 0


def cmd_datagen_runtime(args):
    from . import datagen as dg
    from .series import SeriesBatch

    outdir = resolve_out(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    size, bsz, data = dg.synthetic_runtime_data(args.length, seed=args.seed)
    path = outdir / f"runtime_{args.length}.csv"
    dg.save_csv(path, SeriesBatch(data), fmt="wide")
    manifest = {"generator": "runtime", "length": args.length, "seed": args.seed,
                "dataset_size": size, "batch": bsz}
    with open(outdir / f"runtime_{args.length}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {size}x{args.length} dataset to {path}")
    return 0


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "dataset": "",
    "epochs": 10,
    "batch_size": 64,
    "lr": 1e-3,
    "weight_decay": 0.0,
    "clip": 1.0,
    "seed": 0,
    "mode": "conv",
    "analytic_kl": True,
    "checkpoint_every": 0,
    "val_fraction": 0.0,
    "normalize": "none",
    "kl_warmup": 0,
    "latent_dim": 4,
    "hidden": 16,
    "state_size": 16,
    "num_levels": 1,
    "blocks_per_level": 1,
    "diag": True,
    "dt_min": 0.01,
    "dt_max": 1.0,
    "decoder_uses_x": False,
    "sigma_floor": 1e-4,
}

_MODEL_KEYS = ("latent_dim", "hidden", "state_size", "num_levels", "blocks_per_level",
               "diag", "dt_min", "dt_max", "decoder_uses_x", "sigma_floor")


def _train_overrides(args):
    overrides = {}
    for key in ("dataset", "epochs", "batch_size", "lr", "seed", "mode"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    overrides.update(_set_overrides(args.set))
    return overrides


def _apply_normalize(data, mode):
    import numpy as np
    from . import datagen as dg
    from .series import SeriesBatch

    if mode == "none":
        return data
    if data.mask is not None and np.any(data.mask == 0):
        raise ValueError(f"normalize={mode!r} requires fully observed data")
    if mode == "center":
        vals, _, _ = dg.normalize_per_sequence(data.values)
    elif mode == "global":
        vals, _, _ = dg.normalize_global(data.values)
    elif mode == "unit":
        vals, _, _ = dg.squash_unit_interval(data.values)
    else:
        raise UsageError(f"unknown normalize mode {mode!r}")
    return SeriesBatch(vals, data.mask)


def cmd_train(args):
    cfgd = resolve_config(TRAIN_DEFAULTS, args.config, _train_overrides(args))
    if not cfgd["dataset"]:
        raise UsageError("a dataset is required (config key 'dataset' or --dataset)")
    if cfgd["mode"] not in ("conv", "scan"):
        raise UsageError(f"unknown mode {cfgd['mode']!r}")
    if cfgd["normalize"] not in ("none", "center", "global", "unit"):
        raise UsageError(f"unknown normalize mode {cfgd['normalize']!r}")

    import numpy as np
    from . import datagen as dg, net, vae
    from .series import SeriesBatch

    data = dg.load_csv(cfgd["dataset"])
    data = _apply_normalize(data, cfgd["normalize"])
    val = None
    train = data
    if cfgd["val_fraction"] > 0:
        split = dg.split_train_test(data, ratio=1.0 - cfgd["val_fraction"], seed=cfgd["seed"])
        train, val = split.train, split.test

    if args.resume:
        mcfg, params, opt, rng, start_epoch = vae.load_training(args.resume)
    else:
        mcfg = net.ModelConfig(data_dim=data.channels,
                               **{k: cfgd[k] for k in _MODEL_KEYS})
        params = net.init_params(mcfg, seed=cfgd["seed"])
        opt = vae.init_opt(params)
        rng = np.random.default_rng(cfgd["seed"])
        start_epoch = 0

    outdir = resolve_out(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_flat_config(outdir / "config.resolved", cfgd)
    ckpt = outdir / "checkpoint.npz"
    history_path = outdir / "history.jsonl"
    if start_epoch == 0:
        history_path.write_text("")

    def save(epoch):
        vae.save_training(ckpt, mcfg, params, opt, rng, epoch=epoch,
                          extra={"normalize": cfgd["normalize"]})

    warmup = int(cfgd["kl_warmup"])
    for epoch in range(start_epoch, cfgd["epochs"]):
        # divergence weight ramps over the first kl_warmup epochs; a resumed
        # run recomputes it from the restored epoch index
        kl_scale = 1.0 if warmup <= 0 else min(1.0, (epoch + 1) / warmup)
        order = rng.permutation(train.batch)
        sums = {"elbo": 0.0, "recon": 0.0, "kl": 0.0, "grad_norm": 0.0}
        nb = 0
        for i in range(0, train.batch, cfgd["batch_size"]):
            idx = order[i:i + cfgd["batch_size"]]
            sub = SeriesBatch(train.values[idx],
                              None if train.mask is None else train.mask[idx])
            params, stats = vae.train_step(
                params, opt, mcfg, sub, rng, lr=cfgd["lr"],
                weight_decay=cfgd["weight_decay"], clip=cfgd["clip"],
                analytic_kl=cfgd["analytic_kl"], mode=cfgd["mode"],
                kl_scale=kl_scale,
            )
            for k in sums:
                sums[k] += stats[k]
            nb += 1
        row = record("elbo_report", epoch=epoch,
                     **{f"train_{k}": v / max(nb, 1) for k, v in sums.items()})
        if val is not None:
            row["val_elbo"] = vae.evaluate_elbo(opt.ema, mcfg, val, mode=cfgd["mode"])
        write_jsonl(history_path, [row], append=True)
        if cfgd["checkpoint_every"] and (epoch + 1) % cfgd["checkpoint_every"] == 0:
            save(epoch + 1)
        print(f"epoch {epoch}: elbo {row['train_elbo']:.4f}")
    save(cfgd["epochs"])
    print(f"wrote {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# generate / eval / task


def _load_model(path, weights="ema"):
    from . import net

    cfg, groups, meta = net.load_checkpoint(path)
    if weights not in groups:
        raise ValueError(f"checkpoint has no {weights!r} weight group")
    return cfg, groups[weights], meta


def cmd_generate(args):
    import numpy as np
    from . import datagen as dg, vae
    from .series import SeriesBatch

    cfg, params, _ = _load_model(args.checkpoint, args.weights)
    rng = np.random.default_rng(args.seed)
    x, _ = vae.generate(params, cfg, args.n, args.length, rng, temp=args.temp)
    outdir = resolve_out(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "samples.csv"
    dg.save_csv(path, SeriesBatch(x), fmt="wide")
    manifest = record("samples", n=args.n, length=args.length, seed=args.seed,
                      temp=args.temp, weights=args.weights,
                      model_checkpoint=str(args.checkpoint))
    with open(outdir / "samples.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {path}")
    return 0


def _load_eval_data(args, meta):
    from . import datagen as dg

    data = dg.load_csv(args.dataset)
    data = _apply_normalize(data, meta.get("normalize", "none"))
    split = dg.split_train_test(data, ratio=args.ratio, seed=args.split_seed)
    return split


_EVAL_METRICS = ("marginal", "classification", "prediction")


def cmd_eval(args):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in _EVAL_METRICS:
            raise UsageError(f"unknown metric {m!r} (choose from {', '.join(_EVAL_METRICS)})")
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")

    import numpy as np
    from . import metrics as mt, vae

    cfg, params, meta = _load_model(args.checkpoint)
    split = _load_eval_data(args, meta)
    test = split.test
    ecfg = mt.EvalModelConfig(epochs=args.eval_epochs)
    recs = []
    for seed in range(args.seeds):
        gen, _ = vae.generate(params, cfg, test.batch, test.length,
                              np.random.default_rng(seed), temp=args.gen_temp)
        for metric in metrics:
            if metric == "marginal":
                value = mt.marginal_score(test.values, gen)
            elif metric == "classification":
                value = mt.classification_score(test.values, gen, ecfg, seed=seed)
            else:
                value = mt.prediction_score(test.values, gen, ecfg, seed=seed)
            recs.append(record("score", metric=metric, value=value, seed=seed,
                               dataset=str(args.dataset),
                               model_checkpoint=str(args.checkpoint)))
    if args.control:
        half = test.batch // 2
        for seed in range(args.seeds):
            value = mt.classification_score(test.values[:half], test.values[half:2 * half],
                                            ecfg, seed=seed)
            recs.append(record("score", metric="classification_control", value=value,
                               seed=seed, dataset=str(args.dataset),
                               model_checkpoint=str(args.checkpoint)))
    names = {r["metric"] for r in recs}
    means = []
    for metric in sorted(names):
        vals = [r["value"] for r in recs if r["metric"] == metric]
        means.append(record("score_mean", metric=metric, value=float(np.mean(vals)),
                            seeds=len(vals), dataset=str(args.dataset),
                            model_checkpoint=str(args.checkpoint)))
    outdir = resolve_out(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_jsonl(outdir / "scores.jsonl", recs + means)
    for m in means:
        print(f"{m['metric']}: {m['value']:.4f} (mean of {m['seeds']} seeds)")
    return 0


def cmd_task(args):
    import numpy as np
    from . import metrics as mt, vae

    cfg, params, meta = _load_model(args.checkpoint)
    split = _load_eval_data(args, meta)
    test = split.test
    recs = []
    if args.task == "extrapolate":
        # condition on the first half of each sequence, score the second
        lp = test.length // 2
        prefix = test.values[:, :lp]
        target = test.values[:, lp:]
        members = []
        for e in range(args.ensemble):
            x, _ = vae.extrapolate(params, cfg, prefix, test.length,
                                   np.random.default_rng(args.seed + e), temp=args.temp)
            members.append(x[:, lp:])
        ens = np.stack(members)
        values = {"extrapolation_mse": mt.mse(ens.mean(axis=0), target),
                  "extrapolation_crps": mt.crps(ens, target)}
    else:
        # observe even steps, reconstruct the odd ones
        mask = np.zeros_like(test.values)
        mask[:, 0::2] = 1.0
        filled = vae.interpolate(params, cfg, test.values, mask)
        missing = 1.0 - mask
        values = {"interpolation_mse": mt.mse(filled, test.values, mask=missing),
                  "interpolation_crps": mt.crps(filled[None], test.values, mask=missing)}
    for metric, value in values.items():
        recs.append(record("score", metric=metric, value=value, seed=args.seed,
                           dataset=str(args.dataset),
                           model_checkpoint=str(args.checkpoint)))
    outdir = resolve_out(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_jsonl(outdir / "scores.jsonl", recs)
    for r in recs:
        print(f"{r['metric']}: {r['value']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# bench


def run_benchmark(lengths, modes, iters=100, hidden=4, state_size=64, seed=0,
                  infer_reps=3):
    """Time forward+backward training iterations and plain forward passes.

    The model is the causal stack used as an autoregressive density over the
    observations, identical parameters in both execution modes. The first
    iteration of every cell is warm-up and is discarded. Returns a list of
    records; wall-clock fields are the only non-reproducible outputs.
    """
    import numpy as np
    from . import datagen as dg, net, numerics as nm, vae

    cfg = net.ModelConfig(data_dim=1, latent_dim=1, hidden=hidden,
                          state_size=state_size, num_levels=0,
                          blocks_per_level=1, diag=True)
    base = net.init_params(cfg, seed=seed)
    records = []
    for length in lengths:
        size, bsz, data = dg.synthetic_runtime_data(length, seed=seed)
        for mode in modes:
            m = "conv" if mode == "conv" else "scan"
            params = {k: v.copy() for k, v in base.items()}
            opt = vae.init_opt(params)
            times = []
            for it in range(iters + 1):
                lo = (it * bsz) % size
                x = data[lo:lo + bsz]
                t0 = time.perf_counter()
                tape = nm.Tape()
                pv = {k: tape.var(v) for k, v in params.items()}
                pr = net.prior_forward(pv, cfg, x, mode=m)
                nll = nm.neg(nm.mean(nm.sum_(
                    vae.gauss_log_prob(x, pr.mu, pr.sigma), axis=(1, 2))))
                nm.backward(nll)
                elapsed = time.perf_counter() - t0
                if it > 0:
                    times.append(elapsed)
                grads = {k: pv[k].grad for k in params}
                tape.release()
                grads, _ = vae.clip_global_norm(grads, 1.0)
                params = vae.adamw_update(params, grads, opt, lr=1e-3)
            med = statistics.median(times)
            records.append(record(
                "bench", length=length, mode=mode, phase="train", batch=bsz,
                iters=iters, median_ms=med * 1e3,
                mean_ms=float(np.mean(times)) * 1e3,
                per_seq_ms=med * 1e3 / bsz))
            tinf = []
            for it in range(infer_reps + 1):
                x = data[:bsz]
                t0 = time.perf_counter()
                net.prior_forward(base, cfg, x, mode=m)
                elapsed = time.perf_counter() - t0
                if it > 0:
                    tinf.append(elapsed)
            med = statistics.median(tinf)
            records.append(record(
                "bench", length=length, mode=mode, phase="infer", batch=bsz,
                iters=infer_reps, median_ms=med * 1e3,
                mean_ms=float(np.mean(tinf)) * 1e3,
                per_seq_ms=med * 1e3 / bsz))
    for length in lengths:
        row = {}
        for phase in ("train", "infer"):
            per = {r["mode"]: r["median_ms"] for r in records
                   if r["record"] == "bench" and r["length"] == length
                   and r["phase"] == phase}
            if "conv" in per and "recurrent" in per and per["conv"] > 0:
                row[f"{phase}_speedup"] = per["recurrent"] / per["conv"]
        if row:
            records.append(record("bench_speedup", length=length, **row))
    return records


def cmd_bench(args):
    lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in ("conv", "recurrent"):
            raise UsageError(f"unknown mode {m!r}")
    records = run_benchmark(lengths, modes, iters=args.iters, hidden=args.hidden,
                            state_size=args.state_size, seed=args.seed,
                            infer_reps=args.infer_reps)
    outdir = resolve_out(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_jsonl(outdir / "bench.jsonl", records)
    for r in records:
        if r["record"] == "bench":
            print(f"L={r['length']:>6} {r['mode']:>9} {r['phase']:>5}: "
                  f"{r['median_ms']:10.2f} ms/iter  ({r['per_seq_ms']:.4f} ms/seq)")
        else:
            extra = " ".join(f"{k}={v:.1f}x" for k, v in r.items()
                             if k.endswith("_speedup"))
            print(f"L={r['length']:>6} speedup: {extra}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = Parser(prog="lsvae", description="Latent state-space sequence VAE toolkit")
    p.add_argument("--deterministic", action="store_true",
                   help="pin BLAS/OpenMP thread pools to one thread before numpy loads")
    sub = p.add_subparsers(dest="command", parser_class=Parser, required=True)

    d = sub.add_parser("datagen", help="generate datasets")
    dsub = d.add_subparsers(dest="generator", parser_class=Parser, required=True)
    fl = dsub.add_parser("flame", help="stiff ignition trajectories")
    fl.add_argument("--p", type=float, default=3.0)
    fl.add_argument("--n", type=int, default=1000)
    fl.add_argument("--seed", type=int, default=0)
    fl.add_argument("--t-end", type=float, default=1000.0, dest="t_end")
    fl.add_argument("--dt-out", type=float, default=1.0, dest="dt_out")
    fl.add_argument("--step-tol", type=float, default=1e-7, dest="step_tol")
    fl.add_argument("--format", choices=["wide", "long"], default="wide")
    fl.add_argument("--out", default="data")
    fl.set_defaults(func=cmd_datagen_flame)
    rt = dsub.add_parser("runtime", help="synthetic benchmark series")
    rt.add_argument("--length", type=int, required=True)
    rt.add_argument("--seed", type=int, default=0)
    rt.add_argument("--out", default="data")
    rt.set_defaults(func=cmd_datagen_runtime)

    t = sub.add_parser("train", help="train the sequence VAE")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=["conv", "scan"])
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample sequences from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--length", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--temp", type=float, default=1.0)
    g.add_argument("--weights", choices=["ema", "params"], default="ema")
    g.add_argument("--out", default="samples")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="generation-quality metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--metrics", default="marginal,classification,prediction")
    e.add_argument("--seeds", type=int, default=3)
    e.add_argument("--ratio", type=float, default=0.8)
    e.add_argument("--split-seed", type=int, default=0, dest="split_seed")
    e.add_argument("--gen-temp", type=float, default=1.0, dest="gen_temp")
    e.add_argument("--eval-epochs", type=int, default=100, dest="eval_epochs")
    e.add_argument("--control", action="store_true",
                   help="also score real-vs-real as an indistinguishability control")
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("task", help="interpolation / extrapolation scoring")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--dataset", required=True)
    k.add_argument("--task", choices=["interpolate", "extrapolate"], required=True)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--ensemble", type=int, default=16)
    k.add_argument("--ratio", type=float, default=0.8)
    k.add_argument("--split-seed", type=int, default=0, dest="split_seed")
    k.add_argument("--temp", type=float, default=1.0)
    k.add_argument("--out", default="task")
    k.set_defaults(func=cmd_task)

    b = sub.add_parser("bench", help="runtime scaling benchmark")
    b.add_argument("--lengths", default="80,320,1280,5120,20480")
    b.add_argument("--modes", default="conv,recurrent")
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--hidden", type=int, default=4)
    b.add_argument("--state-size", type=int, default=64, dest="state_size")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--infer-reps", type=int, default=3, dest="infer_reps")
    b.add_argument("--out", default="bench")
    b.set_defaults(func=cmd_bench)
    return p


def entry(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if args.deterministic:
        _pin_threads()
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(entry())
