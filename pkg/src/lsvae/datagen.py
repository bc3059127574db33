"""Dataset generation and file plumbing.

The main generator integrates the stiff ignition equation

    dx/dt = x^2 - x^p,        x(0) = x0 ~ U[x0_range],

whose solutions stay flat near x0 for roughly 1/x0 time units, ignite
rapidly, and settle at the stable equilibrium x = 1. Trajectories are
recorded on a uniform grid. Integration is backward Euler with a Newton
solver per step (analytic derivative), wrapped in a step-doubling error
controller: each trial step is compared against two half steps, and the
extrapolated combination 2*half - full is the value accepted. The
extrapolation matters: errors committed on the long flat stretch are
amplified through the ignition by the ratio of the slopes there (about
three orders of magnitude for x0 = 0.01), so plain first-order steps drift
visibly at the transition. The equilibrium stays an exact fixed point of
the scheme, so boundedness survives extrapolation.

Also here: cheap synthetic load for runtime measurements, per-sequence
scaling helpers, CSV import/export in wide and long layouts with masks for
missing cells, and a seeded train/test splitter.
"""

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .series import SeriesBatch


@dataclass
class FlameSpec:
    p: float = 3.0
    n_traj: int = 1000
    t_end: float = 1000.0
    dt_out: float = 1.0
    x0_range: tuple = (0.005, 0.1)
    newton_tol: float = 1e-12
    newton_iters: int = 30
    step_tol: float = 1e-7

    def __post_init__(self):
        if self.p < 3:
            raise ValueError(f"exponent p must be at least 3, got {self.p}")
        if self.t_end <= 0 or self.dt_out <= 0:
            raise ValueError("t_end and dt_out must be positive")


def flame_rhs(x, p):
    return x * x - x ** p


def _newton_be(x, h, p, tol, iters):
    """Solve u = x + h * (u^2 - u^p) for u near x; returns (u, converged)."""
    u = x + h * flame_rhs(x, p)
    if not np.isfinite(u) or u < 0.0:
        u = x
    for _ in range(iters):
        g = u - x - h * (u * u - u ** p)
        dg = 1.0 - h * (2.0 * u - p * u ** (p - 1.0))
        if dg == 0.0 or not np.isfinite(dg):
            return u, False
        du = g / dg
        u -= du
        if not np.isfinite(u) or u < 0.0 or u > 2.0:
            return u, False
        if abs(du) < tol * max(1.0, abs(u)):
            return u, True
    return u, False


def _advance(x, span, spec):
    """Integrate one grid interval of length ``span`` adaptively."""
    t = 0.0
    h = span
    while t < span * (1.0 - 1e-14):
        h = min(h, span - t)
        while True:
            ok = False
            u_full, ok1 = _newton_be(x, h, spec.p, spec.newton_tol, spec.newton_iters)
            if ok1:
                u_half, ok2 = _newton_be(x, 0.5 * h, spec.p, spec.newton_tol, spec.newton_iters)
                if ok2:
                    u_two, ok3 = _newton_be(u_half, 0.5 * h, spec.p, spec.newton_tol, spec.newton_iters)
                    if ok3:
                        err = abs(u_full - u_two)
                        if err <= spec.step_tol * max(1.0, abs(u_two)):
                            ok = True
            if ok:
                x = 2.0 * u_two - u_full
                t += h
                if err <= 0.1 * spec.step_tol:
                    h *= 2.0
                break
            h *= 0.5
            if h < 1e-13 * span:
                raise RuntimeError("step size underflow")
    return x


def flame_generate(spec=None, seed=0, count=None, length=None):
    """Integrate ignition trajectories on the unit output grid.

    ``count`` and ``length`` override spec.n_traj and the grid implied by
    spec.t_end / spec.dt_out. Returns a fully observed SeriesBatch of shape
    (count, length, 1).
    """
    spec = spec or FlameSpec()
    count = spec.n_traj if count is None else count
    length = int(round(spec.t_end / spec.dt_out)) + 1 if length is None else length
    rng = np.random.default_rng(seed)
    lo, hi = spec.x0_range
    x0s = rng.uniform(lo, hi, size=count)
    out = np.empty((count, length, 1))
    for i in range(count):
        x = float(x0s[i])
        out[i, 0, 0] = x
        for k in range(1, length):
            try:
                x = _advance(x, spec.dt_out, spec)
            except RuntimeError as exc:
                t = k * spec.dt_out
                raise RuntimeError(
                    f"solver failed to converge on trajectory {i} near t={t}"
                ) from exc
            out[i, k, 0] = x
    return SeriesBatch(out)


def flame_manifest(spec, seed, path=None):
    """Reproducibility record for a generated dataset; optionally written as JSON."""
    manifest = {"generator": "flame", "seed": int(seed), "spec": asdict(spec)}
    if path is not None:
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
    return manifest


# ---------------------------------------------------------------------------
# synthetic load for runtime measurements

RUNTIME_TABLE = {
    80: {"dataset_size": 102400, "batch": 1024},
    320: {"dataset_size": 25600, "batch": 256},
    1280: {"dataset_size": 6400, "batch": 64},
    5120: {"dataset_size": 1600, "batch": 16},
    20480: {"dataset_size": 400, "batch": 4},
}


def synthetic_runtime_data(length, channels=1, seed=0):
    """Dataset sized so 100 iterations at the paired batch size is one epoch.

    Returns (dataset_size, batch_size, data) for the supported lengths. The
    values are standard normal noise; they only matter as compute load.
    """
    if length not in RUNTIME_TABLE:
        raise ValueError(f"unsupported benchmark length {length}")
    row = RUNTIME_TABLE[length]
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((row["dataset_size"], length, channels))
    return row["dataset_size"], row["batch"], data


# ---------------------------------------------------------------------------
# scaling helpers


def _to_values(batch):
    if isinstance(batch, SeriesBatch):
        mask = batch.mask if batch.mask is not None else np.ones_like(batch.values)
        return batch.values, mask
    values = np.asarray(batch, dtype=float)
    return values, np.ones_like(values)


def normalize_per_sequence(batch, floor=1e-8):
    """Zero-mean unit-variance per sequence and channel; returns (out, mean, std)."""
    values, _ = _to_values(batch)
    mean = values.mean(axis=1, keepdims=True)
    std = np.maximum(values.std(axis=1, keepdims=True), floor)
    return (values - mean) / std, mean, std


def denormalize_per_sequence(values, mean, std):
    return values * std + mean


def normalize_global(batch, floor=1e-8):
    """Zero-mean unit-variance over the whole batch, per channel.

    One affine map shared by every sequence, so relative amplitudes between
    sequences survive (unlike the per-sequence variant). Returns
    (out, mean, std) with (channel,)-shaped statistics.
    """
    values, _ = _to_values(batch)
    mean = values.mean(axis=(0, 1))
    std = np.maximum(values.std(axis=(0, 1)), floor)
    return (values - mean) / std, mean, std


def squash_unit_interval(batch, floor=1e-8):
    """Per-sequence min-max map into [0, 1]; returns (out, lo, hi).

    Constant sequences map to zero through the range floor.
    """
    values, _ = _to_values(batch)
    lo = values.min(axis=1, keepdims=True)
    hi = values.max(axis=1, keepdims=True)
    return (values - lo) / np.maximum(hi - lo, floor), lo, hi


def unsquash_unit_interval(values, lo, hi):
    return values * (hi - lo) + lo


# ---------------------------------------------------------------------------
# CSV import/export (single channel)
#
# Wide layout: header t0,t1,...; one row per sequence; missing cells empty.
# Long layout: header series_id,t,value; only observed cells are written.


def save_csv(path, batch, fmt="wide"):
    if fmt not in ("wide", "long"):
        raise ValueError(f"unknown format {fmt!r}")
    if not isinstance(batch, SeriesBatch):
        batch = SeriesBatch(np.asarray(batch, dtype=float))
    if batch.channels != 1:
        raise ValueError("CSV layouts support single-channel series only")
    values, mask = _to_values(batch)
    values, mask = values[:, :, 0], mask[:, :, 0]
    count, length = values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if fmt == "wide":
            w.writerow([f"t{t}" for t in range(length)])
            for i in range(count):
                w.writerow(
                    [repr(float(values[i, t])) if mask[i, t] > 0 else "" for t in range(length)]
                )
        else:
            w.writerow(["series_id", "t", "value"])
            for i in range(count):
                for t in range(length):
                    if mask[i, t] > 0:
                        w.writerow([i, t, repr(float(values[i, t]))])


def load_csv(path):
    """Read a wide or long CSV (sniffed from the header) into a SeriesBatch.

    Missing cells (empty in wide, absent pairs in long) get mask 0. Ragged
    or non-numeric rows raise with the offending row number.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise ValueError(f"empty CSV file {path}")
    header = rows[0]
    if header[:1] == ["series_id"]:
        return _load_long(rows[1:])
    return _load_wide(header, rows[1:], path)


def _parse_cell(cell, rownum):
    try:
        return float(cell)
    except ValueError:
        raise ValueError(f"non-numeric cell {cell!r} in row {rownum}") from None


def _load_wide(header, rows, path):
    length = len(header)
    if not rows:
        raise ValueError(f"no data rows in CSV file {path}")
    values = np.zeros((len(rows), length, 1))
    mask = np.zeros((len(rows), length, 1))
    for i, row in enumerate(rows):
        rownum = i + 2
        if len(row) != length:
            raise ValueError(f"ragged row {rownum}: expected {length} cells, got {len(row)}")
        for t, cell in enumerate(row):
            if cell == "":
                continue
            values[i, t, 0] = _parse_cell(cell, rownum)
            mask[i, t, 0] = 1.0
    return SeriesBatch(values, mask)


def _load_long(rows):
    triples = []
    for i, row in enumerate(rows):
        rownum = i + 2
        if len(row) != 3:
            raise ValueError(f"ragged row {rownum}: expected 3 cells, got {len(row)}")
        sid = int(_parse_cell(row[0], rownum))
        t = int(_parse_cell(row[1], rownum))
        triples.append((sid, t, _parse_cell(row[2], rownum)))
    if not triples:
        raise ValueError("long-format CSV has no observations")
    count = max(s for s, _, _ in triples) + 1
    length = max(t for _, t, _ in triples) + 1
    values = np.zeros((count, length, 1))
    mask = np.zeros((count, length, 1))
    for sid, t, v in triples:
        values[sid, t, 0] = v
        mask[sid, t, 0] = 1.0
    return SeriesBatch(values, mask)


# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: SeriesBatch
    test: SeriesBatch
    ratio: float = 0.8


def split_train_test(batch, ratio=0.8, seed=0):
    """Seeded shuffle then partition; ``ratio`` is the training fraction."""
    if not isinstance(batch, SeriesBatch):
        batch = SeriesBatch(np.asarray(batch, dtype=float))
    n = batch.batch
    idx = np.random.default_rng(seed).permutation(n)
    ntrain = int(round(n * ratio))
    tr, te = idx[:ntrain], idx[ntrain:]
    mask = batch.mask
    train = SeriesBatch(batch.values[tr], None if mask is None else mask[tr])
    test = SeriesBatch(batch.values[te], None if mask is None else mask[te])
    return DatasetSplit(train, test, ratio)
