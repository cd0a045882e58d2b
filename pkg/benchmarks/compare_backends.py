"""Compiled vs NumPy kernel backends: timing and agreement.

    python3 benchmarks/compare_backends.py [--reps 20] [--seq-len 256] [--csv out.csv]

Each hot kernel runs on both backends with the same seeded inputs. The
script reports the median time per call, the speedup of the compiled
backend and the largest absolute difference between the two results. A
full NAC layer forward is timed the same way by routing every kernel
through one backend at a time.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from nac import kernels
from nac.attention import NACConfig, NACParams, nac_forward
from nac.tensor import no_grad


def _inputs(seed, seq_len):
    rng = np.random.default_rng(seed)
    shape = (4, seq_len, 8)
    phi = rng.uniform(0.0, 1.0, shape)
    omega = rng.uniform(1e-2, 10.0, shape)
    t = rng.uniform(0.0, 1.0, shape)
    g = rng.normal(size=shape)
    scores = rng.normal(size=(4, seq_len, seq_len))
    x = rng.normal(size=(1, seq_len, 64))
    w_x = rng.normal(size=(64, 64)) / 8
    w_h = rng.normal(size=(64, 64)) / 8
    b = rng.normal(size=64) / 8
    return {
        "topk_k8": ("topk_lastdim", (scores, 8)),
        "topk_k64": ("topk_lastdim", (scores, 64)),
        "exact_logits": ("exact_logits", (phi, omega, t)),
        "exact_logits_grad": ("exact_logits_grad", (phi, omega, t, g)),
        "euler_logits": ("euler_logits", (phi, omega, t, 6)),
        "euler_logits_grad": ("euler_logits_grad", (phi, omega, t, 6, g)),
        "rnn_forward": ("rnn_forward", (x, w_x, w_h, b)),
    }


def _median_time(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _flatten(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in parts])


def compare(reps=20, seq_len=256, seed=0):
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the NumPy fallback is available", file=sys.stderr)
    rows = []
    for case, (name, args) in _inputs(seed, seq_len).items():
        row = {"case": case}
        results = {}
        for tag, mod in backends.items():
            fn = getattr(mod, name)
            row[f"{tag}_s"] = _median_time(lambda: fn(*args), reps)
            results[tag] = _flatten(fn(*args))
        if len(results) == 2:
            row["max_abs_diff"] = float(np.abs(results["python"] - results["cython"]).max())
        rows.append(row)

    cfg = NACConfig(d_model=64, heads=4, top_k=8, seed=seed)
    params = NACParams(cfg)
    x = np.random.default_rng(seed).normal(size=(1, seq_len, 64))
    row, results = {"case": "nac_forward"}, {}
    for tag in backends:
        with kernels.use_backend(tag), no_grad():
            row[f"{tag}_s"] = _median_time(lambda: nac_forward(x, cfg, params), max(3, reps // 4))
            results[tag] = nac_forward(x, cfg, params).data.reshape(-1)
    if len(results) == 2:
        row["max_abs_diff"] = float(np.abs(results["python"] - results["cython"]).max())
    rows.append(row)

    for r in rows:
        if "cython_s" in r:
            r["speedup"] = r["python_s"] / r["cython_s"]
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--seq-len", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="also write the table to this CSV file")
    args = ap.parse_args(argv)
    with threadpool_limits(limits=1):
        rows = compare(args.reps, args.seq_len, args.seed)

    print(f"{'case':<20}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for r in rows:
        cy = r.get("cython_s")
        print(f"{r['case']:<20}{r['python_s'] * 1e3:12.3f}"
              + (f"{cy * 1e3:12.3f}{r['speedup']:10.2f}{r['max_abs_diff']:14.2e}" if cy else ""))
    if args.csv:
        fields = ["case", "python_s", "cython_s", "speedup", "max_abs_diff"]
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
