"""Forward-pass runtime and peak-allocation benchmark.

Timing uses ``time.perf_counter`` around the forward call only, after
warmups. Peak allocation comes from ``tracemalloc`` (NumPy reports its
buffers to it) during one separate untimed forward pass, so the tracing
overhead never enters the timings.
"""
from __future__ import annotations

import csv
import math
import time
import tracemalloc
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from nac import kernels
from nac.attention import NACConfig, NACLayer
from nac.tensor import no_grad

MODELS = ("nac-exact", "nac-euler", "nac-steady", "nac-pairwise", "scaled-dot", "plain-rnn")
NAC_MODELS = MODELS[:4]


class UnknownModelError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    models: tuple = MODELS
    seq_lens: tuple = (1024,)
    d_model: int = 64
    heads: int = 4
    top_k: tuple = (8,)
    batch: int = 1
    reps: int = 10
    warmup: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "seq_lens", tuple(int(t) for t in self.seq_lens))
        ks = self.top_k if isinstance(self.top_k, (list, tuple)) else (self.top_k,)
        object.__setattr__(self, "top_k", tuple(int(k) for k in ks))
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise UnknownModelError(f"unknown model tag(s) {bad}; valid tags: {', '.join(MODELS)}")
        if self.reps < 10:
            raise ValueError(f"reps must be >= 10, got {self.reps}")
        if self.warmup < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup}")

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown bench config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class BenchRecord:
    model: str
    seq_len: int
    d_model: int
    heads: int
    top_k: int | str
    mode: str
    runtime_mean_s: float
    runtime_std_s: float
    throughput_seq_s: float
    peak_alloc_mb: float
    reps: int
    backend: str = field(default=kernels.BACKEND)


CSV_FIELDS = [f.name for f in fields(BenchRecord)]


class ScaledDotAttention:
    """Dense multi-head ``softmax(q k^T / sqrt(d)) v`` with linear projections."""

    def __init__(self, d_model: int, heads: int, rng):
        r = 1.0 / math.sqrt(d_model)
        self.heads = heads
        self.w = [rng.uniform(-r, r, (d_model, d_model)) for _ in range(4)]

    def __call__(self, x):
        b, t, d = x.shape
        h, dh = self.heads, d // self.heads
        q, k, v = ((x @ w).reshape(b, t, h, dh).transpose(0, 2, 1, 3) for w in self.w[:3])
        s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out = (s @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return out @ self.w[3]


class PlainRNN:
    def __init__(self, d_model: int, rng):
        r = 1.0 / math.sqrt(d_model)
        self.w_x = rng.uniform(-r, r, (d_model, d_model))
        self.w_h = rng.uniform(-r, r, (d_model, d_model))
        self.b = np.zeros(d_model)

    def __call__(self, x):
        return kernels.rnn_forward(x, self.w_x, self.w_h, self.b)


def build_model(tag: str, cfg: BenchConfig, top_k: int):
    """Returns ``(callable, mode, k_label)`` for one benchmark cell."""
    rng = np.random.default_rng(cfg.seed)
    if tag in NAC_MODELS:
        mode = "exact" if tag == "nac-pairwise" else tag.split("-")[1]
        nac = NACConfig(d_model=cfg.d_model, heads=cfg.heads, top_k=top_k, mode=mode,
                        pairwise_full=tag == "nac-pairwise", seed=cfg.seed)
        layer = NACLayer(nac)
        return (lambda x: layer(x).data), mode, ("full" if nac.pairwise_full else top_k)
    if tag == "scaled-dot":
        return ScaledDotAttention(cfg.d_model, cfg.heads, rng), "-", "full"
    if tag == "plain-rnn":
        return PlainRNN(cfg.d_model, rng), "-", "-"
    raise UnknownModelError(f"unknown model tag {tag!r}; valid tags: {', '.join(MODELS)}")


def measure(fn, x, reps: int, warmup: int) -> tuple[np.ndarray, float]:
    """Per-rep wall times and the traced peak (MB) of one forward pass."""
    with no_grad():
        for _ in range(warmup):
            fn(x)
        times = np.empty(reps)
        for i in range(reps):
            t0 = time.perf_counter()
            fn(x)
            times[i] = time.perf_counter() - t0
        was_tracing = tracemalloc.is_tracing()
        if not was_tracing:
            tracemalloc.start()
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        fn(x)
        peak = tracemalloc.get_traced_memory()[1] - base
        if not was_tracing:
            tracemalloc.stop()
    return times, peak / 2**20


def cells(cfg: BenchConfig):
    for tag in cfg.models:
        ks = cfg.top_k if tag in ("nac-exact", "nac-euler", "nac-steady") else cfg.top_k[:1]
        for t in cfg.seq_lens:
            for k in ks:
                yield tag, t, k


def run_bench(cfg: BenchConfig, progress=None) -> list[BenchRecord]:
    records = []
    for tag, t, k in cells(cfg):
        fn, mode, k_label = build_model(tag, cfg, k)
        x = np.random.default_rng([cfg.seed, t]).normal(size=(cfg.batch, t, cfg.d_model))
        times, peak = measure(fn, x, cfg.reps, cfg.warmup)
        mean = float(times.mean())
        rec = BenchRecord(tag, t, cfg.d_model, cfg.heads, k_label, mode, mean, float(times.std(ddof=1)),
                          cfg.batch / mean, peak, cfg.reps)
        records.append(rec)
        if progress:
            progress(rec)
    return records


def write_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})


def loglog_slope(seq_lens, runtimes) -> float:
    """Least-squares slope of ``log runtime`` against ``log T``."""
    lx, ly = np.log(np.asarray(seq_lens, float)), np.log(np.asarray(runtimes, float))
    return float(np.polyfit(lx, ly, 1)[0])


def slopes(records) -> dict[str, float]:
    out = {}
    for tag in sorted({r.model for r in records}):
        rows = sorted((r for r in records if r.model == tag), key=lambda r: r.seq_len)
        by_k = {}
        for r in rows:
            by_k.setdefault(r.top_k, []).append(r)
        for k, rs in by_k.items():
            if len({r.seq_len for r in rs}) >= 2:
                out[f"{tag}@{k}"] = loglog_slope([r.seq_len for r in rs], [r.runtime_mean_s for r in rs])
    return out


def with_models(cfg: BenchConfig, models) -> BenchConfig:
    return replace(cfg, models=tuple(models))
