"""``nac`` command-line entry point.

Subcommands: ``verify``, ``train``, ``eval``, ``bench``, ``sweep``. Every
command takes ``--seed``; artifacts go under ``--out`` in a run directory
named ``<command>-<config hash>-s<seed>``. ``NAC_THREADS`` caps the BLAS
thread pool; ``bench`` always runs single-threaded.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import shlex
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from nac import bench as bench_mod
from nac import checkpoint, kernels, tasks, verify


class UsageError(Exception):
    pass


def config_hash(doc: dict) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def run_dir(out: str, kind: str, doc: dict, seed: int) -> Path:
    return Path(out) / f"{kind}-{config_hash(doc)}-s{seed}"


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc


def thread_cap():
    """BLAS thread limit from ``NAC_THREADS``; no limit when unset."""
    raw = os.environ.get("NAC_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"NAC_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---- verify ----------------------------------------------------------------

def cmd_verify(args) -> int:
    if args.trials is not None and args.trials < 100:
        raise UsageError(f"--trials must be >= 100, got {args.trials}")
    rows = verify.run_suite(args.suite, args.trials, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = out / f"verify-{args.suite}-s{args.seed}.csv"
    verify.write_report(report, rows)
    width = max(len(r.property) for r in rows)
    for r in rows:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.property:<{width}}  {status:>4}  trials={r.trials} violations={r.violations} "
              f"worst={r.worst_margin:.3e}")
    print(f"report: {report}")
    failed = [r for r in rows if not r.passed]
    if not failed:
        return 0
    for r in failed:
        print(f"\n{r.property}: worst trial {json.dumps(r.worst_params, default=float)}", file=sys.stderr)
    replay = ["nac", "verify", "--suite", args.suite, "--seed", str(args.seed)]
    if args.trials is not None:
        replay += ["--trials", str(args.trials)]
    print("replay: " + shlex.join(replay), file=sys.stderr)
    return 1


# ---- train / eval -------------------------------------------------------------

def _run_config(args) -> tuple[tasks.RunConfig, dict]:
    doc = read_config(args.config)
    try:
        run = tasks.RunConfig.from_dict({k: v for k, v in doc.items() if k != "sweep"}).with_seed(args.seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return run, doc


def _dataset(run: tasks.RunConfig) -> tasks.Dataset:
    return tasks.gen_event_task(run.task.n_sequences, run.task.base_length, run.train.seed)


def cmd_train(args) -> int:
    run, _ = _run_config(args)
    rd = run_dir(args.out, "train", run.to_dict(), args.seed)
    rd.mkdir(parents=True, exist_ok=True)
    _write_json(rd / "config.json", run.to_dict())
    (rd / "layer_config.json").write_text(run.layer.to_json() + "\n")
    data = _dataset(run)
    tasks.save_jsonl(rd / "train.jsonl", data.train)
    tasks.save_jsonl(rd / "test.jsonl", data.test)
    model = tasks.EventClassifier(run.layer, seed=run.train.seed)
    wd = rd / "wiring"
    wd.mkdir(exist_ok=True)
    for name, cell in model.layer.params.cells().items():
        (wd / f"{name}.json").write_text(cell.wiring.to_json() + "\n")
    result = tasks.train_bptt(model, data, run.train, checkpoint_path=rd / "model.ckpt")
    tasks.write_curve(rd / "loss_curve.csv", result.curve)
    ev = tasks.evaluate(model, data.test)
    _write_json(rd / "metrics.json", {"test_accuracy": ev.accuracy, "confusion": ev.confusion.tolist(),
                                      "n_test": ev.n, "backend": kernels.BACKEND})
    print(f"test accuracy {ev.accuracy:.4f} ({ev.n} sequences)")
    print(f"run directory: {rd}")
    return 0


def cmd_eval(args) -> int:
    run, _ = _run_config(args)
    rd = run_dir(args.out, "train", run.to_dict(), args.seed)
    ckpt = rd / "model.ckpt"
    if not ckpt.is_file():
        raise UsageError(f"no checkpoint at {ckpt}; run `nac train` with the same config and seed first")
    model = tasks.EventClassifier(run.layer, seed=run.train.seed)
    checkpoint.restore(model.named_parameters(), checkpoint.load(ckpt))
    test = tasks.load_jsonl(rd / "test.jsonl")
    ev = tasks.evaluate(model, test)
    doc = {"test_accuracy": ev.accuracy, "confusion": ev.confusion.tolist(), "n_test": ev.n}
    _write_json(rd / "eval.json", doc)
    recorded = json.loads((rd / "metrics.json").read_text())["test_accuracy"] if (rd / "metrics.json").exists() else None
    print(f"test accuracy {ev.accuracy:.4f} ({ev.n} sequences)")
    if recorded is not None and recorded != ev.accuracy:
        print(f"warning: recorded accuracy was {recorded:.4f}", file=sys.stderr)
        return 1
    return 0


# ---- bench / sweep ------------------------------------------------------------

def cmd_bench(args) -> int:
    doc = read_config(args.config)
    try:
        cfg = bench_mod.BenchConfig.from_dict({**doc, "seed": args.seed})
    except bench_mod.UnknownModelError as exc:
        raise UsageError(str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid bench config: {exc}") from exc
    rd = run_dir(args.out, "bench", cfg.to_dict(), args.seed)
    rd.mkdir(parents=True, exist_ok=True)
    _write_json(rd / "config.json", cfg.to_dict())

    def show(r):
        print(f"{r.model:<13} T={r.seq_len:<5} K={str(r.top_k):<4} {r.runtime_mean_s * 1e3:10.2f} ms "
              f"± {r.runtime_std_s * 1e3:7.2f}  peak {r.peak_alloc_mb:9.1f} MB", flush=True)

    with threadpool_limits(limits=1):
        records = bench_mod.run_bench(cfg, progress=show)
    bench_mod.write_csv(rd / "bench.csv", records)
    sl = bench_mod.slopes(records)
    if sl:
        _write_json(rd / "slopes.json", sl)
        for k, v in sl.items():
            print(f"log-log slope {k}: {v:.3f}")
    print(f"run directory: {rd}")
    return 0


def cmd_sweep(args) -> int:
    run, doc = _run_config(args)
    grid = doc.get("sweep", {})
    modes = grid.get("modes", list(tasks.ABLATION_MODES))
    top_ks = grid.get("top_k", list(tasks.ABLATION_TOPK))
    sparsities = grid.get("sparsity", [run.layer.sparsity])
    seeds = grid.get("seeds", [args.seed, args.seed + 1, args.seed + 2])
    if len(seeds) < 3:
        raise UsageError(f"sweep needs >= 3 seeds, got {seeds}")
    key = {**run.to_dict(), "sweep": {"modes": modes, "top_k": top_ks, "sparsity": sparsities, "seeds": seeds}}
    rd = run_dir(args.out, "sweep", key, args.seed)
    rd.mkdir(parents=True, exist_ok=True)
    _write_json(rd / "config.json", key)
    data = _dataset(run)
    try:
        rows = tasks.mode_ablation(data, run, seeds, modes, top_ks, sparsities)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tasks.write_ablation(rd / "sweep.csv", rows)
    for r in rows:
        print(f"{r.mode:<7} K={r.top_k:<5} s={r.sparsity:<5} acc {r.mean:.4f} ± {r.std:.4f}")
    print(f"run directory: {rd}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nac", description="Neuronal attention circuit toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s (kernels: {kernels.BACKEND})")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=0, help="u64 seed (default 0)")
        sp.add_argument("--out", default="runs", help="output directory (default ./runs)")
        if config:
            sp.add_argument("--config", help="JSON config file")

    v = sub.add_parser("verify", help="run property campaigns")
    v.add_argument("--suite", required=True, choices=verify.SUITE_NAMES)
    v.add_argument("--trials", type=int, default=None, help="trials per property (>= 100)")
    common(v, config=False)
    v.set_defaults(fn=cmd_verify)
    for name, fn, text in (("train", cmd_train, "train on the synthetic event task"),
                           ("eval", cmd_eval, "evaluate a trained run's checkpoint"),
                           ("bench", cmd_bench, "runtime and peak-allocation benchmark"),
                           ("sweep", cmd_sweep, "mode / sparsity / top-k grid")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed < 0 or args.seed >= 2**64:
        parser.error(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    try:
        with thread_cap():
            return args.fn(args)
    except UsageError as exc:
        parser.error(str(exc))
    except tasks.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
