import csv

import numpy as np
import pytest

from nac import bench, kernels
from nac.bench import BenchConfig, UnknownModelError
from nac.reference import scaled_dot_attention


def test_unknown_model_tag():
    with pytest.raises(UnknownModelError):
        BenchConfig(models=("nac-exact", "transformer-xl"))


def test_reps_floor():
    with pytest.raises(ValueError):
        BenchConfig(reps=5)


def test_config_round_trip():
    cfg = BenchConfig(models=("plain-rnn",), seq_lens=(16, 32), top_k=[2, 8])
    assert BenchConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        BenchConfig.from_dict({"seq_len": 3})


def test_grid_cells():
    cfg = BenchConfig(models=("nac-exact", "nac-pairwise", "plain-rnn"), seq_lens=(8, 16), top_k=(2, 8))
    cells = list(bench.cells(cfg))
    assert len(cells) == 4 + 2 + 2
    assert ("nac-pairwise", 8, 2) in cells and ("nac-pairwise", 8, 8) not in cells


def test_run_and_csv(tmp_path):
    cfg = BenchConfig(models=("nac-exact", "nac-pairwise", "scaled-dot", "plain-rnn"), seq_lens=(16, 32),
                      d_model=8, heads=2, top_k=(2,), reps=10, warmup=1)
    seen = []
    recs = bench.run_bench(cfg, progress=seen.append)
    assert len(recs) == len(seen) == 8
    assert all(r.runtime_mean_s > 0 and r.peak_alloc_mb > 0 for r in recs)
    assert {r.top_k for r in recs if r.model == "nac-pairwise"} == {"full"}
    bench.write_csv(tmp_path / "b.csv", recs)
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert list(rows[0]) == bench.CSV_FIELDS
    assert rows[0]["backend"] == kernels.BACKEND
    assert set(bench.slopes(recs)) == {"nac-exact@2", "nac-pairwise@full", "scaled-dot@full", "plain-rnn@-"}


def test_loglog_slope_exact_power():
    t = [128, 256, 512, 1024]
    assert bench.loglog_slope(t, [x ** 2 * 3e-9 for x in t]) == pytest.approx(2.0)


def test_peak_allocation_orders_pairwise_above_topk():
    cfg = BenchConfig(models=("nac-exact", "nac-pairwise"), seq_lens=(128,), top_k=(2, 8), d_model=16,
                      heads=2, reps=10, warmup=0)
    peak = {(r.model, r.top_k): r.peak_alloc_mb for r in bench.run_bench(cfg)}
    assert peak[("nac-pairwise", "full")] > peak[("nac-exact", 8)] > peak[("nac-exact", 2)]


def test_scaled_dot_model_matches_reference(rng):
    m = bench.ScaledDotAttention(8, 2, rng)
    x = rng.normal(size=(1, 5, 8))
    q, k, v = (x[0] @ w for w in m.w[:3])
    ref = np.concatenate([scaled_dot_attention(q[:, h * 4:(h + 1) * 4], k[:, h * 4:(h + 1) * 4],
                                               v[:, h * 4:(h + 1) * 4]) for h in range(2)], axis=-1) @ m.w[3]
    np.testing.assert_allclose(m(x)[0], ref, atol=1e-12)


def test_rnn_backends_agree(rng):
    backends = kernels.available_backends()
    x = rng.normal(size=(2, 20, 4))
    w_x, w_h, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 6)) / 3, rng.normal(size=6)
    outs = [m.rnn_forward(x, w_x, w_h, b) for m in backends.values()]
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], atol=1e-13)
