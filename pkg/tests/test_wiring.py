import numpy as np
import pytest

from nac.reference import cell_run, cell_step
from nac.tensor import DimensionError, Tape
from nac.wiring import (BACKBONE_STEPS, ConfigurationError, NCPCell, WiringSpec, build_wiring, make_backbone,
                        make_sensory_gate, size_for_dmodel, split_rest)


@pytest.mark.parametrize("d", [1, 2, 3, 8, 16, 64, 100])
def test_unit_counts_match_real_formulas(d):
    ns, nb = size_for_dmodel(d)
    assert ns == int(np.ceil((d - 0.5) / 0.6 - 1e-12))
    assert nb == d + int(np.floor(d / 0.6 + 1e-12))


def test_split_rest_sums():
    for n in range(3, 60):
        parts = split_rest(n)
        assert sum(parts) == n and min(parts) >= 1


def test_golden_wiring_dump():
    w = build_wiring((2, 2, 1, 1), d_in=2, sparsity=0.5, seed=7)
    again = build_wiring((2, 2, 1, 1), d_in=2, sparsity=0.5, seed=7)
    assert w.to_json() == again.to_json()
    doc = __import__("json").loads(w.to_json())
    assert set(doc) == {"groups", "s", "seed", "d_in", "input_group", "allowed_edges", "A_in", "A_rec"}
    assert doc["groups"] == [2, 2, 1, 1]
    a_rec = np.array(doc["A_rec"])
    assert np.all(np.diag(a_rec) == 0)
    # edges only where allowed
    assert not (w.a_in & ~w.allowed_in).any()
    assert not (w.a_rec & ~w.allowed_rec).any()


def test_wiring_json_round_trip():
    w = build_wiring((4, 3, 2, 2), d_in=3, sparsity=0.3, seed=11)
    back = WiringSpec.from_json(w.to_json())
    assert back.to_json() == w.to_json()
    np.testing.assert_array_equal(back.allowed_rec, w.allowed_rec)


def test_every_neuron_with_slots_has_an_input():
    for seed in range(20):
        w = build_wiring((3, 3, 2, 2), d_in=3, sparsity=0.95, seed=seed)
        has_in = w.a_in.any(axis=0) | w.a_rec.any(axis=0)
        has_slot = w.allowed_in.any(axis=0) | w.allowed_rec.any(axis=0)
        assert np.all(has_in[has_slot])


def test_sparsity_zero_keeps_all_allowed_edges():
    w = build_wiring((3, 2, 2, 2), d_in=2, sparsity=0.0, seed=0)
    np.testing.assert_array_equal(w.a_in.astype(bool), w.allowed_in)
    np.testing.assert_array_equal(w.a_rec.astype(bool), w.allowed_rec)


def test_density_tracks_sparsity():
    w = build_wiring((40, 30, 20, 10), d_in=40, sparsity=0.7, seed=3)
    assert abs(w.density_pre_repair - 0.3) < 0.03


@pytest.mark.parametrize("bad", [dict(groups=(1, 1, 1)), dict(sparsity=1.0), dict(d_in=0),
                                 dict(groups=(0, 1, 1, 1))])
def test_bad_wiring_arguments(bad):
    args = dict(groups=(2, 2, 2, 2), d_in=2, sparsity=0.5, seed=0)
    args.update(bad)
    with pytest.raises(ValueError):
        build_wiring(**args)


def test_unknown_group_rejected():
    with pytest.raises(ConfigurationError):
        build_wiring((2, 2, 2, 2), 2, 0.5, 0, input_group="cortex")


def test_sensory_gate_only_sensory_active():
    gate = make_sensory_gate(8, 0.5, seed=1)
    assert gate.d_in == 8 and gate.d_out == 8
    sens = gate.wiring.group_indices("sensory")
    assert set(gate.active) == set(sens)
    assert gate.wiring.groups[0] == 8


def test_cell_run_equals_literal_steps(rng):
    bb = make_backbone(6, 0.4, seed=2, rng=np.random.default_rng(0))
    cell = bb.cell
    u = rng.normal(size=6)
    y_fast = cell.run(u[None], BACKBONE_STEPS).data[0]
    np.testing.assert_allclose(y_fast, cell_run(cell, u, BACKBONE_STEPS), rtol=0, atol=1e-14)
    y, x = cell_step(cell, u, np.zeros(cell.wiring.n_total))
    assert np.all(x[cell.mask_act == 0] == 0)


def test_masked_weights_get_no_gradient(rng):
    gate = make_sensory_gate(6, 0.6, seed=4, rng=np.random.default_rng(1))
    with Tape() as tape:
        loss = gate.run(rng.normal(size=(3, 6)), 1).sum()
    g_in, g_rec = tape.gradient(loss, [gate.params["W_in"], gate.params["W_rec"]])
    assert np.all(g_in[~gate.effective_mask("W_in")] == 0)
    assert np.all(g_rec == 0)


def test_pair_heads_match_explicit_pairs(rng):
    from nac import tensor as T
    bb = make_backbone(4, 0.3, seed=5, rng=np.random.default_rng(2))
    q = rng.normal(size=(2, 5, 2))
    k = rng.normal(size=(2, 5, 2))
    idx = rng.integers(0, 5, size=(2, 5, 3))
    pairs = T.concat_lastdim([T.tile(q, 3), T.gather_rows(k, idx)])
    for a, b in zip(bb.heads(pairs), bb.pair_heads(T.Tensor(q), T.Tensor(k), idx)):
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-14)


def test_cell_rejects_wrong_width():
    gate = make_sensory_gate(4, 0.5, seed=0)
    with pytest.raises(DimensionError):
        gate.run(np.ones((1, 5)))


def test_output_in_disabled_group_rejected():
    w = build_wiring((2, 2, 2, 2), 2, 0.0, 0)
    with pytest.raises(ConfigurationError):
        NCPCell(w, output_neurons=w.group_indices("motor"), disabled_groups=("motor",))
