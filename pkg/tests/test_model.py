import numpy as np
import pytest

from gto import autodiff as ad
from gto.encoder import FieldFrame, NormStats
from gto.errors import ConfigError, NumericError, ParseError, UsageError, ValidationError
from gto.meshgraph import Mesh, partition_mesh, merge_predictions
from gto.model import (BCSpec, GTOModel, ModelConfig, bc_correct, count_flops, load_checkpoint,
                       mp_scheme_reduction, read_checkpoint, save_checkpoint)
from gto.training import AdamW

from conftest import grid_mesh


def stats_for(c_in=1, c_out=1, l=2, seed=0):
    r = np.random.default_rng(seed)
    return NormStats(r.normal(size=c_in), r.uniform(0.5, 2, c_in), r.normal(size=l),
                     r.uniform(0.5, 2, l), r.normal(size=c_out) * 0.1, r.uniform(0.5, 2, c_out),
                     [0, 0], [1, 1], 0.3)


def tiny(mode="transient", **kw):
    base = dict(L=2, C=8, M=3, H=2, delta=1, mode=mode, c_in=1, c_out=1, global_dim=1, seed=5,
                out_gain=1.0)
    if mode == "steady":
        base.update(c_in=2)
    base.update(kw)
    cfg = ModelConfig(**base)
    return GTOModel(cfg, stats_for(cfg.c_in, cfg.c_out, cfg.global_dim + 1))


def test_config_defaults_and_validation():
    cfg = ModelConfig()
    assert (cfg.L, cfg.C, cfg.M, cfg.H, cfg.delta) == (4, 128, 128, 4, 4)
    for bad in (dict(L=0), dict(C=7, H=1), dict(C=8, H=3), dict(rho=0), dict(mode="x"),
                dict(mode="transient", c_in=2, c_out=1), dict(edge_scheme="nope")):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)


def test_config_items_round_trip():
    cfg = ModelConfig(L=3, C=16, H=2, rho=0.5, flux_channels=(0, 1), c_in=2, c_out=2,
                      node_type_onehot=True)
    assert ModelConfig.from_items(cfg.to_items()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_items([("bogus", "1")])


# -------------------------------------------------------------- bc

def test_bc_correct_examples(rng):
    m = grid_mesh(4, 4)
    out = rng.normal(size=(16, 2))
    everything = BCSpec(np.arange(16), 0.0)
    assert np.all(bc_correct(out, m, everything) == 0)
    assert bc_correct(out, m, BCSpec([], [])) is out
    bcs = BCSpec.from_state(m, rng.normal(size=(16, 2)))
    fixed = bc_correct(out, m, bcs)
    mask = m.boundary_mask
    np.testing.assert_array_equal(fixed[mask], bcs.values)
    np.testing.assert_array_equal(fixed[~mask], out[~mask])
    np.testing.assert_array_equal(bc_correct(fixed, m, bcs), fixed)
    with pytest.raises(ValidationError):
        bc_correct(out, m, BCSpec([16], 0.0))


def test_bc_correct_channel_subset(rng):
    m = grid_mesh(3, 3)
    out = rng.normal(size=(9, 3))
    bcs = BCSpec([0, 4], [[1.0], [2.0]], channels=(1,))
    fixed = bc_correct(out, m, bcs)
    assert fixed[0, 1] == 1.0 and fixed[4, 1] == 2.0
    np.testing.assert_array_equal(np.delete(fixed, 1, axis=1), np.delete(out, 1, axis=1))


# -------------------------------------------------------------- transient

def test_zero_decoder_keeps_state(f64, rng):
    model = tiny()
    model.decoder.zero_()
    m = grid_mesh(4, 4)
    u = rng.normal(size=(16, 1))
    out = model.step_transient(m, u, [1.0, 0.0]).data
    # a zero decoder predicts the mean increment exactly
    np.testing.assert_allclose(out, u + model.stats.target_mean, rtol=0, atol=1e-15)


def test_step_is_deterministic(f64, rng):
    m = grid_mesh(4, 4)
    u = rng.normal(size=(16, 1))
    a = tiny().step_transient(m, u, [1.0, 0.1]).data
    b = tiny().step_transient(m, u, [1.0, 0.1]).data
    np.testing.assert_array_equal(a, b)


def test_step_equals_state_plus_recomputed_increment(f64, rng):
    from gto.model import GraphBatch
    from gto.encoder import normalize_tensor
    model = tiny()
    m = grid_mesh(4, 3)
    u = rng.normal(size=(12, 1))
    out = model.step_transient(m, u, [1.0, 0.3]).data
    g = model.graph_inputs(m)
    raw = model.latent_forward(GraphBatch([g]), normalize_tensor(ad.Tensor(u), model.stats),
                               model._conds([[1.0, 0.3]], np.float64)).data
    incr = raw * model.stats.target_std + model.stats.target_mean
    np.testing.assert_allclose(out, u + incr, atol=1e-14)


def test_nan_state_aborts(f64):
    model = tiny()
    m = grid_mesh(3, 3)
    u = np.zeros((9, 1))
    u[4] = np.nan
    with pytest.raises(NumericError):
        model.step_transient(m, u, [1.0, 0.0])


def test_mode_mismatch(f64):
    m = grid_mesh(3, 3)
    with pytest.raises(UsageError):
        tiny().forward_steady(m, FieldFrame(np.zeros((9, 1)), [1.0], 0.0))
    with pytest.raises(UsageError):
        tiny("steady").step_transient(m, np.zeros((9, 2)), [1.0, 0.0])


def test_missing_stats(f64):
    model = GTOModel(ModelConfig(L=1, C=4, M=2, H=1, delta=1))
    with pytest.raises(UsageError):
        model.step_transient(grid_mesh(3, 3), np.zeros((9, 1)), [0.0])


def test_rollout_chain_and_restart(f64, rng):
    model = tiny()
    m = grid_mesh(4, 4)
    u0 = rng.normal(size=(16, 1))
    conds = [[1.0, 0.1 * t] for t in range(6)]
    traj = model.rollout(m, u0, conds, 6)
    bc = BCSpec.from_state(m, u0)
    state = u0
    for t in range(3):
        state = model.step_transient(m, state, conds[t], bc).data
        np.testing.assert_array_equal(state, traj[t])
    rest = model.rollout(m, traj[2], conds[3:], 3, bc=bc)
    for a, b in zip(rest, traj[3:]):
        np.testing.assert_array_equal(a, b)
    assert np.array_equal(model.rollout(m, u0, conds, 1)[0], traj[0])
    with pytest.raises(ConfigError):
        model.rollout(m, u0, conds, 0)


def test_rollout_boundary_exact_every_step(rng):
    model = tiny()
    m = grid_mesh(5, 5)
    u0 = rng.normal(size=(25, 1))
    traj = model.rollout(m, u0, lambda t: [1.0, 0.1 * t], 8)
    mask = m.boundary_mask
    for state in traj:
        assert np.array_equal(state[mask], u0[mask].astype(state.dtype))


def test_zero_increment_constant_trajectory(f64, rng):
    model = tiny()
    model.decoder.zero_()
    model.stats.target_mean[:] = 0
    m = grid_mesh(4, 4)
    u0 = rng.normal(size=(16, 1))
    for s in model.rollout(m, u0, lambda t: [1.0, t], 4):
        np.testing.assert_array_equal(s, u0)


def test_transient_permutation_equivariance(f64, rng):
    model = tiny(edge_scheme="bidirectional")
    m = grid_mesh(4, 3)
    perm = rng.permutation(m.num_nodes)
    inv = np.argsort(perm)
    mp = Mesh(m.coords[perm], inv[m.cells], m.node_type[perm])
    u = rng.normal(size=(12, 1))
    a = model.step_transient(m, u, [1.0, 0.2]).data
    b = model.step_transient(mp, u[perm], [1.0, 0.2]).data
    np.testing.assert_allclose(a[perm], b, atol=1e-10)


# ----------------------------------------------------------------- steady

def test_steady_permutation_and_constant_field(f64, rng):
    model = tiny("steady")
    m = grid_mesh(3, 3)
    perm = rng.permutation(9)
    inv = np.argsort(perm)
    mp = Mesh(m.coords[perm], inv[m.cells], m.node_type[perm])
    x = rng.normal(size=(9, 2))
    a = model.forward_steady(m, FieldFrame(x, [0.5], 0.0)).data
    b = model.forward_steady(mp, FieldFrame(x[perm], [0.5], 0.0)).data
    np.testing.assert_allclose(a[perm], b, atol=1e-10)
    model.decoder.layers[-1].weight.data[...] = 0
    c = model.forward_steady(m, FieldFrame(x, [0.5], 0.0)).data
    assert np.all(c == c[0])


def test_steady_batch_equals_single(f64, rng):
    model = tiny("steady")
    m1, m2 = grid_mesh(3, 3), grid_mesh(4, 3)
    x1, x2 = rng.normal(size=(9, 2)), rng.normal(size=(12, 2))
    both = model.forward_steady_batch([m1, m2], [x1, x2], [[0.1, 0.0], [0.2, 0.0]]).data
    one = model.forward_steady(m1, FieldFrame(x1, [0.1], 0.0)).data
    two = model.forward_steady(m2, FieldFrame(x2, [0.2], 0.0)).data
    np.testing.assert_allclose(both, np.concatenate([one, two]), atol=1e-12)


# ------------------------------------------------------------- partitions

def test_infer_partitioned_single_part(f64, rng):
    model = tiny("steady")
    m = grid_mesh(4, 5)
    frame = FieldFrame(rng.normal(size=(20, 2)), [0.3], 0.0)
    full = model.forward_steady(m, frame).data
    np.testing.assert_array_equal(model.infer_partitioned(m, frame, 1), full)


def test_infer_partitioned_identity_model(f64, rng):
    model = tiny()
    model.decoder.zero_()
    model.stats.target_mean[:] = 0
    m = grid_mesh(5, 5)
    frame = FieldFrame(rng.normal(size=(25, 1)), [1.0], 0.2)
    for K in (1, 2, 3):
        np.testing.assert_array_equal(model.infer_partitioned(m, frame, K), frame.fields)


def test_infer_partitioned_matches_part_then_average(f64, rng):
    from gto.model import GraphBatch
    model = tiny("steady")
    m = grid_mesh(5, 4)
    frame = FieldFrame(rng.normal(size=(20, 2)), [0.3], 0.0)
    got = model.infer_partitioned(m, frame, 2, halo_depth=1)
    part = partition_mesh(m, 2, 1)
    edges = model.edge_set(m)
    outs = []
    for nodes in part.parts:
        sub = m.subset(nodes)
        g = model.graph_inputs(sub, edges=edges.relabel(nodes))
        x = (frame.fields[nodes] - model.stats.field_mean) / model.stats.field_std
        o = model.latent_forward(GraphBatch([g]), ad.Tensor(x), model._conds([[0.3, 0.0]], np.float64))
        outs.append(o.data * model.stats.target_std + model.stats.target_mean)
    np.testing.assert_allclose(got, merge_predictions(part, outs), atol=1e-13)


# ---------------------------------------------------------------- edges

def test_edge_schemes():
    m = grid_mesh(3, 3)
    n_und = len(m.edges)
    assert len(tiny(edge_scheme="flux").edge_set(m)) == n_und
    assert len(tiny(edge_scheme="bidirectional").edge_set(m)) == 2 * n_und
    assert len(tiny().edge_set(m)) == 2 * n_und
    flux_model = tiny(c_in=2, c_out=2, flux_channels=(0, 1))
    assert len(flux_model.edge_set(m, np.ones((9, 2)))) == n_und


# ---------------------------------------------------------------- flops

def test_count_flops_steps_and_linearity():
    cfg = ModelConfig()
    one = count_flops(cfg, 1000, 3000, steps=1)
    assert count_flops(cfg, 1000, 3000, steps=2) == 2 * one
    ns = np.array([1e3, 3e3, 1e4, 3e4, 1e5])
    ys = np.array([count_flops(cfg, int(n), int(3 * n)) for n in ns], dtype=float)
    slope, icpt = np.polyfit(ns, ys, 1)
    resid = ys - (slope * ns + icpt)
    r2 = 1 - resid @ resid / np.sum((ys - ys.mean()) ** 2)
    assert r2 > 0.999


def test_count_flops_breakdown_sums():
    total, parts = count_flops(ModelConfig(C=16, H=2), 50, 120, steps=3, breakdown=True)
    assert total == sum(parts.values())


def test_mp_reduction_reference_config():
    cfg = ModelConfig(C=128, L=4, H=4)
    saving = mp_scheme_reduction(cfg, 1885, 3 * 1885, steps=5)
    assert abs(saving * 100 - 32.7) <= 5


# ------------------------------------------------------------ checkpoint

def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    model = tiny(rho=0.5, node_type_onehot=True)
    opt = AdamW(step=7, skipped=1)
    for n, p in model.parameters().items():
        opt.m[n] = rng.normal(size=p.data.shape).astype(np.float32)
        opt.v[n] = rng.random(p.data.shape).astype(np.float32)
    path = tmp_path / "a.gto"
    save_checkpoint(path, model, opt, extra={"note": "x"})
    opt2 = AdamW()
    again = load_checkpoint(path, opt2)
    assert again.config == model.config
    for (n, p), (n2, q) in zip(model.parameters().items(), again.parameters().items()):
        assert n == n2
        assert p.data.tobytes() == q.data.tobytes()
        np.testing.assert_array_equal(opt2.m[n], opt.m[n])
    assert opt2.step == 7 and opt2.skipped == 1
    for k in NormStats.KEYS:
        np.testing.assert_array_equal(getattr(again.stats, k), getattr(model.stats, k))
    path2 = tmp_path / "b.gto"
    save_checkpoint(path2, again, opt2, extra={"note": "x"})
    assert path.read_bytes() == path2.read_bytes()
    assert read_checkpoint(path).manifest["extra.note"] == "x"


def test_checkpoint_parse_errors(tmp_path):
    model = tiny()
    path = tmp_path / "a.gto"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (tmp_path / "bad.gto").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError) as e:
        read_checkpoint(tmp_path / "bad.gto")
    assert e.value.offset == 0
    (tmp_path / "cut.gto").write_bytes(raw[:-5])
    with pytest.raises(ParseError):
        read_checkpoint(tmp_path / "cut.gto")
