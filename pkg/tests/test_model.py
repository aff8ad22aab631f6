import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import dense_forward
from mew.cell_data.tables import TaskSpec
from mew.errors import ChecksumMismatch, DimMismatch, EmptyGraph, InvalidConfig
from mew.model import (
    Batch,
    ModelConfig,
    attention_fuse,
    branch_forward,
    forward,
    full_forward,
    init_params,
    leaky_relu,
    load_checkpoint,
    pool,
    save_checkpoint,
)
from mew.precompute import PrecomputedFeatures

from conftest import BOTH_TASKS


def _random_pf(rng, n, F, K, image_id="g"):
    vh = [rng.normal(size=(n, F)) for _ in range(K + 1)]
    ch = [vh[0]] + [rng.normal(size=(n, F)) for _ in range(K)]
    return PrecomputedFeatures(vh, ch, K, seed=0, image_id=image_id)


def test_zero_hops_give_zero_z():
    hops = [np.zeros((4, 3))] * 3
    Ws = [np.ones((3, 2))] * 3
    tr = branch_forward(hops, Ws, [np.zeros(2)] * 3, np.ones((6, 2)), np.zeros(2))
    assert np.array_equal(tr.Z, np.zeros((4, 2)))


def test_identity_composition(rng):
    X = np.abs(rng.normal(size=(5, 3)))
    tr = branch_forward([X], [np.eye(3)], [np.zeros(3)], np.eye(3), np.zeros(3))
    assert np.array_equal(tr.Z, X)


def test_hop_count_mismatch():
    with pytest.raises(DimMismatch):
        branch_forward([np.zeros((2, 2))] * 2, [np.eye(2)] * 3, [np.zeros(2)] * 3, np.eye(6, 2), np.zeros(2))


def test_attention_examples():
    z = np.array([[1.0, -2.0]])
    fused, av, ac, _ = attention_fuse(z, z.copy(), np.array([0.3, 0.1]))
    assert av[0] == 0.5 and ac[0] == 0.5 and np.allclose(fused, z)
    _, av, _, _ = attention_fuse(np.array([[2.0, 0.0]]), np.zeros((1, 2)), np.array([1.0, 0.0]))
    assert av[0] == pytest.approx(np.e ** 2 / (np.e ** 2 + 1), abs=1e-12)
    assert av[0] == pytest.approx(0.88080, abs=1e-5)
    assert leaky_relu(np.array(-1.0)) == pytest.approx(-0.3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    Z, Zc, a = rng.normal(size=(20, 4)) * 5, rng.normal(size=(20, 4)) * 5, rng.normal(size=4)
    _, av, ac, _ = attention_fuse(Z, Zc, a)
    assert np.abs(av + ac - 1).max() <= 1e-12
    assert np.all((av >= 0) & (av <= 1))
    # expit saturates to exactly 0 or 1 in float64 once the score gap passes ~37
    gap = np.abs(leaky_relu(Z @ a) - leaky_relu(Zc @ a))
    assert np.all((av[gap < 30] > 0) & (av[gap < 30] < 1))


def test_attention_shift_invariance(rng):
    # adding c to both raw scores moves them together; with positive scores the LeakyReLU is linear
    Z, Zc = np.abs(rng.normal(size=(10, 3))), np.abs(rng.normal(size=(10, 3)))
    a = np.abs(rng.normal(size=3))
    _, av, _, _ = attention_fuse(Z, Zc, a)
    shift = np.ones(3) * 2.0
    # a.(z + s) = a.z + a.s: the same constant added to both scores
    _, av2, _, _ = attention_fuse(Z + shift, Zc + shift, a)
    assert np.allclose(av, av2, atol=1e-12)


def test_pool_examples():
    assert pool(np.array([[1.0, 2.0]]), np.array([0, 1]))[0].tolist() == [[1.0, 2.0]]
    assert pool(np.array([[0.0, 2.0], [2.0, 0.0]]), np.array([0, 2]))[0].tolist() == [[1.0, 1.0]]
    with pytest.raises(EmptyGraph):
        pool(np.zeros((0, 2)), np.array([0, 0]))
    v = np.array([[1.0], [5.0], [3.0]])
    assert pool(v, np.array([0, 3]), "max")[0].tolist() == [[5.0]]
    assert pool(v, np.array([0, 3]), "sum")[0].tolist() == [[9.0]]


@pytest.mark.parametrize("seed", range(5))
def test_full_forward_matches_dense(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 4))
    cfg = ModelConfig(4, 6, K, BOTH_TASKS, shared=bool(seed % 2))
    params = init_params(cfg, rng)
    for k in params:
        params[k] = params[k] + rng.normal(scale=0.05, size=params[k].shape)
    pfs = [_random_pf(rng, n, 4, K) for n in (20, 7, 13)]
    trace = forward(params, cfg, Batch.from_features(pfs))
    ref = dense_forward(params, cfg, [(pf.voronoi_hops, pf.celltype_hops) for pf in pfs])
    for t in cfg.tasks:
        assert np.abs(trace.heads[t.name].pooled - ref[t.name]).max() <= 1e-10


def test_eval_deterministic_and_permutation_invariant(rng):
    cfg = ModelConfig(3, 5, 2, BOTH_TASKS, dropout=0.4)
    params = init_params(cfg, rng)
    pf = _random_pf(rng, 15, 3, 2)
    a = full_forward(pf, params, cfg)
    b = full_forward(pf, params, cfg)
    assert np.array_equal(a.heads["cls"].pooled, b.heads["cls"].pooled)
    perm = rng.permutation(15)
    pp = PrecomputedFeatures([m[perm] for m in pf.voronoi_hops], [m[perm] for m in pf.celltype_hops], 2, 0)
    c = full_forward(pp, params, cfg)
    for t in ("cls", "surv"):
        assert np.abs(a.heads[t].pooled - c.heads[t].pooled).max() <= 1e-10


def test_train_mode_dropout_changes_output(rng):
    cfg = ModelConfig(3, 16, 1, BOTH_TASKS, dropout=0.5)
    params = init_params(cfg, rng)
    pf = _random_pf(rng, 30, 3, 1)
    a = full_forward(pf, params, cfg, "train", np.random.default_rng(0))
    b = full_forward(pf, params, cfg, "train", np.random.default_rng(1))
    assert not np.array_equal(a.heads["cls"].pooled, b.heads["cls"].pooled)
    assert a.voronoi.mask is not None


def test_shared_weights_alias(rng):
    cfg = ModelConfig(3, 4, 2, BOTH_TASKS, shared=True)
    params = init_params(cfg, rng)
    assert not any(k.startswith("Wc") and k[2:].isdigit() for k in params)
    pf = _random_pf(rng, 10, 3, 2)
    a = full_forward(pf, params, cfg)
    params["W1"] = params["W1"] + 0.5
    b = full_forward(pf, params, cfg)
    assert not np.allclose(a.voronoi.H, b.voronoi.H)
    assert not np.allclose(a.celltype.H, b.celltype.H)


def test_fusion_variants_and_activations(rng):
    pf = _random_pf(rng, 12, 3, 2)
    for fusion in ("attention", "sum", "concat", "voronoi", "celltype"):
        for act in ("relu", "prelu", "identity"):
            cfg = ModelConfig(3, 4, 2, BOTH_TASKS, fusion=fusion, activation=act, pooling="max")
            tr = full_forward(pf, init_params(cfg, np.random.default_rng(0)), cfg)
            assert tr.heads["cls"].pooled.shape == (1, 2) and tr.heads["surv"].pooled.shape == (1, 1)
            assert (tr.voronoi is None) == (fusion == "celltype")
            assert (tr.celltype is None) == (fusion == "voronoi")
    with pytest.raises(InvalidConfig):
        ModelConfig(3, 4, 2, BOTH_TASKS, fusion="mean")


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = ModelConfig(3, 4, 2, [TaskSpec("y", "binary")], shared=False, fusion="concat")
    params = init_params(cfg, rng)
    digest = save_checkpoint(tmp_path / "m.mew", cfg, params, {"note": 1})
    cfg2, p2, meta = load_checkpoint(tmp_path / "m.mew")
    assert cfg2 == cfg and meta == {"note": 1} and len(digest) == 64
    for k in params:
        assert np.array_equal(p2[k], params[k].astype(np.float32).astype(np.float64))
    raw = bytearray((tmp_path / "m.mew").read_bytes())
    raw[-40] ^= 1
    (tmp_path / "bad.mew").write_bytes(raw)
    with pytest.raises(ChecksumMismatch):
        load_checkpoint(tmp_path / "bad.mew")
