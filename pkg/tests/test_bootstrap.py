import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import tcore.bootstrap as bs
from tcore.bootstrap import (BootstrapParams, BootstrapState, chi_hash, class_loss_expand, global_loss_expand,
                             load_audit, meta_expand, replay_audit, run_bootstrap, save_audit)
from tcore.encoder_filter import ChannelPartition, apply_partition
from tcore.errors import ParameterError, TrainingDiverged
from tcore.expansion import CleanPool
from tcore.models import HeadConfig, TrainOpts, per_sample_losses

from conftest import small_model

HEAD = HeadConfig(16, 16, 8, 4)


def seed_pool(ds, n=8):
    return CleanPool((int(i), "seed", 0) for i in ds.ids[::len(ds) // n][:n])


def state_for(model, ds, n=8):
    return BootstrapState(model, seed_pool(ds, n))


def test_class_loss_counts_and_order(glyphs4, trained_small):
    st_ = state_for(trained_small, glyphs4)
    rest = st_.pool.complement(glyphs4)
    losses = per_sample_losses(trained_small, glyphs4, rest)
    labels = glyphs4.labels[glyphs4.positions(rest)]
    class_loss_expand(st_, glyphs4, 0.1)
    added = st_.audit[-1]["added"]
    for k in range(4):
        sel = labels == k
        expect = rest[sel][np.lexsort((rest[sel], losses[sel]))][:math.floor(0.1 * sel.sum())]
        got = [i for i in added if glyphs4.labels[glyphs4.positions([i])[0]] == k]
        assert got == expect.tolist()
    assert all(st_.pool.provenance(i) == "class_loss" for i in added)


def test_global_uses_floor_meta_uses_ceil(glyphs4, trained_small):
    st_ = state_for(trained_small, glyphs4)
    before = len(glyphs4) - len(st_.pool)
    global_loss_expand(st_, glyphs4, 0.03)
    assert len(st_.audit[-1]["added"]) == math.floor(0.03 * before)
    rest = len(glyphs4) - len(st_.pool)
    meta_expand(st_, glyphs4, 0.03, TrainOpts(groups=("head",)))
    assert len(st_.audit[-1]["added"]) == math.ceil(0.03 * rest)


def test_meta_divergence_skips_round(glyphs4, trained_small, monkeypatch):
    def boom(*a, **k):
        raise TrainingDiverged("nan")

    monkeypatch.setattr(bs, "fit", boom)
    st_ = state_for(trained_small, glyphs4)
    n = len(st_.pool)
    meta_expand(st_, glyphs4, 0.05, TrainOpts(groups=("head",)))
    assert len(st_.pool) == n and st_.audit[-1]["added"] == []


def test_meta_needs_complement(glyphs4, trained_small):
    full = BootstrapState(trained_small, CleanPool((int(i), "seed", 0) for i in glyphs4.ids))
    with pytest.raises(ParameterError):
        meta_expand(full, glyphs4, 0.05, TrainOpts())


def test_params_validation():
    with pytest.raises(ParameterError):
        BootstrapParams(rho=1.0)
    with pytest.raises(ParameterError):
        BootstrapParams(iter1=-1)


@pytest.fixture(scope="module")
def reinit_run(glyphs4, trained_small):
    enc = trained_small.encoder
    part = ChannelPartition([np.ones(8, np.float32), np.ones(16, np.float32)], [[0], [2, 7]], 0.9)
    enc = apply_partition(enc, part, "reinit", seed=1, calibration_images=glyphs4.images)
    params = BootstrapParams(iter1=2, iter2=2, T=1, rho=0.6, gamma3=0.1,
                             train_opts=TrainOpts(epochs=1, learning_rate=0.05))
    sizes = []
    res = run_bootstrap(enc, glyphs4, seed_pool(glyphs4), params, part, HEAD,
                        on_round=lambda s: sizes.append(len(s.pool)))
    return enc, part, params, res, sizes


def test_bootstrap_halts_at_rho(glyphs4, reinit_run):
    _, _, params, res, sizes = reinit_run
    assert len(res.pool) >= params.rho * len(glyphs4)
    assert sizes == sorted(sizes)
    phases = [r["phase"] for r in res.audit]
    assert phases[:4] == ["class_loss"] * 2 + ["global_loss"] * 2
    assert set(phases[4:]) == {"meta"}
    # no more meta rounds than needed
    assert sizes[-2] < params.rho * len(glyphs4)


def test_trusted_rows_frozen(reinit_run):
    enc, part, _, res, _ = reinit_run
    assert res.chi_hash_start == res.chi_hash_end == chi_hash(enc, part)
    assert chi_hash(res.model.encoder, part) == chi_hash(enc, part)
    assert not all(np.array_equal(a.psi_weight.detach().numpy(), b.psi_weight.detach().numpy())
                   for a, b in zip(enc.blocks, res.model.encoder.blocks))


def test_audit_replay(tmp_path, glyphs4, reinit_run):
    _, _, _, res, _ = reinit_run
    audit = load_audit(save_audit(res.audit, tmp_path / "a.jsonl"))
    assert replay_audit(seed_pool(glyphs4), audit) == res.pool
    broken = [dict(r) for r in audit]
    broken[1]["pool_size"] += 1
    with pytest.raises(ParameterError):
        replay_audit(seed_pool(glyphs4), broken)


def test_prune_mode_bootstrap_deterministic(glyphs4, trained_small):
    part = ChannelPartition([np.ones(8, np.float32), np.ones(16, np.float32)], [[1], [3]], 0.9)
    enc = apply_partition(trained_small.encoder, part, "prune")
    params = BootstrapParams(iter1=1, iter2=1, T=1, rho=0.3, train_opts=TrainOpts(epochs=1))
    a = run_bootstrap(enc, glyphs4, seed_pool(glyphs4), params, part, HEAD)
    b = run_bootstrap(enc, glyphs4, seed_pool(glyphs4), params, part, HEAD)
    assert a.pool == b.pool


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=30, unique=True), st.integers(0, 3))
def test_pool_provenance_immutable(ids, rnd):
    pool = CleanPool()
    pool.add(ids, "seed", 0)
    with pytest.raises(ParameterError):
        pool.add(ids[:1], "meta", rnd)
    assert all(pool.provenance(i) == "seed" for i in ids)
    assert pool.ids == [int(i) for i in ids]


def test_cached_features_match_full_forward(glyphs4, trained_small):
    from tcore.bootstrap import train_on_pool
    from tcore.models import embed
    import copy
    opts = TrainOpts(epochs=2, learning_rate=0.05, groups=("head", "psi"))
    states = []
    for cached in (False, True):
        st_ = state_for(copy.deepcopy(trained_small), glyphs4)
        if cached:
            st_.features = embed(st_.model.encoder, glyphs4.images)
        train_on_pool(st_, glyphs4, opts, 2)
        class_loss_expand(st_, glyphs4, 0.1)
        meta_expand(st_, glyphs4, 0.1, opts)
        states.append(st_)
    assert states[0].pool == states[1].pool
    rest = states[0].pool.complement(glyphs4)
    np.testing.assert_allclose(states[0].losses(glyphs4, rest), states[1].losses(glyphs4, rest), atol=1e-5)
