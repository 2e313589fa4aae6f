import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tcore.attacks import (EncoderAttackOpts, TriggerSpec, UAPOpts, UAPTrigger, apply_trigger, craft_uap_trigger,
                           inject_encoder_backdoor, poison_dataset, uap_spec)
from tcore.data import LabeledDataset
from tcore.errors import GeometryError, InsufficientPoolError, ParameterError
from tcore.models import Encoder, EncoderConfig, model_hash

from conftest import SMALL_ENC


def tiny_set(per_class, num_classes=10, size=4, seed=0):
    rng = np.random.default_rng(seed)
    n = per_class * num_classes
    return LabeledDataset(rng.uniform(0, 1, (n, 3, size, size)), np.repeat(np.arange(num_classes), per_class),
                          num_classes=num_classes)


def test_patch_overwrites_only_corner():
    x = np.random.default_rng(0).uniform(0, 0.9, (3, 32, 32)).astype(np.float32)
    y = apply_trigger(x, TriggerSpec("patch", 0))
    assert np.all(y[:, 29:, 29:] == 1.0)
    changed = y != x
    changed[:, 29:, 29:] = False
    assert not changed.any()


def test_blend_constant_arithmetic():
    spec = TriggerSpec("blend", 0, params={"weight": 0.2, "pattern": np.full((3, 8, 8), 0.5, np.float32)})
    y = apply_trigger(np.zeros((3, 8, 8), np.float32), spec)
    np.testing.assert_allclose(y, 0.1, rtol=0, atol=1e-7)


def test_sinusoid_formula():
    spec = TriggerSpec("sinusoid", 0, label_mode="clean")
    y = apply_trigger(np.zeros((3, 32, 32), np.float32), spec)
    j = np.arange(32)
    expect = np.clip(20 / 255 * np.sin(2 * np.pi * j * 6 / 32), 0, 1)
    for c in range(3):
        for i in (0, 17):
            np.testing.assert_allclose(y[c, i], expect, atol=1e-7)


def test_patch_too_large():
    with pytest.raises(GeometryError):
        apply_trigger(np.zeros((3, 4, 4), np.float32), TriggerSpec("patch", 0, params={"size": 5}))


def test_label_mode_rules():
    with pytest.raises(ParameterError):
        TriggerSpec("patch", 0, label_mode="clean")
    with pytest.raises(ParameterError):
        TriggerSpec("sinusoid", 0, label_mode="dirty")
    with pytest.raises(ParameterError):
        TriggerSpec("uap", 0, params={"budget": 0.01, "delta": np.full((3, 4, 4), 0.02, np.float32)})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6))
def test_patch_idempotent(seed, size):
    x = np.random.default_rng(seed).uniform(0, 1, (3, 16, 16)).astype(np.float32)
    spec = TriggerSpec("patch", 0, params={"size": size})
    once = apply_trigger(x, spec)
    assert np.array_equal(apply_trigger(once, spec), once)


def test_dirty_patch_counts_full_scale():
    ds = tiny_set(5000)
    pd, rep = poison_dataset(ds, TriggerSpec("patch", 0, 0.2, params={"size": 1}), 0)
    assert len(rep.poisoned_ids) == 1250
    assert rep.target_class_size == 6250
    assert int((pd.labels == 0).sum()) == 6250
    assert pd.ground_truth.read().sum() == 1250


def test_clean_sinusoid_counts_full_scale():
    ds = tiny_set(5000)
    pd, rep = poison_dataset(ds, TriggerSpec("sinusoid", 0, 0.2, label_mode="clean"), 0)
    assert len(rep.poisoned_ids) == 1000
    assert len(pd) == len(ds)
    flags = pd.ground_truth.read()
    assert flags.sum() == 1000 and np.all(pd.labels[flags] == 0)


def test_zero_ratio_noop():
    ds = tiny_set(10)
    pd, rep = poison_dataset(ds, TriggerSpec("patch", 0, 0.0, params={"size": 1}), 0)
    assert pd is ds and rep.poisoned_ids == []


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.45), st.integers(0, 9), st.integers(0, 10_000))
def test_dirty_fraction_and_untouched(p, t, seed):
    ds = tiny_set(40)
    pd, rep = poison_dataset(ds, TriggerSpec("patch", t, p, params={"size": 1}), seed)
    flags = pd.ground_truth.read()
    n_t = int((pd.labels == t).sum())
    assert abs(flags.sum() / n_t - p) <= 1 / 40
    # original samples are untouched when no cover is requested
    pos = pd.positions(ds.ids)
    assert np.array_equal(pd.images[pos], ds.images)
    assert np.array_equal(pd.labels[pos], ds.labels)


def test_source_specific_with_cover():
    ds = tiny_set(40)
    spec = TriggerSpec("source_specific_patch", 0, 0.2, cover_ratio=0.25,
                       params={"size": 1, "source_class": 1, "cover_classes": [2, 3]})
    pd, rep = poison_dataset(ds, spec, 3)
    assert not set(rep.poisoned_ids) & set(rep.cover_ids)
    assert set(rep.counts_per_class) == {1}
    assert len(rep.cover_ids) == int(0.25 * len(rep.poisoned_ids))
    pos = pd.positions(ds.ids)
    modified = ds.ids[np.any(pd.images[pos] != ds.images, axis=(1, 2, 3))]
    assert set(modified.tolist()) <= set(rep.cover_ids)
    assert np.all(np.isin(ds.labels[ds.positions(rep.cover_ids)], [2, 3]))
    assert np.array_equal(pd.labels[pd.positions(rep.cover_ids)], ds.labels[ds.positions(rep.cover_ids)])


def test_insufficient_pool():
    ds = tiny_set(10, num_classes=2)
    spec = TriggerSpec("source_specific_patch", 0, 0.9, params={"size": 1, "source_class": 1})
    with pytest.raises(InsufficientPoolError):
        poison_dataset(ds, spec, 0)


def test_poisoning_deterministic():
    ds = tiny_set(30)
    spec = TriggerSpec("blend", 2, 0.2)
    a, _ = poison_dataset(ds, spec, 5)
    b, _ = poison_dataset(ds, spec, 5)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.ids, b.ids)


def _small_encoder():
    enc = Encoder(SMALL_ENC)
    enc.reset(0)
    return enc.eval()


def test_encoder_injection_zero_epochs(glyphs4):
    enc = _small_encoder()
    out = inject_encoder_backdoor(enc, glyphs4, glyphs4.images[:5], TriggerSpec("patch", 0),
                                  EncoderAttackOpts(epochs=0))
    assert model_hash(out) == model_hash(enc)


def test_encoder_injection_zero_weights(glyphs4):
    enc = _small_encoder()
    out = inject_encoder_backdoor(enc, glyphs4, glyphs4.images[:5], TriggerSpec("patch", 0),
                                  EncoderAttackOpts(epochs=2, lambda_align=0.0, lambda_utility=0.0))
    for a, b in zip(enc.parameters(), out.parameters()):
        assert torch.equal(a, b)


def test_encoder_injection_rejects_other_kinds(glyphs4):
    with pytest.raises(ParameterError):
        inject_encoder_backdoor(_small_encoder(), glyphs4, glyphs4.images[:2],
                                TriggerSpec("sinusoid", 0, label_mode="clean"), EncoderAttackOpts(epochs=1))


class _Linear:
    def __init__(self, w):
        self.w = w

    def activations(self, x):
        return [x.flatten(1) @ self.w.T]


def test_uap_zero_budget(glyphs4):
    trig = craft_uap_trigger(_Linear(torch.zeros(2, 768)), glyphs4, [0], 0.0, [0])
    assert np.all(trig.delta == 0)


def test_uap_budget_respected(glyphs4):
    w = torch.randn(5, 768, generator=torch.Generator().manual_seed(0))
    trig = craft_uap_trigger(_Linear(w), glyphs4, glyphs4.class_index[1][:3], 8 / 255, [0], UAPOpts(steps=20))
    assert np.abs(trig.delta).max() <= 8 / 255 + 1e-9
    assert trig.losses[-1] < trig.losses[0]


def test_uap_one_step_matches_closed_form():
    rng = np.random.default_rng(1)
    n, shape = 6, (3, 4, 4)
    ds = LabeledDataset(rng.uniform(0.3, 0.7, (n, *shape)), np.arange(n) % 2, num_classes=2)
    w = torch.from_numpy(rng.normal(size=(3, 48)).astype(np.float32))
    budget = 0.01
    trig = craft_uap_trigger(_Linear(w), ds, [1, 3], budget, [0], UAPOpts(steps=1, batch_size=4, rng_seed=9))
    # hand gradient of mean_i ||W x_i - c|| at delta = 0 is mean_i W^T r_i / ||r_i||
    x = ds.images.reshape(n, -1).astype(np.float64)
    wd = w.numpy().astype(np.float64)
    c = (x[[1, 3]] @ wd.T).mean(0)
    idx = torch.randint(n, (4,), generator=torch.Generator().manual_seed(9)).numpy()
    r = x[idx] @ wd.T - c
    grad = ((r / np.linalg.norm(r, axis=1, keepdims=True)) @ wd).mean(0)
    expect = np.clip(-budget / 10 * np.sign(grad), -budget, budget).reshape(shape)
    np.testing.assert_allclose(trig.delta, expect, atol=1e-7)


def test_uap_roundtrip(tmp_path):
    delta = np.random.default_rng(0).uniform(-0.01, 0.01, (3, 4, 4)).astype(np.float32)
    UAPTrigger(delta, 0.01, [0, 2], 4).save(tmp_path / "d.f32")
    back = UAPTrigger.load(tmp_path / "d.f32")
    assert np.array_equal(back.delta, delta) and back.layers == [0, 2] and back.seed == 4
    spec = uap_spec(back, 1)
    x = np.full((3, 4, 4), 0.5, np.float32)
    np.testing.assert_allclose(apply_trigger(x, spec), x + delta)
