import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from tcore.data import LabeledDataset
from tcore.errors import ContractViolation, ParameterError
from tcore.models import (GROUPS, EncoderConfig, HeadConfig, TrainOpts, attach_head, build_model, fit,
                          forward_with_taps, group_hash, load_model, model_hash, per_sample_losses,
                          pretrain_encoder, save_model, train_head)

from conftest import SMALL_ENC, small_model


def test_default_tap_widths():
    model = build_model(EncoderConfig(), HeadConfig(), 0)
    logits, acts = forward_with_taps(model, np.random.default_rng(0).uniform(0, 1, (4, 3, 16, 16)))
    assert logits.shape == (4, 10)
    assert [a.shape for a in acts] == [(4, 256), (4, 256), (4, 128)]


def test_zero_head_equal_logits():
    model = small_model()
    for p in model.head.parameters():
        p.data.zero_()
    logits, _ = forward_with_taps(model, np.zeros((2, 3, 16, 16), np.float32))
    assert torch.all(logits == logits[0, 0])


def test_identical_rows_and_order_invariance(glyphs4):
    model = small_model()
    x = np.concatenate([glyphs4.images[:3], glyphs4.images[:1]])
    _, acts = forward_with_taps(model, x)
    _, rev = forward_with_taps(model, x[::-1].copy())
    for a, r in zip(acts, rev):
        assert torch.equal(a[0], a[3])
        torch.testing.assert_close(a, r.flip(0), rtol=0, atol=1e-6)


def test_tap_shape_error():
    with pytest.raises(ParameterError):
        forward_with_taps(small_model(), np.zeros((2, 1, 16, 16), np.float32))


def test_per_sample_closed_forms():
    ds = LabeledDataset(np.zeros((3, 3, 16, 16)), [0, 1, 2], num_classes=4)
    model = small_model()
    for p in model.head.parameters():
        p.data.zero_()
    np.testing.assert_allclose(per_sample_losses(model, ds), math.log(4), atol=1e-6)
    model.head.fc3.bias.data[:] = torch.tensor([50.0, 0, 0, 0])
    assert per_sample_losses(model, ds, [0])[0] < 1e-6


def test_per_sample_batch_vs_single(trained_small, glyphs4):
    ids = glyphs4.ids[::3]
    batch = per_sample_losses(trained_small, glyphs4, ids)
    single = np.array([per_sample_losses(trained_small, glyphs4, [i])[0] for i in ids])
    assert np.max(np.abs(batch - single)) <= 1e-5
    with pytest.raises(KeyError):
        per_sample_losses(trained_small, glyphs4, [10 ** 6])


def test_head_gradient_finite_differences():
    torch.manual_seed(0)
    model = small_model().double()
    emb = torch.randn(5, 16, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 3, 1])
    params = list(model.head.parameters())
    for p in params:
        p.requires_grad_(True)
    loss = F.cross_entropy(model.head(emb), y)
    grads = torch.autograd.grad(loss, params)
    h = 1e-6
    worst = 0.0
    gen = np.random.default_rng(0)
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            for i in gen.choice(flat.numel(), size=min(15, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + h
                up = F.cross_entropy(model.head(emb), y).item()
                flat[i] = old - h
                down = F.cross_entropy(model.head(emb), y).item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = g.view(-1)[i].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    assert worst <= 1e-4


def test_train_head_contract(glyphs4):
    model = small_model()
    enc_before = group_hash(model, ("encoder", "masks", "psi"))
    with pytest.raises(ContractViolation):
        train_head(model, glyphs4, TrainOpts(groups=("head", "encoder")))
    hist = fit(model, glyphs4.images, glyphs4.labels, TrainOpts(epochs=10, learning_rate=0.05))
    assert hist[-1] < hist[0]
    assert group_hash(model, ("encoder", "masks", "psi")) == enc_before


def test_train_head_zero_epochs(glyphs4):
    model = small_model()
    before = model_hash(model)
    train_head(model, glyphs4, TrainOpts(epochs=0))
    assert model_hash(model) == before


def test_single_sample_memorised(glyphs4):
    one = glyphs4.subset(glyphs4.ids[5:6])
    model = small_model()
    train_head(model, one, TrainOpts(epochs=60, batch_size=1, learning_rate=0.05))
    assert per_sample_losses(model, one)[0] < 0.05


@settings(max_examples=12, deadline=None)
@given(st.sets(st.sampled_from(["head", "encoder", "norm", "masks"]), min_size=1))
def test_selector_leaves_other_groups(groups, ):
    from conftest import generate_glyphs
    ds = generate_glyphs(4, 10, 16, 0)
    model = small_model()
    selected = set(groups)
    if "encoder" in selected:
        selected.add("norm")
    others = [g for g in GROUPS if g not in selected and not (g == "encoder" and "norm" in selected)]
    before = {g: group_hash(model, (g,)) for g in others}
    fit(model, ds.images, ds.labels, TrainOpts(epochs=1, groups=tuple(groups), learning_rate=0.05))
    for g in others:
        if g == "encoder":
            continue
        assert group_hash(model, (g,)) == before[g], g


def test_norm_selector_keeps_filters(glyphs4):
    model = small_model()
    w_before = [b.weight.clone() for b in model.encoder.blocks]
    head_before = group_hash(model, ("head",))
    fit(model, glyphs4.images, glyphs4.labels, TrainOpts(epochs=1, groups=("norm",)))
    assert all(torch.equal(a, b.weight) for a, b in zip(w_before, model.encoder.blocks))
    assert group_hash(model, ("head",)) == head_before


def test_checkpoint_roundtrip(tmp_path, trained_small):
    save_model(trained_small, tmp_path / "m", seed=3)
    back = load_model(tmp_path / "m")
    assert model_hash(back) == model_hash(trained_small)


def test_pretrain_zero_epochs_and_determinism(glyphs4):
    opts = TrainOpts(epochs=0, groups=("encoder",), rng_seed=4)
    a = pretrain_encoder(glyphs4, SMALL_ENC, opts)
    b = pretrain_encoder(glyphs4, SMALL_ENC, opts.replace(epochs=1, deterministic=True))
    c = pretrain_encoder(glyphs4, SMALL_ENC, opts.replace(epochs=1, deterministic=True))
    assert model_hash(b) == model_hash(c)
    assert model_hash(a) != model_hash(b)
    torch.use_deterministic_algorithms(False)
