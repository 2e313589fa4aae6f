import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcore.attacks import TriggerSpec, poison_dataset
from tcore.bootstrap import BootstrapParams, run_bootstrap
from tcore.data import load_dataset
from tcore.encoder_filter import FilterParams, filter_encoder, apply_partition
from tcore.errors import ParameterError, StageError
from tcore.expansion import ExpansionParams, expand_seed
from tcore.harness.cli import main
from tcore.harness.config import DataConfig, EncoderSection, PipelineConfig, ThreatConfig
from tcore.harness.metrics import accuracy, attack_success_rate, per_class_accuracy, sift_report
from tcore.harness.pipeline import EvalReport, run_pipeline
from tcore.harness.plots import histogram_counts, plot_loss_histogram
from tcore.models import EncoderConfig, HeadConfig, TrainOpts, predict
from tcore.sifting import SiftParams, sift_seeds

from conftest import small_model


def tiny_config(**kw):
    cfg = PipelineConfig(
        data=DataConfig(num_classes=4, per_class=60, pretrain=0.4, downstream=0.5, test=0.1),
        encoder=EncoderSection(EncoderConfig((8, 16)), TrainOpts(epochs=1, optimizer="adam", learning_rate=1e-3,
                                                                 groups=("encoder",))),
        head=HeadConfig(16, 16, 8, 4),
        head_train=TrainOpts(epochs=3, learning_rate=0.05),
        threat=ThreatConfig("threat2", dataset_trigger=TriggerSpec("patch", 0, 0.2, params={"size": 2})),
        sift=SiftParams(L=3, m=5, alpha=0.1),
        expansion=ExpansionParams(r_expand=0.2, target_ratio=0.5, ct_steps=10, head_opts=TrainOpts(epochs=2)),
        filter=FilterParams(acc_min=0.9, recovery_epochs=1),
        bootstrap=BootstrapParams(iter1=1, iter2=1, T=1, rho=0.8, gamma3=0.2, train_opts=TrainOpts(epochs=1)),
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


# --------------------------------------------------------------------------- metrics


def test_metrics_match_direct_counts(glyphs4, trained_small):
    pred = predict(trained_small, glyphs4.images)
    assert accuracy(trained_small, glyphs4) == pytest.approx((pred == glyphs4.labels).mean())
    pc = per_class_accuracy(trained_small, glyphs4)
    for k in range(4):
        assert pc[k] == pytest.approx((pred[glyphs4.labels == k] == k).mean())
    spec = TriggerSpec("patch", 1)
    asr = attack_success_rate(trained_small, glyphs4, spec)
    assert 0 <= asr <= 1
    with pytest.raises(ParameterError):
        attack_success_rate(trained_small, glyphs4.subset(glyphs4.class_index[1]), spec)


def test_sift_report_counts(glyphs4):
    pd, rep = poison_dataset(glyphs4, TriggerSpec("patch", 2, 0.2), 0)
    chosen = rep.poisoned_ids[:3] + pd.class_index[1][:4].tolist()
    r = sift_report(chosen, pd, target_class=2)
    assert r["selected"] == 7 and r["poisons"] == 3
    assert r["per_class"][2] == {"selected": 3, "poisons": 3}
    assert r["npd"] == len(rep.poisoned_ids)
    with pytest.raises(ParameterError):
        sift_report(chosen, pd.defense_view())


def test_defense_ops_never_read_flags(glyphs4, trained_small):
    pd, _ = poison_dataset(glyphs4, TriggerSpec("patch", 0, 0.2), 0)
    truth = pd.ground_truth
    truth.reads = 0
    res = sift_seeds(trained_small, pd, SiftParams(m=5, alpha=0.1))
    pool = expand_seed(trained_small, pd, res, ExpansionParams(r_expand=0.3, target_ratio=0.4, ct_steps=5,
                                                               head_opts=TrainOpts(epochs=1)))
    part = filter_encoder(trained_small, pd, pd.subset(pool.ids), FilterParams(acc_min=0.9, recovery_epochs=1))
    enc = apply_partition(trained_small.encoder, part, "reinit", calibration_images=pd.images)
    run_bootstrap(enc, pd, pool, BootstrapParams(iter1=1, iter2=0, T=1, rho=0.5, train_opts=TrainOpts(epochs=1)),
                  part, HeadConfig(16, 16, 8, 4))
    assert truth.reads == 0


# --------------------------------------------------------------------------- plots


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=80), st.integers(1, 20), st.integers(0, 100))
def test_histogram_counts_oracle(values, bins, seed):
    losses = np.array(values)
    flags = np.random.default_rng(seed).random(len(losses)) < 0.3
    c = histogram_counts(losses, flags, bins)
    assert c["clean"].sum() == (~flags).sum()
    assert c.get("poison", np.zeros(1)).sum() == flags.sum()
    # brute force bin assignment, right edge closed on the last bin
    edges = c["edges"]
    idx = np.clip(np.searchsorted(edges, losses, side="right") - 1, 0, bins - 1)
    assert np.array_equal(np.bincount(idx[~flags], minlength=bins), c["clean"])


def test_plot_writes_png(tmp_path):
    losses = np.linspace(0, 3, 50)
    flags = losses > 2.5
    counts = plot_loss_histogram(losses, flags, tmp_path / "h" / "loss.png", bins=10)
    assert (tmp_path / "h" / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert counts["poison"].sum() == flags.sum()


# --------------------------------------------------------------------------- config


def test_config_roundtrip(tmp_path):
    cfg = tiny_config()
    back = PipelineConfig.load(cfg.save(tmp_path / "c.json"))
    assert back.to_json() == cfg.to_json()
    assert PipelineConfig().to_json() == PipelineConfig.from_json(PipelineConfig().to_json()).to_json()


def test_config_errors(tmp_path):
    with pytest.raises(ParameterError):
        PipelineConfig.from_json({"nope": {}})
    with pytest.raises(ParameterError):
        PipelineConfig.from_json({"sift": {"alpha": 0.1, "bogus": 1}})
    with pytest.raises(ParameterError):
        ThreatConfig("threat1", dataset_trigger=TriggerSpec("patch", 0))
    with pytest.raises(ParameterError):
        ThreatConfig("dual", encoder_trigger=TriggerSpec("patch", 0), dataset_trigger=TriggerSpec("patch", 0))
    shared = ThreatConfig("threat3", dataset_trigger=TriggerSpec("patch", 0))
    assert shared.encoder_trigger is shared.dataset_trigger


def test_report_rejects_out_of_range():
    with pytest.raises(ParameterError):
        EvalReport("threat2", 1.2, 0.0, None, 0.0, {}, {}, {}, {}, {})


# --------------------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = run_pipeline(tiny_config(), out)
    return out, report


def test_pipeline_artifacts(tiny_run):
    out, report = tiny_run
    for rel in ("data/downstream", "attack/poisoned", "baseline/metrics.json", "sift/seeds.json",
                "expand/pool.jsonl", "filter/partition.json", "bootstrap/audit.jsonl", "eval/report.json"):
        assert (out / rel).exists(), rel
    assert report.final_pool["selected"] >= 0.8 * len(load_dataset(out / "attack" / "poisoned"))
    chi = json.loads((out / "bootstrap" / "chi_hash.json").read_text())
    assert chi["start"] == chi["end"]
    assert "defended" in report.table()


def test_resume_skips_done_and_refuses_changed_config(tiny_run):
    out, report = tiny_run
    seen = []
    again = run_pipeline(tiny_config(), out, resume=True, on_stage=lambda s, t: seen.append(s))
    assert seen == [] and again.model_hash == report.model_hash
    with pytest.raises(ParameterError):
        run_pipeline(tiny_config(seed=5), out, resume=True)


def test_resumed_stage_recomputes_identically(tmp_path, tiny_run):
    out, report = tiny_run
    cfg = tiny_config(deterministic=True)
    a = run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b", until="expand")
    b = run_pipeline(cfg, tmp_path / "b", resume=True)
    assert a.model_hash == b.model_hash
    assert (tmp_path / "a" / "bootstrap" / "pool.jsonl").read_text() == \
        (tmp_path / "b" / "bootstrap" / "pool.jsonl").read_text()


def test_stage_failure_wrapped(tmp_path):
    cfg = tiny_config(sift=SiftParams(L=3, m=5, alpha=0.01))
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, tmp_path)
    assert info.value.stage == "sift"


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["sift", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "missing.json")]) == 2
    bad = tiny_config(sift=SiftParams(L=3, m=5, alpha=0.01)).save(tmp_path / "bad.json")
    assert main(["sift", "--out", str(tmp_path / "y"), "--config", str(bad)]) == 1
    assert "stage 'sift' failed" in capsys.readouterr().err
    good = tiny_config().save(tmp_path / "good.json")
    assert main(["ingest", "--out", str(tmp_path / "z"), "--config", str(good)]) == 0
    assert (tmp_path / "z" / "stages" / "ingest.json").exists()
    with pytest.raises(SystemExit):
        main(["bogus"])
