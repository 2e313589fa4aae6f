"""End-to-end orchestration with every intermediate artifact on disk.

Each stage reads its inputs from the output directory and writes its results
back, so a resumed run computes exactly what an uninterrupted one would.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

from ..attacks import (TriggerSpec, UAPTrigger, craft_uap_trigger, inject_encoder_backdoor, poison_dataset,
                       uap_spec)
from ..bootstrap import run_bootstrap, save_audit
from ..data import LabeledDataset, SplitSpec, generate_glyphs, load_cifar10, load_dataset, save_dataset, split
from ..encoder_filter import ChannelPartition, apply_partition, filter_encoder
from ..errors import ParameterError, StageError
from ..expansion import CleanPool, expand_seed
from ..models import (TapModel, attach_head, load_encoder, load_model, model_hash, pretrain_encoder,
                      save_encoder, save_model, set_determinism, train_head)
from ..sifting import SiftResult, sift_seeds
from .config import PipelineConfig
from .metrics import accuracy, attack_success_rate, per_class_accuracy, sift_report

logger = logging.getLogger(__name__)

STAGES = ("ingest", "pretrain", "attack", "train-baseline", "sift", "expand", "filter", "bootstrap", "eval")


@dataclass
class EvalReport:
    threat: str
    acc: float
    asr: float
    asr_e: Optional[float]
    asr_d: Optional[float]
    per_class_acc: Dict[int, float]
    baseline: Dict[str, Optional[float]]
    sift: Dict
    expansion_pool: Dict
    final_pool: Dict
    runtime: Dict[str, float] = field(default_factory=dict)
    seed: int = 0
    model_hash: str = ""

    def __post_init__(self):
        for name in ("acc", "asr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> Dict:
        d = dataclasses.asdict(self)
        d["per_class_acc"] = {str(k): v for k, v in self.per_class_acc.items()}
        return d

    @classmethod
    def from_json(cls, d: Dict) -> "EvalReport":
        d = dict(d)
        d["per_class_acc"] = {int(k): v for k, v in d["per_class_acc"].items()}
        return cls(**d)

    def table(self) -> str:
        """ACC/ASR table with a no-defense row and a defended row, values in percent."""
        cols = ["ACC"]
        keys = []
        if self.asr_e is not None and self.asr_d is not None and self.threat == "dual":
            cols += ["ASR-E", "ASR-D"]
            keys = ["asr_e", "asr_d"]
        else:
            cols += ["ASR"]
            keys = ["asr"]
        rows = [("no defense", [self.baseline["acc"]] + [self.baseline[k] for k in keys]),
                ("defended", [self.acc] + [getattr(self, k) for k in keys])]
        out = [f"{'':<12}" + "".join(f"{c:>9}" for c in cols)]
        for name, vals in rows:
            out.append(f"{name:<12}" + "".join(f"{100 * v:9.2f}" for v in vals))
        s, p = self.sift, self.final_pool
        out.append(f"seeds {s['selected']} (poisons {s['poisons']}), expanded pool {self.expansion_pool['selected']} "
                   f"(poisons {self.expansion_pool['poisons']}), final pool {p['selected']} (poisons {p['poisons']})")
        return "\n".join(out) + "\n"


class Workspace:
    """Artifact paths under one output directory."""

    def __init__(self, root):
        self.root = Path(root)

    def dir(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.mkdir(parents=True, exist_ok=True)
        return p

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def marker(self, stage: str) -> Path:
        return self.path("stages", f"{stage}.json")

    def done(self, stage: str) -> bool:
        return self.marker(stage).exists()


def _seed(cfg: PipelineConfig, offset: int) -> int:
    return cfg.seed + offset


# --------------------------------------------------------------------------- stages


def stage_ingest(cfg: PipelineConfig, ws: Workspace) -> None:
    d = cfg.data
    spec = SplitSpec(d.pretrain, d.downstream, d.test, d.split_seed)
    if d.source == "glyphs":
        full = generate_glyphs(d.num_classes, d.per_class, d.image_size, d.data_seed)
        parts = split(full, spec)
    else:
        train = load_cifar10(d.path, train=True)
        test = load_cifar10(d.path, train=False)
        parts = (*split(train, SplitSpec(d.pretrain, d.downstream, 0.0, d.split_seed))[:2], test)
    for name, ds in zip(("pretrain", "downstream", "test"), parts):
        save_dataset(ds, ws.dir("data", name))


def stage_pretrain(cfg: PipelineConfig, ws: Workspace) -> None:
    ckpt = cfg.encoder.checkpoint
    if ckpt and (Path(ckpt) / "manifest.json").exists():
        enc = load_encoder(ckpt)
        if enc.config.block_channels != cfg.encoder.config.block_channels:
            raise ParameterError("encoder checkpoint does not match the configured architecture")
    else:
        pre = load_dataset(ws.root / "data" / "pretrain")
        opts = cfg.encoder.pretrain.replace(rng_seed=cfg.encoder.pretrain.rng_seed + cfg.seed,
                                            deterministic=cfg.deterministic)
        enc = pretrain_encoder(pre, cfg.encoder.config, opts)
        if ckpt:
            save_encoder(enc, ckpt, seed=opts.rng_seed)
    save_encoder(enc, ws.dir("encoder"))


def _write_trigger(spec: Optional[TriggerSpec], ws: Workspace, name: str) -> None:
    p = ws.path("attack", f"{name}_trigger.json")
    if spec is None:
        p.write_text("null")
        return
    p.write_text(json.dumps(spec.to_json(), indent=2))
    if spec.kind == "uap":
        UAPTrigger(spec.params["delta"], spec.params["budget"], [], 0).save(ws.path("attack", f"{name}_uap.f32"))


def read_trigger(ws: Workspace, name: str) -> Optional[TriggerSpec]:
    d = json.loads((ws.root / "attack" / f"{name}_trigger.json").read_text())
    if d is None:
        return None
    if d["kind"] == "uap":
        d["params"]["delta"] = UAPTrigger.load(ws.root / "attack" / f"{name}_uap.f32").delta
    return TriggerSpec.from_json(d)


def stage_attack(cfg: PipelineConfig, ws: Workspace) -> None:
    t = cfg.threat
    clean = load_encoder(ws.root / "encoder")
    pre = load_dataset(ws.root / "data" / "pretrain")
    down = load_dataset(ws.root / "data" / "downstream")
    victim = clean
    enc_spec = t.encoder_trigger
    if enc_spec is not None:
        rng = np.random.default_rng(_seed(cfg, 11))
        n = min(t.shadow_size, len(pre))
        shadow = pre.subset(np.sort(rng.choice(pre.ids, size=n, replace=False)))
        refs = pre.images[pre.labels == enc_spec.target_class]
        opts = dataclasses.replace(t.encoder_attack, rng_seed=t.encoder_attack.rng_seed + cfg.seed)
        victim = inject_encoder_backdoor(clean, shadow, refs, enc_spec, opts)
    ds_spec = t.dataset_trigger
    if ds_spec is not None and ds_spec.kind == "uap" and "delta" not in ds_spec.params:
        # the attacker aligns the trigger with target seeds of a surrogate trained on clean data
        surrogate = attach_head(victim, down.num_classes, _seed(cfg, 12), cfg.head)
        train_head(surrogate, down, cfg.head_train.replace(rng_seed=_seed(cfg, 12)))
        seeds = sift_seeds(surrogate, down, cfg.sift).per_class[ds_spec.target_class].seeds
        opts = dataclasses.replace(t.uap, rng_seed=t.uap.rng_seed + cfg.seed)
        trig = craft_uap_trigger(surrogate, down, seeds, ds_spec.params["budget"], list(t.uap_layers), opts)
        ds_spec = uap_spec(trig, ds_spec.target_class, ds_spec.poison_ratio, ds_spec.label_mode)
    if ds_spec is not None:
        poisoned, report = poison_dataset(down, ds_spec, _seed(cfg, 13))
        ws.path("attack", "poison_report.json").write_text(json.dumps(report.to_json(), indent=2))
    else:
        poisoned = down
    save_dataset(poisoned, ws.dir("attack", "poisoned"))
    save_encoder(victim, ws.dir("attack", "encoder"))
    _write_trigger(enc_spec, ws, "encoder")
    _write_trigger(ds_spec, ws, "dataset")


def _asrs(model: TapModel, test: LabeledDataset, ws: Workspace) -> Dict[str, Optional[float]]:
    out = {}
    for key, name in (("asr_e", "encoder"), ("asr_d", "dataset")):
        spec = read_trigger(ws, name)
        out[key] = attack_success_rate(model, test, spec) if spec is not None else None
    present = [v for v in out.values() if v is not None]
    out["asr"] = max(present) if present else 0.0
    return out


def _poisoned_view(ws: Workspace) -> LabeledDataset:
    return load_dataset(ws.root / "attack" / "poisoned").defense_view()


def stage_train_baseline(cfg: PipelineConfig, ws: Workspace) -> None:
    enc = load_encoder(ws.root / "attack" / "encoder")
    dv = _poisoned_view(ws)
    model = attach_head(enc, dv.num_classes, _seed(cfg, 21), cfg.head)
    train_head(model, dv, cfg.head_train.replace(rng_seed=_seed(cfg, 21)))
    save_model(model, ws.dir("baseline", "model"), seed=_seed(cfg, 21))
    test = load_dataset(ws.root / "data" / "test")
    metrics = {"acc": accuracy(model, test), **_asrs(model, test, ws)}
    ws.path("baseline", "metrics.json").write_text(json.dumps(metrics, indent=2))


def stage_sift(cfg: PipelineConfig, ws: Workspace) -> None:
    model = load_model(ws.root / "baseline" / "model")
    sift_seeds(model, _poisoned_view(ws), cfg.sift).save(ws.path("sift", "seeds.json"))


def stage_expand(cfg: PipelineConfig, ws: Workspace) -> None:
    model = load_model(ws.root / "baseline" / "model")
    res = SiftResult.load(ws.root / "sift" / "seeds.json")
    params = dataclasses.replace(cfg.expansion, rng_seed=cfg.expansion.rng_seed + cfg.seed)
    pool = expand_seed(model, _poisoned_view(ws), res, params)
    pool.save(ws.path("expand", "pool.jsonl"))


def stage_filter(cfg: PipelineConfig, ws: Workspace) -> None:
    model = load_model(ws.root / "baseline" / "model")
    dv = _poisoned_view(ws)
    pool = CleanPool.load(ws.root / "expand" / "pool.jsonl")
    params = dataclasses.replace(cfg.filter, rng_seed=cfg.filter.rng_seed + cfg.seed)
    part = filter_encoder(model, dv, dv.subset(pool.ids), params)
    part.save(ws.path("filter", "partition.json"))


def stage_bootstrap(cfg: PipelineConfig, ws: Workspace) -> None:
    enc = load_encoder(ws.root / "attack" / "encoder")
    dv = _poisoned_view(ws)
    pool = CleanPool.load(ws.root / "expand" / "pool.jsonl")
    part = ChannelPartition.load(ws.root / "filter" / "partition.json")
    calib = dv.subset(pool.ids).images if cfg.partition_mode == "reinit" else None
    enc = apply_partition(enc, part, cfg.partition_mode, seed=_seed(cfg, 31), calibration_images=calib)
    params = dataclasses.replace(cfg.bootstrap, rng_seed=cfg.bootstrap.rng_seed + cfg.seed)
    res = run_bootstrap(enc, dv, pool, params, partition=part, head_config=cfg.head)
    save_model(res.model, ws.dir("bootstrap", "model"), seed=params.rng_seed)
    res.pool.save(ws.path("bootstrap", "pool.jsonl"))
    save_audit(res.audit, ws.path("bootstrap", "audit.jsonl"))
    ws.path("bootstrap", "chi_hash.json").write_text(json.dumps(
        {"start": res.chi_hash_start, "end": res.chi_hash_end}, indent=2))


def _pool_metrics(pool: CleanPool, poisoned: LabeledDataset, target: Optional[int]) -> Dict:
    rep = sift_report(pool.ids, poisoned, target)
    flags = poisoned.ground_truth.read()
    pos_of = {int(i): p for p, i in enumerate(poisoned.ids)}
    by_prov: Dict[str, Dict[str, int]] = {}
    for i, prov, _ in pool.entries():
        b = by_prov.setdefault(prov, {"size": 0, "poisons": 0})
        b["size"] += 1
        b["poisons"] += int(flags[pos_of[i]])
    rep["by_provenance"] = by_prov
    return rep


def stage_eval(cfg: PipelineConfig, ws: Workspace) -> EvalReport:
    model = load_model(ws.root / "bootstrap" / "model")
    test = load_dataset(ws.root / "data" / "test")
    poisoned = load_dataset(ws.root / "attack" / "poisoned")
    spec = read_trigger(ws, "dataset") or read_trigger(ws, "encoder")
    target = spec.target_class if spec is not None else None
    asrs = _asrs(model, test, ws)
    runtime = {}
    for s in STAGES[:-1]:
        if ws.done(s):
            runtime[s] = json.loads(ws.marker(s).read_text())["seconds"]
    report = EvalReport(
        threat=cfg.threat.name,
        acc=accuracy(model, test),
        asr=asrs["asr"], asr_e=asrs["asr_e"], asr_d=asrs["asr_d"],
        per_class_acc=per_class_accuracy(model, test),
        baseline=json.loads((ws.root / "baseline" / "metrics.json").read_text()),
        sift=sift_report(SiftResult.load(ws.root / "sift" / "seeds.json").seeds, poisoned, target),
        expansion_pool=_pool_metrics(CleanPool.load(ws.root / "expand" / "pool.jsonl"), poisoned, target),
        final_pool=_pool_metrics(CleanPool.load(ws.root / "bootstrap" / "pool.jsonl"), poisoned, target),
        runtime=runtime,
        seed=cfg.seed,
        model_hash=model_hash(model),
    )
    ws.path("eval", "report.json").write_text(json.dumps(report.to_json(), indent=2))
    ws.path("eval", "report.txt").write_text(report.table())
    return report


STAGE_FUNCS: Dict[str, Callable] = {
    "ingest": stage_ingest, "pretrain": stage_pretrain, "attack": stage_attack,
    "train-baseline": stage_train_baseline, "sift": stage_sift, "expand": stage_expand,
    "filter": stage_filter, "bootstrap": stage_bootstrap, "eval": stage_eval,
}


def _check_config(cfg: PipelineConfig, ws: Workspace, resume: bool) -> None:
    p = ws.path("config.json")
    current = json.dumps(cfg.to_json(), indent=2, sort_keys=True)
    if resume and p.exists() and p.read_text() != current:
        raise ParameterError(f"config differs from the one recorded in {ws.root}; resume refused")
    p.write_text(current)


def run_pipeline(cfg: PipelineConfig, out, until: str = "eval", resume: bool = False,
                 on_stage: Optional[Callable[[str, float], None]] = None) -> Optional[EvalReport]:
    """Run every stage up to ``until``.

    With ``resume`` completed stages (those with a marker) are skipped; a
    failing stage raises :class:`StageError` and leaves its partial output.
    """
    if until not in STAGES:
        raise ParameterError(f"unknown stage {until!r}")
    ws = Workspace(out)
    ws.root.mkdir(parents=True, exist_ok=True)
    _check_config(cfg, ws, resume)
    set_determinism(cfg.deterministic)
    report = None
    for stage in STAGES[:STAGES.index(until) + 1]:
        if resume and ws.done(stage):
            logger.info("stage %s already complete", stage)
            continue
        ws.marker(stage).unlink(missing_ok=True)
        logger.info("stage %s", stage)
        t0 = time.perf_counter()
        try:
            result = STAGE_FUNCS[stage](cfg, ws)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        elapsed = time.perf_counter() - t0
        ws.marker(stage).write_text(json.dumps({"stage": stage, "seconds": elapsed, "seed": cfg.seed}))
        if stage == "eval":
            report = result
        if on_stage is not None:
            on_stage(stage, elapsed)
    if report is None and ws.done("eval"):
        report = EvalReport.from_json(json.loads((ws.root / "eval" / "report.json").read_text()))
    return report
