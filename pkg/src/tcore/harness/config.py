"""Pipeline configuration: one JSON document with a section per stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from ..attacks import EncoderAttackOpts, TriggerSpec, UAPOpts
from ..bootstrap import BootstrapParams
from ..encoder_filter import FilterParams
from ..errors import ParameterError
from ..expansion import ExpansionParams
from ..models import EncoderConfig, HeadConfig, TrainOpts
from ..sifting import SiftParams

THREATS = ("threat1", "threat2", "threat3", "dual")


@dataclass
class DataConfig:
    source: str = "glyphs"
    num_classes: int = 10
    per_class: int = 3100
    image_size: int = 16
    data_seed: int = 1
    # CIFAR-10 binary batches directory when source == "cifar10"
    path: Optional[str] = None
    pretrain: float = 2500 / 3100
    downstream: float = 500 / 3100
    test: float = 100 / 3100
    split_seed: int = 0

    def __post_init__(self):
        if self.source not in ("glyphs", "cifar10"):
            raise ParameterError(f"unknown data source {self.source!r}")
        if self.source == "cifar10" and not self.path:
            raise ParameterError("cifar10 source needs a path")


@dataclass
class EncoderSection:
    config: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: TrainOpts = field(default_factory=lambda: TrainOpts(
        epochs=20, optimizer="adam", learning_rate=1e-3, groups=("encoder",)))
    # an existing encoder checkpoint replaces pretraining
    checkpoint: Optional[str] = None


@dataclass
class ThreatConfig:
    name: str = "threat2"
    encoder_trigger: Optional[TriggerSpec] = None
    dataset_trigger: Optional[TriggerSpec] = None
    encoder_attack: EncoderAttackOpts = field(default_factory=EncoderAttackOpts)
    # pretrain-split samples the encoder attacker fine-tunes on
    shadow_size: int = 2000
    uap: UAPOpts = field(default_factory=UAPOpts)
    # tap layers the adaptive trigger aligns
    uap_layers: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.name not in THREATS:
            raise ParameterError(f"unknown threat {self.name!r}")
        enc, ds = self.encoder_trigger, self.dataset_trigger
        if self.name == "threat1":
            if enc is None or ds is not None:
                raise ParameterError("threat1 poisons the encoder only")
        elif self.name == "threat2":
            if ds is None or enc is not None:
                raise ParameterError("threat2 poisons the dataset only")
        elif self.name == "threat3":
            if enc is None and ds is None:
                raise ParameterError("threat3 needs a trigger")
            shared = enc or ds
            if enc is not None and ds is not None and enc.to_json() != ds.to_json():
                raise ParameterError("threat3 uses one trigger for encoder and dataset")
            self.encoder_trigger = self.dataset_trigger = shared
        else:
            if enc is None or ds is None:
                raise ParameterError("dual threat needs an encoder and a dataset trigger")
            if enc.to_json() == ds.to_json():
                raise ParameterError("dual threat triggers must differ")
        if self.dataset_trigger is not None and self.dataset_trigger.kind == "uap" and self.name == "threat3":
            raise ParameterError("encoder injection does not take a learned trigger")

    @property
    def shared(self) -> bool:
        return self.name == "threat3"


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    head: HeadConfig = field(default_factory=HeadConfig)
    head_train: TrainOpts = field(default_factory=lambda: TrainOpts(epochs=30))
    threat: ThreatConfig = field(default_factory=lambda: ThreatConfig(
        "threat2", dataset_trigger=TriggerSpec("patch", 0, 0.2)))
    sift: SiftParams = field(default_factory=SiftParams)
    expansion: ExpansionParams = field(default_factory=ExpansionParams)
    filter: FilterParams = field(default_factory=FilterParams)
    bootstrap: BootstrapParams = field(default_factory=BootstrapParams)
    partition_mode: str = "reinit"
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.partition_mode not in ("prune", "reinit"):
            raise ParameterError(f"unknown partition mode {self.partition_mode!r}")
        if self.head.num_classes != self.data.num_classes:
            raise ParameterError("head and data disagree on the class count")

    def to_json(self) -> Dict[str, Any]:
        t = self.threat
        return {
            "data": asdict(self.data),
            "encoder": {"config": {"block_channels": list(self.encoder.config.block_channels),
                                   "in_channels": self.encoder.config.in_channels},
                        "pretrain": _opts_json(self.encoder.pretrain),
                        "checkpoint": self.encoder.checkpoint},
            "head": asdict(self.head),
            "head_train": _opts_json(self.head_train),
            "threat": {"name": t.name,
                       "encoder_trigger": t.encoder_trigger.to_json() if t.encoder_trigger else None,
                       "dataset_trigger": t.dataset_trigger.to_json() if t.dataset_trigger else None,
                       "encoder_attack": {k: v for k, v in asdict(t.encoder_attack).items() if k != "verify"},
                       "uap": asdict(t.uap), "uap_layers": list(t.uap_layers)},
            "sift": asdict(self.sift),
            "expansion": self.expansion.to_json(),
            "filter": asdict(self.filter),
            "bootstrap": self.bootstrap.to_json(),
            "partition_mode": self.partition_mode,
            "seed": self.seed,
            "deterministic": self.deterministic,
        }

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> "PipelineConfig":
        known = {"data", "encoder", "head", "head_train", "threat", "sift", "expansion", "filter",
                 "bootstrap", "partition_mode", "seed", "deterministic"}
        extra = set(d) - known
        if extra:
            raise ParameterError(f"unknown config sections {sorted(extra)}")
        kw: Dict[str, Any] = {}
        try:
            if "data" in d:
                kw["data"] = DataConfig(**d["data"])
            if "encoder" in d:
                e = d["encoder"]
                kw["encoder"] = EncoderSection(
                    EncoderConfig(**e.get("config", {})),
                    _opts(e["pretrain"]) if "pretrain" in e else EncoderSection().pretrain,
                    e.get("checkpoint"))
            if "head" in d:
                kw["head"] = HeadConfig(**d["head"])
            if "head_train" in d:
                kw["head_train"] = _opts(d["head_train"])
            if "threat" in d:
                t = dict(d["threat"])
                for key in ("encoder_trigger", "dataset_trigger"):
                    if t.get(key) is not None:
                        t[key] = TriggerSpec.from_json(t[key])
                if "encoder_attack" in t:
                    t["encoder_attack"] = EncoderAttackOpts(**t["encoder_attack"])
                if "uap" in t:
                    t["uap"] = UAPOpts(**t["uap"])
                if "uap_layers" in t:
                    t["uap_layers"] = tuple(t["uap_layers"])
                kw["threat"] = ThreatConfig(**t)
            if "sift" in d:
                kw["sift"] = SiftParams(**d["sift"])
            if "expansion" in d:
                kw["expansion"] = ExpansionParams(**d["expansion"])
            if "filter" in d:
                kw["filter"] = FilterParams(**d["filter"])
            if "bootstrap" in d:
                kw["bootstrap"] = BootstrapParams(**d["bootstrap"])
        except TypeError as exc:
            raise ParameterError(f"bad config field: {exc}") from exc
        for key in ("partition_mode", "seed", "deterministic"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParameterError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(d)


def _opts(d: Dict[str, Any]) -> TrainOpts:
    return TrainOpts(**{**d, "groups": tuple(d.get("groups", ("head",)))})


def _opts_json(o: TrainOpts) -> Dict[str, Any]:
    d = asdict(o)
    d["groups"] = list(d["groups"])
    return d
