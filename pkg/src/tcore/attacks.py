"""Backdoor attacks used to exercise the defense.

Three threat vectors are covered: dataset poisoning (patch, blend, sinusoid,
source-specific patch with cover samples, learned UAP trigger), encoder
poisoning by fine-tuning a clean encoder, and an adaptive UAP trigger that
pulls triggered inputs towards the target class seeds in every tap layer.

Images use the dataset layout ``(C, H, W)``; :func:`apply_trigger` also takes
batches ``(N, C, H, W)``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import GroundTruth, LabeledDataset
from .errors import AttackFailure, GeometryError, InsufficientPoolError, ParameterError
from .models import Encoder, TrainOpts, as_tensor, attach_head, make_optimizer, select_trainable

logger = logging.getLogger(__name__)

KINDS = ("patch", "blend", "sinusoid", "source_specific_patch", "uap")
CLEAN_LABEL_KINDS = ("sinusoid", "uap")

DEFAULT_PARAMS: Dict[str, Dict[str, Any]] = {
    "patch": {"size": 3, "position": "bottom_right", "value": 1.0},
    "blend": {"weight": 0.2, "pattern_seed": 0},
    "sinusoid": {"amplitude": 20 / 255, "frequency": 6},
    "source_specific_patch": {"size": 3, "position": "bottom_right", "value": 1.0,
                              "source_class": None, "cover_classes": []},
    "uap": {"budget": 16 / 255},
}


@dataclass
class TriggerSpec:
    kind: str
    target_class: int
    poison_ratio: float = 0.2
    cover_ratio: float = 0.0
    label_mode: str = "dirty"
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown trigger kind {self.kind!r}")
        if self.label_mode not in ("dirty", "clean"):
            raise ParameterError(f"label_mode must be dirty or clean, got {self.label_mode!r}")
        if self.label_mode == "clean" and self.kind not in CLEAN_LABEL_KINDS:
            raise ParameterError(f"{self.kind} triggers are dirty-label only")
        if self.label_mode == "dirty" and self.kind == "sinusoid":
            raise ParameterError("sinusoid triggers are clean-label only")
        if not 0 <= self.poison_ratio < 1 or not 0 <= self.cover_ratio < 1:
            raise ParameterError("poison_ratio and cover_ratio must lie in [0, 1)")
        self.params = {**DEFAULT_PARAMS[self.kind], **self.params}
        if self.kind == "uap" and "delta" in self.params:
            delta = np.asarray(self.params["delta"], dtype=np.float32)
            if np.abs(delta).max(initial=0.0) > self.params["budget"] + 1e-7:
                raise ParameterError("uap delta exceeds its l-inf budget")
            self.params["delta"] = delta

    def to_json(self) -> Dict[str, Any]:
        params = {k: v for k, v in self.params.items() if k != "delta"}
        return {"kind": self.kind, "target_class": self.target_class, "poison_ratio": self.poison_ratio,
                "cover_ratio": self.cover_ratio, "label_mode": self.label_mode, "params": params}

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> "TriggerSpec":
        return cls(**d)


@dataclass
class PoisonReport:
    poisoned_ids: List[int] = field(default_factory=list)
    cover_ids: List[int] = field(default_factory=list)
    source_ids: List[int] = field(default_factory=list)
    counts_per_class: Dict[int, int] = field(default_factory=dict)
    target_class_size: int = 0

    def to_json(self) -> Dict[str, Any]:
        return {"poisoned_ids": self.poisoned_ids, "cover_ids": self.cover_ids, "source_ids": self.source_ids,
                "counts_per_class": {str(k): v for k, v in self.counts_per_class.items()},
                "target_class_size": self.target_class_size}

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> "PoisonReport":
        d = dict(d)
        d["counts_per_class"] = {int(k): v for k, v in d.get("counts_per_class", {}).items()}
        return cls(**d)


# --------------------------------------------------------------------------- triggers


def _patch_region(shape: Tuple[int, int, int], params: Dict[str, Any]) -> Tuple[slice, slice]:
    _, h, w = shape
    size = int(params["size"])
    if size > h or size > w:
        raise GeometryError(f"{size}x{size} patch does not fit a {h}x{w} image")
    pos = params["position"]
    if pos == "bottom_right":
        r, c = h - size, w - size
    else:
        r, c = (int(v) for v in pos)
        if r < 0 or c < 0 or r + size > h or c + size > w:
            raise GeometryError(f"patch at {(r, c)} of size {size} leaves the {h}x{w} image")
    return slice(r, r + size), slice(c, c + size)


def blend_pattern(shape: Tuple[int, int, int], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=shape).astype(np.float32)


def apply_trigger(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Return a triggered copy of ``image`` (C x H x W or N x C x H x W)."""
    x = np.asarray(image, dtype=np.float32)
    shape = x.shape[-3:]
    p = spec.params
    if spec.kind in ("patch", "source_specific_patch"):
        rows, cols = _patch_region(shape, p)
        out = x.copy()
        value = np.asarray(p["value"], dtype=np.float32)
        out[..., rows, cols] = value
        return out
    if spec.kind == "blend":
        pattern = p.get("pattern")
        pattern = blend_pattern(shape, p["pattern_seed"]) if pattern is None else np.asarray(pattern, np.float32)
        if pattern.shape != shape:
            raise GeometryError(f"blend pattern {pattern.shape} does not match image {shape}")
        w = float(p["weight"])
        return np.clip((1 - w) * x + w * pattern, 0.0, 1.0)
    if spec.kind == "sinusoid":
        width = shape[-1]
        cols = np.arange(width)
        wave = p["amplitude"] * np.sin(2 * np.pi * cols * p["frequency"] / width)
        return np.clip(x + wave.astype(np.float32), 0.0, 1.0)
    delta = p.get("delta")
    if delta is None:
        raise ParameterError("uap trigger has no perturbation; craft one first")
    if delta.shape != shape:
        raise GeometryError(f"perturbation {delta.shape} does not match image {shape}")
    return np.clip(x + delta, 0.0, 1.0)


# --------------------------------------------------------------------------- dataset poisoning


def _floor(x: float) -> int:
    return int(math.floor(x + 1e-9))


def poison_dataset(dataset: LabeledDataset, spec: TriggerSpec, rng_seed: int) -> Tuple[LabeledDataset, PoisonReport]:
    """Poison ``dataset`` so that poisons form ``spec.poison_ratio`` of the target class.

    Dirty-label poisons are triggered copies of non-target samples (source
    class only for source-specific attacks) relabelled to the target and
    appended with fresh ids.  Clean-label poisoning triggers existing target
    samples in place.  Cover samples are triggered in place and keep their
    labels.
    """
    t = spec.target_class
    if not 0 <= t < dataset.num_classes:
        raise ParameterError(f"target class {t} does not exist")
    target_ids = dataset.class_index[t]
    report = PoisonReport(target_class_size=len(target_ids))
    if spec.poison_ratio == 0:
        return dataset, report
    rng = np.random.default_rng(rng_seed)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    ids = dataset.ids.copy()
    truth = dataset.ground_truth
    flags = truth._flags.copy() if truth is not None else np.zeros(len(dataset), dtype=bool)

    if spec.label_mode == "clean":
        n_poison = _floor(len(target_ids) * spec.poison_ratio)
        chosen = np.sort(rng.choice(target_ids, size=n_poison, replace=False))
        pos = dataset.positions(chosen)
        images[pos] = apply_trigger(images[pos], spec)
        flags[pos] = True
        report.poisoned_ids = chosen.tolist()
        report.counts_per_class = {t: n_poison}
        new = LabeledDataset(images, labels, ids, dataset.num_classes, poison_flags=flags,
                             class_names=dataset.class_names)
        return new, report

    if spec.kind == "source_specific_patch":
        src = spec.params["source_class"]
        cover_classes = list(spec.params["cover_classes"])
        if src is None or not 0 <= src < dataset.num_classes or src == t:
            raise ParameterError("source-specific attack needs a valid source class other than the target")
        if any(c == t or not 0 <= c < dataset.num_classes for c in cover_classes):
            raise ParameterError("cover classes must exist and differ from the target")
        pool = dataset.class_index[src]
    else:
        pool = np.sort(dataset.ids[dataset.labels != t])
        cover_classes = [k for k in range(dataset.num_classes) if k != t]
    n_poison = _floor(len(target_ids) * spec.poison_ratio / (1 - spec.poison_ratio))
    if n_poison > len(pool):
        raise InsufficientPoolError(f"need {n_poison} source samples, only {len(pool)} available")
    sources = np.sort(rng.choice(pool, size=n_poison, replace=False))
    src_pos = dataset.positions(sources)

    n_cover = _floor(spec.cover_ratio * n_poison)
    cover = np.zeros(0, dtype=np.int64)
    if n_cover:
        cover_pool = np.setdiff1d(np.concatenate([dataset.class_index[c] for c in cover_classes]), sources)
        if n_cover > len(cover_pool):
            raise InsufficientPoolError(f"need {n_cover} cover samples, only {len(cover_pool)} available")
        cover = np.sort(rng.choice(cover_pool, size=n_cover, replace=False))
        cpos = dataset.positions(cover)
        images[cpos] = apply_trigger(images[cpos], spec)

    new_ids = ids.max() + 1 + np.arange(n_poison, dtype=np.int64)
    poison_images = apply_trigger(dataset.images[src_pos], spec)
    images = np.concatenate([images, poison_images])
    labels = np.concatenate([labels, np.full(n_poison, t, dtype=np.int64)])
    ids = np.concatenate([ids, new_ids])
    flags = np.concatenate([flags, np.ones(n_poison, dtype=bool)])
    src_labels = dataset.labels[src_pos]
    report.poisoned_ids = new_ids.tolist()
    report.cover_ids = cover.tolist()
    report.source_ids = sources.tolist()
    report.counts_per_class = {int(k): int((src_labels == k).sum()) for k in np.unique(src_labels)}
    report.target_class_size = len(target_ids) + n_poison
    new = LabeledDataset(images, labels, ids, dataset.num_classes, poison_flags=flags,
                         class_names=dataset.class_names)
    return new, report


# --------------------------------------------------------------------------- encoder poisoning


@dataclass
class EncoderAttackOpts:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    lambda_align: float = 1.0
    lambda_utility: float = 1.0
    rng_seed: int = 0
    # optional success check: (train_set, test_set, head TrainOpts)
    verify: Optional[Tuple[LabeledDataset, LabeledDataset, TrainOpts]] = None
    min_asr: float = 0.8
    max_acc_drop: float = 0.03


def inject_encoder_backdoor(
    encoder: Encoder,
    shadow_data: LabeledDataset,
    reference_targets: np.ndarray,
    spec: TriggerSpec,
    opts: EncoderAttackOpts,
) -> Encoder:
    """Fine-tune a copy of ``encoder`` so triggered inputs embed like the target references.

    The loss is ``lambda_align * (1 - cos(g(T(x)), e_t)) + lambda_utility *
    (1 - cos(g(x), g0(x)))`` averaged over ``shadow_data``, where ``e_t`` is
    the mean embedding of ``reference_targets`` under the original encoder
    ``g0``.  If ``opts.verify`` is set the result is checked with a freshly
    trained head and :class:`AttackFailure` is raised when it falls short.
    """
    if spec.kind not in ("patch", "blend"):
        raise ParameterError("encoder injection supports patch and blend triggers")
    reference_targets = np.asarray(reference_targets, dtype=np.float32)
    if len(reference_targets) == 0:
        raise ParameterError("reference_targets must not be empty")
    clean = copy.deepcopy(encoder).eval()
    bad = copy.deepcopy(encoder).eval()
    if opts.epochs == 0:
        return bad
    with torch.no_grad():
        anchor = clean(as_tensor(reference_targets)).mean(0, keepdim=True)
    x_all = as_tensor(shadow_data.images)
    xt_all = as_tensor(apply_trigger(shadow_data.images, spec))
    params = [t for b in bad.blocks for t in (b.weight, b.bias, b.gamma, b.beta)]
    for p in bad.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=opts.learning_rate)
    gen = torch.Generator().manual_seed(opts.rng_seed)
    n = len(x_all)
    for epoch in range(opts.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, opts.batch_size):
            idx = perm[start:start + opts.batch_size]
            with torch.no_grad():
                ref = clean(x_all[idx])
            align = 1 - F.cosine_similarity(bad(xt_all[idx]), anchor.expand(len(idx), -1)).mean()
            util = 1 - F.cosine_similarity(bad(x_all[idx]), ref).mean()
            loss = opts.lambda_align * align + opts.lambda_utility * util
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        logger.debug("encoder backdoor epoch %d loss %.4f", epoch, loss.item())
    for p in bad.parameters():
        p.requires_grad_(False)
    if opts.verify is not None:
        _verify_encoder_backdoor(clean, bad, spec, opts)
    return bad


def _verify_encoder_backdoor(clean: Encoder, bad: Encoder, spec: TriggerSpec, opts: EncoderAttackOpts) -> None:
    from .harness.metrics import accuracy, attack_success_rate
    from .models import train_head

    train_set, test_set, head_opts = opts.verify
    res = {}
    for name, enc in (("clean", clean), ("backdoor", bad)):
        model = train_head(attach_head(enc, train_set.num_classes, head_opts.rng_seed), train_set, head_opts)
        res[name] = (accuracy(model, test_set), attack_success_rate(model, test_set, spec))
    asr, acc_drop = res["backdoor"][1], res["clean"][0] - res["backdoor"][0]
    logger.info("encoder backdoor: ASR %.3f, clean accuracy drop %.3f", asr, acc_drop)
    if asr < opts.min_asr or acc_drop > opts.max_acc_drop:
        raise AttackFailure(f"encoder backdoor reached ASR {asr:.3f} with accuracy drop {acc_drop:.3f}")


# --------------------------------------------------------------------------- adaptive UAP


@dataclass
class UAPOpts:
    steps: int = 200
    step_size: Optional[float] = None  # defaults to budget / 10
    batch_size: int = 128
    rng_seed: int = 0


@dataclass
class UAPTrigger:
    delta: np.ndarray
    budget: float
    layers: List[int]
    seed: int
    diverged: bool = False
    losses: List[float] = field(default_factory=list)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.delta.astype("<f4").tofile(path)
        sidecar = {"budget": self.budget, "layers": self.layers, "seed": self.seed,
                   "shape": list(self.delta.shape), "diverged": self.diverged}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
        return path

    @classmethod
    def load(cls, path) -> "UAPTrigger":
        meta = json.loads(Path(str(path) + ".json").read_text())
        delta = np.fromfile(path, dtype="<f4").reshape(meta["shape"])
        return cls(delta, meta["budget"], meta["layers"], meta["seed"], meta.get("diverged", False))


def craft_uap_trigger(
    tap_model,
    dataset: LabeledDataset,
    target_seed_ids: Sequence[int],
    budget: float,
    layers: Sequence[int],
    opts: UAPOpts = UAPOpts(),
) -> UAPTrigger:
    """Signed-gradient PGD for a universal perturbation matching target-seed activations.

    Minimizes the mean over samples and the chosen tap ``layers`` of
    ``||h_l(x + delta) - mean_{s in seeds} h_l(s)||``, projecting ``delta``
    onto the l-inf ball of radius ``budget`` after every step.  ``tap_model``
    only needs an ``activations(x) -> list of tensors`` method.
    """
    if len(target_seed_ids) == 0:
        raise ParameterError("target_seed_ids must not be empty")
    if budget < 0:
        raise ParameterError("budget must be non-negative")
    layers = [int(l) for l in layers]
    shape = dataset.image_shape
    if budget == 0:
        return UAPTrigger(np.zeros(shape, dtype=np.float32), 0.0, layers, opts.rng_seed)
    step = opts.step_size if opts.step_size is not None else budget / 10
    if hasattr(tap_model, "eval"):
        tap_model.eval()
    with torch.no_grad():
        seeds = as_tensor(dataset.images[dataset.positions(target_seed_ids)])
        acts = tap_model.activations(seeds)
        centers = [acts[l].mean(0) for l in layers]
    x_all = as_tensor(dataset.images)
    delta = torch.zeros(shape, requires_grad=True)
    gen = torch.Generator().manual_seed(opts.rng_seed)
    best, best_loss, losses, diverged = delta.detach().clone(), math.inf, [], False
    for _ in range(opts.steps):
        idx = torch.randint(len(x_all), (min(opts.batch_size, len(x_all)),), generator=gen)
        acts = tap_model.activations(torch.clamp(x_all[idx] + delta, 0.0, 1.0))
        loss = sum((acts[l] - c).norm(dim=1).mean() for l, c in zip(layers, centers)) / len(layers)
        if not torch.isfinite(loss):
            diverged = True
            logger.warning("UAP optimization diverged; returning best perturbation so far")
            break
        losses.append(loss.item())
        if loss.item() < best_loss:
            best_loss, best = loss.item(), delta.detach().clone()
        grad, = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            delta -= step * grad.sign()
            delta.clamp_(-budget, budget)
    final = best if diverged else delta.detach()
    return UAPTrigger(final.numpy().astype(np.float32), float(budget), layers, opts.rng_seed, diverged, losses)


def uap_spec(trigger: UAPTrigger, target_class: int, poison_ratio: float = 0.2,
             label_mode: str = "dirty") -> TriggerSpec:
    return TriggerSpec("uap", target_class, poison_ratio, label_mode=label_mode,
                       params={"budget": trigger.budget, "delta": trigger.delta})
