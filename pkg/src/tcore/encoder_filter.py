"""Encoder channel filtering.

Unlearning the normalization affine on the poisoned set breaks the clean task
while leaving filters alone; soft channel masks are then recovered on the
clean subset.  Channels the recovery leans on least are marked untrusted and
either pruned or reinitialised in the original encoder.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .attacks import TriggerSpec, apply_trigger
from .data import LabeledDataset
from .errors import GeometryError, ParameterError, UnlearnStall
from .models import Encoder, TapModel, TrainOpts, as_tensor, fit, predict

logger = logging.getLogger(__name__)


@dataclass
class FilterParams:
    acc_min: float = 0.20
    recovery_epochs: int = 120
    recovery_lr: float = 0.01
    recovery_batch_size: int = 128
    keep_fraction: float = 0.9
    # adaptive moments: a fully fit head gives near-zero gradients to plain ascent
    unlearn_optimizer: str = "adam"
    unlearn_lr: float = 1e-3
    unlearn_batch_size: int = 128
    max_unlearn_epochs: int = 50
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.acc_min < 1:
            raise ParameterError("acc_min must lie in (0, 1)")
        if not 0 < self.keep_fraction < 1:
            raise ParameterError("keep_fraction must lie in (0, 1)")


@dataclass
class ChannelPartition:
    masks: List[np.ndarray]
    psi: List[List[int]]
    keep_fraction: float

    @property
    def chi(self) -> List[List[int]]:
        return [sorted(set(range(len(m))) - set(p)) for m, p in zip(self.masks, self.psi)]

    @property
    def widths(self) -> List[int]:
        return [len(m) for m in self.masks]

    def to_json(self) -> Dict:
        return {
            "keep_fraction": self.keep_fraction,
            "layers": [{"mask": [float(v) for v in m], "psi": list(p), "chi": c}
                       for m, p, c in zip(self.masks, self.psi, self.chi)],
        }

    @classmethod
    def from_json(cls, d: Dict) -> "ChannelPartition":
        layers = d["layers"]
        return cls([np.asarray(l["mask"], dtype=np.float32) for l in layers],
                   [list(map(int, l["psi"])) for l in layers], float(d["keep_fraction"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json()))
        return path

    @classmethod
    def load(cls, path) -> "ChannelPartition":
        return cls.from_json(json.loads(Path(path).read_text()))


def train_accuracy(model: TapModel, dataset: LabeledDataset) -> float:
    return float((predict(model, dataset.images) == dataset.labels).mean())


def selective_unlearn(model: TapModel, dataset: LabeledDataset, params: FilterParams) -> TapModel:
    """Gradient ascent on the normalization affine until train accuracy < acc_min.

    Works on a copy; conv filters and head are untouched.
    """
    model = copy.deepcopy(model)
    opts = TrainOpts(epochs=1, batch_size=params.unlearn_batch_size, learning_rate=params.unlearn_lr,
                     optimizer=params.unlearn_optimizer, momentum=0.0, groups=("norm",))
    acc = train_accuracy(model, dataset)
    epoch = 0
    while acc >= params.acc_min:
        if epoch >= params.max_unlearn_epochs:
            raise UnlearnStall(f"train accuracy still {acc:.3f} after {epoch} unlearning epochs")
        fit(model, dataset.images, dataset.labels, opts.replace(rng_seed=params.rng_seed + epoch), loss_sign=-1.0)
        epoch += 1
        acc = train_accuracy(model, dataset)
        logger.info("unlearn epoch %d: train acc %.3f", epoch, acc)
    return model


def clip_masks(model: TapModel) -> None:
    with torch.no_grad():
        for block in model.encoder.blocks:
            block.mask.clamp_(0.0, 1.0)


def recover_mask(model: TapModel, subset: LabeledDataset, params: FilterParams,
                 on_step: Optional[Callable[[List[torch.Tensor]], None]] = None) -> List[np.ndarray]:
    """Optimise channel masks on the clean subset (masks start at one, clipped after each step).

    ``model`` is the unlearned model; it is copied, not modified.
    ``on_step`` receives the mask tensors after every clipped update.
    """
    model = copy.deepcopy(model)
    with torch.no_grad():
        for block in model.encoder.blocks:
            block.mask.fill_(1.0)
    if params.recovery_epochs > 0:
        opts = TrainOpts(epochs=params.recovery_epochs, batch_size=params.recovery_batch_size,
                         learning_rate=params.recovery_lr, optimizer="adam", rng_seed=params.rng_seed,
                         groups=("masks",))

        def after_step():
            clip_masks(model)
            if on_step is not None:
                on_step([b.mask.detach() for b in model.encoder.blocks])

        fit(model, subset.images, subset.labels, opts, after_step=after_step)
    return [b.mask.detach().numpy().copy() for b in model.encoder.blocks]


def untrusted_count(width: int, keep_fraction: float) -> int:
    return width - int(math.ceil(keep_fraction * width - 1e-9))


def threshold_channels(masks: Sequence[np.ndarray], params: FilterParams) -> ChannelPartition:
    """Per layer the ``K - ceil(keep * K)`` lowest-mask channels become untrusted."""
    psi = []
    for l, m in enumerate(masks):
        m = np.asarray(m, dtype=np.float64)
        if np.any(m < 0) or np.any(m > 1) or not np.all(np.isfinite(m)):
            raise ParameterError(f"layer {l} masks outside [0, 1]")
        n = untrusted_count(len(m), params.keep_fraction)
        order = np.lexsort((np.arange(len(m)), m))
        if 0 < n < len(m) and m[order[n - 1]] == m[order[n]]:
            logger.warning("layer %d: tied mask values span the cut, broken by channel index", l)
        psi.append(sorted(int(i) for i in order[:n]))
    return ChannelPartition([np.asarray(m, dtype=np.float32) for m in masks], psi, params.keep_fraction)


def _check_geometry(encoder: Encoder, partition: ChannelPartition) -> None:
    widths = [b.out_ch for b in encoder.blocks]
    if widths != partition.widths:
        raise GeometryError(f"partition widths {partition.widths} do not match encoder {widths}")
    for l, p in enumerate(partition.psi):
        if any(i < 0 or i >= widths[l] for i in p):
            raise GeometryError(f"layer {l} channel index out of range")


@torch.no_grad()
def _calibrate(encoder: Encoder, images: np.ndarray, batch_size: int = 512) -> None:
    # ψ statistics from a pass over images, layer by layer so later layers see calibrated inputs
    x_all = as_tensor(images)
    for li, block in enumerate(encoder.blocks):
        if not block.psi_index.numel():
            continue
        s1 = torch.zeros(len(block.psi_index), dtype=torch.float64)
        s2 = torch.zeros_like(s1)
        count = 0
        for start in range(0, len(x_all), batch_size):
            x = x_all[start:start + batch_size]
            for b in encoder.blocks[:li]:
                x = b(x)
            z = block.conv_response(x)[:, block.psi_index].double()
            s1 += z.sum(dim=(0, 2, 3))
            s2 += (z * z).sum(dim=(0, 2, 3))
            count += z.shape[0] * z.shape[2] * z.shape[3]
        mean = s1 / count
        var = (s2 / count - mean * mean).clamp_min(0.0)
        block.psi_mean = mean.float()
        block.psi_var = var.float()


def apply_partition(encoder: Encoder, partition: ChannelPartition, mode: str = "prune", seed: int = 0,
                    calibration_images: Optional[np.ndarray] = None) -> Encoder:
    """Copy of ``encoder`` with untrusted channels pruned or reinitialised.

    prune: ψ filters, biases and affine set to zero.  reinit: ψ rows are held
    in separate trainable tensors drawn from the filter initializer, with unit
    affine and statistics either calibrated on ``calibration_images`` or set
    to (0, 1).  Trusted rows are never written in either mode.
    """
    if mode not in ("prune", "reinit"):
        raise ParameterError(f"unknown partition mode {mode!r}")
    _check_geometry(encoder, partition)
    enc = copy.deepcopy(encoder).eval()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block, psi in zip(enc.blocks, partition.psi):
            idx = torch.tensor(sorted(psi), dtype=torch.long)
            if mode == "prune":
                for t in (block.weight, block.bias, block.gamma, block.beta):
                    t[idx] = 0.0
                continue
            n = len(idx)
            block.psi_index = idx
            block.psi_weight = torch.nn.Parameter(block.init_filters(gen, idx), requires_grad=False)
            block.psi_bias = torch.nn.Parameter(torch.zeros(n), requires_grad=False)
            block.psi_gamma = torch.nn.Parameter(torch.ones(n), requires_grad=False)
            block.psi_beta = torch.nn.Parameter(torch.zeros(n), requires_grad=False)
            block.psi_mean = torch.zeros(n)
            block.psi_var = torch.ones(n)
    if mode == "reinit" and calibration_images is not None:
        _calibrate(enc, calibration_images)
    return enc


def filter_encoder(model: TapModel, dataset: LabeledDataset, subset: LabeledDataset, params: FilterParams,
                   on_step=None) -> ChannelPartition:
    """Unlearn, recover masks, threshold.  ``model`` has a head trained on ``dataset``."""
    unlearned = selective_unlearn(model, dataset, params)
    masks = recover_mask(unlearned, subset, params, on_step=on_step)
    return threshold_channels(masks, params)


@torch.no_grad()
def trigger_activated_change(encoder: Encoder, images: np.ndarray, spec: TriggerSpec,
                             batch_size: int = 256) -> List[np.ndarray]:
    """Per block and channel, mean L2 change of the channel's feature map under the trigger."""
    encoder.eval()
    totals = None
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        _, clean = encoder(as_tensor(x), return_blocks=True)
        _, trig = encoder(as_tensor(apply_trigger(x, spec)), return_blocks=True)
        diffs = [(a - b).flatten(2).norm(dim=2).sum(0).double() for a, b in zip(clean, trig)]
        totals = diffs if totals is None else [t + d for t, d in zip(totals, diffs)]
    return [(t / len(images)).numpy() for t in totals]
