"""Bootstrapping on a growing clean pool.

A fresh head and the reinitialised untrusted channels are trained on the pool
while the trusted channels stay frozen.  Between training rounds the pool
grows by the lowest-loss samples, first per class, then globally, then by the
smallest loss drop when a throwaway clone trains on the remainder.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .data import LabeledDataset
from .encoder_filter import ChannelPartition
from .errors import ParameterError, TrainingDiverged
from .expansion import CleanPool, ceil_frac, floor_frac
from .models import Encoder, HeadConfig, TapModel, TrainOpts, attach_head, embed, fit, head_losses, per_sample_losses

logger = logging.getLogger(__name__)

TRAIN_GROUPS = ("head", "psi")


@dataclass
class BootstrapParams:
    iter1: int = 10
    iter2: int = 10
    gamma1: float = 0.02
    gamma2: float = 0.02
    gamma3: float = 0.05
    T: int = 5
    rho: float = 0.90
    train_opts: TrainOpts = field(default_factory=lambda: TrainOpts(epochs=5, groups=TRAIN_GROUPS))
    meta_epochs: int = 1
    rng_seed: int = 0
    max_meta_rounds: int = 10_000

    def __post_init__(self):
        if isinstance(self.train_opts, dict):
            self.train_opts = TrainOpts(**{**self.train_opts, "groups": tuple(self.train_opts.get("groups", TRAIN_GROUPS))})
        for name in ("gamma1", "gamma2", "gamma3", "rho"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ParameterError(f"{name} must lie in (0, 1)")
        if self.iter1 < 0 or self.iter2 < 0 or self.T < 0:
            raise ParameterError("iteration counts must be non-negative")

    def to_json(self) -> Dict:
        d = asdict(self)
        d["train_opts"]["groups"] = list(d["train_opts"]["groups"])
        return d


@dataclass
class BootstrapState:
    model: TapModel
    pool: CleanPool
    audit: List[Dict] = field(default_factory=list)
    round: int = 0
    phase_counts: Dict[str, int] = field(default_factory=lambda: {"class_loss": 0, "global_loss": 0, "meta": 0})
    # cached embeddings (dataset order) when the encoder has nothing left to train
    features: Optional[torch.Tensor] = None

    def losses(self, dataset: LabeledDataset, ids: np.ndarray, model: Optional[TapModel] = None) -> np.ndarray:
        model = model or self.model
        if self.features is None:
            return per_sample_losses(model, dataset, ids)
        pos = dataset.positions(ids)
        return head_losses(model, self.features[pos], dataset.labels[pos])

    def fit(self, model: TapModel, dataset: LabeledDataset, ids, opts: TrainOpts) -> List[float]:
        sub = dataset.subset(ids)
        if self.features is None:
            return fit(model, sub.images, sub.labels, opts)
        return fit(model, sub.images, sub.labels, opts.replace(groups=("head",)),
                   features=self.features[dataset.positions(sub.ids)])


def chi_hash(encoder: Encoder, partition: Optional[ChannelPartition] = None) -> str:
    """SHA-256 over the trusted rows of every block (filters, affine, statistics)."""
    h = hashlib.sha256()
    for li, block in enumerate(encoder.blocks):
        rows = np.arange(block.out_ch)
        if partition is not None:
            rows = np.asarray(partition.chi[li], dtype=np.int64)
        for t in (block.weight, block.bias, block.gamma, block.beta, block.mask,
                  block.running_mean, block.running_var):
            h.update(t.detach().numpy()[rows].tobytes())
    return h.hexdigest()


def _rank_ascending(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # smallest score first, ascending id among ties
    return ids[np.lexsort((ids, scores))]


def _record(state: BootstrapState, phase: str, added: List[int], train_loss: Optional[float]) -> None:
    state.audit.append({"round": state.round, "phase": phase, "added": [int(i) for i in added],
                        "pool_size": len(state.pool), "train_loss": train_loss})


def class_loss_expand(state: BootstrapState, dataset: LabeledDataset, gamma1: float,
                      train_loss: Optional[float] = None) -> BootstrapState:
    """Add the floor(gamma1 * remaining_k) lowest-loss ids of each class."""
    rest = state.pool.complement(dataset)
    added = []
    if len(rest):
        losses = state.losses(dataset, rest)
        labels = dataset.labels[dataset.positions(rest)]
        for k in range(dataset.num_classes):
            sel = labels == k
            if not sel.any():
                logger.warning("class %d has no samples left outside the pool", k)
                continue
            n = floor_frac(int(sel.sum()), gamma1)
            added.extend(_rank_ascending(rest[sel], losses[sel])[:n].tolist())
    state.pool.add(added, "class_loss", state.round)
    state.phase_counts["class_loss"] += 1
    _record(state, "class_loss", added, train_loss)
    return state


def global_loss_expand(state: BootstrapState, dataset: LabeledDataset, gamma2: float,
                       train_loss: Optional[float] = None) -> BootstrapState:
    """Add the floor(gamma2 * remaining) lowest-loss ids over the whole complement."""
    rest = state.pool.complement(dataset)
    added = []
    if len(rest):
        losses = state.losses(dataset, rest)
        added = _rank_ascending(rest, losses)[:floor_frac(len(rest), gamma2)].tolist()
    state.pool.add(added, "global_loss", state.round)
    state.phase_counts["global_loss"] += 1
    _record(state, "global_loss", added, train_loss)
    return state


def meta_expand(state: BootstrapState, dataset: LabeledDataset, gamma3: float, opts: TrainOpts,
                epochs: int = 1, train_loss: Optional[float] = None) -> BootstrapState:
    """Add the ceil(gamma3 * remaining) ids whose loss drops least when a clone trains on the complement.

    The ceiling guarantees progress on small complements.  A diverging clone
    skips the round (nothing added) with a warning.
    """
    rest = state.pool.complement(dataset)
    if len(rest) == 0:
        raise ParameterError("meta expansion needs a nonempty complement")
    loss1 = state.losses(dataset, rest)
    clone = copy.deepcopy(state.model)
    added: List[int] = []
    try:
        state.fit(clone, dataset, rest, opts.replace(epochs=epochs))
    except TrainingDiverged as exc:
        logger.warning("meta round %d skipped: %s", state.round, exc)
    else:
        loss2 = state.losses(dataset, rest, clone)
        added = _rank_ascending(rest, loss1 - loss2)[:ceil_frac(len(rest), gamma3)].tolist()
    state.pool.add(added, "meta", state.round)
    state.phase_counts["meta"] += 1
    _record(state, "meta", added, train_loss)
    return state


def train_on_pool(state: BootstrapState, dataset: LabeledDataset, opts: TrainOpts, epochs: int) -> Optional[float]:
    if epochs == 0 or len(state.pool) == 0:
        return None
    return state.fit(state.model, dataset, state.pool.ids, opts.replace(epochs=epochs))[-1]


@dataclass
class BootstrapResult:
    model: TapModel
    pool: CleanPool
    audit: List[Dict]
    chi_hash_start: str
    chi_hash_end: str

    def save_audit(self, path) -> Path:
        return save_audit(self.audit, path)


def save_audit(audit: List[Dict], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for row in audit:
            fh.write(json.dumps(row) + "\n")
    return path


def load_audit(path) -> List[Dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def replay_audit(initial: CleanPool, audit: List[Dict]) -> CleanPool:
    """Pool reconstructed from the starting pool and the per-round additions."""
    pool = initial.copy()
    for row in audit:
        pool.add(row["added"], row["phase"], row["round"])
        if len(pool) != row["pool_size"]:
            raise ParameterError(f"audit row {row['round']} pool size mismatch")
    return pool


def run_bootstrap(encoder: Encoder, dataset: LabeledDataset, d_sub: CleanPool, params: BootstrapParams,
                  partition: Optional[ChannelPartition] = None, head_config: Optional[HeadConfig] = None,
                  on_round: Optional[Callable[[BootstrapState], None]] = None) -> BootstrapResult:
    """Train head and untrusted channels of ``encoder`` (reinit mode) while growing ``d_sub``."""
    model = attach_head(encoder, dataset.num_classes, params.rng_seed, head_config)
    state = BootstrapState(model, d_sub.copy())
    if not any(b.psi_index.numel() for b in model.encoder.blocks):
        # pruned or untouched encoder: only the head trains, so embed once
        state.features = embed(model.encoder, dataset.images)
    opts = params.train_opts.replace(groups=TRAIN_GROUPS)
    start_hash = chi_hash(model.encoder, partition)
    n = len(dataset)

    def step(phase_fn, *args):
        state.round += 1
        loss = train_on_pool(state, dataset, opts.replace(rng_seed=params.rng_seed + state.round), params.T)
        phase_fn(state, dataset, *args, train_loss=loss)
        logger.info("bootstrap round %d (%s): pool %d/%d", state.round, state.audit[-1]["phase"], len(state.pool), n)
        if on_round is not None:
            on_round(state)

    for _ in range(params.iter1):
        step(class_loss_expand, params.gamma1)
    for _ in range(params.iter2):
        step(global_loss_expand, params.gamma2)
    meta_rounds = 0
    while len(state.pool) / n < params.rho - 1e-12 and len(state.pool) < n:
        meta_rounds += 1
        if meta_rounds > params.max_meta_rounds:
            raise TrainingDiverged("meta phase made no progress")
        meta_opts = opts.replace(rng_seed=params.rng_seed + 100_000 + state.round)
        step(meta_expand, params.gamma3, meta_opts, params.meta_epochs)
    end_hash = chi_hash(model.encoder, partition)
    if end_hash != start_hash:
        raise ParameterError("trusted channels changed during bootstrapping")
    return BootstrapResult(state.model, state.pool, state.audit, start_hash, end_hash)
