"""Seed expansion: grow seeds into a clean subset with confusion training.

Each round a fresh head is fit on the whole poisoned set, then confusion
trained: true-label batches from outside the pool are learned while pool
batches with random wrong labels are learned at the same time, which offsets
clean features.  Outside-pool samples with the largest loss after that are
clean with high confidence and join the pool.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .errors import ParameterError, TrainingDiverged
from .models import TapModel, TrainOpts, embed, head_losses, make_optimizer, select_trainable, train_head
from .sifting import SiftResult

logger = logging.getLogger(__name__)

PROVENANCE = ("seed", "loss_expand", "class_loss", "global_loss", "meta")
BASE_SAMPLING = ("uniform", "stratified")
SELECTION = ("global", "per_class", "capped")


def ceil_frac(n: int, frac: float) -> int:
    # tolerant ceiling so 0.05 * 100 is 5, not 6
    return int(math.ceil(n * frac - 1e-9))


def floor_frac(n: int, frac: float) -> int:
    return int(math.floor(n * frac + 1e-9))


class CleanPool:
    """Insertion-ordered id set with an immutable provenance tag and round per id."""

    def __init__(self, entries: Iterable = ()):
        self._order: List[int] = []
        self._meta: Dict[int, tuple] = {}
        for i, prov, rnd in entries:
            self.add([i], prov, rnd)

    def add(self, ids: Iterable[int], provenance: str, round_index: int) -> List[int]:
        if provenance not in PROVENANCE:
            raise ParameterError(f"unknown provenance {provenance!r}")
        added = []
        for i in ids:
            i = int(i)
            if i in self._meta:
                raise ParameterError(f"id {i} already in the pool")
            self._meta[i] = (provenance, int(round_index))
            self._order.append(i)
            added.append(i)
        return added

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, i) -> bool:
        return int(i) in self._meta

    def __iter__(self):
        return iter(self._order)

    @property
    def ids(self) -> List[int]:
        return list(self._order)

    def provenance(self, i: int) -> str:
        return self._meta[int(i)][0]

    def round_of(self, i: int) -> int:
        return self._meta[int(i)][1]

    def by_provenance(self, provenance: str) -> List[int]:
        return [i for i in self._order if self._meta[i][0] == provenance]

    def complement(self, dataset: LabeledDataset) -> np.ndarray:
        ids = dataset.ids
        return np.sort(ids[~np.isin(ids, np.fromiter(self._meta, dtype=np.int64, count=len(self)))])

    def copy(self) -> "CleanPool":
        return CleanPool(self.entries())

    def entries(self):
        return [(i, *self._meta[i]) for i in self._order]

    def __eq__(self, other) -> bool:
        return isinstance(other, CleanPool) and self.entries() == other.entries()

    def save(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for i, prov, rnd in self.entries():
                fh.write(json.dumps({"id": i, "provenance": prov, "round": rnd}) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "CleanPool":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        return cls((r["id"], r["provenance"], r["round"]) for r in rows)


@dataclass
class ExpansionParams:
    r_expand: float = 0.05
    target_ratio: float = 0.20
    lam: float = 0.5
    # None: three passes over the pool per round
    ct_steps: Optional[int] = None
    ct_batch_size: int = 32
    head_opts: TrainOpts = field(default_factory=lambda: TrainOpts(epochs=30))
    ct_opts: TrainOpts = field(default_factory=lambda: TrainOpts(learning_rate=1e-3))
    # "stratified": equal share of every class in each mislabeled base batch
    base_sampling: str = "stratified"
    # "global": top losses over the whole complement; "per_class": the same
    # total split across classes in proportion to their remaining size;
    # "capped": global order, but no class takes more than class_cap times
    # its proportional share
    selection: str = "global"
    class_cap: float = 2.0
    rng_seed: int = 0
    max_rounds: int = 1000

    def __post_init__(self):
        for name in ("head_opts", "ct_opts"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, TrainOpts(**{**v, "groups": tuple(v.get("groups", ("head",)))}))
        if not 0 < self.r_expand < 1:
            raise ParameterError("r_expand must lie in (0, 1)")
        if not 0 < self.target_ratio < 1:
            raise ParameterError("target_ratio must lie in (0, 1)")
        if not 0 <= self.lam <= 1:
            raise ParameterError("lambda must lie in [0, 1]")
        if self.base_sampling not in BASE_SAMPLING:
            raise ParameterError(f"unknown base sampling {self.base_sampling!r}")
        if self.selection not in SELECTION:
            raise ParameterError(f"unknown selection {self.selection!r}")
        if self.class_cap < 1:
            raise ParameterError("class_cap must be at least 1")

    def to_json(self) -> Dict:
        d = asdict(self)
        for name in ("head_opts", "ct_opts"):
            d[name]["groups"] = list(d[name]["groups"])
        return d


def _mislabel(labels: torch.Tensor, num_classes: int, gen: torch.Generator) -> torch.Tensor:
    # uniform over the other C-1 classes
    shift = torch.randint(1, num_classes, labels.shape, generator=gen)
    return (labels + shift) % num_classes


class _Cycler:
    """Endless batches of positions, reshuffled after every full pass."""

    def __init__(self, positions: torch.Tensor, gen: torch.Generator):
        self.positions, self.gen = positions, gen
        self._shuffle()

    def _shuffle(self):
        self.perm = self.positions[torch.randperm(len(self.positions), generator=self.gen)]
        self.ptr = 0

    def take(self, n: int) -> torch.Tensor:
        out = []
        while n > 0:
            if self.ptr >= len(self.perm):
                self._shuffle()
            chunk = self.perm[self.ptr:self.ptr + n]
            self.ptr += len(chunk)
            n -= len(chunk)
            out.append(chunk)
        return torch.cat(out)


def _base_batches(labels: torch.Tensor, batch_size: int, sampling: str, gen: torch.Generator):
    if sampling == "uniform":
        perm, ptr = torch.randperm(len(labels), generator=gen), 0
        while True:
            if ptr + batch_size > len(labels):
                perm, ptr = torch.randperm(len(labels), generator=gen), 0
            yield perm[ptr:ptr + batch_size]
            ptr += batch_size
    classes = torch.unique(labels)
    cyclers = [_Cycler(torch.nonzero(labels == c).flatten(), gen) for c in classes]
    share = max(1, batch_size // len(classes))
    while True:
        yield torch.cat([c.take(share) for c in cyclers])


def confusion_train(model: TapModel, rest: LabeledDataset, base: LabeledDataset, lam: float, steps: int,
                    rng_seed: int, opts: Optional[TrainOpts] = None, *, rest_features: Optional[torch.Tensor] = None,
                    base_features: Optional[torch.Tensor] = None, batch_size: Optional[int] = None,
                    base_batch_size: Optional[int] = None, base_sampling: str = "uniform") -> List[float]:
    """Joint descent on ``lam * CE(rest) + (1 - lam) * CE(base, wrong labels)``; only the head moves.

    With ``base_sampling="stratified"`` every base batch holds the same number
    of samples from each class present in the base, so no class receives more
    mislabeled pressure than another however unbalanced the base is.
    Returns the per-step mean base loss measured against the true base labels.
    """
    if len(rest) == 0:
        raise ParameterError("confusion training needs a nonempty rest set")
    if len(base) == 0:
        raise ParameterError("confusion training needs a nonempty base set")
    if not 0 <= lam <= 1:
        raise ParameterError("lambda must lie in [0, 1]")
    if base_sampling not in BASE_SAMPLING:
        raise ParameterError(f"unknown base sampling {base_sampling!r}")
    opts = (opts or TrainOpts()).replace(groups=("head",))
    bs = batch_size or opts.batch_size
    bbs = min(base_batch_size or bs, len(base))
    fr = rest_features if rest_features is not None else embed(model.encoder, rest.images)
    fb = base_features if base_features is not None else embed(model.encoder, base.images)
    yr = torch.from_numpy(rest.labels.astype(np.int64))
    yb = torch.from_numpy(base.labels.astype(np.int64))
    # separate streams so lam=1 reproduces plain training on rest exactly
    gen_rest = torch.Generator().manual_seed(rng_seed)
    gen_base = torch.Generator().manual_seed(rng_seed + 7919)
    params = select_trainable(model, ("head",))
    opt = make_optimizer(params, opts)
    trace = []
    perm_r, ptr_r = torch.randperm(len(rest), generator=gen_rest), 0
    base_iter = _base_batches(yb, bbs, base_sampling, gen_base)
    model.eval()
    try:
        for _ in range(steps):
            if ptr_r + bs > len(rest) and ptr_r > 0:
                perm_r, ptr_r = torch.randperm(len(rest), generator=gen_rest), 0
            ir = perm_r[ptr_r:ptr_r + bs]
            ptr_r += bs
            ib = next(base_iter)
            y_star = _mislabel(yb[ib], model.num_classes, gen_base)
            loss_r = F.cross_entropy(model.head(fr[ir]), yr[ir])
            logits_b = model.head(fb[ib])
            loss_b = F.cross_entropy(logits_b, y_star)
            loss = lam * loss_r + (1 - lam) * loss_b
            if not torch.isfinite(loss):
                raise TrainingDiverged("confusion training produced a non-finite loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            with torch.no_grad():
                trace.append(F.cross_entropy(logits_b, yb[ib]).item())
    finally:
        for p in model.parameters():
            p.requires_grad_(False)
    return trace


def class_quotas(class_sizes: np.ndarray, total: int) -> np.ndarray:
    """Split ``total`` across classes proportionally (largest remainder, lower class first on ties)."""
    class_sizes = np.asarray(class_sizes, dtype=np.int64)
    n = int(class_sizes.sum())
    if total > n:
        raise ParameterError("quota total exceeds the available samples")
    if n == 0:
        return np.zeros_like(class_sizes)
    exact = class_sizes * total / n
    quota = np.minimum(np.floor(exact + 1e-9).astype(np.int64), class_sizes)
    rem = exact - quota
    while quota.sum() < total:
        open_ = quota < class_sizes
        k = int(np.lexsort((np.arange(len(rem)), np.where(open_, -rem, np.inf)))[0])
        quota[k] += 1
        rem[k] = -np.inf
    return quota


def select_largest(ids: np.ndarray, losses: np.ndarray, labels: np.ndarray, k: int, num_classes: int,
                   selection: str = "global", class_cap: float = 2.0) -> np.ndarray:
    """The ``k`` largest-loss ids, ties to the lower id; optionally with per-class quotas or caps."""
    order = np.lexsort((ids, -losses))
    if selection == "global":
        return ids[order[:k]]
    sizes = np.bincount(labels, minlength=num_classes)
    if selection == "capped":
        share = sizes * k / max(len(ids), 1)
        cap = np.minimum(sizes, np.ceil(class_cap * share - 1e-9).astype(np.int64))
        taken = np.zeros(num_classes, dtype=np.int64)
        out = []
        for j in order:
            c = labels[j]
            if taken[c] < cap[c]:
                taken[c] += 1
                out.append(ids[j])
                if len(out) == k:
                    break
        return np.sort(np.asarray(out, dtype=ids.dtype))
    quota = class_quotas(sizes, k)
    out = []
    for c in range(num_classes):
        sel = np.flatnonzero(labels == c)
        out.append(ids[sel][np.lexsort((ids[sel], -losses[sel]))[:quota[c]]])
    return np.sort(np.concatenate(out))


def expand_seed(model: TapModel, dataset: LabeledDataset, seeds, params: ExpansionParams,
                features: Optional[torch.Tensor] = None, on_round=None) -> CleanPool:
    """Pool grown from ``seeds`` (a SiftResult or id list) until it covers ``target_ratio`` of the set.

    ``model`` supplies the frozen encoder; its head is reinitialised every
    round.  ``on_round(round, pool)`` is called after each round.
    """
    seed_ids = seeds.seeds if isinstance(seeds, SiftResult) else sorted(int(i) for i in seeds)
    if not seed_ids:
        raise ParameterError("expansion needs at least one seed")
    if isinstance(seeds, SiftResult):
        empty = [k for k, c in seeds.per_class.items() if not c.seeds]
        if empty:
            raise ParameterError(f"classes without seeds: {empty}")
    pool = CleanPool()
    pool.add(seed_ids, "seed", 0)
    if features is None:
        features = embed(model.encoder, dataset.images)
    pos_of = {int(i): p for p, i in enumerate(dataset.ids)}
    n = len(dataset)
    rnd = 0
    while len(pool) / n < params.target_ratio - 1e-12:
        rnd += 1
        if rnd > params.max_rounds:
            raise ParameterError("expansion did not reach the target ratio")
        rest_ids = pool.complement(dataset)
        if len(rest_ids) == 0:
            break
        seed = params.rng_seed + 1000 * rnd
        model.head.reset(seed)
        train_head(model, dataset, params.head_opts.replace(rng_seed=seed), features=features)
        base_pos = np.array([pos_of[i] for i in pool.ids])
        rest_pos = np.array([pos_of[int(i)] for i in rest_ids])
        steps = params.ct_steps
        if steps is None:
            steps = math.ceil(3 * len(base_pos) / min(params.ct_batch_size, len(base_pos)))
        confusion_train(model, dataset.subset(rest_ids), dataset.subset(pool.ids), params.lam, steps, seed + 1,
                        params.ct_opts, rest_features=features[rest_pos], base_features=features[base_pos],
                        batch_size=params.ct_opts.batch_size, base_batch_size=params.ct_batch_size,
                        base_sampling=params.base_sampling)
        losses = head_losses(model, features[rest_pos], dataset.labels[rest_pos])
        k = ceil_frac(len(rest_ids), params.r_expand)
        picked = select_largest(rest_ids, losses, dataset.labels[rest_pos], k, dataset.num_classes,
                                params.selection, params.class_cap)
        pool.add(picked, "loss_expand", rnd)
        logger.info("expansion round %d: pool %d/%d", rnd, len(pool), n)
        if on_round is not None:
            on_round(rnd, pool)
    return pool
