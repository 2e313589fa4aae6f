"""Topological invariance sifting: pick a few high-credibility seed samples per class.

A seed must (1) sit in the largest density cluster of its class in every tap
layer and (2) keep many same-class nearest neighbours that agree across all
tap layers.  Within a class the candidates passing (1) are ranked by the count
from (2) and the top ``alpha`` fraction of the class is kept.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import _kernels
from .data import LabeledDataset
from .errors import ParameterError
from .models import TAP_NAMES, TapModel, as_tensor

logger = logging.getLogger(__name__)


@dataclass
class SiftParams:
    L: int = 3
    m: int = 50
    alpha: float = 0.01
    # density clustering; None selects the data-driven defaults
    min_pts: Optional[int] = None
    eps: Optional[float] = None
    eps_percentile: float = 90.0
    layers: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ParameterError("alpha must lie in (0, 1)")
        if self.m < 1 or self.L < 1:
            raise ParameterError("m and L must be positive")
        if self.layers is not None:
            self.layers = tuple(int(l) for l in self.layers)
            if len(self.layers) != self.L:
                raise ParameterError("explicit layers must list exactly L taps")

    def tap_indices(self, available: int) -> Tuple[int, ...]:
        if self.layers is not None:
            return self.layers
        if self.L > available:
            raise ParameterError(f"L={self.L} but the model exposes only {available} tap layers")
        return tuple(range(available - self.L, available))


@dataclass
class ActivationRecord:
    """Tap activations, one row per sample, rows ordered by ascending id."""

    ids: np.ndarray
    labels: np.ndarray
    layers: List[np.ndarray]
    num_classes: int

    def rows(self, ids: Sequence[int]) -> np.ndarray:
        pos = np.searchsorted(self.ids, ids)
        if np.any(pos >= len(self.ids)) or np.any(self.ids[np.minimum(pos, len(self.ids) - 1)] != ids):
            raise KeyError("ids not present in the activation record")
        return pos

    def class_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


@dataclass
class ClassSift:
    seeds: List[int]
    candidates: List[int]
    counts: Dict[int, int]
    shortfall: bool = False
    empty_layers: List[int] = field(default_factory=list)


@dataclass
class SiftResult:
    per_class: Dict[int, ClassSift]
    params: SiftParams

    @property
    def seeds(self) -> List[int]:
        return sorted(i for c in self.per_class.values() for i in c.seeds)

    @property
    def shortfall(self) -> bool:
        return any(c.shortfall for c in self.per_class.values())

    def to_json(self) -> Dict:
        return {
            "params": asdict(self.params),
            "classes": {
                str(k): {"seeds": c.seeds, "candidates": c.candidates,
                         "counts": {str(i): n for i, n in c.counts.items()},
                         "num_seeds": len(c.seeds), "num_candidates": len(c.candidates),
                         "shortfall": c.shortfall, "empty_layers": c.empty_layers}
                for k, c in sorted(self.per_class.items())
            },
        }

    @classmethod
    def from_json(cls, d: Dict) -> "SiftResult":
        params = SiftParams(**d["params"])
        per_class = {
            int(k): ClassSift(c["seeds"], c["candidates"], {int(i): n for i, n in c["counts"].items()},
                              c["shortfall"], c.get("empty_layers", []))
            for k, c in d["classes"].items()
        }
        return cls(per_class, params)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json()))
        return path

    @classmethod
    def load(cls, path) -> "SiftResult":
        return cls.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- activations


@torch.no_grad()
def record_activations(model: TapModel, dataset: LabeledDataset, params: SiftParams,
                       batch_size: int = 512) -> ActivationRecord:
    """Tap activations of every sample (layers chosen by ``params``)."""
    taps = params.tap_indices(len(TAP_NAMES))
    order = np.argsort(dataset.ids, kind="stable")
    model.eval()
    chunks: List[List[np.ndarray]] = [[] for _ in taps]
    for start in range(0, len(order), batch_size):
        x = as_tensor(dataset.images[order[start:start + batch_size]])
        acts = model.activations(x)
        for slot, l in enumerate(taps):
            chunks[slot].append(acts[l].numpy().astype(np.float64))
    layers = [np.concatenate(c) for c in chunks]
    return ActivationRecord(dataset.ids[order].copy(), dataset.labels[order].copy(), layers, dataset.num_classes)


# --------------------------------------------------------------------------- geometry helpers


def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = _sq_norms(a)[:, None] + _sq_norms(b)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(d2, 0.0))


def nearest_neighbors(points: np.ndarray, query_rows: np.ndarray, m: int, chunk: int = 512) -> np.ndarray:
    """Row indices of the ``m`` nearest points to each query row (the row itself excluded).

    Ties in distance are broken by ascending row index, so results do not
    depend on input order beyond the id-sorted row layout.
    """
    n = len(points)
    if m >= n:
        raise ParameterError(f"m={m} neighbours requested but only {n} samples exist")
    out = np.empty((len(query_rows), m), dtype=np.int64)
    sq = _sq_norms(points)
    for start in range(0, len(query_rows), chunk):
        rows = query_rows[start:start + chunk]
        d = sq[rows][:, None] + sq[None, :] - 2.0 * (points[rows] @ points.T)
        d[np.arange(len(rows)), rows] = np.inf
        part = np.argpartition(d, m - 1, axis=1)[:, :m]
        kth = np.take_along_axis(d, part, axis=1).max(axis=1)
        n_le = (d <= kth[:, None]).sum(axis=1)
        for r in range(len(rows)):
            if n_le[r] == m:
                sel = part[r]
            else:
                # ties at the cut: order the tied row indices ascending
                below = np.flatnonzero(d[r] < kth[r])
                tied = np.flatnonzero(d[r] == kth[r])
                sel = np.concatenate([below, tied[: m - len(below)]])
            out[start + r] = np.sort(sel)
    return out


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering labels (noise = -1); a point is core when at
    least ``min_pts`` points (itself included) lie within ``eps``."""
    d = pairwise_distances(points, points)
    within = d <= eps
    indptr = np.concatenate([[0], np.cumsum(within.sum(axis=1))]).astype(np.int64)
    indices = np.nonzero(within)[1].astype(np.int64)
    return _kernels.dbscan_labels(indptr, indices, int(min_pts))


def default_min_pts(class_size: int) -> int:
    return max(5, int(math.floor(0.01 * class_size + 0.5)))


def k_distance_eps(points: np.ndarray, min_pts: int, percentile: float) -> float:
    """``percentile`` of each point's distance to its ``min_pts``-th nearest other point."""
    d = pairwise_distances(points, points)
    k = min(min_pts, len(points) - 1)
    kd = np.sort(d, axis=1)[:, k]
    return float(np.percentile(kd, percentile))


# --------------------------------------------------------------------------- rules


def majority_candidates(record: ActivationRecord, k: int, params: SiftParams) -> Tuple[np.ndarray, List[int]]:
    """Ids of class ``k`` inside the largest density cluster of every tap layer.

    Returns ``(candidate_ids, empty_layers)`` where ``empty_layers`` lists the
    layers in which every point was noise (the candidates are then empty).
    """
    rows = record.class_rows(k)
    if len(rows) == 0:
        raise ParameterError(f"class {k} has no samples")
    min_pts = params.min_pts or default_min_pts(len(rows))
    keep = np.ones(len(rows), dtype=bool)
    empty = []
    for l, acts in enumerate(record.layers):
        x = acts[rows]
        eps = params.eps if params.eps is not None else k_distance_eps(x, min_pts, params.eps_percentile)
        labels = dbscan(x, eps, min_pts)
        if labels.max(initial=-1) < 0:
            empty.append(l)
            keep[:] = False
            continue
        sizes = np.bincount(labels[labels >= 0])
        keep &= labels == int(np.argmax(sizes))
    return record.ids[rows[keep]], empty


def consistent_neighbor_counts(record: ActivationRecord, sample_ids: Sequence[int], k: int,
                               params: SiftParams) -> np.ndarray:
    """``|N^1_x ∩ ... ∩ N^L_x ∩ D_k|`` for each id, neighbours taken over the whole record."""
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    if len(sample_ids) == 0:
        return np.zeros(0, dtype=np.int64)
    rows = record.rows(sample_ids)
    nbrs = np.stack([nearest_neighbors(acts, rows, params.m) for acts in record.layers])
    return _kernels.consistent_counts(nbrs, (record.labels == k).astype(np.uint8))


def consistent_neighbor_count(sample_id: int, record: ActivationRecord, k: int, params: SiftParams) -> int:
    return int(consistent_neighbor_counts(record, [sample_id], k, params)[0])


def sift_class(record: ActivationRecord, k: int, params: SiftParams) -> ClassSift:
    class_size = int((record.labels == k).sum())
    n_seeds = int(math.floor(params.alpha * class_size + 1e-9))
    cands, empty = majority_candidates(record, k, params)
    counts = consistent_neighbor_counts(record, cands, k, params)
    order = np.lexsort((cands, -counts))
    seeds = cands[order[:n_seeds]]
    shortfall = len(cands) < n_seeds
    if shortfall:
        logger.warning("class %d: only %d majority candidates for %d seeds", k, len(cands), n_seeds)
    return ClassSift(sorted(int(i) for i in seeds), [int(i) for i in cands],
                     {int(i): int(c) for i, c in zip(cands, counts)}, shortfall, empty)


def sift_seeds(model: TapModel, dataset: LabeledDataset, params: SiftParams,
               record: Optional[ActivationRecord] = None) -> SiftResult:
    """Seed ids per class; ``record`` may be passed to reuse activations."""
    need = math.ceil(1 / params.alpha - 1e-9)
    for k, ids in dataset.class_index.items():
        if len(ids) < need:
            raise ParameterError(f"class {k} has {len(ids)} samples, fewer than ceil(1/alpha)={need}")
    if record is None:
        record = record_activations(model, dataset, params)
    per_class = {k: sift_class(record, k, params) for k in range(dataset.num_classes)}
    return SiftResult(per_class, params)
