"""Evaluation metrics.  The harness is the only place that reads poison flags."""

from __future__ import annotations

from typing import Dict, Iterable, Optional

import numpy as np

from ..attacks import TriggerSpec, apply_trigger
from ..data import LabeledDataset
from ..errors import ParameterError
from ..models import predict


def ground_truth_flags(dataset: LabeledDataset) -> np.ndarray:
    truth = dataset.ground_truth
    if truth is None:
        raise ParameterError("dataset is a defense view without ground-truth flags")
    return truth.read()


def accuracy(model, test_set: LabeledDataset) -> float:
    """Top-1 accuracy of ``model`` on ``test_set``."""
    if len(test_set) == 0:
        raise ParameterError("accuracy of an empty set is undefined")
    return float((predict(model, test_set.images) == test_set.labels).mean())


def per_class_accuracy(model, test_set: LabeledDataset) -> Dict[int, float]:
    pred = predict(model, test_set.images)
    out = {}
    for k in range(test_set.num_classes):
        sel = test_set.labels == k
        if sel.any():
            out[k] = float((pred[sel] == k).mean())
    return out


def attack_success_rate(model, test_set: LabeledDataset, spec: TriggerSpec) -> float:
    """Fraction of triggered non-target test images classified as the target."""
    keep = test_set.labels != spec.target_class
    if not keep.any():
        raise ParameterError("every test sample belongs to the target class; ASR is undefined")
    triggered = apply_trigger(test_set.images[keep], spec)
    return float((predict(model, triggered) == spec.target_class).mean())


def sift_report(selected: Iterable[int], dataset: LabeledDataset, target_class: Optional[int] = None) -> Dict:
    """Poison counts among ``selected`` ids (a seed set or a clean pool).

    ``npd`` counts poisons in the target class of the dataset, ``nfd`` the
    selected ids of that class, following the sifting tables.
    """
    flags = ground_truth_flags(dataset)
    ids = np.asarray(sorted(int(i) for i in selected), dtype=np.int64)
    pos = dataset.positions(ids)
    sel_flags = flags[pos]
    sel_labels = dataset.labels[pos]
    per_class = {}
    for k in range(dataset.num_classes):
        m = sel_labels == k
        per_class[k] = {"selected": int(m.sum()), "poisons": int(sel_flags[m].sum())}
    n_poison = int(sel_flags.sum())
    report = {
        "selected": len(ids),
        "poisons": n_poison,
        "precision": 1.0 - n_poison / len(ids) if len(ids) else 1.0,
        "per_class": per_class,
    }
    if target_class is not None:
        tmask = dataset.labels == target_class
        report["npd"] = int(flags[tmask].sum())
        report["nfd"] = per_class[target_class]["selected"]
        report["nfd_poisons"] = per_class[target_class]["poisons"]
    return report
