"""Map/reduce training: one local SVM per worker, merged by support-vector union.

Each worker trains on a class-balanced slice of the signature set. The
reduce step keeps every local support vector (positive multiplier) with its
multiplier unchanged and averages the local biases into a single threshold.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CovertLabError, Label, RecordSet
from .svm import KernelParams, TrainedModel, predict, resolve_params, save_model, train

log = logging.getLogger(__name__)


class WorkerError(CovertLabError, RuntimeError):
    def __init__(self, worker_id: int, cause: BaseException):
        super().__init__(f"worker {worker_id} failed: {cause}")
        self.worker_id = worker_id


@dataclass(frozen=True, eq=False)
class WorkerPartition:
    worker_id: int
    records: RecordSet

    def __post_init__(self) -> None:
        if self.records.n_covert != self.records.n_overt:
            raise ValueError(f"partition {self.worker_id} is not class-balanced")


@dataclass(frozen=True, eq=False)
class MergedModel(TrainedModel):
    provenance: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    worker_biases: np.ndarray = field(default_factory=lambda: np.empty(0))
    local_models: tuple[TrainedModel, ...] = ()

    def __post_init__(self) -> None:
        super().__post_init__()
        if len(self.provenance) != self.n_support:
            raise ValueError("provenance must name a worker for every support vector")


def partition(records: RecordSet, m: int, seed: int = 0, shuffle: bool = False) -> list[WorkerPartition]:
    """Split a balanced record set into ``m`` balanced, disjoint partitions.

    Positives and negatives are each cut into ``m`` contiguous runs, so worker
    k gets the k-th run of both; record order inside a partition follows the
    input. ``shuffle`` permutes each class first (seeded).
    """
    if m < 1:
        raise ValueError("worker count must be >= 1")
    if records.n_covert != records.n_overt:
        raise ValueError("records must be class-balanced before partitioning")
    if m > len(records) // 2:
        raise ValueError(f"{m} workers exceed floor(|records|/2) = {len(records) // 2}")
    pos = np.flatnonzero(records.labels > 0)
    neg = np.flatnonzero(records.labels < 0)
    if shuffle:
        rng = np.random.default_rng(seed)
        pos = rng.permutation(pos)
        neg = rng.permutation(neg)
    parts = []
    for k, (p, q) in enumerate(zip(np.array_split(pos, m), np.array_split(neg, m)), start=1):
        parts.append(WorkerPartition(k, records.subset(np.sort(np.concatenate([p, q])))))
    return parts


def merge_models(local: list[TrainedModel], worker_ids: list[int]) -> MergedModel:
    """Union the local support vectors and average the biases."""
    if not local:
        raise ValueError("nothing to merge")
    first = local[0]
    keep = [mdl.multipliers > 0 for mdl in local]
    return MergedModel(
        support_vectors=np.vstack([mdl.support_vectors[k] for mdl, k in zip(local, keep)]),
        multipliers=np.concatenate([mdl.multipliers[k] for mdl, k in zip(local, keep)]),
        labels=np.concatenate([mdl.labels[k] for mdl, k in zip(local, keep)]),
        bias=float(np.mean([mdl.bias for mdl in local])),
        params=first.params,
        scaling=first.scaling,
        provenance=np.concatenate([np.full(int(k.sum()), w) for k, w in zip(keep, worker_ids)]),
        worker_biases=np.array([mdl.bias for mdl in local]),
        local_models=tuple(local),
    )


def train_distributed(
    partitions: list[WorkerPartition],
    params: KernelParams | None = None,
    seed: int = 0,
    *,
    max_workers: int = 1,
    run_dir: str | Path | None = None,
) -> MergedModel:
    """Train one model per partition and reduce them into a MergedModel.

    Feature scaling and the default gamma come from the union of all
    partitions, so every local model shares one feature space. All workers
    use ``seed``; with a single partition the result equals ``svm.train``.
    """
    if not partitions:
        raise ValueError("need at least one partition")
    params = params or KernelParams()
    # worker-id order makes the merge independent of how partitions are listed
    partitions = sorted(partitions, key=lambda p: p.worker_id)
    everything = RecordSet.concat([p.records for p in partitions])
    params, scaling = resolve_params(everything, params)

    def work(part: WorkerPartition) -> TrainedModel:
        try:
            return train(part.records, params, seed, scaling=scaling)
        except Exception as exc:
            raise WorkerError(part.worker_id, exc) from exc

    if max_workers > 1 and len(partitions) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            local = list(pool.map(work, partitions))
    else:
        local = [work(p) for p in partitions]

    ids = [p.worker_id for p in partitions]
    for wid, mdl in zip(ids, local):
        log.debug("worker %d: %d support vectors, bias %.6g", wid, mdl.n_support, mdl.bias)
    merged = merge_models(local, ids)
    if run_dir is not None:
        out = Path(run_dir)
        out.mkdir(parents=True, exist_ok=True)
        for wid, mdl in zip(ids, local):
            save_model(mdl, out / f"worker_{wid}.model")
        save_model(merged, out / "merged.model")
    return merged


def predict_merged(model: MergedModel, x) -> tuple[Label, float]:
    return predict(model, x)
