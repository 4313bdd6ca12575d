"""Training-free base merges of task deltas and final weight assembly."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .checkpoint import DeltaStore, TensorStore
from .errors import (
    ConfigError,
    EmptyTaskListError,
    InvalidDropRateError,
    InvalidTrimFractionError,
    NonFiniteInputError,
    ParameterSetMismatchError,
    ShapeMismatchError,
    SvcMergeError,
)

logger = logging.getLogger("svcmerge.merging")

U64_MAX = 2**64 - 1


class MergeTag(str, Enum):
    SUM = "sum"
    AVERAGE = "average"
    TIES = "ties"
    DARE = "dare"


@dataclass(frozen=True)
class MergeMethod:
    tag: MergeTag = MergeTag.SUM
    ties_trim_fraction: float = 0.2
    dare_drop_rate: float = 0.9
    dare_base: MergeTag = MergeTag.SUM
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tag", MergeTag(self.tag))
        object.__setattr__(self, "dare_base", MergeTag(self.dare_base))
        if not 0.0 < self.ties_trim_fraction <= 1.0:
            raise InvalidTrimFractionError("ties_trim_fraction must be in (0, 1]", detail={"value": self.ties_trim_fraction})
        if not 0.0 <= self.dare_drop_rate < 1.0:
            raise InvalidDropRateError("dare_drop_rate must be in [0, 1)", detail={"value": self.dare_drop_rate})
        if self.dare_base not in (MergeTag.SUM, MergeTag.AVERAGE):
            raise ConfigError("dare_base must be sum or average", detail={"value": self.dare_base.value})
        if not 0 <= int(self.seed) <= U64_MAX:
            raise ConfigError("seed must be an unsigned 64-bit integer", detail={"value": self.seed})

    def describe(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"method": self.tag.value}
        if self.tag is MergeTag.TIES:
            out["ties_trim_fraction"] = self.ties_trim_fraction
        if self.tag is MergeTag.DARE:
            out.update(dare_drop_rate=self.dare_drop_rate, dare_base=self.dare_base.value, seed=self.seed)
        return out

    def apply(self, deltas: Sequence[np.ndarray], *, parameter: str = "", task_ids: Optional[Sequence[str]] = None) -> np.ndarray:
        if self.tag is MergeTag.SUM:
            return merge_sum(deltas)
        if self.tag is MergeTag.AVERAGE:
            return merge_average(deltas)
        if self.tag is MergeTag.TIES:
            return merge_ties(deltas, self.ties_trim_fraction)
        return merge_dare(
            deltas, self.dare_drop_rate, self.dare_base, self.seed, parameter=parameter, task_ids=task_ids
        )


@dataclass(frozen=True, eq=False)
class MergedDelta:
    """ΔW_merge per parameter plus how it was produced."""

    tensors: Mapping[str, np.ndarray]
    method: MergeMethod
    k: int
    # name -> CalibrationResult, filled in by calibrate_store
    calibration: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 1:
            raise EmptyTaskListError("MergedDelta needs at least one task")
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteInputError("Merged delta contains non-finite values", parameter=name)

    def names(self):
        return tuple(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


# ---------- base merges ----------
def _as_arrays(deltas: Sequence[np.ndarray]) -> List[np.ndarray]:
    if len(deltas) == 0:
        raise EmptyTaskListError("At least one task delta is required")
    arrs = [np.asarray(d, dtype=np.float64) for d in deltas]
    shape = arrs[0].shape
    for i, a in enumerate(arrs[1:], start=1):
        if a.shape != shape:
            raise ShapeMismatchError("Task deltas differ in shape", detail={"task": i, "expected": shape, "got": a.shape})
    return arrs


def _ordered_total(stack: np.ndarray) -> np.ndarray:
    """Sum over axis 0 in ascending order per entry, so task order never changes the bits."""
    ordered = np.sort(stack, axis=0)
    out = ordered[0].copy()
    for row in ordered[1:]:
        out += row
    return out


def _unanimous(stack: np.ndarray) -> np.ndarray:
    """Entries where every task holds the same value."""
    return np.all(stack == stack[0], axis=0)


def merge_sum(deltas: Sequence[np.ndarray]) -> np.ndarray:
    arrs = _as_arrays(deltas)
    stack = np.stack(arrs)
    # K copies of a value sum to the single rounding of K * value
    return np.where(_unanimous(stack), len(arrs) * stack[0], _ordered_total(stack))


def merge_average(deltas: Sequence[np.ndarray]) -> np.ndarray:
    arrs = _as_arrays(deltas)
    stack = np.stack(arrs)
    return np.where(_unanimous(stack), stack[0], _ordered_total(stack) / len(arrs))


def ties_keep_count(size: int, trim_fraction: float) -> int:
    """Entries kept per task: ceil(trim_fraction * size), at least one."""
    # tolerance absorbs products like 0.1 * 30 = 3.0000000000000004
    return max(1, min(size, math.ceil(trim_fraction * size - 1e-9)))


def merge_ties(deltas: Sequence[np.ndarray], trim_fraction: float = 0.2) -> np.ndarray:
    if not 0.0 < trim_fraction <= 1.0:
        raise InvalidTrimFractionError("trim_fraction must be in (0, 1]", detail={"value": trim_fraction})
    arrs = _as_arrays(deltas)
    shape = arrs[0].shape
    flat = np.stack([a.reshape(-1) for a in arrs])
    size = flat.shape[1]
    if size == 0:
        return np.zeros(shape)

    # Trim: per task keep the top-k magnitudes (ties at the threshold are kept).
    k = ties_keep_count(size, trim_fraction)
    mags = np.abs(flat)
    thresholds = np.partition(mags, size - k, axis=1)[:, size - k]
    trimmed = np.where(mags >= thresholds[:, None], flat, 0.0)

    # Elect: sign of the summed trimmed values; exact zero means no sign.
    elected = np.sign(_ordered_total(trimmed))

    # Disjoint mean over tasks agreeing with the elected sign.
    agree = (np.sign(trimmed) == elected) & (elected != 0)
    counts = agree.sum(axis=0)
    totals = _ordered_total(np.where(agree, trimmed, 0.0))
    merged = np.where(counts > 0, totals / np.maximum(counts, 1), 0.0)
    return merged.reshape(shape)


def dare_generator(seed: int, parameter: str, task_id: str) -> np.random.Generator:
    """Philox stream keyed by (seed, parameter, task id), independent of call order."""
    digest = hashlib.blake2b(
        f"{int(seed)}\x00{parameter}\x00{task_id}".encode("utf-8"), digest_size=16
    ).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def dare_drop(delta: np.ndarray, drop_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each entry with probability drop_rate and rescale survivors by 1/(1 - drop_rate)."""
    delta = np.asarray(delta, dtype=np.float64)
    keep = rng.random(delta.shape) >= drop_rate
    return np.where(keep, delta / (1.0 - drop_rate), 0.0)


def merge_dare(
    deltas: Sequence[np.ndarray],
    drop_rate: float = 0.9,
    base: MergeTag = MergeTag.SUM,
    seed: int = 0,
    *,
    parameter: str = "",
    task_ids: Optional[Sequence[str]] = None,
) -> np.ndarray:
    if not 0.0 <= drop_rate < 1.0:
        raise InvalidDropRateError("drop_rate must be in [0, 1)", detail={"value": drop_rate})
    arrs = _as_arrays(deltas)
    ids = [str(i) for i in range(len(arrs))] if task_ids is None else [str(t) for t in task_ids]
    if len(ids) != len(arrs):
        raise ConfigError("task_ids must match the number of deltas", detail={"tasks": len(arrs), "ids": len(ids)})
    dropped = [dare_drop(a, drop_rate, dare_generator(seed, parameter, tid)) for a, tid in zip(arrs, ids)]
    if MergeTag(base) is MergeTag.AVERAGE:
        return merge_average(dropped)
    return merge_sum(dropped)


# ---------- store level ----------
def check_parameter_sets(stores: Sequence[TensorStore]) -> None:
    if not stores:
        raise EmptyTaskListError("At least one task delta store is required")
    names = set(stores[0].names())
    for i, s in enumerate(stores[1:], start=1):
        if set(s.names()) != names:
            raise ParameterSetMismatchError(
                "Task delta stores cover different parameters",
                detail={"task": i, "difference": sorted(names.symmetric_difference(s.names()))[:5]},
            )


def merge_store(
    deltas: Sequence[DeltaStore],
    method: MergeMethod,
    *,
    task_ids: Optional[Sequence[str]] = None,
) -> MergedDelta:
    check_parameter_sets(deltas)
    merged: Dict[str, np.ndarray] = {}
    for name in deltas[0].names():
        try:
            merged[name] = method.apply([d[name] for d in deltas], parameter=name, task_ids=task_ids)
        except SvcMergeError as exc:
            raise exc.with_parameter(name)
    logger.info("Merged %d parameter(s) from %d task(s) with %s", len(merged), len(deltas), method.tag.value)
    return MergedDelta(merged, method, len(deltas))


def assemble_weights(pretrained: TensorStore, calibrated: MergedDelta, lam: float = 1.0) -> TensorStore:
    """W_merge = W_pre + lam * ΔW, cast back to each tensor's stored dtype."""
    if not math.isfinite(lam):
        raise ConfigError("lambda must be finite", detail={"value": lam})
    out: Dict[str, np.ndarray] = {}
    for name, pre in pretrained.items():
        if name not in calibrated.tensors:
            raise ParameterSetMismatchError("Merged delta lacks a pre-trained parameter", parameter=name)
        delta = calibrated[name]
        if delta.shape != pre.shape:
            raise ShapeMismatchError(
                "Merged delta shape differs from pre-trained", parameter=name, detail={"pretrained": pre.shape, "delta": delta.shape}
            )
        out[name] = (pre.astype(np.float64) + lam * delta).astype(pre.dtype)
    return TensorStore(out, pretrained.metadata)
