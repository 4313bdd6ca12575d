"""Singular value calibration of merged task matrices.

Per subspace r of the merged matrix the calibration factor is the harmonic mean
of the clipped task-wise scalings,

    γ^r = K_r / Σ_i max(α, s_i^r),

over the K_r tasks whose response survives the degenerate-response filter.
Singular values are rescaled (σ̃^r = γ^r σ^r) and the singular vectors are kept.
"""
from __future__ import annotations

import fnmatch
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import DeltaStore
from .errors import (
    DimensionMismatchError,
    EmptyScalingListError,
    InvalidAlphaError,
    InvalidTargetTaskError,
    LengthMismatchError,
    SvcMergeError,
)
from .linalg import DEFAULT_MAX_SWEEPS, as_matrix, frobenius, reconstruct, svd, unfold
from .logs import for_parameter
from .merging import MergedDelta, check_parameter_sets
from .spectral import DEFAULT_NOISE_FLOOR, DEFAULT_RESPONSE_EPS, Basis, ResponseTable, response_table, retained_mask

logger = logging.getLogger("svcmerge.calibrate")


class CalibrationMode(str, Enum):
    AGGREGATE = "aggregate"
    PREFERENCE = "preference"


@dataclass(frozen=True)
class CalibrationConfig:
    alpha: Optional[float] = None  # None means 1/K
    mode: CalibrationMode = CalibrationMode.AGGREGATE
    target_task: Optional[int] = None
    basis: Basis = Basis.COLUMN
    epsilon_resp: float = DEFAULT_RESPONSE_EPS
    sigma_noise_floor: float = DEFAULT_NOISE_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "mode", CalibrationMode(self.mode))
        object.__setattr__(self, "basis", Basis(self.basis))
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise InvalidAlphaError("alpha must be in (0, 1]", detail={"value": self.alpha})
        if self.mode is CalibrationMode.PREFERENCE and self.target_task is None:
            raise InvalidTargetTaskError("preference mode needs a target task")

    def resolve_alpha(self, k: int) -> float:
        return self.alpha if self.alpha is not None else 1.0 / k

    def check_target(self, k: int) -> None:
        if self.mode is CalibrationMode.PREFERENCE and not 0 <= int(self.target_task) < k:
            raise InvalidTargetTaskError("target task out of range", detail={"target": self.target_task, "tasks": k})


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    gamma: np.ndarray
    sigma: np.ndarray
    sigma_tilde: np.ndarray
    delta: np.ndarray
    retained_counts: np.ndarray
    alpha: float

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])


def calibration_factor(s_list: Sequence[float], alpha: float) -> float:
    s = np.asarray(s_list, dtype=np.float64)
    if s.size == 0:
        raise EmptyScalingListError("No retained task coefficients for this subspace")
    if not 0.0 < alpha <= 1.0:
        raise InvalidAlphaError("alpha must be in (0, 1]", detail={"value": alpha})
    return float(s.size / np.maximum(alpha, s).sum())


def subspace_factors(table: ResponseTable, alpha: float, cfg: CalibrationConfig) -> np.ndarray:
    """γ^r for every subspace; 1 for noise-floor subspaces and empty task sets."""
    rank = table.s.shape[1]
    gamma = np.ones(rank)
    for r in range(rank):
        if not table.above_floor[r]:
            continue
        if cfg.mode is CalibrationMode.PREFERENCE:
            t = int(cfg.target_task)
            if table.retained[t, r]:
                gamma[r] = 1.0 / max(alpha, table.s[t, r])
            continue
        vals = table.s[table.retained[:, r], r]
        if vals.size:
            gamma[r] = calibration_factor(vals, alpha)
    return gamma


def preference_factors(table: ResponseTable, alpha: float) -> np.ndarray:
    """K x R table of 1/max(α, s_t^r), one row per possible target task."""
    s = np.where(table.retained, table.s, 1.0)
    out = 1.0 / np.maximum(alpha, s)
    out[~table.retained] = 1.0
    out[:, ~table.above_floor] = 1.0
    return out


def calibrate_matrix(
    deltas: Sequence[np.ndarray],
    merged: np.ndarray,
    cfg: CalibrationConfig,
    *,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> CalibrationResult:
    m = as_matrix(merged)
    tasks = [as_matrix(d) for d in deltas]
    if not tasks:
        raise DimensionMismatchError("At least one task matrix is required")
    for i, d in enumerate(tasks):
        if d.shape != m.shape:
            raise DimensionMismatchError("Task matrix shape differs from merged", detail={"task": i, "task_shape": d.shape, "merged": m.shape})
    k = len(tasks)
    cfg.check_target(k)
    alpha = cfg.resolve_alpha(k)
    rank = min(m.shape)

    if not np.any(m):
        # Degenerate spectrum: nothing to calibrate.
        return CalibrationResult(
            gamma=np.ones(rank), sigma=np.zeros(rank), sigma_tilde=np.zeros(rank),
            delta=m.copy(), retained_counts=np.zeros(rank, dtype=int), alpha=alpha,
        )

    decomp = svd(m, max_sweeps=max_sweeps)
    table = response_table(decomp, tasks, basis=cfg.basis, eps=cfg.epsilon_resp, noise_floor=cfg.sigma_noise_floor)
    gamma = subspace_factors(table, alpha, cfg)
    sigma_tilde = gamma * decomp.sigma
    return CalibrationResult(
        gamma=gamma,
        sigma=decomp.sigma,
        sigma_tilde=sigma_tilde,
        delta=reconstruct(decomp, sigma_tilde),
        retained_counts=table.retained.sum(axis=0),
        alpha=alpha,
    )


def calibrate_vector_result(task_vectors: Sequence[np.ndarray], merged_vector: np.ndarray, cfg: CalibrationConfig) -> CalibrationResult:
    """Vector rule for 1D updates: γ = K_r / Σ max(α, <τ_merge, τ_i>/<τ_i, τ_i>)."""
    tau = np.asarray(merged_vector, dtype=np.float64).reshape(-1)
    vecs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in task_vectors]
    if not vecs:
        raise LengthMismatchError("At least one task vector is required")
    for i, v in enumerate(vecs):
        if v.shape != tau.shape:
            raise LengthMismatchError("Task vector length differs from merged", detail={"task": i, "task_len": v.size, "merged": tau.size})
    k = len(vecs)
    cfg.check_target(k)
    alpha = cfg.resolve_alpha(k)

    s, retained = [], []
    for v in vecs:
        nsq = float(v @ v)
        keep = bool(retained_mask(nsq, np.sqrt(nsq), cfg.epsilon_resp))
        retained.append(keep)
        s.append(float(tau @ v) / nsq if keep else np.nan)

    gamma = 1.0
    if np.any(tau):
        if cfg.mode is CalibrationMode.PREFERENCE:
            t = int(cfg.target_task)
            if retained[t]:
                gamma = 1.0 / max(alpha, s[t])
        else:
            kept = [x for x, keep in zip(s, retained) if keep]
            if kept:
                gamma = calibration_factor(kept, alpha)
    norm = float(np.linalg.norm(tau))
    return CalibrationResult(
        gamma=np.array([gamma]),
        sigma=np.array([norm]),
        sigma_tilde=np.array([gamma * norm]),
        delta=gamma * tau,
        retained_counts=np.array([sum(retained)]),
        alpha=alpha,
    )


def calibrate_vector(task_vectors: Sequence[np.ndarray], merged_vector: np.ndarray, cfg: CalibrationConfig) -> np.ndarray:
    return calibrate_vector_result(task_vectors, merged_vector, cfg).delta


# ---------- store level ----------
def is_selected(name: str, include: Sequence[str] = (), exclude: Sequence[str] = ()) -> bool:
    if include and not any(fnmatch.fnmatchcase(name, p) for p in include):
        return False
    return not any(fnmatch.fnmatchcase(name, p) for p in exclude)


def calibrate_tensor(
    name: str,
    task_tensors: Sequence[np.ndarray],
    merged: np.ndarray,
    cfg: CalibrationConfig,
    *,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> Tuple[np.ndarray, Optional[CalibrationResult]]:
    """Calibrate one parameter of any rank; scalars and empty tensors pass through."""
    log = for_parameter(logger, name)
    try:
        if merged.ndim >= 2 and merged.size > 0:
            result = calibrate_matrix([unfold(t) for t in task_tensors], unfold(merged), cfg, max_sweeps=max_sweeps)
            out = result.delta.reshape(merged.shape)
        elif merged.ndim == 1 and merged.size > 0:
            result = calibrate_vector_result(task_tensors, merged, cfg)
            out = result.delta
        else:
            log.debug("pass-through ndim=%d size=%d", merged.ndim, merged.size)
            return merged, None
    except SvcMergeError as exc:
        raise exc.with_parameter(name)
    log.debug(
        "calibrated rank=%d gamma[min=%.4f max=%.4f] |dW|=%.4e -> %.4e",
        result.rank, float(result.gamma.min()), float(result.gamma.max()), frobenius(merged), frobenius(out),
    )
    return out, result


def calibrate_store(
    deltas: Sequence[DeltaStore],
    merged: MergedDelta,
    cfg: CalibrationConfig,
    *,
    include: Sequence[str] = (),
    exclude: Sequence[str] = (),
    workers: int = 1,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> MergedDelta:
    check_parameter_sets(deltas)
    k = len(deltas)
    cfg.check_target(k)
    names = list(merged.names())
    for name in names:
        if name not in deltas[0]:
            raise DimensionMismatchError("Merged parameter has no task deltas", parameter=name)

    def _one(name: str) -> Tuple[str, np.ndarray, Optional[CalibrationResult]]:
        if not is_selected(name, include, exclude):
            return name, merged[name], None
        out, result = calibrate_tensor(name, [d[name] for d in deltas], merged[name], cfg, max_sweeps=max_sweeps)
        return name, out, result

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(_one, names))
    else:
        rows = [_one(n) for n in names]

    tensors: Dict[str, np.ndarray] = {}
    results: Dict[str, CalibrationResult] = {}
    for name, out, result in rows:
        tensors[name] = out
        if result is not None:
            results[name] = result
    logger.info("Calibrated %d of %d parameter(s) (alpha=%s, mode=%s, basis=%s)",
                len(results), len(names), cfg.resolve_alpha(k), cfg.mode.value, cfg.basis.value)
    return replace(merged, tensors=tensors, calibration=results)


def alpha_profile(table: ResponseTable, sigma: np.ndarray, alphas: Sequence[float], cfg: CalibrationConfig) -> List[Dict[str, float]]:
    """For each α: mean γ and ||ΔW̃||_F / ||ΔW_merge||_F (from the spectrum alone)."""
    base = float(np.sqrt((sigma ** 2).sum()))
    rows = []
    for a in alphas:
        gamma = subspace_factors(table, a, cfg)
        ratio = float(np.sqrt(((gamma * sigma) ** 2).sum())) / base if base > 0 else 1.0
        rows.append({"alpha": float(a), "mean_gamma": float(gamma.mean()), "norm_ratio": ratio})
    return rows
