"""Subspace responses, projection coefficients and the singular-value gap.

For a merged task matrix ΔW_merge = U diag(σ) V^T and task matrices ΔW_i:

    a_i^r     = (u^r)^T ΔW_i                      task response in subspace r
    a_merge^r = (u^r)^T ΔW_merge = σ^r (v^r)^T
    s_i^r     = <a_merge^r, a_i^r> / ||a_i^r||^2  projection coefficient
    I_i^r     = (s_i^r - 1)^2 ||a_i^r||^2         interference energy
    γ_i^r*    = 1 / s_i^r if s_i^r > 0 else 0     optimal task-wise scaling

With ``Basis.ROW`` the right singular vectors are used instead
(a_i^r = ΔW_i v^r, a_merge^r = σ^r u^r).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import (
    DegenerateResponseError,
    DimensionMismatchError,
    LengthMismatchError,
    NonUnitDirectionError,
)
from .linalg import SpectralDecomposition, as_matrix, frobenius

logger = logging.getLogger("svcmerge.spectral")

DEFAULT_RESPONSE_EPS = 1e-9
DEFAULT_NOISE_FLOOR = 1e-12
MERGED = "merged"


class Basis(str, Enum):
    COLUMN = "column"
    ROW = "row"


@dataclass(frozen=True, eq=False)
class SubspaceResponse:
    r: int
    task: Union[int, str]
    vector: np.ndarray
    norm_sq: float
    # ||ΔW_i||_F of the matrix the response came from; scales the degenerate-response threshold
    delta_norm: float = 0.0


@dataclass(frozen=True, eq=False)
class CrossTermMatrix:
    r: int
    g: np.ndarray


# ---------- shared kernels (one row per response) ----------
def _responses(directions: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Row r is directions[:, r]^T delta."""
    return directions.T @ delta


def _row_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, b)


def retained_mask(norm_sq, delta_norm: float, eps: float = DEFAULT_RESPONSE_EPS):
    """True where ||a_i|| > eps * max(1, ||ΔW_i||_F)."""
    return np.sqrt(norm_sq) > eps * max(1.0, float(delta_norm))


def _coefficients(merged: np.ndarray, responses: np.ndarray, norm_sq: np.ndarray, keep: np.ndarray) -> np.ndarray:
    s = np.full(norm_sq.shape, np.nan)
    s[keep] = _row_dots(merged[keep], responses[keep]) / norm_sq[keep]
    return s


def _gram(rows: np.ndarray) -> np.ndarray:
    g = rows @ rows.T
    return (g + g.T) / 2.0


def _scalar_or_array(out: np.ndarray):
    return float(out) if out.ndim == 0 else out


# ---------- single-subspace operations ----------
def subspace_response(u_r, delta, *, r: int = 1, task: Union[int, str] = MERGED, unit_tol: float = 1e-10) -> SubspaceResponse:
    u = np.asarray(u_r, dtype=np.float64)
    d = as_matrix(delta)
    if u.ndim != 1 or u.shape[0] != d.shape[0]:
        raise DimensionMismatchError("Direction length must equal the row count", detail={"u": u.shape, "delta": d.shape})
    if abs(float(np.linalg.norm(u)) - 1.0) > unit_tol:
        raise NonUnitDirectionError("Subspace direction must have unit norm", detail={"norm": float(np.linalg.norm(u))})
    a = _responses(u[:, None], d)[0]
    return SubspaceResponse(r=r, task=task, vector=a, norm_sq=float(a @ a), delta_norm=frobenius(d))


def projection_coefficient(a_merge: SubspaceResponse, a_i: SubspaceResponse, *, eps: float = DEFAULT_RESPONSE_EPS) -> float:
    """s = <a_merge, a_i> / ||a_i||^2; raises when ||a_i|| <= eps * max(1, ||ΔW_i||_F)."""
    if a_merge.r != a_i.r:
        raise DimensionMismatchError("Responses belong to different subspaces", detail={"merge": a_merge.r, "task": a_i.r})
    if a_merge.vector.shape != a_i.vector.shape:
        raise LengthMismatchError("Response lengths differ", detail={"merge": a_merge.vector.shape, "task": a_i.vector.shape})
    if not retained_mask(a_i.norm_sq, a_i.delta_norm, eps):
        raise DegenerateResponseError("Task response vanishes in this subspace", detail={"r": a_i.r, "norm_sq": a_i.norm_sq})
    norm_sq = np.array([a_i.norm_sq])
    return float(_coefficients(a_merge.vector[None, :], a_i.vector[None, :], norm_sq, np.array([True]))[0])


def interference_energy(s, norm_sq):
    """(s - 1)^2 ||a_i||^2; accepts scalars or arrays."""
    return _scalar_or_array((np.asarray(s, dtype=np.float64) - 1.0) ** 2 * np.asarray(norm_sq, dtype=np.float64))


def projection_residual(a_merge: np.ndarray, a_i: np.ndarray) -> float:
    """||Proj_{a_i}(a_merge) - a_i||^2 computed directly."""
    a_merge = np.asarray(a_merge, dtype=np.float64)
    a_i = np.asarray(a_i, dtype=np.float64)
    proj = (a_merge @ a_i) / (a_i @ a_i) * a_i
    diff = proj - a_i
    return float(diff @ diff)


def cross_term_matrix(responses: Sequence[SubspaceResponse]) -> CrossTermMatrix:
    if not responses:
        raise LengthMismatchError("At least one response is required")
    r = responses[0].r
    n = responses[0].vector.shape
    for resp in responses:
        if resp.r != r:
            raise DimensionMismatchError("Responses belong to different subspaces", detail={"expected": r, "got": resp.r})
        if resp.vector.shape != n:
            raise LengthMismatchError("Response lengths differ", detail={"expected": n, "got": resp.vector.shape})
    return CrossTermMatrix(r=r, g=_gram(np.stack([resp.vector for resp in responses])))


def optimal_scaling(s):
    """Minimiser over γ >= 0 of ||Proj_{a_i}(γ a_merge) - a_i||^2: 1/s for s > 0, else 0."""
    arr = np.asarray(s, dtype=np.float64)
    positive = arr > 0.0
    return _scalar_or_array(np.where(positive, 1.0 / np.where(positive, arr, 1.0), 0.0))


# ---------- whole-spectrum tables ----------
def task_responses(decomp: SpectralDecomposition, delta: np.ndarray, basis: Basis = Basis.COLUMN) -> np.ndarray:
    """All responses of one task, one row per subspace (R x n, or R x m for ROW)."""
    d = as_matrix(delta)
    if d.shape != decomp.shape:
        raise DimensionMismatchError("Task delta shape differs from the merged matrix", detail={"delta": d.shape, "merged": decomp.shape})
    if Basis(basis) is Basis.COLUMN:
        return _responses(decomp.u, d)
    return _responses(decomp.v, d.T)


def merged_responses(decomp: SpectralDecomposition, basis: Basis = Basis.COLUMN) -> np.ndarray:
    other = decomp.v if Basis(basis) is Basis.COLUMN else decomp.u
    return decomp.sigma[:, None] * other.T


@dataclass(frozen=True, eq=False)
class ResponseTable:
    """Per (task, subspace) quantities; rows are tasks, columns subspaces."""

    norm_sq: np.ndarray
    s: np.ndarray  # NaN where not retained
    retained: np.ndarray
    above_floor: np.ndarray

    @property
    def k(self) -> int:
        return int(self.norm_sq.shape[0])


def response_table(
    decomp: SpectralDecomposition,
    deltas: Sequence[np.ndarray],
    *,
    basis: Basis = Basis.COLUMN,
    eps: float = DEFAULT_RESPONSE_EPS,
    noise_floor: float = DEFAULT_NOISE_FLOOR,
) -> ResponseTable:
    merged = merged_responses(decomp, basis)
    k, rank = len(deltas), decomp.rank
    norm_sq = np.zeros((k, rank))
    s = np.full((k, rank), np.nan)
    retained = np.zeros((k, rank), dtype=bool)
    for i, delta in enumerate(deltas):
        a = task_responses(decomp, delta, basis)
        norm_sq[i] = _row_dots(a, a)
        retained[i] = retained_mask(norm_sq[i], frobenius(delta), eps)
        s[i] = _coefficients(merged, a, norm_sq[i], retained[i])
    sigma_max = decomp.sigma[0] if rank else 0.0
    above_floor = decomp.sigma > noise_floor * sigma_max
    return ResponseTable(norm_sq=norm_sq, s=s, retained=retained, above_floor=above_floor)


@dataclass(frozen=True, eq=False)
class SubspaceOverlapReport:
    sigma: np.ndarray
    s: np.ndarray
    gamma_opt: np.ndarray
    sigma_star: np.ndarray
    gap: np.ndarray
    interference: np.ndarray
    retained: np.ndarray
    above_floor: np.ndarray
    norm_sq: np.ndarray
    basis: Basis = Basis.COLUMN
    parameter: Optional[str] = None

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def k(self) -> int:
        return int(self.s.shape[0])

    def s_stats(self, r: int) -> Dict[str, Optional[float]]:
        """min/max/mean of the retained s_i^r for 0-based subspace r."""
        vals = self.s[self.retained[:, r], r]
        if vals.size == 0:
            return {"min_s": None, "max_s": None, "mean_s": None}
        return {"min_s": float(vals.min()), "max_s": float(vals.max()), "mean_s": float(vals.mean())}


def gap_report(
    decomp: SpectralDecomposition,
    deltas: Sequence[np.ndarray],
    *,
    basis: Basis = Basis.COLUMN,
    eps: float = DEFAULT_RESPONSE_EPS,
    noise_floor: float = DEFAULT_NOISE_FLOOR,
    parameter: Optional[str] = None,
    table: Optional[ResponseTable] = None,
) -> SubspaceOverlapReport:
    if table is None:
        table = response_table(decomp, deltas, basis=basis, eps=eps, noise_floor=noise_floor)
    s = table.s
    gamma_opt = np.where(table.retained, optimal_scaling(s), np.nan)
    interference = np.where(table.retained, interference_energy(np.nan_to_num(s, nan=1.0), table.norm_sq), 0.0)

    # Diagnostic reference: arithmetic mean of retained optimal scalings.
    counts = table.retained.sum(axis=0)
    totals = np.where(table.retained, gamma_opt, 0.0).sum(axis=0)
    mean_gamma = np.where(counts > 0, totals / np.maximum(counts, 1), 1.0)
    sigma_star = mean_gamma * decomp.sigma
    gap = decomp.sigma - sigma_star
    logger.debug("gap_report r=%d k=%d max_gap=%.3e", decomp.rank, len(deltas), float(gap.max()) if gap.size else 0.0)
    return SubspaceOverlapReport(
        sigma=decomp.sigma.copy(),
        s=s,
        gamma_opt=gamma_opt,
        sigma_star=sigma_star,
        gap=gap,
        interference=interference,
        retained=table.retained,
        above_floor=table.above_floor,
        norm_sq=table.norm_sq,
        basis=Basis(basis),
        parameter=parameter,
    )


def cross_terms(decomp: SpectralDecomposition, deltas: Sequence[np.ndarray], basis: Basis = Basis.COLUMN) -> List[CrossTermMatrix]:
    """Gram matrices G_r[i][j] = <a_i^r, a_j^r> for every subspace."""
    responses = [task_responses(decomp, d, basis) for d in deltas]  # K of R x n
    out = []
    for r in range(decomp.rank):
        rows = [SubspaceResponse(r=r + 1, task=i, vector=a[r], norm_sq=float(a[r] @ a[r])) for i, a in enumerate(responses)]
        out.append(cross_term_matrix(rows))
    return out


def cross_term_concentration(matrices: Sequence[CrossTermMatrix], top: Sequence[int]) -> Dict[int, Optional[float]]:
    """Share of off-diagonal cross-term mass held by the first k subspaces."""
    mass = np.array([np.abs(m.g).sum() - np.abs(np.diag(m.g)).sum() for m in matrices])
    total = float(mass.sum())
    out: Dict[int, Optional[float]] = {}
    for k in top:
        out[int(k)] = float(mass[:k].sum() / total) if total > 0 else None
    return out
