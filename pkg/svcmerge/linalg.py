"""Dense F64 kernel: one-sided Jacobi SVD, reconstruction and helpers.

Matrices are plain ``numpy.ndarray`` values of shape (m, n). The SVD works on
the taller orientation (m >= n) and rotates disjoint column pairs of a
round-robin schedule in one vectorised step, so a sweep costs n - 1 steps.
The rotations act on the transposed triangular factor of a column-sorted QR
factorisation, which keeps the working matrix n x n.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConvergenceError, DimensionMismatchError, LengthMismatchError, NonFiniteInputError

logger = logging.getLogger("svcmerge.linalg")

DEFAULT_MAX_SWEEPS = 100
_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Thin SVD ``A = U diag(sigma) V^T`` with R = min(m, n)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.u.shape[0]), int(self.v.shape[0])


def as_matrix(a, *, name: Optional[str] = None) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionMismatchError("Expected a non-empty 2D matrix", parameter=name, detail={"shape": m.shape})
    return m


@lru_cache(maxsize=64)
def _round_robin(n: int) -> Tuple[Tuple[np.ndarray, np.ndarray], ...]:
    """Pairings of n columns into n - 1 (or n) rounds of disjoint pairs."""
    players: List[int] = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a < 0 or b < 0:
                continue
            p.append(min(a, b))
            q.append(max(a, b))
        order = np.argsort(p, kind="stable")
        rounds.append((np.asarray(p, dtype=np.intp)[order], np.asarray(q, dtype=np.intp)[order]))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi_columns(a: np.ndarray, max_sweeps: int, tol: float) -> Tuple[np.ndarray, np.ndarray, int]:
    """Orthogonalise the columns of a. Returns (A V, V, sweeps)."""
    n = a.shape[1]
    work = a.copy()
    v = np.eye(n)
    if n == 1:
        return work, v, 0
    schedule = _round_robin(n)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p, q in schedule:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha) * np.sqrt(beta)
            if not active.any():
                continue
            rotated = True
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.where(active, np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            work[:, p], work[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return work, v, sweep
    raise ConvergenceError("Jacobi SVD did not converge", detail={"sweeps": max_sweeps, "shape": a.shape})


def _jacobi_tall(a: np.ndarray, max_sweeps: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotate a (m >= n); returns (X, Q W, perm) with X = R^T W having orthogonal columns.

    The columns are ordered by decreasing norm and a is reduced to its triangular
    factor (A P = Q R); the rotations then run on the n x n matrix R^T, which
    needs fewer sweeps than a itself. With R^T W = X, A = (Q W) diag(σ) (P X/σ)^T.
    """
    m, n = a.shape
    perm = np.argsort(-np.einsum("ij,ij->j", a, a), kind="stable")
    q, r = np.linalg.qr(a[:, perm])
    x, w, sweeps = _jacobi_columns(np.ascontiguousarray(r.T), max_sweeps, _EPS * m)
    logger.debug("jacobi shape=%s sweeps=%d", a.shape, sweeps)
    return x, q @ w, perm


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace columns not flagged in ``filled`` with unit vectors orthogonal to the rest."""
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(filled)]
    for j in np.flatnonzero(~filled):
        best, best_norm = None, -1.0
        for k in range(m):
            cand = np.zeros(m)
            cand[k] = 1.0
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            norm = float(np.linalg.norm(cand))
            if norm > best_norm:
                best, best_norm = cand, norm
            if norm > 0.5:
                break
        u[:, j] = best / best_norm
        basis.append(u[:, j])
    return u


def _apply_sign_convention(u: np.ndarray, v: np.ndarray) -> None:
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0


def svd(a, *, max_sweeps: int = DEFAULT_MAX_SWEEPS) -> SpectralDecomposition:
    mat = as_matrix(a)
    if not np.all(np.isfinite(mat)):
        raise NonFiniteInputError("SVD input contains non-finite values", detail={"shape": mat.shape})
    transposed = mat.shape[0] < mat.shape[1]
    tall = mat.T if transposed else mat

    x, left, perm = _jacobi_tall(tall, max_sweeps)
    sigma = np.linalg.norm(x, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, x, left = sigma[order], x[:, order], left[:, order]

    nonzero = sigma > 0.0
    right = np.zeros_like(x)
    right[:, nonzero] = x[:, nonzero] / sigma[nonzero]
    if not nonzero.all():
        right = _complete_basis(right, nonzero)
    v = np.empty_like(right)
    v[perm] = right
    u = left

    if transposed:
        u, v = v, u
    _apply_sign_convention(u, v)
    logger.debug("svd shape=%s sigma_max=%.3e", mat.shape, sigma[0] if sigma.size else 0.0)
    return SpectralDecomposition(u=u, sigma=sigma, v=v)


def reconstruct(d: SpectralDecomposition, sigma_override: Optional[Sequence[float]] = None) -> np.ndarray:
    s = d.sigma if sigma_override is None else np.asarray(sigma_override, dtype=np.float64)
    if s.shape != d.sigma.shape:
        raise LengthMismatchError("sigma_override length must equal R", detail={"expected": d.rank, "got": s.shape})
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise NonFiniteInputError("sigma_override must be finite and non-negative")
    return (d.u * s) @ d.v.T


def frobenius(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def unfold(t: np.ndarray) -> np.ndarray:
    """Flatten trailing dimensions: (d0, d1, ..., dk) -> (d0, d1*...*dk)."""
    return np.asarray(t, dtype=np.float64).reshape(t.shape[0], -1)
