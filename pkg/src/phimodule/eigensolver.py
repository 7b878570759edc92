"""Partial eigendecomposition of sparse symmetric PSD matrices.

``lobpcg`` is the workhorse; ``dense_eig_oracle`` is an independent cyclic
Jacobi solver used as a reference and as the fallback for small problems.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .molgraph import BatchedLaplacian

__all__ = [
    "SpectralBasis",
    "EigensolverError",
    "canonical_signs",
    "NonConvergenceError",
    "dense_eig_oracle",
    "lobpcg",
    "batched_spectral_basis",
    "spectral_projector",
    "eigen_clusters",
]

log = logging.getLogger(__name__)

DENSE_LIMIT = 512


class EigensolverError(ValueError):
    pass


class NonConvergenceError(EigensolverError):
    """LOBPCG failed to reach tolerance even after a retry."""


@dataclass
class SpectralBasis:
    U: np.ndarray             # (n, k) orthonormal columns
    lam: np.ndarray           # (k,) ascending
    residual_norms: np.ndarray
    graph_id: int = 0
    converged: bool = True
    iterations: int = 0

    @property
    def k(self) -> int:
        return len(self.lam)

    @property
    def n(self) -> int:
        return self.U.shape[0]


def _check_symmetric(L, what="matrix"):
    if sp.issparse(L):
        diff = abs(L - L.T)
        err = diff.max() if diff.nnz else 0.0
        scale = abs(L).max() if L.nnz else 0.0
    else:
        err = np.abs(L - L.T).max() if L.size else 0.0
        scale = np.abs(L).max() if L.size else 0.0
    if err > 1e-12 * max(1.0, scale):
        raise EigensolverError(f"{what} is not symmetric (max asymmetry {err:.3e})")


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint index pairings whose union over rounds covers every pair once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        top, bot = players[: m // 2], players[m // 2:][::-1]
        p, q = [], []
        for a, b in zip(top, bot):
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def dense_eig_oracle(A, tol: float = 1e-12, max_sweeps: int = 60):
    """All eigenpairs of a dense symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once; pairs are grouped into
    disjoint rounds so the rotations of one round are applied together.
    Iteration stops once the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||A||_F)``.

    Returns ``(eigenvalues ascending, eigenvectors as columns)``.
    """
    A = np.array(A.toarray() if sp.issparse(A) else A, dtype=np.float64)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise EigensolverError(f"square matrix required, got {A.shape}")
    if n > DENSE_LIMIT:
        raise EigensolverError(f"dense oracle limited to n <= {DENSE_LIMIT}, got {n}")
    _check_symmetric(A)
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V
    thresh = tol * max(1.0, float(np.linalg.norm(A)))
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = A - np.diag(A.diagonal())
        if np.linalg.norm(off) <= thresh:
            break
        for P, Q in rounds:
            apq = A[P, Q]
            nz = apq != 0.0
            if not nz.any():
                continue
            app, aqq = A[P, P], A[Q, Q]
            tau = np.zeros_like(apq)
            # tiny a_pq overflows tau to inf, which correctly yields t = 0
            with np.errstate(over="ignore"):
                tau[nz] = (aqq[nz] - app[nz]) / (2.0 * apq[nz])
                sign = np.where(tau >= 0.0, 1.0, -1.0)
                t = np.where(nz, sign / (np.abs(tau) + np.hypot(1.0, tau)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            AP, AQ = A[:, P].copy(), A[:, Q]
            A[:, P] = AP * c - AQ * s
            A[:, Q] = AP * s + AQ * c
            AP, AQ = A[P, :].copy(), A[Q, :]
            A[P, :] = c[:, None] * AP - s[:, None] * AQ
            A[Q, :] = s[:, None] * AP + c[:, None] * AQ
            A[P, Q] = 0.0
            A[Q, P] = 0.0
            VP, VQ = V[:, P].copy(), V[:, Q]
            V[:, P] = VP * c - VQ * s
            V[:, Q] = VP * s + VQ * c
    else:
        off = A - np.diag(A.diagonal())
        if np.linalg.norm(off) > thresh:
            log.warning("Jacobi oracle hit max_sweeps with off-norm %.3e", np.linalg.norm(off))
    w = A.diagonal().copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def _orthonormalize(V: np.ndarray, against=(), rtol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis for span(V) with span(against) projected out.

    Columns are unit-normalized, projected twice, and reduced with a thin
    SVD that drops directions whose singular value falls below ``rtol``
    (i.e. columns that were mostly inside ``against`` or each other).  A
    second projection + SVD pass removes the rounding the first one leaves.
    """
    if V.shape[1] == 0:
        return V
    norms = np.linalg.norm(V, axis=0)
    nz = norms > 0.0
    if not nz.any():
        return V[:, :0]
    V = V[:, nz] / norms[nz]
    for thresh in (rtol, 0.5):
        for B in against:
            if B is not None and B.shape[1]:
                V = V - B @ (B.T @ V)
                V = V - B @ (B.T @ V)
        Uv, sv, _ = np.linalg.svd(V, full_matrices=False)
        V = Uv[:, sv > thresh]
        if V.shape[1] == 0:
            return V
    return V


def _select(theta: np.ndarray, m: int, largest: bool) -> np.ndarray:
    order = np.argsort(theta, kind="stable")
    return order[::-1][:m] if largest else order[:m]


def canonical_signs(U: np.ndarray, atol: float = 1e-10) -> np.ndarray:
    """Flip columns so each has a non-negative entry sum.

    The convention does not depend on node order, which keeps ``sum(rho)``
    permutation invariant.  Columns whose sum is below ``atol`` fall back to
    a positive largest-magnitude entry.
    """
    s = U.sum(axis=0)
    pivot = U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])]
    sign = np.where(np.abs(s) > atol, np.sign(s), np.sign(pivot))
    sign[sign == 0] = 1.0
    return U * sign


def _finish(L, U, lam, graph_id, converged, iterations):
    order = np.argsort(lam, kind="stable")
    U, lam = canonical_signs(U[:, order]), lam[order]
    R = np.asarray(L @ U) - U * lam
    return SpectralBasis(U, lam, np.linalg.norm(R, axis=0), graph_id, converged, iterations)


def lobpcg(L, k: int, tol: float = 1e-8, max_iter: int = 200, seed: int = 0,
           largest: bool = False, graph_id: int = 0) -> SpectralBasis:
    """``k`` extremal eigenpairs of a symmetric matrix (smallest by default).

    A working block of ``2k`` vectors is iterated (the extra ``k`` act as
    guards for clustered spectra) with Jacobi preconditioning and soft
    locking of converged columns.  Problems with ``k >= n`` or ``k > n/4``
    go straight to the dense Jacobi oracle.
    """
    if k < 1:
        raise EigensolverError("k must be >= 1")
    if tol <= 0:
        raise EigensolverError("tol must be positive")
    L = sp.csr_matrix(L) if not sp.issparse(L) else L.tocsr()
    n = L.shape[0]
    if L.shape != (n, n):
        raise EigensolverError(f"square matrix required, got {L.shape}")
    _check_symmetric(L, "Laplacian")
    k = min(k, n)
    if k >= n or k > n / 4:
        w, V = dense_eig_oracle(L.toarray())
        idx = _select(w, k, largest)
        return _finish(L, V[:, idx], w[idx], graph_id, True, 0)

    m = min(2 * k, n)
    rng = np.random.default_rng(seed)
    diag = L.diagonal()
    prec = np.where(np.abs(diag) > 1e-14, 1.0 / np.where(diag == 0, 1.0, diag), 1.0)

    X = _orthonormalize(rng.standard_normal((n, m)))
    AX = np.asarray(L @ X)
    theta, C = np.linalg.eigh(0.5 * (X.T @ AX + AX.T @ X))
    idx = _select(theta, m, largest)
    X, AX, theta = X @ C[:, idx], AX @ C[:, idx], theta[idx]
    P = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        R = AX - X * theta
        rnorm = np.linalg.norm(R, axis=0)
        if np.all(rnorm[:k] <= tol):
            converged = True
            break
        active = rnorm > tol
        W = _orthonormalize(prec[:, None] * R[:, active], against=(X,))
        blocks, ablocks = [X, W], [AX, np.asarray(L @ W)]
        if P is not None and P.shape[1]:
            Pn = _orthonormalize(P[:, active], against=(X, W))
            if Pn.shape[1]:
                blocks.append(Pn)
                ablocks.append(np.asarray(L @ Pn))
        S = np.hstack(blocks)
        AS = np.hstack(ablocks)
        G = S.T @ AS
        G = 0.5 * (G + G.T)
        vals, C = np.linalg.eigh(G)
        sel = _select(vals, m, largest)
        Cx = C[:, sel]
        X = S @ Cx
        AX = AS @ Cx
        theta = vals[sel]
        P = S[:, m:] @ Cx[m:, :]
        # columns of X drift from orthonormality only by rounding; refresh cheaply
        if it % 10 == 0:
            Xo = _orthonormalize(X)
            if Xo.shape[1] == m:
                G = Xo.T @ np.asarray(L @ Xo)
                theta, C = np.linalg.eigh(0.5 * (G + G.T))
                idx = _select(theta, m, largest)
                X = Xo @ C[:, idx]
                AX = np.asarray(L @ X)
                theta = theta[idx]
                P = None
    idx = _select(theta, k, largest)
    basis = _finish(L, X[:, idx], theta[idx], graph_id, converged, it)
    if not converged:
        log.info("lobpcg: %d iterations, max residual %.3e > tol %.1e",
                 it, basis.residual_norms.max(), tol)
    return basis


def batched_spectral_basis(batch: BatchedLaplacian, k: int, tol: float = 1e-8,
                           seed: int = 0, max_iter: int = 200,
                           largest: bool = False) -> list[SpectralBasis]:
    """Independent solves per block with ``k_eff = min(k, n_block)``."""
    out = []
    for g, block in enumerate(batch.blocks):
        n = block.shape[0]
        if n < 1:
            raise EigensolverError(f"block {g} is empty")
        out.append(lobpcg(block, min(k, n), tol=tol, max_iter=max_iter,
                          seed=seed + g, largest=largest, graph_id=g))
    return out


def eigen_clusters(lam: np.ndarray, gap: float) -> list[np.ndarray]:
    """Group sorted eigenvalues whose consecutive spacing is below ``gap``."""
    groups, cur = [], [0]
    for i in range(1, len(lam)):
        if lam[i] - lam[i - 1] < gap:
            cur.append(i)
        else:
            groups.append(np.array(cur))
            cur = [i]
    if len(lam):
        groups.append(np.array(cur))
    return groups


def spectral_projector(U: np.ndarray) -> np.ndarray:
    return U @ U.T
