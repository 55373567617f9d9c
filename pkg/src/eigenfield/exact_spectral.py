"""Exact dense eigensolvers: the Ncut baseline and oracles for the optimizer.

All solvers are dense and symmetric by design; robustness matters more than
scale here. Asymmetric graphs (attention affinities are asymmetric) are
symmetrized as (A + A^T)/2 with a warning rather than rejected.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from eigenfield.graph_builder import AffinityGraph, ZeroDegreeError


@dataclass(frozen=True)
class EigenPair:
    value: float
    vector: np.ndarray  # unit 2-norm


def _dense_symmetric(graph: AffinityGraph) -> np.ndarray:
    A = graph.matrix.toarray() if graph.is_sparse else np.asarray(graph.matrix)
    A = A.astype(np.float64)
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-12):
        warnings.warn(
            "asymmetric affinity matrix symmetrized as (A + A^T)/2",
            stacklevel=3,
        )
        A = (A + A.T) / 2.0
    return A


def solve_ncut(graph: AffinityGraph, m: int) -> list[EigenPair]:
    """First m generalized eigenpairs of (D - A) x = lambda D x, ascending.

    For a connected graph the smallest eigenvalue is 0 with a constant
    eigenvector; eigenvalue-0 multiplicity equals the number of connected
    components. Eigenvectors are returned at unit 2-norm, and every reported
    pair is residual-checked against the generalized system.
    """
    n = graph.n_nodes
    if m > n:
        raise ValueError(f"requested {m} eigenpairs from an {n}-node graph")
    A = _dense_symmetric(graph)
    d = A.sum(axis=1)
    if d.min() <= 0:
        bad = int(np.argmin(d))
        raise ZeroDegreeError(f"node {bad} has zero degree")
    L = np.diag(d) - A
    # D^{-1/2} L D^{-1/2} is symmetric with the same generalized eigenvalues.
    inv_sqrt = 1.0 / np.sqrt(d)
    sym = inv_sqrt[:, None] * L * inv_sqrt[None, :]
    sym = (sym + sym.T) / 2.0
    vals, vecs = scipy.linalg.eigh(sym)
    pairs = []
    d_norm = float(np.max(d))
    for j in range(m):
        x = inv_sqrt * vecs[:, j]
        x = x / np.linalg.norm(x)
        lam = float(vals[j])
        residual = np.linalg.norm(L @ x - lam * d * x)
        if residual >= 1e-8 * d_norm:
            raise RuntimeError(
                f"eigenpair {j} failed the residual bound: {residual:.3e} "
                f">= 1e-8 * {d_norm:.3e}"
            )
        pairs.append(EigenPair(value=lam, vector=x))
    return pairs


def sym_randomwalk_topc(graph: AffinityGraph, C: int) -> list[EigenPair]:
    """C leading eigenpairs of (D^-1 A + (D^-1 A)^T) / 2, descending.

    This is the quantity whose per-channel Rayleigh quotients the gradient
    optimizer drives toward 1, so its top-C eigenspace is the oracle for
    single-graph optimization. Note the spectral radius of D^-1 A itself is 1,
    but the symmetrized operator can slightly exceed 1 when degrees vary.
    """
    if C < 0:
        raise ValueError("C must be >= 0")
    if C == 0:
        return []
    n = graph.n_nodes
    if C > n:
        raise ValueError(f"requested {C} eigenpairs from an {n}-node graph")
    A = graph.matrix.toarray() if graph.is_sparse else np.asarray(graph.matrix)
    A = A.astype(np.float64)
    d = A.sum(axis=1)
    if d.min() <= 0:
        bad = int(np.argmin(d))
        raise ZeroDegreeError(f"node {bad} has zero degree")
    P = A / d[:, None]
    S = (P + P.T) / 2.0
    vals, vecs = scipy.linalg.eigh(S)
    pairs = []
    for j in range(n - 1, n - 1 - C, -1):
        x = vecs[:, j] / np.linalg.norm(vecs[:, j])
        pairs.append(EigenPair(value=float(vals[j]), vector=x))
    return pairs


def principal_angles(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Principal angles between span(U) and span(V), in degrees, ascending."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if U.ndim != 2 or V.ndim != 2:
        raise ValueError("inputs must be 2-D bases (columns span the subspace)")
    for name, M in (("U", U), ("V", V)):
        if np.linalg.matrix_rank(M) < M.shape[1]:
            raise ValueError(f"{name} has linearly dependent columns")
    Qu, _ = np.linalg.qr(U)
    Qv, _ = np.linalg.qr(V)
    sigma = scipy.linalg.svd(Qu.T @ Qv, compute_uv=False)
    sigma = np.clip(sigma, -1.0, 1.0)
    # singular values come out descending, so arccos is already ascending
    return np.degrees(np.arccos(sigma))
