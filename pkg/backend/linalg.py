import logging
from typing import Tuple

import numpy as np

from errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)


def _symmetric_schur(a: np.ndarray, p: int, q: int) -> Tuple[float, float]:
    """Cosine-sine pair that zeroes a[p, q] of a symmetric matrix"""
    if a[p, q] == 0.0:
        return 1.0, 0.0
    tau = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
    if tau >= 0:
        t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
    else:
        t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
    c = 1.0 / np.sqrt(1.0 + t * t)
    return c, t * c


def jacobi_eigh(matrix: np.ndarray, tolerance: float = 1e-12,
                max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Args:
        matrix: Symmetric (f, f) array
        tolerance: Stop once the off-diagonal norm falls below tolerance times the diagonal norm
        max_sweeps: Upper bound on full sweeps over the upper triangle

    Returns:
        (eigenvalues ascending, eigenvectors as columns)
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains non-finite values")
    a = 0.5 * (a + a.T)
    size = a.shape[0]
    v = np.eye(size)

    for sweep in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tolerance * max(np.linalg.norm(np.diag(a)), np.finfo(float).tiny):
            break
        for p in range(size - 1):
            for q in range(p + 1, size):
                c, s = _symmetric_schur(a, p, q)
                if s == 0.0:
                    continue
                # a <- J^T a J with J the (p, q) plane rotation
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        logger.warning("Jacobi iteration did not converge in %d sweeps", max_sweeps)

    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues, kind="stable")
    return eigenvalues[order], v[:, order]


def feature_covariance(features: np.ndarray) -> np.ndarray:
    """Uncentered second moment S = Phi^T Phi / n"""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return features.T @ features / features.shape[0]


def ridge_whitening(eigenvalues: np.ndarray, eigenvectors: np.ndarray, lam: float) -> np.ndarray:
    """
    W = V diag((e + lam)^(-1/2)) V^T.

    Eigenvalues below zero (round-off on a PSD matrix) are clamped first.
    Raises NumericalError if some e + lam is not positive.
    """
    shifted = np.maximum(eigenvalues, 0.0) + lam
    if np.any(shifted <= 0.0):
        raise NumericalError(f"whitening ridge {lam} leaves a non-positive eigenvalue")
    return (eigenvectors * shifted ** -0.5) @ eigenvectors.T
