"""
Dense symmetric linear algebra used by the Newton solver.

The reduced systems are 12n x 12n with n at most a few dozen handles, so
everything here is dense.  ``sym_eig`` ships a cyclic Jacobi solver; the hot
path (``spd_project`` inside every Newton iteration) uses LAPACK through
numpy, and the test-suite cross-checks the two routes.
"""

import numpy as np
import scipy.linalg

__all__ = [
    'LinAlgError',
    'NotPositiveDefinite',
    'cholesky_solve',
    'jacobi_eigh',
    'sym_eig',
    'spd_project',
]

SYMMETRY_TOL = 1e-9


class LinAlgError(ValueError):
    pass


class NotPositiveDefinite(LinAlgError):
    pass


def _check_symmetric(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise LinAlgError(f'expected a square matrix, got shape {A.shape}')
    scale = max(1.0, np.max(np.abs(A)) if A.size else 0.0)
    if A.size and np.max(np.abs(A - A.T)) > SYMMETRY_TOL * scale:
        raise LinAlgError('matrix is not symmetric')
    return A


def cholesky_solve(A, b):
    """
    Solve ``A x = b`` for symmetric positive definite ``A``.

    Raises
    ------
    NotPositiveDefinite
        If a non-positive pivot is met.  Callers are expected to project
        the matrix with :func:`spd_project` first.
    """
    A = _check_symmetric(A)
    b = np.asarray(b, dtype=float)
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite('not positive definite') from exc
    return scipy.linalg.cho_solve(factor, b)


def jacobi_eigh(A, tol=1e-14, max_sweeps=100):
    """
    Cyclic Jacobi eigenvalue iteration for a symmetric matrix.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns.
    """
    A = _check_symmetric(A).copy()
    n = A.shape[0]
    V = np.eye(n)
    if n == 0:
        return np.zeros(0), V
    norm = np.linalg.norm(A)
    if norm == 0.0:
        return np.zeros(n), V

    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        raise LinAlgError('Jacobi iteration did not converge')

    w = np.diag(A).copy()
    order = np.argsort(w, kind='stable')
    return w[order], V[:, order]


def sym_eig(A, method='jacobi'):
    """
    Symmetric eigendecomposition ``A = V diag(w) V^T``.

    Parameters
    ----------
    A : ndarray, shape (d, d)
        Symmetric to within 1e-9 (relative).
    method : {'jacobi', 'lapack'}
        ``jacobi`` is the self-contained cyclic Jacobi solver, ``lapack``
        defers to ``numpy.linalg.eigh``.

    Returns
    -------
    w : ndarray, shape (d,)
        Eigenvalues, ascending.
    V : ndarray, shape (d, d)
        Orthonormal eigenvectors (columns).
    """
    if method == 'jacobi':
        return jacobi_eigh(A)
    if method == 'lapack':
        A = _check_symmetric(A)
        w, V = np.linalg.eigh(0.5 * (A + A.T))
        return w, V
    raise ValueError(f'unknown eigen method {method!r}')


def spd_project(A, floor, method='lapack'):
    """Clamp the spectrum of symmetric ``A`` from below at ``floor``."""
    A = _check_symmetric(A)
    A = 0.5 * (A + A.T)
    w, V = sym_eig(A, method=method)
    if w.size == 0 or w[0] >= floor:
        return A
    w = np.maximum(w, floor)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)
