"""Small dense factorizations: one-sided Jacobi SVD and a symmetric PSD root."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12
PSD_TOL = 1e-8


class ConvergenceError(np.linalg.LinAlgError):
    pass


def _check_matrix(m, name):
    m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} needs a 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name}: non-finite input")
    return m


def _rotation(alpha, beta, gamma):
    """Cosine/sine of the plane rotation that zeroes ``gamma``."""
    zeta = (beta - alpha) / (2.0 * gamma)
    if abs(zeta) > 1e150:
        t = 0.5 / zeta
    else:
        t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
    c = 1.0 / np.sqrt(1.0 + t * t)
    return c, c * t


def _complete_basis(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` not in ``keep`` by an orthonormal completion."""
    m, k = q.shape
    basis = [q[:, j] for j in range(k) if keep[j]]
    out = q.copy()
    candidates = iter(np.eye(m))
    for j in range(k):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):  # reorthogonalize once for stability
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                basis.append(v)
                out[:, j] = v
                break
    return out


def svd(m, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL):
    """Thin SVD ``m = U @ diag(s) @ V.T`` by one-sided (Hestenes) Jacobi.

    Returns ``(U, s, V)`` with ``k = min(rows, cols)`` columns each and
    ``s`` sorted descending.  Raises :class:`ConvergenceError` when the
    column pairs are not orthogonal to ``tol`` after ``max_sweeps`` sweeps.
    """
    m = _check_matrix(m, "svd")
    wide = m.shape[0] < m.shape[1]
    a = (m.T if wide else m).copy()
    rows, n = a.shape
    v = np.eye(n)

    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p], a[:, q]
                alpha, beta, gamma = ap @ ap, aq @ aq, ap @ aq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                c, s = _rotation(alpha, beta, gamma)
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise ConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    scale_ref = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    nonzero = sigma > 1e-14 * scale_ref
    u = np.zeros_like(a)
    u[:, nonzero] = a[:, nonzero] / sigma[nonzero]
    sigma = np.where(nonzero, sigma, 0.0)
    if not nonzero.all():
        u = _complete_basis(u, nonzero)
    if wide:
        return v, sigma, u
    return u, sigma, v


def jacobi_eigh(s, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, Q)`` with ascending eigenvalues and ``s = Q diag(w) Q.T``.
    """
    a = _check_matrix(s, "jacobi_eigh").copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    q = np.eye(n)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), q
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) <= tol * norm * 1e-3:
                    continue
                c, sn = _rotation(a[p, p], a[r, r], apr)
                # A <- J^T A J with J rotating the (p, r) plane
                colp, colr = a[:, p].copy(), a[:, r].copy()
                a[:, p], a[:, r] = c * colp - sn * colr, sn * colp + c * colr
                rowp, rowr = a[p, :].copy(), a[r, :].copy()
                a[p, :], a[r, :] = c * rowp - sn * rowr, sn * rowp + c * rowr
                a[p, r] = a[r, p] = 0.0
                qp, qr = q[:, p].copy(), q[:, r].copy()
                q[:, p], q[:, r] = c * qp - sn * qr, sn * qp + c * qr
    else:
        raise ConvergenceError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], q[:, order]


def psd_sqrt(s, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetric PSD square root.

    Eigenvalues in ``[-tol * max(1, |S|_2), 0)`` are treated as rounding
    noise and clamped to zero; anything more negative is an error.
    """
    s = _check_matrix(s, "psd_sqrt")
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"psd_sqrt needs a square matrix, got {s.shape}")
    size = max(1.0, float(np.abs(s).max()) if s.size else 1.0)
    if np.abs(s - s.T).max(initial=0.0) > tol * size:
        raise ValueError("psd_sqrt: matrix is not symmetric")
    w, q = jacobi_eigh(s)
    floor = -tol * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and w[0] < floor:
        raise ValueError(f"psd_sqrt: negative eigenvalue {w[0]:.3e}")
    root = q * np.sqrt(np.clip(w, 0.0, None))
    r = root @ q.T
    return 0.5 * (r + r.T)
