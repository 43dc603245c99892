"""Dense linear-algebra kernel: SVD, truncated factorization, norms, rank.

All matrices are plain 2-D float64 numpy arrays (row-major). The SVD is a
self-contained one-sided Jacobi implementation with a fixed sweep order and a
fixed sign convention, so results are bit-deterministic for a given input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "Matrix",
    "SvdResult",
    "FactorPair",
    "ConvergenceError",
    "as_matrix",
    "svd",
    "truncate",
    "numerical_rank",
    "frobenius_error",
    "cumulative_singular_fraction",
]

Matrix = np.ndarray

# Convergence contract for the Jacobi sweeps: off-diagonal Frobenius mass of
# G^T G must drop below JACOBI_TOL * ||W||_F within JACOBI_MAX_SWEEPS.
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60

DEFAULT_RANK_TOL = 1e-6


class ConvergenceError(RuntimeError):
    """Raised when the Jacobi sweeps fail to reach the convergence threshold."""


def as_matrix(x, name: str = "matrix") -> Matrix:
    """Validate and return `x` as a 2-D float64 array with finite entries."""
    w = np.asarray(x, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {w.shape}")
    if w.shape[0] < 1 or w.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        i, j = np.argwhere(~np.isfinite(w))[0]
        raise ValueError(f"{name} has non-finite entry at ({i}, {j})")
    return np.ascontiguousarray(w)


@dataclass
class SvdResult:
    """Full SVD triple W = U diag(sigma) V^T with descending singular values."""

    u: Matrix          # (n, r), orthonormal columns
    sigma: np.ndarray  # (r,), descending, >= 0
    v: Matrix          # (m, r), orthonormal columns
    r: int             # retained rank, min(n, m) for a full SVD


@dataclass
class FactorPair:
    """Rank-k factorization W ~ a @ b, holding k(n+m) weight parameters."""

    a: Matrix  # (n, k)
    b: Matrix  # (k, m)
    k: int

    def product(self) -> Matrix:
        return self.a @ self.b

    def param_count(self) -> int:
        n, k = self.a.shape
        m = self.b.shape[1]
        return k * (n + m)


@njit(cache=True)
def _jacobi_orthogonalize(g, v, thresh, max_sweeps):
    """One-sided Jacobi: orthogonalize rows of `g`, accumulating rotations in `v`.

    `g` is the transposed input (rows here are columns of the original matrix)
    so the inner loops run over contiguous memory. Returns the number of sweeps
    used, or -1 if the off-diagonal mass never fell below `thresh`.
    """
    m, n = g.shape
    # Cached squared row norms, updated incrementally after each rotation.
    sq = np.empty(m)
    for p in range(m):
        acc = 0.0
        for i in range(n):
            acc += g[p, i] * g[p, i]
        sq[p] = acc
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(m - 1):
            for q in range(p + 1, m):
                dot = 0.0
                for i in range(n):
                    dot += g[p, i] * g[q, i]
                off += 2.0 * dot * dot
        if np.sqrt(off) <= thresh:
            return sweep
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = 0.0
                for i in range(n):
                    apq += g[p, i] * g[q, i]
                if apq == 0.0:
                    continue
                zeta = (sq[q] - sq[p]) / (2.0 * apq)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(n):
                    gp = g[p, i]
                    gq = g[q, i]
                    g[p, i] = c * gp - s * gq
                    g[q, i] = s * gp + c * gq
                for i in range(m):
                    vp = v[p, i]
                    vq = v[q, i]
                    v[p, i] = c * vp - s * vq
                    v[q, i] = s * vp + c * vq
                sq[p] = sq[p] - t * apq
                sq[q] = sq[q] + t * apq
    # Final check: the last round of rotations may have pushed us under.
    off = 0.0
    for p in range(m - 1):
        for q in range(p + 1, m):
            dot = 0.0
            for i in range(n):
                dot += g[p, i] * g[q, i]
            off += 2.0 * dot * dot
    if np.sqrt(off) <= thresh:
        return max_sweeps
    return -1


def _complete_basis(u: Matrix, col: int) -> None:
    # Replace column `col` with the standard basis vector least covered by
    # the other columns. With j orthonormal columns filled, the best
    # candidate's squared residual is at least (n - j) / n, so the norm
    # below cannot degenerate while j < n.
    n = u.shape[0]
    others = [j for j in range(u.shape[1]) if j != col]
    basis = u[:, others]
    cand = int(np.argmin(np.sum(basis * basis, axis=1)))
    e = np.zeros(n)
    e[cand] = 1.0
    for _ in range(2):
        e -= basis @ (basis.T @ e)
    norm = np.sqrt(e @ e)
    if norm <= 1e-8:
        raise ConvergenceError("could not complete an orthonormal basis")
    u[:, col] = e / norm


def svd(w: Matrix) -> SvdResult:
    """Full singular value decomposition of a dense real matrix.

    Deterministic one-sided Jacobi. Sign convention: the first nonzero entry of
    each left-singular column is non-negative. Raises ConvergenceError if the
    sweeps do not converge, and ValueError on non-finite input.
    """
    w = as_matrix(w, "svd input")
    n, m = w.shape
    transpose = m > n
    work = w.T if transpose else w
    rows, cols = work.shape  # cols == min(n, m)

    g = np.ascontiguousarray(work.T.copy())  # (cols, rows): rows are columns of `work`
    rot = np.eye(cols)
    wnorm = float(np.sqrt(np.sum(w * w)))
    sweeps = _jacobi_orthogonalize(g, rot, JACOBI_TOL * wnorm, JACOBI_MAX_SWEEPS)
    if sweeps < 0:
        raise ConvergenceError(
            f"one-sided Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps "
            f"for shape {w.shape}"
        )

    sig = np.sqrt(np.sum(g * g, axis=1))
    order = np.argsort(-sig, kind="stable")
    sig = sig[order]
    gu = g[order].T          # (rows, cols): unnormalized left singular vectors
    gv = rot[order].T        # (cols, cols): right singular vectors of `work`

    # Orthonormalize the left factor. Two projection passes: one pass leaves
    # noise-level columns visibly non-orthogonal to earlier ones. Columns
    # whose direction is numerically lost (sigma at roundoff level) are
    # replaced by a deterministic completion.
    u = np.empty_like(gu)
    dep_tol = max(rows, cols) * np.finfo(np.float64).eps * (sig[0] if sig[0] > 0 else 1.0)
    for j in range(cols):
        col = gu[:, j].copy()
        basis = u[:, :j]
        for _ in range(2):
            col -= basis @ (basis.T @ col)
        norm = np.sqrt(col @ col)
        if norm <= dep_tol:
            _complete_basis(u[:, : j + 1], j)
        else:
            u[:, j] = col / norm

    if transpose:
        u, gv = gv, u

    # Sign convention: first nonzero entry of each column of u non-negative.
    for j in range(u.shape[1]):
        nz = np.nonzero(u[:, j])[0]
        if nz.size and u[nz[0], j] < 0:
            u[:, j] = -u[:, j]
            gv[:, j] = -gv[:, j]

    return SvdResult(u=u, sigma=sig, v=gv, r=int(min(n, m)))


def truncate(s: SvdResult, k: int) -> FactorPair:
    """Keep the top-k singular triples: a = U_k diag(sigma_k), b = V_k^T."""
    if not 1 <= k <= s.r:
        raise ValueError(f"rank k={k} out of range [1, {s.r}]")
    a = s.u[:, :k] * s.sigma[:k]
    b = np.ascontiguousarray(s.v[:, :k].T)
    return FactorPair(a=a, b=b, k=int(k))


def numerical_rank(w: Matrix, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values exceeding rel_tol times the largest one."""
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    sig = svd(w).sigma
    if sig[0] == 0.0:
        return 0
    return int(np.sum(sig > rel_tol * sig[0]))


def frobenius_error(w: Matrix, f) -> float:
    """Frobenius norm of the approximation residual ||w - f||_F.

    `f` may be a FactorPair (its product is used) or a plain matrix.
    """
    w = as_matrix(w, "reference matrix")
    approx = f.product() if isinstance(f, FactorPair) else as_matrix(f, "approximation")
    if approx.shape != w.shape:
        raise ValueError(f"approximation shape {approx.shape} incompatible with {w.shape}")
    d = w - approx
    return float(np.sqrt(np.sum(d * d)))


def cumulative_singular_fraction(w: Matrix, k: int) -> float:
    """Fraction of the singular value sum captured by the top k values."""
    w = as_matrix(w, "matrix")
    if not 1 <= k <= min(w.shape):
        raise ValueError(f"k={k} out of range [1, {min(w.shape)}]")
    sig = svd(w).sigma
    total = float(np.sum(sig))
    if total == 0.0:
        return 1.0
    return float(np.sum(sig[:k]) / total)
