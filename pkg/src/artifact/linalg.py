"""Preconditioned conjugate gradients and small solver helpers."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """Raised when an iterative solve hits its iteration cap.

    The residual history is kept on the exception so callers can report it.
    """

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


def pcg(apply_a, b, apply_m=None, x0=None, rtol=1e-10, maxiter=10_000, project=None):
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A``.

    ``apply_a`` and ``apply_m`` are callables. ``project`` is applied to the
    residual and search direction each iteration, which is how singular
    systems restricted to a complement (zero mean) are handled.

    Returns ``(x, info)`` with ``info`` holding the iteration count and the
    relative residual history.
    """
    b = np.asarray(b, dtype=float)
    if project is not None:
        b = project(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    history = []
    if bnorm == 0.0:
        return np.zeros_like(b), {"iterations": 0, "residuals": [0.0]}
    r = b - apply_a(x)
    if project is not None:
        r = project(r)
    z = r if apply_m is None else apply_m(r)
    if project is not None:
        z = project(z)
    p = z.copy()
    rz = r @ z
    history.append(np.linalg.norm(r) / bnorm)
    for it in range(1, maxiter + 1):
        if history[-1] <= rtol:
            return x, {"iterations": it - 1, "residuals": history}
        ap = apply_a(p)
        pap = p @ ap
        if pap <= 0.0:
            raise SolverError("operator is not positive definite on the search space", history)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        if project is not None:
            r = project(r)
        history.append(np.linalg.norm(r) / bnorm)
        z = r if apply_m is None else apply_m(r)
        if project is not None:
            z = project(z)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if history[-1] <= rtol:
        return x, {"iterations": maxiter, "residuals": history}
    raise SolverError(
        f"PCG did not reach rtol={rtol:g} in {maxiter} iterations "
        f"(last residual {history[-1]:.3e})",
        history,
    )


class CompatibilityError(ValueError):
    """Data of a singular problem is not in the range of the operator."""


def jacobi(matrix):
    d = matrix.diagonal().copy()
    d[d == 0] = 1.0
    inv = 1.0 / d
    return lambda r: inv * r


class Factorized:
    """Sparse LU of a nonsingular matrix, exposed as a callable.

    With ``symmetric=True`` the diagonal is used as pivot sequence, which
    keeps the symmetric minimum degree ordering intact for SPD matrices.
    """

    def __init__(self, matrix, symmetric=True):
        self.shape = matrix.shape
        if symmetric:
            self._lu = spla.splu(
                sp.csc_matrix(matrix), permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0, options={"SymmetricMode": True},
            )
        else:
            self._lu = spla.splu(sp.csc_matrix(matrix))

    def __call__(self, rhs):
        return self._lu.solve(np.asarray(rhs, dtype=float))


class NeumannSolver:
    """Solver for a connected graph Laplacian with a one-dimensional kernel.

    The constant vector spans the kernel. One node is pinned for the
    factorization and the answer is shifted to zero (weighted) mean.
    """

    def __init__(self, matrix, weights=None):
        n = matrix.shape[0]
        self.n = n
        self.weights = np.ones(n) if weights is None else np.asarray(weights, float)
        self.matrix = sp.csr_matrix(matrix)
        keep = np.ones(n)
        if n:
            keep[0] = 0.0
        mask = sp.diags(keep)
        pinned = mask @ self.matrix @ mask + sp.diags(1.0 - keep)
        self._lu = Factorized(pinned) if n > 0 else None

    def zero_mean(self, x):
        return x - (self.weights @ x) / self.weights.sum()

    def __call__(self, rhs):
        if self.n == 0:
            return np.zeros(0)
        rhs = np.asarray(rhs, dtype=float)
        # the range is orthogonal to constants
        b = rhs - rhs.mean()
        b = b.copy()
        b[0] = 0.0
        return self.zero_mean(self._lu(b))
