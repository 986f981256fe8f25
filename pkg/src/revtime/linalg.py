"""Conjugate gradients with a recorded residual history."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConvergenceError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def conjugate_gradient(A, b, x0=None, tol=1e-8, max_iter=10000, M_inv_diag=None,
                       raise_on_fail=True) -> CGResult:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Stops when ``||b - A x|| <= tol * ||b||``.  ``history`` holds that relative
    residual after every iteration (entry 0 is the starting residual).
    ``M_inv_diag`` enables a diagonal (Jacobi) preconditioner.
    """
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CGResult(np.zeros(n), 0, True, [0.0])
    r = b - A @ x
    z = r * M_inv_diag if M_inv_diag is not None else r
    p = z.copy()
    rz = float(r @ z)
    hist = [float(np.linalg.norm(r)) / bnorm]
    if hist[0] <= tol:
        return CGResult(x, 0, True, hist)
    for k in range(1, max_iter + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0:
            raise ConvergenceError(f"operator not positive definite (p^T A p = {pAp:.3e})", hist)
        step = rz / pAp
        x += step * p
        r -= step * Ap
        hist.append(float(np.linalg.norm(r)) / bnorm)
        if hist[-1] <= tol:
            # guard against drift of the recursive residual
            true_res = float(np.linalg.norm(b - A @ x)) / bnorm
            hist[-1] = true_res
            if true_res <= tol:
                return CGResult(x, k, True, hist)
            r = b - A @ x
            z = r * M_inv_diag if M_inv_diag is not None else r
            p = z.copy()
            rz = float(r @ z)
            continue
        z = r * M_inv_diag if M_inv_diag is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    if raise_on_fail:
        raise ConvergenceError(
            f"CG did not reach relative residual {tol:.1e} in {max_iter} iterations "
            f"(last {hist[-1]:.3e})", hist)
    return CGResult(x, max_iter, False, hist)
