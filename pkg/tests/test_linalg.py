import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st

from revtime.linalg import ConvergenceError, conjugate_gradient


def _spd(n, seed):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=0.2, random_state=rng)
    return (A @ A.T + sp.identity(n) * 0.5).tocsr(), rng.standard_normal(n)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 60), seed=st.integers(0, 10_000), jacobi=st.booleans())
def test_cg_matches_direct(n, seed, jacobi):
    A, b = _spd(n, seed)
    res = conjugate_gradient(A, b, tol=1e-12, M_inv_diag=(1 / A.diagonal()) if jacobi else None)
    ref = spla.spsolve(A.tocsc(), b)
    assert res.converged
    assert np.linalg.norm(A @ res.x - b) <= 1e-12 * np.linalg.norm(b) * (1 + 1e-9)
    assert np.allclose(res.x, ref, rtol=1e-6, atol=1e-8)
    assert len(res.history) == res.iterations + 1


def test_zero_rhs():
    A, _ = _spd(5, 0)
    res = conjugate_gradient(A, np.zeros(5))
    assert res.converged and res.iterations == 0 and not np.any(res.x)


def test_indefinite_raises():
    A = sp.diags([1.0, -1.0, 2.0]).tocsr()
    with pytest.raises(ConvergenceError):
        conjugate_gradient(A, np.array([1.0, 1.0, 1.0]))


def test_budget_exhausted():
    A, b = _spd(40, 3)
    with pytest.raises(ConvergenceError) as info:
        conjugate_gradient(A, b, tol=1e-14, max_iter=2)
    assert len(info.value.history) == 3
    res = conjugate_gradient(A, b, tol=1e-14, max_iter=2, raise_on_fail=False)
    assert not res.converged and res.iterations == 2
