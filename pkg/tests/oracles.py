"""Independent solution routes used by the acceptance tests.

The reference for Tables 1-2 is cross-checked against a direct solve of the
unreduced three-field saddle system, which shares nothing with the hybrid
condensation except the element matrices.
"""

import numpy as np
import scipy.sparse as sp


def pardiso_available():
    try:
        import pypardiso  # noqa: F401
        from pypardiso import PyPardisoSolver
        PyPardisoSolver()
    except Exception:
        return False
    return True


def saddle_solve_pardiso(system, refine=20, rtol=1e-12):
    """(theta, u_free, p, relative residual) of the saddle system with MKL Pardiso.

    Symmetric-indefinite factorization of the mean-zero bordered matrix plus
    iterative refinement against the exact matrix.
    """
    from pypardiso import PyPardisoSolver

    K, rhs = system.saddle_matrix()
    n = system.n_cells
    nt, nu = 6 * n, len(system.velocity_dofs)
    if system.faces.pure_neumann:
        w = np.zeros(K.shape[0])
        w[nt + nu:] = system.grid.cell_volume
        K = sp.bmat([[K, sp.csr_matrix(w[:, None])], [sp.csr_matrix(w[None, :]), None]], format="csr")
        rhs = np.concatenate([rhs, [0.0]])
    K = sp.csr_matrix(K)
    # upper triangle with every diagonal entry stored (Pardiso requires it)
    C = K.tocoo()
    keep = C.col >= C.row
    d = np.arange(K.shape[0])
    rows = np.concatenate([C.row[keep], d])
    cols = np.concatenate([C.col[keep], d])
    vals = np.concatenate([C.data[keep], np.zeros(K.shape[0])])
    A = sp.csr_matrix((vals, (rows, cols)), shape=K.shape)
    A.indices = A.indices.astype(np.int32)
    A.indptr = A.indptr.astype(np.int32)
    s = PyPardisoSolver(mtype=-2)
    s.set_iparm(10, 8)
    s.set_iparm(11, 1)
    s.set_iparm(13, 1)
    s.set_iparm(8, 20)
    s.factorize(A)
    x = s.solve(A, rhs)
    bn = np.linalg.norm(rhs)
    for _ in range(refine):
        r = rhs - K @ x
        if np.linalg.norm(r) <= rtol * bn:
            break
        x = x + s.solve(A, r)
    res = np.linalg.norm(rhs - K @ x) / bn
    s.free_memory(everything=True)
    return x[:nt].reshape(n, 6), x[nt:nt + nu], x[nt + nu:nt + nu + n], res


def saddle_solve_scipy(system):
    """Same route with SuperLU; only practical on small grids."""
    import scipy.sparse.linalg as spla

    K, rhs = system.saddle_matrix()
    n = system.n_cells
    nt, nu = 6 * n, len(system.velocity_dofs)
    if system.faces.pure_neumann:
        w = np.zeros(K.shape[0])
        w[nt + nu:] = system.grid.cell_volume
        K = sp.bmat([[K, sp.csr_matrix(w[:, None])], [sp.csr_matrix(w[None, :]), None]], format="csc")
        rhs = np.concatenate([rhs, [0.0]])
    x = spla.spsolve(sp.csc_matrix(K), rhs)
    res = np.linalg.norm(rhs - K @ x) / np.linalg.norm(rhs)
    return x[:nt].reshape(n, 6), x[nt:nt + nu], x[nt + nu:nt + nu + n], res
