import numpy as np
import pytest

from exmsfem.exceptions import CompatibilityError, DegenerateCoefficient, SolverError
from exmsfem.fem import (BoundaryCondition, SolverConfig, assemble_expanded_fine, cell_divergence,
                         check_cell_blocks, hybridize_and_condense, l2_norm, local_rt0_matrices, pairing_matrix,
                         solve_expanded_fine, solve_local_neumann, solve_saddle_direct, weighted_mass)
from exmsfem.fields import make_permeability, make_source
from exmsfem.grid import CartesianGrid, build_nested


def test_pairing_matrix_unit_cube():
    N = pairing_matrix(CartesianGrid((1, 1, 1)))
    for a in range(3):
        blk = N[2 * a:2 * a + 2, 2 * a:2 * a + 2]
        assert np.allclose(blk, [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], atol=1e-15)
    mask = np.kron(np.eye(3), np.ones((2, 2))) == 0
    assert np.all(N[mask] == 0)


def test_local_matrices():
    g = CartesianGrid((2, 2, 2))
    k = make_permeability("uniform", g, {"value": 3.5})
    lm = local_rt0_matrices(3, k)
    assert np.allclose(lm.M, 3.5 * lm.N, rtol=1e-15, atol=0)
    assert np.array_equal(lm.div, [-1, 1, -1, 1, -1, 1])
    pair = build_nested((24, 24, 24), (8, 8, 8))
    kv = make_permeability("vanishing_channel", pair)
    cell = int(np.flatnonzero(kv.profile_mask)[0])
    M = local_rt0_matrices(cell, kv).M
    assert np.allclose(M, M.T) and np.linalg.eigvalsh(M).min() > 0


def test_degenerate_block_detected():
    g = CartesianGrid((2, 1, 1))
    M = np.tile(pairing_matrix(g), (2, 1, 1))
    M[1] = 0.0
    with pytest.raises(DegenerateCoefficient) as exc:
        check_cell_blocks(M, pairing_matrix(g))
    assert list(exc.value.cells) == [1]


def test_zero_source_zero_solution():
    g = CartesianGrid((2, 2, 2))
    sol = solve_expanded_fine(assemble_expanded_fine(g, make_permeability("uniform", g), None))
    assert np.abs(sol.u).max() == 0 and np.abs(sol.theta).max() == 0 and np.abs(sol.p).max() == 0
    assert np.abs(sol.lam).max() == 0


def test_linear_pressure_exact():
    g = CartesianGrid((4, 3, 2), (0, 0, 0), (1.0, 0.6, 0.5))
    k = make_permeability("uniform", g, {"value": 2.0})
    sol = solve_expanded_fine(assemble_expanded_fine(g, k, None, BoundaryCondition.dirichlet(lambda x: x[:, 0])))
    # p = x: theta = e_x (flux of e_x through x faces = face area), u = -2 e_x
    assert np.allclose(sol.p, g.cell_centers[:, 0], atol=1e-12)
    ax = g.face_axis
    assert np.allclose(sol.u[ax == 0], -2.0 * g.face_area(0), atol=1e-12)
    assert np.allclose(sol.u[ax != 0], 0.0, atol=1e-12)
    assert np.allclose(sol.theta[:, :2], g.face_area(0), atol=1e-12)
    assert np.allclose(sol.theta[:, 2:], 0.0, atol=1e-12)
    assert np.allclose(l2_norm(g, sol.theta), np.sqrt(g.volume), rtol=1e-12)


def test_layered_series_oracle():
    # layers normal to x: the exact flux is 1 / sum(h / k_i) per unit area
    n = 6
    g = CartesianGrid((n, 2, 1))
    kx = np.array([1.0, 10.0, 0.1, 2.0, 5.0, 0.5])
    vals = np.tile(kx, 2)
    k = make_permeability("user_table", g, {"values": vals})
    bc = BoundaryCondition.dirichlet(lambda x: 1.0 - x[:, 0], sides=((0, 0), (0, 1)))
    sol = solve_expanded_fine(assemble_expanded_fine(g, k, None, bc))
    q = 1.0 / np.sum((1.0 / n) / kx)
    xf = sol.u[g.face_axis == 0]
    assert np.allclose(xf, q * g.face_area(0), rtol=1e-12)
    assert np.allclose(sol.u[g.face_axis != 0], 0.0, atol=1e-13)


@pytest.fixture(scope="module")
def channel8():
    pair = build_nested((8, 8, 8), (2, 2, 2))
    k = make_permeability("channel", pair, {"y_range": (0.25, 0.375), "z_range": (0.5, 0.625)})
    f = make_source("corner_wells_3d", pair)
    system = assemble_expanded_fine(pair, k, f)
    return pair, k, f, system


def test_hybrid_matches_direct_saddle(channel8):
    pair, k, f, system = channel8
    hyb = solve_expanded_fine(system)
    ref = solve_saddle_direct(system)
    ref_p = ref.p - np.mean(ref.p)
    for a, b in ((hyb.theta, ref.theta), (hyb.u, ref.u), (hyb.p, ref_p)):
        assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(b)
    assert max(hyb.residuals.values()) < 1e-10


def test_conservation_and_symmetry(channel8):
    pair, k, f, system = channel8
    sol = solve_expanded_fine(system)
    div = cell_divergence(pair.fine, sol.u)
    assert np.abs(div - f.cell_integrals).max() <= 1e-12 * np.abs(f.cell_integrals).sum()
    A1 = system.blocks["A1"]
    assert abs(A1 - A1.T).max() <= 1e-14 * abs(A1).max()
    S = hybridize_and_condense(system).matrix
    assert abs(S - S.T).max() <= 1e-14 * abs(S).max()
    assert abs(np.mean(sol.p)) < 1e-14  # pure no-flow, uniform cells: mean-zero pressure


def test_constant_k_relations_and_scaling():
    pair = build_nested((6, 6, 6), (2, 2, 2))
    f = make_source("corner_wells_3d", pair)
    base = make_permeability("uniform", pair, {"value": 1.0})
    s1 = solve_expanded_fine(assemble_expanded_fine(pair, base, f))
    c = 4.0
    kc = make_permeability("uniform", pair, {"value": c})
    sc = solve_expanded_fine(assemble_expanded_fine(pair, kc, f))
    assert np.allclose(sc.u_local, -c * sc.theta, atol=1e-12 * np.abs(sc.u).max())
    assert np.allclose(sc.u, s1.u, atol=1e-12 * np.abs(s1.u).max())
    assert np.allclose(sc.p, s1.p / c, atol=1e-12 * np.abs(s1.p).max())
    assert np.allclose(sc.theta, s1.theta / c, atol=1e-12 * np.abs(s1.theta).max())


def test_cg_path_and_failure(channel8):
    pair, k, f, system = channel8
    direct = solve_expanded_fine(system, SolverConfig(method="direct"))
    cg = solve_expanded_fine(system, SolverConfig(method="cg", tol=1e-12))
    assert np.linalg.norm(cg.u - direct.u) <= 1e-9 * np.linalg.norm(direct.u)
    with pytest.raises(SolverError) as exc:
        solve_expanded_fine(system, SolverConfig(method="cg", tol=1e-14, maxiter=1))
    assert exc.value.residuals


def test_incompatible_source():
    g = CartesianGrid((3, 3, 3))
    f = np.zeros(g.n_cells)
    f[0] = 1.0
    with pytest.raises(CompatibilityError):
        assemble_expanded_fine(g, make_permeability("uniform", g), f)


def _chi(g, j):
    """Unit-flux coarse RT0 function of local face j on the box of g, as fine fluxes."""
    a = j // 2
    lo, hi = g.lower[a], g.upper[a]
    m = g.face_axis == a
    x = g.face_centers[m, a]
    frac = (x - lo) / (hi - lo) if j % 2 else (hi - x) / (hi - lo)
    out = np.zeros(g.n_faces)
    out[m] = frac * g.face_area(a) / (g.volume / (hi - lo))
    return out


def test_local_neumann_reproduces_rt0():
    g = CartesianGrid((3, 3, 3), (0, 0, 0), (0.3, 0.3, 0.3))
    sgn = [-1, 1, -1, 1, -1, 1]
    for j in range(6):
        chi = _chi(g, j)
        flux = np.where(g.boundary_face_mask, chi, 0.0)
        sol = solve_local_neumann(g, make_permeability("uniform", g), sgn[j] / g.volume, flux)
        assert np.allclose(sol.u, chi, atol=1e-13)
        kc = make_permeability("uniform", g, {"value": 5.0})
        solc = solve_local_neumann(g, kc, sgn[j] / g.volume, flux)
        assert np.allclose(solc.theta, -solc.u_local / 5.0, atol=1e-13)
        assert abs(np.mean(solc.p)) < 1e-13
    zero = solve_local_neumann(g, make_permeability("uniform", g), 0.0, np.zeros(g.n_faces))
    assert np.abs(zero.u).max() == 0 and np.abs(zero.theta).max() == 0 and np.abs(zero.p).max() == 0
    with pytest.raises(CompatibilityError):
        solve_local_neumann(g, make_permeability("uniform", g), 1.0, np.zeros(g.n_faces))


def test_weighted_mass_rules_agree_for_constants():
    g = CartesianGrid((2, 2, 2))
    k = make_permeability("uniform", g, {"value": 2.0})
    assert np.allclose(weighted_mass(k, "gauss2"), weighted_mass(k, "midpoint"))
