import numpy as np
import pytest

from exmsfem.exceptions import ConfigError, DegenerateCoefficient
from exmsfem.fem import assemble_expanded_fine, solve_expanded_fine
from exmsfem.fields import make_permeability, make_source
from exmsfem.grid import CartesianGrid, build_nested
from exmsfem.harness import checkerboard_values, laminate_values
from exmsfem.homog import coefficient_means, homogenize_cell, homogenized_reference, laminate_k_star, write_k_star


def unit_cell(n, nz=1):
    return CartesianGrid((n, n, nz))


def test_constant_coefficient():
    g = unit_cell(4, 4)
    res = homogenize_cell(np.full(g.n_cells, 2.5), g)
    assert np.allclose(res.k_star, 2.5 * np.eye(3), atol=1e-12)
    assert np.abs(res.correctors).max() < 1e-12
    assert res.check_bounds()


def test_laminate_closed_form():
    a, b = 1.0, 10.0
    for n in (4, 8):
        g = unit_cell(n)
        res = homogenize_cell(laminate_values(n, a, b), g)
        assert np.allclose(res.k_star, laminate_k_star(a, b), rtol=1e-10, atol=1e-12)
    assert np.isclose(laminate_k_star(1, 10)[0, 0], 20 / 11)


def test_checkerboard_geometric_mean_and_bounds():
    a, b = 1.0, 4.0
    errs = []
    for n in (8, 16, 32):
        g = unit_cell(n)
        res = homogenize_cell(checkerboard_values(n, a, b), g)
        kxx = res.k_star[0, 0]
        assert np.isclose(kxx, res.k_star[1, 1], rtol=1e-10)
        assert np.allclose(res.k_star, res.k_star.T, atol=1e-12)
        assert res.check_bounds()
        errs.append(abs(kxx - 2.0) / 2.0)
    # refinement approaches sqrt(ab) = 2
    assert errs[0] > errs[1] > errs[2]
    assert errs[-1] < 0.05


def test_random_cell_symmetry_and_bounds():
    g = unit_cell(6, 3)
    vals = 10 ** np.random.default_rng(3).uniform(-1, 1, g.n_cells)
    res = homogenize_cell(vals, g)
    assert np.allclose(res.k_star, res.k_star.T, atol=1e-10 * res.k_star.max())
    assert res.check_bounds()
    h, a = coefficient_means(make_permeability("user_table", g, {"values": vals}))
    assert np.isclose(h, 1 / np.mean(1 / vals)) and np.isclose(a, vals.mean())


def test_degenerate_and_analytic_cells():
    g = unit_cell(3)
    with pytest.raises(DegenerateCoefficient):
        homogenize_cell(np.zeros(g.n_cells), g)
    other = make_permeability("uniform", unit_cell(4))
    with pytest.raises(ConfigError):
        homogenize_cell(other, g)


def test_homogenized_reference_unit_tensor():
    pair = build_nested((6, 6, 6), (2, 2, 2))
    f = make_source("corner_wells_3d", pair, {"H": 0.5})
    ref = homogenized_reference(np.eye(3), f, pair)
    k1 = make_permeability("uniform", pair)
    direct = solve_expanded_fine(assemble_expanded_fine(pair.fine, k1, f))
    assert np.allclose(ref.u, direct.u, atol=1e-12)
    aniso = homogenized_reference(np.diag([2.0, 2.0, 2.0]), f, pair)
    assert np.allclose(aniso.u, direct.u, atol=1e-12)
    assert np.allclose(aniso.p - aniso.p.mean(), 0.5 * (direct.p - direct.p.mean()), atol=1e-12)
    with pytest.raises(ConfigError):
        homogenized_reference(np.array([[1, 0.5, 0], [0.5, 1, 0], [0, 0, 1]]), f, pair)
    with pytest.raises(ConfigError):
        homogenized_reference(-np.eye(3), f, pair)


def test_write_k_star(tmp_path):
    p = tmp_path / "kstar.txt"
    write_k_star(p, laminate_k_star(1, 10))
    assert np.allclose(np.loadtxt(p), laminate_k_star(1, 10), rtol=1e-15)
