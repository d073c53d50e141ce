import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from exmsfem.basis import build_local_basis
from exmsfem.coarse import assemble_coarse, downscale, solve_coarse
from exmsfem.estimator import MultiscaleDarcy
from exmsfem.exceptions import CompatibilityError, ConfigError, InvalidGrid
from exmsfem.fields import make_permeability, make_source
from exmsfem.grid import build_nested


def test_matches_functional_pipeline():
    pair = build_nested((8, 8, 4), (2, 2, 1), (1, 1, 0.5))
    k = make_permeability("smooth", pair)
    f = make_source("corner_wells_3d", pair, {"H": 0.5})
    b = build_local_basis(pair, k)
    direct = downscale(solve_coarse(assemble_coarse(b, k, f)), b)
    est = MultiscaleDarcy(fine=(8, 8, 4), coarse=(2, 2, 1), domain=(1, 1, 0.5)).fit(k)
    sol = est.solve(f.values)
    assert np.allclose(sol.u, direct.u, atol=1e-14)
    p = est.predict(f.values)
    assert np.allclose(p - p.mean(), direct.p - direct.p.mean(), atol=1e-12)


def test_batch_predict_and_params():
    est = MultiscaleDarcy(fine=(6, 6, 6), coarse=(2, 2, 2), variant="global")
    rng = np.random.default_rng(0)
    est.fit(10 ** rng.uniform(-1, 1, 216))
    assert est.n_dofs_ > 0
    F = rng.normal(size=(3, 216))
    F -= F.mean(axis=1, keepdims=True)
    batch = est.predict(F)
    for i in range(3):
        single = est.predict(F[i])
        assert np.allclose(batch[i], single, atol=1e-12)
    c = clone(est)
    assert c.get_params() == est.get_params()
    assert not hasattr(c, "basis_")


def test_validation_errors():
    with pytest.raises(NotFittedError):
        MultiscaleDarcy().predict(np.zeros(10))
    with pytest.raises(InvalidGrid):
        MultiscaleDarcy(fine=(6, 6), coarse=(2, 2, 2)).fit(np.ones(36))
    est = MultiscaleDarcy(fine=(4, 4, 4), coarse=(2, 2, 2))
    with pytest.raises(ConfigError):
        est.fit(np.ones(10))
    with pytest.raises(ValueError):
        est.fit(np.full(64, np.nan))
    est.fit(np.ones(64))
    with pytest.raises(CompatibilityError):
        est.predict(np.ones(64))
    with pytest.raises(ConfigError):
        MultiscaleDarcy(fine=(4, 4, 4), coarse=(2, 2, 2), variant="global", global_fields="solution").fit(np.ones(64))
