"""Scikit-learn style front end.

``MultiscaleDarcy().fit(k)`` builds the nested grids and the multiscale
basis for a permeability; ``predict(f)`` solves the coarse problem for
one source (or a batch of sources) and returns fine-cell pressures.
``solve(f)`` returns the full downscaled solution.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .basis import build_basis, compute_harmonic_global_fields, compute_solution_global_field
from .coarse import CoarseAssembler, condensed_coarse_operator, downscale, solve_coarse_hybrid
from .exceptions import ConfigError
from .fields import CoefficientField, SourceField, make_permeability
from .grid import build_nested
from .validation import check_balanced, check_cell_array, check_counts


class MultiscaleDarcy(BaseEstimator):
    """Expanded mixed multiscale solver for ``-div(k grad p) = f`` with no-flow walls.

    Parameters
    ----------
    fine, coarse : grid cell counts.
    domain : upper corner of the box (lower corner at the origin).
    variant : ``local``, ``oversampled`` or ``global``.
    layers : oversampling layers.
    global_fields : ``harmonic`` (three coordinate problems) or ``solution``
        (the fine solution for ``global_source``).
    global_source : per-cell source for the ``solution`` global field.
    rule : quadrature rule, None for the field default.
    """

    def __init__(self, fine=(24, 24, 24), coarse=(8, 8, 8), domain=(1.0, 1.0, 1.0), variant="local",
                 layers=1, global_fields="harmonic", global_source=None, rule=None):
        self.fine = fine
        self.coarse = coarse
        self.domain = domain
        self.variant = variant
        self.layers = layers
        self.global_fields = global_fields
        self.global_source = global_source
        self.rule = rule

    def _field(self, X, pair):
        if isinstance(X, CoefficientField):
            if X.grid != pair.fine:
                raise ConfigError("permeability field is not defined on the estimator's fine grid")
            return X
        vals = check_cell_array(X, pair.fine.n_cells, "permeability")
        return make_permeability("user_table", pair, {"values": vals})

    def fit(self, X, y=None):
        """Build the basis for permeability ``X`` (a field or one value per fine cell)."""
        pair = build_nested(check_counts(self.fine, "fine"), check_counts(self.coarse, "coarse"),
                            tuple(self.domain))
        k = self._field(X, pair)
        gf = None
        if self.variant == "global":
            if self.global_fields == "harmonic":
                gf = compute_harmonic_global_fields(pair.fine, k, rule=self.rule)
            elif self.global_fields == "solution":
                if self.global_source is None:
                    raise ConfigError("global_fields='solution' needs global_source")
                gf = compute_solution_global_field(pair.fine, k, self._source(self.global_source, pair),
                                                   rule=self.rule)
            else:
                raise ConfigError(f"unknown global_fields {self.global_fields!r}")
        self.pair_ = pair
        self.k_ = k
        self.basis_ = build_basis(self.variant, pair, k, gf, self.layers, self.rule)
        self.assembler_ = CoarseAssembler(self.basis_, k, self.rule)
        self.n_dofs_ = self.basis_.n_dofs
        return self

    @staticmethod
    def _source(f, pair):
        if isinstance(f, SourceField):
            return f.cell_integrals
        return check_cell_array(f, pair.fine.n_cells, "source") * pair.fine.cell_volume

    def solve(self, f):
        """Downscaled solution for one source (rate per unit volume per fine cell)."""
        check_is_fitted(self, "basis_")
        F = self._source(f, self.pair_)
        check_balanced(F)
        return downscale(solve_coarse_hybrid(self.assembler_.assemble(F)), self.basis_)

    def predict(self, X):
        """Fine-cell pressures for a source vector (n,) or a batch (r, n)."""
        check_is_fitted(self, "basis_")
        if isinstance(X, SourceField):
            return self.solve(X).p
        n = self.pair_.fine.n_cells
        A = check_cell_array(X, n, "source", allow_batch=True)
        if A.ndim == 1:
            return self.solve(A).p
        system = self.assembler_.assemble(A[0] * self.pair_.fine.cell_volume)
        op = condensed_coarse_operator(system)
        out = np.empty_like(A)
        owner = self.pair_.coarse_of_fine
        for i, row in enumerate(A):
            F = row * self.pair_.fine.cell_volume
            check_balanced(F)
            system.F = np.bincount(owner, weights=F, minlength=self.pair_.coarse.n_cells)
            out[i] = solve_coarse_hybrid(system, operator=op).p[owner]
        return out
