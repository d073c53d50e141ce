"""Small input checks shared by the estimator and the drivers."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigError, DomainError, InvalidGrid


def check_counts(counts, name: str = "counts") -> tuple:
    """Three positive integers."""
    try:
        t = tuple(int(c) for c in counts)
    except (TypeError, ValueError) as exc:
        raise InvalidGrid(f"{name} must be three integers, got {counts!r}") from exc
    if len(t) != 3 or min(t) <= 0:
        raise InvalidGrid(f"{name} must be three positive integers, got {counts!r}")
    return t


def check_cell_array(values, n_cells: int, name: str = "values", allow_batch: bool = False) -> np.ndarray:
    """Float array with one entry per cell, (n,) or (r, n) when ``allow_batch``."""
    a = np.asarray(values, dtype=float)
    if a.ndim == 2 and a.shape[1] == 1 and a.shape[0] == n_cells:
        a = a[:, 0]
    if a.ndim == 1:
        if a.shape[0] != n_cells:
            raise ConfigError(f"{name} has {a.shape[0]} entries, expected {n_cells}")
        return check_array(a[None, :], ensure_all_finite=True)[0]
    if allow_batch and a.ndim == 2 and a.shape[1] == n_cells:
        return check_array(a, ensure_all_finite=True)
    raise ConfigError(f"{name} must have shape ({n_cells},)" + (f" or (r, {n_cells})" if allow_batch else ""))


def check_nonnegative(values, name: str = "values") -> np.ndarray:
    a = np.asarray(values, dtype=float)
    if np.any(a < 0):
        raise ConfigError(f"{name} must be nonnegative")
    return a


def check_unit_interval(values, name: str = "saturation", tol: float = 1e-12) -> np.ndarray:
    a = np.asarray(values, dtype=float)
    if a.size and not (a.min() >= -tol and a.max() <= 1 + tol):
        raise DomainError(f"{name} outside [0, 1]")
    return a


def check_balanced(cell_integrals, rtol: float = 1e-12, name: str = "source") -> None:
    from .exceptions import CompatibilityError

    F = np.asarray(cell_integrals, dtype=float)
    if abs(F.sum()) > rtol * max(np.abs(F).sum(), 1e-300):
        raise CompatibilityError(f"{name} integrates to {F.sum():.3e}, not zero")
