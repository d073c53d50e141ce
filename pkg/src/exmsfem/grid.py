"""Nested structured hexahedral grids.

Indexing conventions (used by every other module):

* cells are numbered lexicographically by ``(z, y, x)`` with ``x`` fastest,
  ``c = (iz * ny + iy) * nx + ix``;
* faces are grouped by normal axis: all x-faces, then y-faces, then z-faces.
  Inside a group the face at plane position ``i`` along its axis is numbered
  like a cell of the grid whose count along that axis is ``n + 1``;
* every face is oriented along ``+axis``;
* the six local faces of a cell are ordered ``(x-, x+, y-, y+, z-, z+)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import InvalidGrid, NestingError

# sign of the +axis oriented local face function seen as outward flux
LOCAL_FACE_SIGN = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0])
LOCAL_FACE_AXIS = np.array([0, 0, 1, 1, 2, 2])


def _as_triple(values, name, kind=int):
    values = tuple(kind(v) for v in values)
    if len(values) != 3:
        raise InvalidGrid(f"{name} must have three entries, got {values!r}")
    return values


@dataclass(frozen=True)
class CartesianGrid:
    counts: tuple
    lower: tuple = (0.0, 0.0, 0.0)
    upper: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        counts = _as_triple(self.counts, "counts")
        lower = _as_triple(self.lower, "lower", float)
        upper = _as_triple(self.upper, "upper", float)
        if min(counts) <= 0:
            raise InvalidGrid(f"cell counts must be positive, got {counts}")
        if any(u <= l for l, u in zip(lower, upper)):
            raise InvalidGrid(f"degenerate domain box {lower} - {upper}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    # -- sizes ---------------------------------------------------------------
    @cached_property
    def h(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / np.array(self.counts)

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.counts
        return nx * ny * nz

    @cached_property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @cached_property
    def volume(self) -> float:
        return float(np.prod(np.array(self.upper) - np.array(self.lower)))

    def face_area(self, axis: int) -> float:
        h = self.h
        return float(np.prod([h[a] for a in range(3) if a != axis]))

    def face_shape(self, axis: int) -> tuple:
        """Shape ``(nz, ny, nx)`` of the array of faces normal to ``axis``."""
        c = list(self.counts)
        c[axis] += 1
        return (c[2], c[1], c[0])

    def n_faces_axis(self, axis: int) -> int:
        return int(np.prod(self.face_shape(axis)))

    @cached_property
    def face_offsets(self) -> np.ndarray:
        sizes = [self.n_faces_axis(a) for a in range(3)]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def n_faces(self) -> int:
        return int(self.face_offsets[-1])

    def n_interior_faces_axis(self, axis: int) -> int:
        c = list(self.counts)
        c[axis] -= 1
        return int(np.prod(c))

    # -- index maps ------------------------------------------------------------
    def cell_index(self, ix, iy, iz):
        nx, ny, _ = self.counts
        return (np.asarray(iz) * ny + np.asarray(iy)) * nx + np.asarray(ix)

    def cell_ijk(self, c):
        nx, ny, _ = self.counts
        c = np.asarray(c)
        return c % nx, (c // nx) % ny, c // (nx * ny)

    def face_index(self, axis, ix, iy, iz):
        c = list(self.counts)
        c[axis] += 1
        return self.face_offsets[axis] + (np.asarray(iz) * c[1] + np.asarray(iy)) * c[0] + np.asarray(ix)

    def face_ijk(self, f):
        """Return ``(axis, ix, iy, iz)`` arrays for global face indices."""
        f = np.asarray(f)
        axis = np.searchsorted(self.face_offsets, f, side="right") - 1
        local = f - self.face_offsets[axis]
        ix = np.empty_like(local)
        iy = np.empty_like(local)
        iz = np.empty_like(local)
        for a in range(3):
            m = axis == a
            c = list(self.counts)
            c[a] += 1
            loc = local[m]
            ix[m] = loc % c[0]
            iy[m] = (loc // c[0]) % c[1]
            iz[m] = loc // (c[0] * c[1])
        return axis, ix, iy, iz

    @cached_property
    def cell_faces(self) -> np.ndarray:
        """(n_cells, 6) global face indices in local order x-, x+, y-, y+, z-, z+."""
        ix, iy, iz = self.cell_ijk(np.arange(self.n_cells))
        out = np.empty((self.n_cells, 6), dtype=np.int64)
        out[:, 0] = self.face_index(0, ix, iy, iz)
        out[:, 1] = self.face_index(0, ix + 1, iy, iz)
        out[:, 2] = self.face_index(1, ix, iy, iz)
        out[:, 3] = self.face_index(1, ix, iy + 1, iz)
        out[:, 4] = self.face_index(2, ix, iy, iz)
        out[:, 5] = self.face_index(2, ix, iy, iz + 1)
        out.setflags(write=False)
        return out

    @cached_property
    def face_axis(self) -> np.ndarray:
        return np.repeat(np.arange(3), np.diff(self.face_offsets))

    @cached_property
    def face_cells(self) -> np.ndarray:
        """(n_faces, 2): cell on the -axis side and on the +axis side (-1 if none)."""
        out = -np.ones((self.n_faces, 2), dtype=np.int64)
        cells = np.arange(self.n_cells)
        cf = self.cell_faces
        for a in range(3):
            out[cf[:, 2 * a + 1], 0] = cells
            out[cf[:, 2 * a], 1] = cells
        out.setflags(write=False)
        return out

    @cached_property
    def boundary_face_mask(self) -> np.ndarray:
        return (self.face_cells < 0).any(axis=1)

    @cached_property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_face_mask)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return np.array([self.face_area(a) for a in range(3)])[self.face_axis]

    def boundary_faces(self, axis: int, side: int) -> np.ndarray:
        """Faces on the domain side ``side`` (0 = lower, 1 = upper) normal to ``axis``."""
        nz, ny, nx = self.face_shape(axis)
        idx = np.arange(self.n_faces_axis(axis)).reshape(nz, ny, nx)
        plane = [slice(None)] * 3
        plane[2 - axis] = 0 if side == 0 else -1
        return self.face_offsets[axis] + idx[tuple(plane)].ravel()

    @cached_property
    def cell_centers(self) -> np.ndarray:
        ix, iy, iz = self.cell_ijk(np.arange(self.n_cells))
        ijk = np.stack([ix, iy, iz], axis=1) + 0.5
        return np.array(self.lower) + ijk * self.h

    @cached_property
    def face_centers(self) -> np.ndarray:
        axis, ix, iy, iz = self.face_ijk(np.arange(self.n_faces))
        ijk = np.stack([ix, iy, iz], axis=1).astype(float) + 0.5
        ijk[np.arange(self.n_faces), axis] -= 0.5
        return np.array(self.lower) + ijk * self.h

    def cell_lower_corners(self, cells=None) -> np.ndarray:
        cells = np.arange(self.n_cells) if cells is None else np.asarray(cells)
        ix, iy, iz = self.cell_ijk(cells)
        return np.array(self.lower) + np.stack([ix, iy, iz], axis=1) * self.h

    def box(self, lo, hi) -> "Subgrid":
        return Subgrid.from_box(self, lo, hi)


@dataclass(frozen=True)
class Subgrid:
    """An index box of a parent grid, viewed as a grid of its own.

    ``cells[i]`` / ``faces[i]`` are the parent indices of the i-th local cell /
    face, so parent arrays can be sliced with them directly.
    """

    parent: CartesianGrid
    lo: tuple
    hi: tuple
    grid: CartesianGrid = field(repr=False)
    cells: np.ndarray = field(repr=False)
    faces: np.ndarray = field(repr=False)

    @classmethod
    def from_box(cls, parent, lo, hi):
        lo = tuple(int(v) for v in lo)
        hi = tuple(int(v) for v in hi)
        if any(l < 0 or h > n or h <= l for l, h, n in zip(lo, hi, parent.counts)):
            raise IndexError(f"box {lo}-{hi} outside grid {parent.counts}")
        counts = tuple(h - l for l, h in zip(lo, hi))
        low = tuple(parent.lower[a] + lo[a] * parent.h[a] for a in range(3))
        up = tuple(parent.lower[a] + hi[a] * parent.h[a] for a in range(3))
        sub = CartesianGrid(counts, low, up)
        ix, iy, iz = sub.cell_ijk(np.arange(sub.n_cells))
        cells = parent.cell_index(ix + lo[0], iy + lo[1], iz + lo[2])
        axis, fx, fy, fz = sub.face_ijk(np.arange(sub.n_faces))
        faces = np.empty(sub.n_faces, dtype=np.int64)
        for a in range(3):
            m = axis == a
            faces[m] = parent.face_index(a, fx[m] + lo[0], fy[m] + lo[1], fz[m] + lo[2])
        return cls(parent, lo, hi, sub, cells, faces)


@dataclass(frozen=True)
class SubgridRegion:
    owner: int
    lo: tuple
    hi: tuple
    clipped: tuple  # ((x_low, x_high), (y_low, y_high), (z_low, z_high))

    @property
    def shape(self) -> tuple:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def contains(self, other: "SubgridRegion") -> bool:
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(
            a >= b for a, b in zip(self.hi, other.hi)
        )


@dataclass(frozen=True)
class NestedGridPair:
    fine: CartesianGrid
    coarse: CartesianGrid
    ratio: tuple

    @cached_property
    def coarse_of_fine(self) -> np.ndarray:
        ix, iy, iz = self.fine.cell_ijk(np.arange(self.fine.n_cells))
        r = self.ratio
        return self.coarse.cell_index(ix // r[0], iy // r[1], iz // r[2])

    def fine_box(self, coarse_cell: int):
        ix, iy, iz = self.coarse.cell_ijk(self._check_cell(coarse_cell))
        lo = (int(ix) * self.ratio[0], int(iy) * self.ratio[1], int(iz) * self.ratio[2])
        hi = tuple(l + r for l, r in zip(lo, self.ratio))
        return lo, hi

    def _check_cell(self, coarse_cell):
        c = int(coarse_cell)
        if not 0 <= c < self.coarse.n_cells:
            raise IndexError(f"coarse cell {coarse_cell} out of range [0, {self.coarse.n_cells})")
        return c

    def subgrid(self, coarse_cell: int) -> Subgrid:
        return self.fine.box(*self.fine_box(coarse_cell))

    @cached_property
    def _subgrids(self):
        # all coarse cells share one local layout; only the offsets differ
        return [self.subgrid(K) for K in range(self.coarse.n_cells)]

    def fine_faces_of_coarse_face(self, coarse_face: int) -> np.ndarray:
        axis, ix, iy, iz = self.coarse.face_ijk(np.array([coarse_face]))
        axis = int(axis[0])
        lo = [int(ix[0]) * self.ratio[0], int(iy[0]) * self.ratio[1], int(iz[0]) * self.ratio[2]]
        rng = [np.arange(lo[a], lo[a] + self.ratio[a]) for a in range(3)]
        rng[axis] = np.array([lo[axis]])
        gz, gy, gx = np.meshgrid(rng[2], rng[1], rng[0], indexing="ij")
        return np.sort(self.fine.face_index(axis, gx.ravel(), gy.ravel(), gz.ravel()))

    def oversample_region(self, coarse_cell: int, layers: int = 1) -> SubgridRegion:
        return oversample_region(self, coarse_cell, layers)


def build_nested(fine_counts, coarse_counts, domain_box=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))) -> NestedGridPair:
    """Build a fine grid nested in a coarse grid over the same box.

    ``domain_box`` is ``(lower, upper)``; a bare upper corner is also accepted.
    """
    fine_counts = _as_triple(fine_counts, "fine_counts")
    coarse_counts = _as_triple(coarse_counts, "coarse_counts")
    if min(fine_counts) <= 0 or min(coarse_counts) <= 0:
        raise InvalidGrid(f"cell counts must be positive: {fine_counts}, {coarse_counts}")
    box = tuple(domain_box)
    if len(box) == 3 and np.isscalar(box[0]):
        lower, upper = (0.0, 0.0, 0.0), box
    else:
        lower, upper = box
    ratio = []
    for nf, nc in zip(fine_counts, coarse_counts):
        if nf % nc:
            raise NestingError(f"fine counts {fine_counts} not divisible by coarse counts {coarse_counts}")
        ratio.append(nf // nc)
    fine = CartesianGrid(fine_counts, lower, upper)
    coarse = CartesianGrid(coarse_counts, lower, upper)
    return NestedGridPair(fine, coarse, tuple(ratio))


def fine_entities_of_coarse(pair: NestedGridPair, coarse_cell: int):
    """Fine cells of a coarse cell and, per coarse local face, the fine faces tiling it."""
    K = pair._check_cell(coarse_cell)
    sub = pair.subgrid(K)
    cells = np.sort(sub.cells)
    coarse_faces = pair.coarse.cell_faces[K]
    faces = [pair.fine_faces_of_coarse_face(int(F)) for F in coarse_faces]
    return cells, faces


def oversample_region(pair: NestedGridPair, coarse_cell: int, layers: int = 1) -> SubgridRegion:
    """Fine index box extending a coarse cell by ``layers`` coarse cells, clipped at the boundary."""
    if int(layers) < 1:
        raise ValueError(f"oversampling needs layers >= 1, got {layers}")
    K = pair._check_cell(coarse_cell)
    ijk = pair.coarse.cell_ijk(K)
    lo, hi, clipped = [], [], []
    for a in range(3):
        i = int(ijk[a])
        n = pair.coarse.counts[a]
        c_lo, c_hi = i - layers, i + layers + 1
        clipped.append((c_lo < 0, c_hi > n))
        lo.append(max(c_lo, 0) * pair.ratio[a])
        hi.append(min(c_hi, n) * pair.ratio[a])
    return SubgridRegion(K, tuple(lo), tuple(hi), tuple(clipped))
