"""Two-scale Cartesian grids for mixed finite-volume discretizations.

A grid couples a uniform fine mesh of cells with a uniform coarse mesh of
blocks; every coarse block is an integer box of fine cells.  Velocity
unknowns live on interior fine faces (zero normal flux on the domain
boundary eliminates the rest), pressure unknowns are one per fine cell.

Orderings are fixed once and relied upon everywhere else:

* cells: lexicographic with x fastest, then y, then z;
* faces: all x-normal faces first, then y, then z; within one axis the
  face inherits the lexicographic order of its lower neighbouring cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class CartesianTwoScaleGrid:
    """Immutable description of the fine/coarse cell layout."""

    fine: tuple
    coarse: tuple
    lengths: tuple

    @property
    def dim(self) -> int:
        return len(self.fine)

    @property
    def h(self) -> tuple:
        return tuple(length / n for length, n in zip(self.lengths, self.fine))

    @property
    def H(self) -> tuple:
        return tuple(length / n for length, n in zip(self.lengths, self.coarse))

    @property
    def block_size(self) -> tuple:
        """Fine cells per coarse block, per axis."""
        return tuple(n // N for n, N in zip(self.fine, self.coarse))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.fine))

    @property
    def n_blocks(self) -> int:
        return int(np.prod(self.coarse))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def face_area(self, axis: int) -> float:
        """Measure of a fine face normal to `axis` (length in 2D)."""
        return float(np.prod(self.h) / self.h[axis])

    def axis_face_shape(self, axis: int) -> tuple:
        """Shape of the interior-face lattice normal to `axis`."""
        return tuple(n - 1 if a == axis else n for a, n in enumerate(self.fine))

    def axis_face_count(self, axis: int) -> int:
        return int(np.prod(self.axis_face_shape(axis)))

    @property
    def face_offsets(self) -> tuple:
        """Start of each axis block in the global velocity numbering."""
        counts = [self.axis_face_count(a) for a in range(self.dim)]
        return tuple(int(c) for c in np.concatenate([[0], np.cumsum(counts)[:-1]]))

    @property
    def n_velocity(self) -> int:
        return sum(self.axis_face_count(a) for a in range(self.dim))


@dataclass(eq=False)
class CoarseFace:
    """One interior coarse face with its fine-face decomposition.

    `blocks` holds (lower, upper) coarse block ids along `axis`; the face
    normal points from the lower block to the upper one, i.e. in the
    positive axis direction.  `fine_faces` lists the global velocity dofs
    lying on the face, lexicographically in the orthogonal coordinates.
    """

    index: int
    axis: int
    blocks: tuple
    fine_faces: np.ndarray
    measure: float

    @property
    def n_fine(self) -> int:
        return len(self.fine_faces)


def build_grid(fine_cells, coarse_blocks, domain_lengths=None) -> CartesianTwoScaleGrid:
    """Validate the layout and build a grid.

    Every axis must have a positive cell count divisible by its coarse
    block count.  `domain_lengths` defaults to the unit box.
    """
    fine = tuple(int(n) for n in fine_cells)
    coarse = tuple(int(N) for N in coarse_blocks)
    if len(fine) not in (2, 3):
        raise ValueError(f"expected 2 or 3 axes, got {len(fine)}")
    if len(coarse) != len(fine):
        raise ValueError(f"coarse layout has {len(coarse)} axes, fine has {len(fine)}")
    if domain_lengths is None:
        domain_lengths = (1.0,) * len(fine)
    lengths = tuple(float(L) for L in domain_lengths)
    if len(lengths) != len(fine):
        raise ValueError(f"domain has {len(lengths)} lengths for {len(fine)} axes")
    for a, (n, N, L) in enumerate(zip(fine, coarse, lengths)):
        if n < 1 or N < 1:
            raise ValueError(f"axis {a}: cell counts must be positive, got {n}/{N}")
        if L <= 0:
            raise ValueError(f"axis {a}: domain length must be positive, got {L}")
        if n % N != 0:
            raise ValueError(
                f"axis {a}: {n} fine cells are not divisible into {N} coarse blocks"
            )
    return CartesianTwoScaleGrid(fine=fine, coarse=coarse, lengths=lengths)


def count_dofs(grid: CartesianTwoScaleGrid):
    """(velocity, pressure) unknown counts; purely arithmetic."""
    return grid.n_velocity, grid.n_cells


def cell_ids(grid, multi) -> np.ndarray:
    """Ravel cell multi-indices (columns x, y[, z]) to global ids."""
    multi = np.asarray(multi)
    return np.ravel_multi_index(tuple(multi[..., a] for a in range(grid.dim)),
                                grid.fine, order="F")


def cell_multi(grid, ids) -> np.ndarray:
    """Inverse of `cell_ids`; returns an (..., dim) index array."""
    unraveled = np.unravel_index(np.asarray(ids), grid.fine, order="F")
    return np.stack(unraveled, axis=-1)


def face_id_from_low_cell(grid, axis, multi) -> np.ndarray:
    """Global id of the `axis`-normal face whose lower cell is `multi`."""
    multi = np.asarray(multi)
    shape = grid.axis_face_shape(axis)
    local = np.ravel_multi_index(tuple(multi[..., a] for a in range(grid.dim)),
                                 shape, order="F")
    return grid.face_offsets[axis] + local


@lru_cache(maxsize=128)
def cell_face_ids(grid, axis):
    """(low, high) face ids per cell along `axis`, -1 where the face is
    a domain-boundary face and carries no unknown."""
    shape = grid.axis_face_shape(axis)
    lattice = np.arange(int(np.prod(shape))).reshape(shape, order="F")
    lattice = lattice + grid.face_offsets[axis]
    low = np.full(grid.fine, -1, dtype=np.int64)
    high = np.full(grid.fine, -1, dtype=np.int64)
    index_low = [slice(None)] * grid.dim
    index_low[axis] = slice(1, None)
    index_high = [slice(None)] * grid.dim
    index_high[axis] = slice(None, -1)
    low[tuple(index_low)] = lattice
    high[tuple(index_high)] = lattice
    return low.ravel(order="F"), high.ravel(order="F")


def block_ids(grid, multi) -> np.ndarray:
    multi = np.asarray(multi)
    return np.ravel_multi_index(tuple(multi[..., a] for a in range(grid.dim)),
                                grid.coarse, order="F")


def block_multi(grid, ids) -> np.ndarray:
    unraveled = np.unravel_index(np.asarray(ids), grid.coarse, order="F")
    return np.stack(unraveled, axis=-1)


def box_cells(grid, lo, hi) -> np.ndarray:
    """Ascending cell ids of the box [lo, hi) in cell coordinates."""
    axes = [np.arange(lo[a], hi[a]) for a in range(grid.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    multi = np.stack([m.ravel() for m in mesh], axis=-1)
    return np.sort(cell_ids(grid, multi))


def block_cells(grid, block) -> np.ndarray:
    """Fine cells of one coarse block, ascending."""
    m = grid.block_size
    b = block_multi(grid, block)
    lo = [b[a] * m[a] for a in range(grid.dim)]
    hi = [(b[a] + 1) * m[a] for a in range(grid.dim)]
    return box_cells(grid, lo, hi)


def oversample(grid, block, layers: int) -> np.ndarray:
    """Cells of a coarse block grown by `layers` fine cells per side,
    clipped at the domain boundary.  layers=0 returns the block itself."""
    if layers < 0:
        raise ValueError(f"layers must be non-negative, got {layers}")
    m = grid.block_size
    b = block_multi(grid, block)
    lo = [max(0, b[a] * m[a] - layers) for a in range(grid.dim)]
    hi = [min(grid.fine[a], (b[a] + 1) * m[a] + layers) for a in range(grid.dim)]
    return box_cells(grid, lo, hi)


def velocity_dofs_interior_to(grid, cells) -> np.ndarray:
    """Velocity dofs whose two neighbouring cells both lie in `cells`.

    Returned ascending, which groups them x-faces first exactly like the
    global numbering.
    """
    mask = np.zeros(grid.n_cells, dtype=bool)
    mask[np.asarray(cells)] = True
    spatial = mask.reshape(grid.fine, order="F")
    picked = []
    for axis in range(grid.dim):
        index_lo = [slice(None)] * grid.dim
        index_lo[axis] = slice(None, -1)
        index_hi = [slice(None)] * grid.dim
        index_hi[axis] = slice(1, None)
        both = spatial[tuple(index_lo)] & spatial[tuple(index_hi)]
        local = np.flatnonzero(both.ravel(order="F"))
        picked.append(local + grid.face_offsets[axis])
    return np.concatenate(picked)


@lru_cache(maxsize=32)
def coarse_faces(grid) -> tuple:
    """All interior coarse faces, axis-major then lexicographic."""
    faces = []
    m = grid.block_size
    for axis in range(grid.dim):
        layer_counts = [grid.coarse[a] - 1 if a == axis else grid.coarse[a]
                        for a in range(grid.dim)]
        axes = [np.arange(c) for c in layer_counts]
        mesh = np.meshgrid(*axes, indexing="ij")
        multi = np.stack([mm.ravel(order="F") for mm in mesh], axis=-1)
        measure = float(np.prod(grid.H) / grid.H[axis])
        for coords in multi:
            lower = coords.copy()
            upper = coords.copy()
            upper[axis] += 1
            fine_faces = _coarse_face_fine_faces(grid, axis, coords)
            faces.append(CoarseFace(
                index=len(faces),
                axis=axis,
                blocks=(int(block_ids(grid, lower)), int(block_ids(grid, upper))),
                fine_faces=fine_faces,
                measure=measure,
            ))
    return tuple(faces)


def _coarse_face_fine_faces(grid, axis, coords):
    """Fine-face dofs on the coarse face at block coords, lexicographic
    in the orthogonal coordinates."""
    m = grid.block_size
    ranges = []
    for a in range(grid.dim):
        if a == axis:
            # lower neighbouring cell sits one layer below the interface
            ranges.append(np.array([(coords[a] + 1) * m[a] - 1]))
        else:
            ranges.append(np.arange(coords[a] * m[a], (coords[a] + 1) * m[a]))
    mesh = np.meshgrid(*ranges, indexing="ij")
    multi = np.stack([mm.ravel(order="F") for mm in mesh], axis=-1)
    return np.asarray(face_id_from_low_cell(grid, axis, multi))


def neighborhood_cells(grid, face: CoarseFace) -> np.ndarray:
    """Cells of the two blocks sharing a coarse face, ascending."""
    return np.sort(np.concatenate([block_cells(grid, face.blocks[0]),
                                   block_cells(grid, face.blocks[1])]))


def face_adjacent_cells(grid, face_ids):
    """(lower, upper) cell ids of each face in `face_ids`."""
    face_ids = np.asarray(face_ids, dtype=np.int64)
    lo = np.empty(face_ids.shape, dtype=np.int64)
    hi = np.empty(face_ids.shape, dtype=np.int64)
    for axis in range(grid.dim):
        start = grid.face_offsets[axis]
        in_axis = (face_ids >= start) & (face_ids < start + grid.axis_face_count(axis))
        if not in_axis.any():
            continue
        local = face_ids[in_axis] - start
        multi = np.stack(np.unravel_index(local, grid.axis_face_shape(axis),
                                          order="F"), axis=-1)
        lo[in_axis] = cell_ids(grid, multi)
        upper = multi.copy()
        upper[:, axis] += 1
        hi[in_axis] = cell_ids(grid, upper)
    return lo, hi
