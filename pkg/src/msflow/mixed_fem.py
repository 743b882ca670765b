"""Lowest-order mixed discretization of Darcy flow on two-scale grids.

The velocity space uses one dof per interior fine face holding the
(constant) normal velocity; pressures are cell-wise constants.  With a
cell-wise coefficient the velocity mass matrix integrates exactly: per
cell and axis the two opposing face dofs couple through the block

    volume / coeff * [[1/3, 1/6], [1/6, 1/3]]

and faces of different axes never couple.  The divergence matrix has one
row per cell with signed face measures, so constant fields are exactly
divergence free and column sums vanish (interior faces only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import mesh


@dataclass
class PermeabilityField:
    """Cell-wise permeability with an optional mobility multiplier.

    `values` is the rock permeability per cell; `mobility`, when present,
    scales it cell by cell (two-phase total mobility).  The product is
    what enters the discretization, always through its inverse.
    """

    values: np.ndarray
    mobility: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if np.any(self.values <= 0) or not np.all(np.isfinite(self.values)):
            bad = int(np.argmin(self.values))
            raise ValueError(
                f"permeability must be positive and finite; cell {bad} has "
                f"value {self.values[bad]!r}"
            )
        if self.mobility is not None:
            self.mobility = np.asarray(self.mobility, dtype=float).ravel()
            if self.mobility.shape != self.values.shape:
                raise ValueError("mobility and permeability sizes differ")
            if np.any(self.mobility <= 0):
                raise ValueError("mobility must be positive")

    def coefficient(self) -> np.ndarray:
        """Effective cell coefficient (permeability times mobility)."""
        if self.mobility is None:
            return self.values
        return self.values * self.mobility


@dataclass
class MixedOperators:
    """Assembled fine-scale operators A (velocity mass), B (divergence)
    and the source functional F.

    `coefficient` keeps the cell coefficient the mass matrix was built
    from; the structured block solvers rebuild their local systems from
    it instead of slicing A.
    """

    grid: mesh.CartesianTwoScaleGrid
    A: sparse.csr_matrix
    B: sparse.csr_matrix
    F: np.ndarray
    coefficient: np.ndarray | None = None


def uniform_field(grid, value=1.0) -> PermeabilityField:
    return PermeabilityField(np.full(grid.n_cells, float(value)))


def assemble_velocity_mass(grid, field: PermeabilityField) -> sparse.csr_matrix:
    """Velocity mass matrix weighted by the inverse cell coefficient."""
    coeff = field.coefficient()
    if coeff.size != grid.n_cells:
        raise ValueError(
            f"field has {coeff.size} cells, grid has {grid.n_cells}"
        )
    inv = grid.cell_volume / coeff
    rows, cols, vals = [], [], []
    for axis in range(grid.dim):
        low, high = mesh.cell_face_ids(grid, axis)
        both = (low >= 0) & (high >= 0)
        only_low = (low >= 0) & ~both
        only_high = (high >= 0) & ~both
        l, h, w = low[both], high[both], inv[both]
        rows += [l, h, l, h]
        cols += [l, h, h, l]
        vals += [w / 3.0, w / 3.0, w / 6.0, w / 6.0]
        for sel, ids in ((only_low, low), (only_high, high)):
            rows.append(ids[sel])
            cols.append(ids[sel])
            vals.append(inv[sel] / 3.0)
    n = grid.n_velocity
    A = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return A.tocsr()


def assemble_divergence(grid) -> sparse.csr_matrix:
    """Row per cell: +area on high faces, -area on low faces."""
    rows, cols, vals = [], [], []
    cells = np.arange(grid.n_cells)
    for axis in range(grid.dim):
        low, high = mesh.cell_face_ids(grid, axis)
        area = grid.face_area(axis)
        has_low = low >= 0
        has_high = high >= 0
        rows += [cells[has_low], cells[has_high]]
        cols += [low[has_low], high[has_high]]
        vals += [np.full(has_low.sum(), -area), np.full(has_high.sum(), area)]
    B = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n_cells, grid.n_velocity),
    )
    return B.tocsr()


def assemble_source(grid, density=None, wells=None) -> np.ndarray:
    """Source functional: cell average of a density field plus point
    rates, rejected unless it integrates to zero (pure Neumann flow)."""
    F = np.zeros(grid.n_cells)
    if density is not None:
        density = np.asarray(density, dtype=float).ravel()
        if density.size != grid.n_cells:
            raise ValueError(f"density has {density.size} values for "
                             f"{grid.n_cells} cells")
        F += density * grid.cell_volume
    if wells is not None:
        for cell, rate in wells:
            F[int(cell)] += float(rate)
    total = abs(F.sum())
    scale = np.abs(F).sum()
    if total > 1e-12 * max(1.0, scale):
        raise ValueError(
            f"source does not balance: net rate {F.sum():.3e} "
            f"(gross {scale:.3e}); a compatible Neumann problem needs zero net"
        )
    return F


def assemble_operators(grid, field, density=None, wells=None) -> MixedOperators:
    return MixedOperators(
        grid=grid,
        A=assemble_velocity_mass(grid, field),
        B=assemble_divergence(grid),
        F=assemble_source(grid, density=density, wells=wells),
        coefficient=field.coefficient(),
    )


def bordered_saddle_matrix(A, B) -> sparse.csc_matrix:
    """[[A, B^T, 0], [B, 0, 1], [0, 1^T, 0]].

    The all-ones border on the pressure block pins the pressure mean and
    absorbs the compatibility multiplier; no dof is pinned.
    """
    nv = A.shape[0]
    npr = B.shape[0]
    ones = sparse.csr_matrix(np.ones((npr, 1)))
    blocks = [
        [A, B.T, sparse.csr_matrix((nv, 1))],
        [B, None, ones],
        [sparse.csr_matrix((1, nv)), ones.T, None],
    ]
    return sparse.bmat(blocks, format="csc")


@dataclass
class LocalSaddle:
    """Submatrices of (A, B) for a cell subset plus the mean-pressure
    border.  `velocity_idx` and `pressure_idx` map local to global."""

    velocity_idx: np.ndarray
    pressure_idx: np.ndarray
    A: sparse.csr_matrix
    B: sparse.csr_matrix

    @property
    def n_velocity(self) -> int:
        return len(self.velocity_idx)

    @property
    def n_pressure(self) -> int:
        return len(self.pressure_idx)

    @property
    def size(self) -> int:
        return self.n_velocity + self.n_pressure + 1

    def bordered_matrix(self) -> sparse.csc_matrix:
        return bordered_saddle_matrix(self.A, self.B)

    def assemble_rhs(self, velocity_rhs, pressure_rhs) -> np.ndarray:
        """Stack the two right-hand sides over a zero border entry.

        Either part may be None for zero.
        """
        rhs = np.zeros(self.size)
        if velocity_rhs is not None:
            rhs[: self.n_velocity] = velocity_rhs
        if pressure_rhs is not None:
            rhs[self.n_velocity:-1] = pressure_rhs
        return rhs

    def split(self, solution):
        """Solution vector -> (velocity, pressure, multiplier)."""
        nv = self.n_velocity
        return solution[:nv], solution[nv:-1], float(solution[-1])


def extract_local_saddle(operators: MixedOperators, velocity_idx,
                         pressure_idx) -> LocalSaddle:
    """Restrict the assembled operators to an index pair.

    An empty velocity set is allowed (single-cell blocks); the bordered
    system then degenerates to the pressure-mean constraint alone.
    """
    vidx = np.asarray(velocity_idx, dtype=np.int64)
    pidx = np.asarray(pressure_idx, dtype=np.int64)
    if len(pidx) == 0:
        raise ValueError("a local saddle needs at least one pressure cell")
    A = operators.A[vidx][:, vidx] if len(vidx) else sparse.csr_matrix((0, 0))
    B = operators.B[pidx][:, vidx] if len(vidx) else \
        sparse.csr_matrix((len(pidx), 0))
    return LocalSaddle(velocity_idx=vidx, pressure_idx=pidx,
                       A=A.tocsr(), B=B.tocsr())


def apply_saddle(operators: MixedOperators, v, p):
    """(A v + B^T p, B v) without forming the block matrix."""
    v = np.asarray(v, dtype=float)
    p = np.asarray(p, dtype=float)
    return operators.A @ v + operators.B.T @ p, operators.B @ v


def _tridiag_factor(diag, off):
    """Batched LDL^T of symmetric positive definite tridiagonals.

    `diag` has the line along the last axis, `off` one entry fewer.
    Returns the unit-lower multipliers and the pivots.
    """
    n = diag.shape[-1]
    e = diag.copy()
    l = off.copy()
    for j in range(n - 1):
        l[..., j] = off[..., j] / e[..., j]
        e[..., j + 1] = diag[..., j + 1] - l[..., j] * off[..., j]
    return l, e


def _tridiag_solve(l, e, rhs):
    """Solve the factored tridiagonals for `rhs` batched the same way."""
    n = e.shape[-1]
    x = rhs.copy()
    for j in range(1, n):
        x[..., j] -= l[..., j - 1] * x[..., j - 1]
    x /= e
    for j in range(n - 2, -1, -1):
        x[..., j] -= l[..., j] * x[..., j + 1]
    return x


class _BoxFactor:
    """Direct factorization of the bordered saddle on a box of cells.

    On a tensor grid the velocity mass matrix decouples into independent
    tridiagonal systems along grid lines, one per axis and transverse
    position.  Eliminating the velocities therefore costs O(n), and only
    the much smaller pressure Schur complement (a cell Laplacian, dense
    along lines) needs a sparse factorization.  This is what makes the
    per-block solves affordable in 3D, where factoring the full local
    saddle directly is an order of magnitude more fill.

    Instances depend on the box shape and cell coefficients only, so
    identical blocks (uniform background) share one factor.
    """

    def __init__(self, grid, shape, coeff_box: np.ndarray):
        from .sparse_linalg import factor as factor_matrix

        self.shape = tuple(int(s) for s in shape)
        self.dim = grid.dim
        self.n_cells = int(np.prod(self.shape))
        vol = grid.cell_volume
        self.areas = [grid.face_area(a) for a in range(grid.dim)]
        w = (vol / np.asarray(coeff_box, dtype=float)).reshape(
            self.shape, order="F")

        self.axis_counts = []
        self._tri = []
        self._line_shape = []
        cell_idx = np.arange(self.n_cells).reshape(self.shape, order="F")
        rows, cols, data = [], [], []
        for a in range(self.dim):
            s = self.shape[a]
            if s < 2:
                self.axis_counts.append(0)
                self._tri.append(None)
                self._line_shape.append(None)
                continue
            w_lines = np.moveaxis(w, a, -1).reshape(-1, s)
            diag = (w_lines[:, :-1] + w_lines[:, 1:]) / 3.0
            off = w_lines[:, 1:-1] / 6.0
            l, e = _tridiag_factor(diag, off)
            self._tri.append((l, e, diag, off))
            self.axis_counts.append(w_lines.shape[0] * (s - 1))

            # Schur contribution: dense (s x s) block per line
            area = self.areas[a]
            G = np.zeros((s, s - 1))
            G[np.arange(s - 1), np.arange(s - 1)] = area
            G[np.arange(1, s), np.arange(s - 1)] = -area
            rhs = np.broadcast_to(G.T, (w_lines.shape[0], s - 1, s))
            X = _tridiag_solve(l[:, None, :], e[:, None, :],
                               np.ascontiguousarray(rhs.transpose(0, 2, 1))
                               ).transpose(0, 2, 1)
            D = np.einsum("cf,lfg->lcg", G, X)
            ids = np.moveaxis(cell_idx, a, -1).reshape(-1, s)
            rows.append(np.broadcast_to(ids[:, :, None], D.shape).ravel())
            cols.append(np.broadcast_to(ids[:, None, :], D.shape).ravel())
            data.append(D.ravel())

        self.n_velocity = int(sum(self.axis_counts))
        n = self.n_cells
        if data:
            S = sparse.coo_matrix(
                (np.concatenate(data),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(n, n)).tocsc()
        else:
            S = sparse.csc_matrix((n, n))
        ones = np.ones((n, 1))
        self._schur = factor_matrix(
            sparse.bmat([[S, ones], [ones.T, None]], format="csc"))

    def _to_lines(self, flat, a, length, k):
        """(count, k) flat F-order field -> (lines, k, length)."""
        dims = list(self.shape)
        dims[a] = length
        arr = flat.reshape(tuple(dims) + (k,), order="F")
        arr = np.moveaxis(arr, a, -1)
        return np.ascontiguousarray(arr.reshape(-1, k, length))

    def _from_lines(self, lines, a, length, k):
        dims = list(self.shape)
        dims[a] = length
        lead = tuple(d for i, d in enumerate(dims) if i != a)
        arr = lines.reshape(lead + (k, length))
        arr = np.moveaxis(arr, -1, a)
        return arr.reshape(-1, k, order="F")

    def _mass_solve(self, rhs):
        out = np.empty_like(rhs)
        k = rhs.shape[1]
        start = 0
        for a in range(self.dim):
            n_a = self.axis_counts[a]
            if n_a:
                s = self.shape[a]
                l, e, _, _ = self._tri[a]
                lines = self._to_lines(rhs[start:start + n_a], a, s - 1, k)
                x = _tridiag_solve(l[:, None, :], e[:, None, :], lines)
                out[start:start + n_a] = self._from_lines(x, a, s - 1, k)
            start += n_a
        return out

    def _mass_apply(self, v):
        out = np.empty_like(v)
        k = v.shape[1]
        start = 0
        for a in range(self.dim):
            n_a = self.axis_counts[a]
            if n_a:
                s = self.shape[a]
                _, _, diag, off = self._tri[a]
                lines = self._to_lines(v[start:start + n_a], a, s - 1, k)
                y = diag[:, None, :] * lines
                if s > 2:
                    y[..., :-1] += off[:, None, :] * lines[..., 1:]
                    y[..., 1:] += off[:, None, :] * lines[..., :-1]
                out[start:start + n_a] = self._from_lines(y, a, s - 1, k)
            start += n_a
        return out

    def _div_apply(self, v):
        k = v.shape[1]
        out = np.zeros((self.n_cells, k))
        start = 0
        for a in range(self.dim):
            n_a = self.axis_counts[a]
            if n_a:
                s = self.shape[a]
                area = self.areas[a]
                lines = self._to_lines(v[start:start + n_a], a, s - 1, k)
                cells = np.zeros((lines.shape[0], k, s))
                cells[..., :-1] += area * lines
                cells[..., 1:] -= area * lines
                out += self._from_lines(cells, a, s, k)
            start += n_a
        return out

    def _grad_apply(self, p):
        k = p.shape[1]
        out = np.empty((self.n_velocity, k))
        start = 0
        for a in range(self.dim):
            n_a = self.axis_counts[a]
            if n_a:
                s = self.shape[a]
                area = self.areas[a]
                cells = self._to_lines(p, a, s, k)
                faces = area * (cells[..., :-1] - cells[..., 1:])
                out[start:start + n_a] = self._from_lines(faces, a, s - 1, k)
            start += n_a
        return out

    def _pass(self, a, b, tau):
        g = self._div_apply(self._mass_solve(a)) - b
        srhs = np.vstack([g, tau[None, :]])
        sol = self._schur.solve(srhs, refine=0)
        p = sol[:self.n_cells]
        mu = -sol[-1]
        v = self._mass_solve(a - self._grad_apply(p))
        return v, p, mu

    def solve_core(self, a, b, tau, refine=1):
        v, p, mu = self._pass(a, b, tau)
        for _ in range(refine):
            ra = a - self._mass_apply(v) - self._grad_apply(p)
            rb = b - self._div_apply(v) - mu[None, :]
            rt = tau - p.sum(axis=0)
            dv, dp, dmu = self._pass(ra, rb, rt)
            v, p, mu = v + dv, p + dp, mu + dmu
        return v, p, mu


class BlockSolver:
    """Bordered saddle solver on one coarse block, optionally oversampled.

    Thin wrapper pairing the global index sets with a `_BoxFactor`.
    Presents the same rhs/solution layout as LocalSaddle:
    [velocity; pressure; border].
    """

    def __init__(self, block: int, velocity_idx, pressure_idx,
                 factor: _BoxFactor):
        self.block = block
        self.velocity_idx = velocity_idx
        self.pressure_idx = pressure_idx
        self.factor = factor
        if len(velocity_idx) != factor.n_velocity:
            raise ValueError(
                f"block {block}: {len(velocity_idx)} interior dofs but the "
                f"box factor expects {factor.n_velocity}")

    @property
    def n_velocity(self) -> int:
        return len(self.velocity_idx)

    @property
    def n_pressure(self) -> int:
        return len(self.pressure_idx)

    @property
    def size(self) -> int:
        return self.n_velocity + self.n_pressure + 1

    def assemble_rhs(self, velocity_rhs, pressure_rhs) -> np.ndarray:
        rhs = np.zeros(self.size)
        if velocity_rhs is not None:
            rhs[: self.n_velocity] = velocity_rhs
        if pressure_rhs is not None:
            rhs[self.n_velocity:-1] = pressure_rhs
        return rhs

    def solve(self, rhs, refine=1) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        single = rhs.ndim == 1
        if single:
            rhs = rhs[:, None]
        nv = self.n_velocity
        v, p, mu = self.factor.solve_core(
            rhs[:nv], rhs[nv:-1], rhs[-1], refine=refine)
        out = np.vstack([v, p, mu[None, :]])
        return out[:, 0] if single else out

    def split(self, solution):
        nv = self.n_velocity
        return solution[:nv], solution[nv:-1], float(solution[-1])


def block_solvers(grid, operators: MixedOperators,
                  overlap: int = 0) -> list:
    """Factorized solvers for every coarse block, oversampled by
    `overlap` fine layers (clipped at the domain boundary).

    Blocks whose region shape and coefficients coincide share one
    factorization, which collapses the setup cost on fields with a
    uniform background.
    """
    if operators.coefficient is None:
        raise ValueError("operators carry no cell coefficient; assemble "
                         "them with assemble_operators")
    coeff = operators.coefficient
    solvers = []
    cache: dict = {}
    for b in range(grid.n_blocks):
        cells = mesh.oversample(grid, b, overlap)
        lo = mesh.cell_multi(grid, cells[0])
        hi = mesh.cell_multi(grid, cells[-1])
        shape = tuple(int(h - l + 1) for l, h in zip(lo, hi))
        coeff_box = coeff[cells]
        key = (shape, coeff_box.tobytes())
        factor = cache.get(key)
        if factor is None:
            factor = _BoxFactor(grid, shape, coeff_box)
            cache[key] = factor
        vidx = mesh.velocity_dofs_interior_to(grid, cells)
        solvers.append(BlockSolver(b, vidx, cells, factor))
    return solvers
