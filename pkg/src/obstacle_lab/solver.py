"""
Discrete thin obstacle problem on the half-ball x_n >= 0.

The weighted Dirichlet energy is assembled edge by edge on the upper half grid.
Edges strictly above the plane stand for themselves and their mirror images
(multiplicity 2); horizontal edges lying in the plane are counted once.  The
plane-layer vertical edge uses the weight at x_n = h/2, which makes the plane
row of the stencil the discrete counterpart of the weighted normal flux.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .grid import Grid, ProblemParams, ScalarField, symmetrize, weight_antiderivative

log = logging.getLogger(__name__)


class IncompatibleDataError(ValueError):
    """Boundary datum is asymmetric or negative where the boundary meets the plane."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, solution: "Solution"):
        super().__init__(message)
        self.solution = solution


class EnergyIncreaseError(RuntimeError):
    pass


BoundaryData = Callable[[NDArray], NDArray]


def _edge_weights(grid: Grid) -> tuple[NDArray, NDArray]:
    """(horizontal weight per layer j >= 0, vertical weight between layers j, j+1)."""
    h, a, N = grid.h, grid.params.a, grid.N
    layers = np.arange(N + 1)
    lo = np.where(layers == 0, -0.5, layers - 0.5) * h
    hi = (layers + 0.5) * h
    horiz = (weight_antiderivative(hi, a) - weight_antiderivative(lo, a)) / h
    vert = ((layers[:-1] + 0.5) * h) ** a
    return horiz, vert


@dataclass(eq=False)
class DiscreteProblem:
    grid: Grid
    A: sp.csr_matrix
    b: NDArray
    unknown_index: NDArray  # half-grid array -> unknown number or -1
    boundary_mask: NDArray  # half-grid Dirichlet nodes
    boundary_values: NDArray  # half-grid array, g at Dirichlet nodes, NaN elsewhere
    constrained: NDArray  # bool per unknown: lies on the plane
    multiplicity: NDArray  # per unknown: 1 on the plane, 2 above it
    datum: BoundaryData | None = field(default=None, repr=False)

    @property
    def num_unknowns(self) -> int:
        return self.b.shape[0]

    def to_half(self, x: NDArray) -> NDArray:
        """Half-grid array of nodal values from an unknown vector."""
        v = np.array(self.boundary_values, copy=True)
        m = self.unknown_index >= 0
        v[m] = x[self.unknown_index[m]]
        return v

    def to_field(self, x: NDArray) -> ScalarField:
        half = self.to_half(x)
        full = np.full(self.grid.shape, np.nan)
        full[..., self.grid.N :] = half
        return ScalarField(self.grid, symmetrize(full), symmetric=True)

    def to_full_array(self, x: NDArray) -> NDArray:
        """Full-grid array, even in x_n, with ``x`` at the unknowns and NaN elsewhere."""
        half = np.full(self.unknown_index.shape, np.nan)
        m = self.unknown_index >= 0
        half[m] = x[self.unknown_index[m]]
        full = np.full(self.grid.shape, np.nan)
        full[..., self.grid.N :] = half
        return symmetrize(full)

    def restrict(self, f: ScalarField) -> NDArray:
        """Unknown vector holding the values of ``f``."""
        half = f.values[..., self.grid.N :]
        m = self.unknown_index >= 0
        x = np.empty(self.num_unknowns)
        x[self.unknown_index[m]] = half[m]
        return x


def _half_view(grid: Grid, arr: NDArray) -> NDArray:
    return arr[..., grid.N :]


def assemble(grid: Grid, g: BoundaryData | ScalarField, check_sign: bool = True) -> DiscreteProblem:
    """Quadratic form and plane constraints of the discrete problem with Dirichlet datum ``g``.

    ``check_sign=False`` skips the plane-nonnegativity test, for evaluating the
    stencil on fields that are not obstacle data.
    """
    N, n, h = grid.N, grid.n, grid.h
    active = _half_view(grid, grid.mask)
    pts = grid.points[..., N:, :]

    # Dirichlet layer: active nodes with an inactive neighbour in the full grid
    full_active = grid.mask
    interior = full_active.copy()
    for k in range(n):
        padded = np.pad(full_active, [(1, 1) if j == k else (0, 0) for j in range(n)])
        sl_lo = [slice(None)] * n
        sl_hi = [slice(None)] * n
        sl_lo[k] = slice(0, -2)
        sl_hi[k] = slice(2, None)
        interior &= padded[tuple(sl_lo)] & padded[tuple(sl_hi)]
    interior_half = _half_view(grid, interior)
    bmask = active & ~interior_half

    if isinstance(g, ScalarField):
        gvals_full = g.values
        gb = _half_view(grid, gvals_full)[bmask]
        mirror = np.flip(gvals_full, axis=-1)[..., N:][bmask]
        datum = None
    else:
        bp = pts[bmask]
        gb = np.asarray(g(bp), dtype=float)
        mirror = np.asarray(g(bp * np.r_[np.ones(n - 1), -1.0]), dtype=float)
        datum = g
    if not np.all(np.isfinite(gb)):
        raise IncompatibleDataError("boundary datum is not finite on the Dirichlet layer")
    scale = max(1.0, float(np.max(np.abs(gb))) if gb.size else 1.0)
    if np.any(np.abs(gb - mirror) > 1e-12 * scale):
        raise IncompatibleDataError("boundary datum is not even in x_n")
    plane_b = np.zeros_like(bmask)
    plane_b[..., 0] = bmask[..., 0]
    gplane = np.full(bmask.shape, np.nan)
    gplane[bmask] = gb
    if check_sign and np.any(gplane[plane_b] < -1e-14 * scale):
        raise IncompatibleDataError("boundary datum is negative where the boundary meets the plane")

    bvals = np.full(bmask.shape, np.nan)
    bvals[bmask] = gb

    unknown = active & ~bmask
    index = np.full(bmask.shape, -1, dtype=np.int64)
    index[unknown] = np.arange(int(unknown.sum()))
    m = int(unknown.sum())

    horiz, vert = _edge_weights(grid)
    rows, cols, vals = [], [], []
    bvec = np.zeros(m)
    diag = np.zeros(m)
    for k in range(n):
        lo = [slice(None)] * n
        hi = [slice(None)] * n
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        both = active[lo] & active[hi]
        jl = np.arange(active.shape[-1])
        if k == n - 1:
            coef_layer = 2.0 * vert
            coef = np.broadcast_to(coef_layer, both.shape)
        else:
            mult = np.where(jl == 0, 1.0, 2.0)
            coef = np.broadcast_to(mult * horiz, both.shape)
        coef = coef * h ** (n - 2)
        il, ih = index[lo], index[hi]
        c = coef[both]
        il, ih = il[both], ih[both]
        vl, vh = bvals[lo][both], bvals[hi][both]
        # unknown-unknown couplings
        uu = (il >= 0) & (ih >= 0)
        rows += [il[uu], ih[uu]]
        cols += [ih[uu], il[uu]]
        vals += [-c[uu], -c[uu]]
        # diagonal contributions
        np.add.at(diag, il[il >= 0], c[il >= 0])
        np.add.at(diag, ih[ih >= 0], c[ih >= 0])
        # boundary couplings go to the right-hand side
        ub = (il >= 0) & (ih < 0)
        np.add.at(bvec, il[ub], c[ub] * vh[ub])
        bu = (il < 0) & (ih >= 0)
        np.add.at(bvec, ih[bu], c[bu] * vl[bu])
    rows.append(np.arange(m))
    cols.append(np.arange(m))
    vals.append(diag)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    A.sum_duplicates()
    A.sort_indices()

    layer = np.broadcast_to(np.arange(active.shape[-1]), active.shape)
    constrained = layer[unknown] == 0
    multiplicity = np.where(constrained, 1.0, 2.0)
    if np.any(diag <= 0):
        raise IncompatibleDataError("non-positive stencil weight")
    return DiscreteProblem(grid, A, bvec, index, bmask, bvals, constrained, multiplicity, datum)


@dataclass(eq=False)
class Solution:
    problem: DiscreteProblem
    u: ScalarField
    iterations: int
    final_update: float
    energy: float
    converged: bool = True


@numba.njit(cache=True, nogil=True)
def _half_energy(indptr, indices, data, b, x, c0):
    # x^T A x - 2 b^T x + c0, together with the sum of absolute terms (roundoff scale)
    e = 0.0
    mag = abs(c0)
    for i in range(x.shape[0]):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        e += x[i] * acc - 2.0 * b[i] * x[i]
        mag += abs(x[i] * acc) + abs(2.0 * b[i] * x[i])
    return e + c0, mag


@numba.njit(cache=True, nogil=True)
def _psor(indptr, indices, data, diag, b, x, constrained, omega, tol, max_iter, c0, check_every):
    m = x.shape[0]
    last_e, _ = _half_energy(indptr, indices, data, b, x, c0)
    upd = np.inf
    it = 0
    while it < max_iter:
        upd = 0.0
        for i in range(m):
            sigma = b[i]
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                if j != i:
                    sigma -= data[k] * x[j]
            new = (1.0 - omega) * x[i] + omega * sigma / diag[i]
            if constrained[i] and new < 0.0:
                new = 0.0
            d = abs(new - x[i])
            if d > upd:
                upd = d
            x[i] = new
        it += 1
        if it % check_every == 0:
            e, mag = _half_energy(indptr, indices, data, b, x, c0)
            if e > last_e + 1e-11 * max(1.0, mag):
                return it, upd, False
            last_e = e
        if upd < tol:
            break
    return it, upd, True


def _boundary_constant(p: DiscreteProblem) -> float:
    """Energy of edges joining two Dirichlet nodes (independent of the unknowns)."""
    grid = p.grid
    zero = np.zeros(p.num_unknowns)
    return quadratic_energy(grid, p.to_half(zero))


def quadratic_energy(grid: Grid, half_values: NDArray) -> float:
    """Σ_edges c_e (Δv)^2 over the half grid: the weighted Dirichlet energy on the ball."""
    n, h = grid.n, grid.h
    horiz, vert = _edge_weights(grid)
    total = 0.0
    for k in range(n):
        d = np.diff(half_values, axis=k)
        if k == n - 1:
            coef = 2.0 * vert
        else:
            jl = np.arange(half_values.shape[-1])
            coef = np.where(jl == 0, 1.0, 2.0) * horiz
        term = coef * d * d
        total += float(np.nansum(term))
    return total * h ** (n - 2)


def field_energy(f: ScalarField) -> float:
    """ℰ(f) for a symmetric field on the ball (both halves)."""
    return quadratic_energy(f.grid, f.values[..., f.grid.N :])


def harmonic_extension(p: DiscreteProblem) -> NDArray:
    """Unconstrained minimiser: the discrete L_a-harmonic extension of the datum."""
    return spla.spsolve(p.A.tocsc(), p.b)


def solve_psor(
    p: DiscreteProblem,
    omega: float = 1.5,
    tol: float = 1e-10,
    max_iter: int = 200_000,
    initial: NDArray | ScalarField | str | None = None,
    raise_on_failure: bool = True,
) -> Solution:
    """Projected SOR in lexicographic order; clamps plane unknowns at zero after each update.

    ``initial`` may be ``None``/"zero", "harmonic", an unknown vector or a field.
    Energy is re-evaluated every 50 sweeps and must not increase.
    """
    if not 0.0 < omega < 2.0:
        raise ValueError(f"omega must lie in (0, 2), got {omega}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if initial is None or (isinstance(initial, str) and initial == "zero"):
        x = np.zeros(p.num_unknowns)
    elif isinstance(initial, str) and initial == "harmonic":
        x = harmonic_extension(p)
    elif isinstance(initial, ScalarField):
        x = p.restrict(initial)
    else:
        x = np.array(initial, dtype=float)
    # PSOR lowers the energy monotonically only from a feasible start
    x[p.constrained] = np.maximum(x[p.constrained], 0.0)
    A = p.A
    diag = A.diagonal().copy()
    c0 = _boundary_constant(p)
    it, upd, monotone = _psor(
        A.indptr, A.indices, A.data, diag, p.b, x, p.constrained, omega, tol, max_iter, c0, 50
    )
    if not monotone:
        raise EnergyIncreaseError(f"energy increased during PSOR sweep {it}")
    energy = float(_half_energy(A.indptr, A.indices, A.data, p.b, x, c0)[0])
    sol = Solution(p, p.to_field(x), int(it), float(upd), energy, converged=upd < tol)
    log.debug("PSOR: %d sweeps, last update %.3e, energy %.12g", it, upd, energy)
    if not sol.converged and raise_on_failure:
        raise NonConvergenceError(
            f"PSOR did not converge in {max_iter} sweeps (last update {upd:.3e})", sol
        )
    return sol


def energy(sol: Solution) -> float:
    return field_energy(sol.u)


@dataclass(frozen=True)
class KktReport:
    max_residual: float  # |L_a u| off the contact set
    min_plane: float
    max_positive_flux: float
    max_complementarity: float
    contact_count: int

    def passed(self, tol: float) -> bool:
        return (
            self.max_residual <= tol
            and self.min_plane >= -tol
            and self.max_positive_flux <= tol
            and self.max_complementarity <= tol
        )


def discrete_flux(p: DiscreteProblem, x: NDArray) -> NDArray:
    """Residual b − A x per unknown; on plane rows divided by 2h^{n-1} it approximates R_a(u)."""
    return p.b - p.A @ x


def operator_residual(f: ScalarField) -> NDArray:
    """Discrete L_a f per unit weighted volume, from the stencil the solver uses.

    Each row (A f − b) is divided by the μ_a-measure of the node's dual cell, so the
    values approximate −|x_n|^{-a} div(|x_n|^a ∇f) = −(Δf + (a/x_n) ∂_n f), uniformly
    up to the plane.  Dirichlet-layer and inactive nodes are NaN.
    """
    grid = f.grid
    p = assemble(grid, f, check_sign=False)
    x = p.restrict(f)
    horiz, _ = _edge_weights(grid)
    layer = np.broadcast_to(np.arange(grid.N + 1), p.unknown_index.shape)[p.unknown_index >= 0]
    order = p.unknown_index[p.unknown_index >= 0]
    mass = np.empty(p.num_unknowns)
    mass[order] = horiz[layer]
    mass *= p.multiplicity * grid.h**grid.n
    return p.to_full_array((p.A @ x - p.b) / mass)


def kkt_check(sol: Solution, tol: float = 1e-10) -> KktReport:
    p = sol.problem
    h, n = p.grid.h, p.grid.n
    x = p.restrict(sol.u)
    r = discrete_flux(p, x)
    contact = p.constrained & (x <= 10 * tol)
    La = r / (p.multiplicity * h**n)
    off = ~contact
    flux = r[p.constrained] / (2 * h ** (n - 1))
    xp = x[p.constrained]
    return KktReport(
        max_residual=float(np.max(np.abs(La[off]))) if np.any(off) else 0.0,
        min_plane=float(np.min(xp)) if xp.size else 0.0,
        max_positive_flux=float(max(0.0, np.max(flux))) if flux.size else 0.0,
        max_complementarity=float(np.max(np.abs(xp * flux))) if flux.size else 0.0,
        contact_count=int(contact.sum()),
    )


def contact_mask(sol: Solution, tol: float = 1e-10) -> NDArray:
    """Full-grid boolean mask of plane nodes in the contact set (u <= 10 tol)."""
    return sol.u.grid.plane_mask & (np.nan_to_num(sol.u.values, nan=np.inf) <= 10 * tol)


def solve(
    params: ProblemParams,
    g: BoundaryData,
    omega: float = 1.5,
    tol: float = 1e-10,
    max_iter: int = 200_000,
    initial: str | None = None,
) -> Solution:
    from .grid import build_grid

    grid = build_grid(params)
    return solve_psor(assemble(grid, g), omega=omega, tol=tol, max_iter=max_iter, initial=initial)


def optimal_omega(grid: Grid) -> float:
    """Near-optimal SOR factor for the unconstrained Laplacian on the grid."""
    return 2.0 / (1.0 + math.sin(math.pi * grid.h / (2 * grid.params.R_dom)))


# ---------------------------------------------------------------------------
# field snapshots
# ---------------------------------------------------------------------------


def write_snapshot(f: ScalarField, path, extra: dict | None = None) -> None:
    """Text table ``index x_1 .. x_n value`` behind a one-line JSON header."""
    g = f.grid
    header = {
        "format": "obstacle-lab-field/1",
        "n": g.n,
        "s": g.params.s,
        "a": g.params.a,
        "h": g.h,
        "R_dom": g.params.R_dom,
        "symmetric": f.symmetric,
    }
    if extra:
        header.update(extra)
    flat_idx = np.flatnonzero(g.mask.ravel())
    pts = g.points.reshape(-1, g.n)[flat_idx]
    vals = f.values.ravel()[flat_idx]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write("# index " + " ".join(f"x{k + 1}" for k in range(g.n)) + " value\n")
        for i, p, v in zip(flat_idx, pts, vals):
            fh.write(f"{i} " + " ".join(f"{c:.17g}" for c in p) + f" {v:.17g}\n")


def read_snapshot(path) -> ScalarField:
    from .grid import build_grid

    with open(path, encoding="ascii") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing JSON header line")
        header = json.loads(first[2:])
        fh.readline()
        data = np.loadtxt(fh, ndmin=2)
    params = ProblemParams(n=header["n"], s=header["s"], h=header["h"], R_dom=header["R_dom"])
    grid = build_grid(params, min_cells=2)
    vals = np.full(grid.shape, np.nan).ravel()
    vals[data[:, 0].astype(np.int64)] = data[:, -1]
    return ScalarField(grid, vals.reshape(grid.shape), symmetric=bool(header.get("symmetric", False)))
