"""
Vertex-centred tensor grids on the ball with the degenerate weight |x_n|^a.

The thin plane {x_n = 0} is always an exact grid layer.  Every quadrature in
this module integrates the weight exactly over cell intervals (through the
antiderivative sign(t)|t|^(1+a)/(1+a)) or samples it at sphere nodes that
never lie on the plane, so the weight itself is never evaluated at x_n = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Union

import numpy as np
from numpy.typing import NDArray
from scipy import linalg, special


class GridError(ValueError):
    """Raised for invalid grid parameters or out-of-domain requests."""


@dataclass(frozen=True)
class ProblemParams:
    n: int = 2
    s: float = 0.5
    h: float = 1.0 / 64
    R_dom: float = 1.0

    def __post_init__(self):
        if self.n not in (2, 3):
            raise GridError(f"dimension n must be 2 or 3, got {self.n}")
        if not 0.0 < self.s < 1.0:
            raise GridError(f"s must lie in (0, 1), got {self.s}")
        if not self.h > 0.0:
            raise GridError(f"grid spacing h must be positive, got {self.h}")
        if not self.R_dom > 0.0:
            raise GridError(f"R_dom must be positive, got {self.R_dom}")
        cells = self.R_dom / self.h
        if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
            raise GridError(f"h={self.h} does not divide R_dom={self.R_dom}")

    @property
    def a(self) -> float:
        return 1.0 - 2.0 * self.s

    @property
    def half_cells(self) -> int:
        """Number of cells between the centre and the domain edge."""
        return int(round(self.R_dom / self.h))

    def with_(self, **changes) -> "ProblemParams":
        values = dict(n=self.n, s=self.s, h=self.h, R_dom=self.R_dom)
        values.update(changes)
        return ProblemParams(**values)


def weight_antiderivative(t: NDArray, a: float) -> NDArray:
    """Antiderivative of |t|^a vanishing at 0 (odd in t, finite for a > -1)."""
    t = np.asarray(t, dtype=float)
    return np.sign(t) * np.abs(t) ** (1.0 + a) / (1.0 + a)


@dataclass(eq=False)
class Grid:
    """Tensor grid over [-R, R]^n; the last axis is x_n and index N is the plane."""

    params: ProblemParams
    coords: NDArray = field(init=False, repr=False)

    def __post_init__(self):
        N = self.params.half_cells
        self.coords = np.arange(-N, N + 1, dtype=float) * self.params.h

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def h(self) -> float:
        return self.params.h

    @property
    def N(self) -> int:
        return self.params.half_cells

    @property
    def shape(self) -> tuple[int, ...]:
        return (2 * self.N + 1,) * self.n

    @property
    def plane_index(self) -> int:
        return self.N

    @cached_property
    def points(self) -> NDArray:
        """Node coordinates, shape ``shape + (n,)``."""
        mesh = np.meshgrid(*([self.coords] * self.n), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def radius(self) -> NDArray:
        return np.sqrt(np.sum(self.points**2, axis=-1))

    @cached_property
    def mask(self) -> NDArray:
        """Nodes inside the closed ball B_{R_dom}."""
        R = self.params.R_dom
        return self.radius <= R * (1.0 + 1e-12)

    @cached_property
    def plane_mask(self) -> NDArray:
        m = np.zeros(self.shape, dtype=bool)
        idx = [slice(None)] * self.n
        idx[-1] = self.plane_index
        m[tuple(idx)] = True
        return m & self.mask

    @property
    def num_active(self) -> int:
        return int(self.mask.sum())

    def index_of(self, x: NDArray) -> tuple[int, ...] | None:
        """Multi-index of the node at ``x`` or None if ``x`` is not a node."""
        x = np.asarray(x, dtype=float)
        k = (x / self.h) + self.N
        kr = np.round(k)
        if np.any(np.abs(k - kr) > 1e-9) or np.any(kr < 0) or np.any(kr > 2 * self.N):
            return None
        return tuple(int(v) for v in kr)

    def reach(self, x0: NDArray) -> float:
        """Largest radius r with B_r(x0) strictly inside the domain."""
        return self.params.R_dom - float(np.linalg.norm(x0))

    @cached_property
    def cell_centers(self) -> NDArray:
        c = 0.5 * (self.coords[:-1] + self.coords[1:])
        mesh = np.meshgrid(*([c] * self.n), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def cell_weight(self) -> NDArray:
        """Exact ∫_cell |x_n|^a dx for every cell (shape (2N,)*n)."""
        a = self.params.a
        F = weight_antiderivative(self.coords, a)
        wn = np.diff(F)
        w = wn * self.h ** (self.n - 1)
        shape = [1] * self.n
        shape[-1] = -1
        return np.broadcast_to(w.reshape(shape), (2 * self.N,) * self.n)


def build_grid(params: ProblemParams, min_cells: int = 16) -> Grid:
    """Build the vertex-centred grid; ``min_cells`` counts cells across the diameter."""
    cells_across = 2 * params.half_cells
    if cells_across < min_cells:
        raise GridError(
            f"grid too coarse: {cells_across} cells across the domain (< {min_cells})"
        )
    return Grid(params)


@dataclass(eq=False)
class ScalarField:
    grid: Grid
    values: NDArray
    symmetric: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise GridError(f"field shape {v.shape} does not match grid {self.grid.shape}")
        v[~self.grid.mask] = np.nan
        if not np.all(np.isfinite(v[self.grid.mask])):
            raise GridError("field has non-finite values at active nodes")
        v.setflags(write=False)
        self.values = v
        if self.symmetric and not np.array_equal(
            np.nan_to_num(v), np.nan_to_num(np.flip(v, axis=-1))
        ):
            raise GridError("field flagged symmetric but is not even in x_n")

    @classmethod
    def from_function(
        cls, grid: Grid, func: Callable[[NDArray], NDArray], symmetric: bool = False
    ) -> "ScalarField":
        vals = np.full(grid.shape, np.nan)
        vals[grid.mask] = func(grid.points[grid.mask])
        if symmetric:
            # enforce bitwise evenness: copy the upper half onto the lower half
            vals = symmetrize(vals)
        return cls(grid, vals, symmetric=symmetric)

    def __mul__(self, c: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * c, symmetric=self.symmetric)

    __rmul__ = __mul__

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(
            self.grid, self.values + other.values, self.symmetric and other.symmetric
        )

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(
            self.grid, self.values - other.values, self.symmetric and other.symmetric
        )

    def reflected(self) -> "ScalarField":
        return ScalarField(self.grid, np.flip(self.values, axis=-1), self.symmetric)

    def plane_values(self) -> tuple[NDArray, NDArray]:
        """(plane node coordinates x̂, values) for active plane nodes."""
        m = self.grid.plane_mask
        return self.grid.points[m][:, :-1], self.values[m]


def symmetrize(values: NDArray) -> NDArray:
    v = np.array(values, dtype=float)
    N = v.shape[-1] // 2
    v[..., :N] = np.flip(v[..., N + 1 :], axis=-1)
    return v


@dataclass(eq=False)
class VectorField:
    grid: Grid
    values: NDArray  # shape grid.shape + (n,)


FieldLike = Union[ScalarField, Callable[[NDArray], NDArray]]


# ---------------------------------------------------------------------------
# differentiation and interpolation
# ---------------------------------------------------------------------------


def gradient(f: ScalarField) -> VectorField:
    """Central differences inside, one-sided second order where a neighbour is missing."""
    v = f.values
    h = f.grid.h
    out = np.full(v.shape + (f.grid.n,), np.nan)
    for k in range(f.grid.n):
        vm = np.moveaxis(v, k, -1)
        g = np.full(vm.shape, np.nan)
        centred = (vm[..., 2:] - vm[..., :-2]) / (2 * h)
        g[..., 1:-1] = centred
        # forward one-sided: -3u0 + 4u1 - u2
        fwd = np.full(vm.shape, np.nan)
        fwd[..., :-2] = (-3 * vm[..., :-2] + 4 * vm[..., 1:-1] - vm[..., 2:]) / (2 * h)
        bwd = np.full(vm.shape, np.nan)
        bwd[..., 2:] = (3 * vm[..., 2:] - 4 * vm[..., 1:-1] + vm[..., :-2]) / (2 * h)
        g = np.where(np.isfinite(g), g, fwd)
        g = np.where(np.isfinite(g), g, bwd)
        out[..., k] = np.moveaxis(g, -1, k)
    out[~f.grid.mask] = np.nan
    return VectorField(f.grid, out)


def cell_gradient(f: ScalarField) -> NDArray:
    """Gradient at cell centres from the 2^n cell corners (second order).

    Returns shape ``(2N,)*n + (n,)``; cells with an inactive corner are NaN.
    """
    v = f.values
    n = f.grid.n
    h = f.grid.h
    out = []
    for k in range(n):
        diff = np.diff(v, axis=k) / h
        # average over the remaining axes' two neighbouring edges
        for j in range(n):
            if j != k:
                diff = 0.5 * (np.take(diff, range(diff.shape[j] - 1), axis=j)
                              + np.take(diff, range(1, diff.shape[j]), axis=j))
        out.append(diff)
    return np.stack(out, axis=-1)


def cell_average(f: ScalarField) -> NDArray:
    v = f.values
    for k in range(f.grid.n):
        v = 0.5 * (np.take(v, range(v.shape[k] - 1), axis=k) + np.take(v, range(1, v.shape[k]), axis=k))
    return v


def interpolate(f: ScalarField | NDArray, p: NDArray, grid: Grid | None = None) -> NDArray:
    """Multilinear interpolation of nodal values at points ``p`` (shape (..., n))."""
    if isinstance(f, ScalarField):
        grid, vals = f.grid, f.values
    else:
        vals = f
        if grid is None:
            raise GridError("grid required when interpolating a raw array")
    p = np.asarray(p, dtype=float)
    n = grid.n
    if p.shape[-1] != n:
        raise GridError(f"points must have last dimension {n}")
    h, N = grid.h, grid.N
    q = p / h + N
    if np.any(q < -1e-9) or np.any(q > 2 * N + 1e-9):
        raise GridError("interpolation point outside the grid hull")
    i0 = np.clip(np.floor(q).astype(int), 0, 2 * N - 1)
    t = q - i0
    out = np.zeros(p.shape[:-1])
    extra = vals.shape[n:]
    if extra:
        out = np.zeros(p.shape[:-1] + extra)
    for corner in range(2**n):
        bits = [(corner >> k) & 1 for k in range(n)]
        wgt = np.ones(p.shape[:-1])
        idx = []
        for k, b in enumerate(bits):
            wgt = wgt * (t[..., k] if b else 1.0 - t[..., k])
            idx.append(i0[..., k] + b)
        cv = vals[tuple(idx)]
        if extra:
            wgt = wgt.reshape(wgt.shape + (1,) * len(extra))
        # zero-weight corners must not leak NaN from inactive nodes
        out = out + np.where(wgt == 0.0, 0.0, wgt * cv)
    return out


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def _check_ball(grid: Grid, x0: NDArray, r: float, margin: float) -> None:
    if r <= 0:
        raise GridError(f"radius must be positive, got {r}")
    if float(np.linalg.norm(x0)) + r + margin > grid.params.R_dom * (1 + 1e-12):
        raise GridError(
            f"ball of radius {r} around {np.asarray(x0).tolist()} exits the domain "
            f"(R_dom={grid.params.R_dom})"
        )


def _segment_length(lo: NDArray, hi: NDArray, c: float, r: float) -> NDArray:
    return np.clip(np.minimum(hi, c + r) - np.maximum(lo, c - r), 0.0, None)


def disk_rect_area(x0: NDArray, x1: NDArray, y0: NDArray, y1: NDArray, r: float) -> NDArray:
    """Exact area of {x²+y² < r²} ∩ [x0,x1]×[y0,y1], vectorised over rectangles."""
    x0, x1, y0, y1 = (np.asarray(v, dtype=float) for v in np.broadcast_arrays(x0, x1, y0, y1))

    def S(x):
        return np.sqrt(np.clip(r * r - x * x, 0.0, None))

    def P(x):
        xc = np.clip(x, -r, r)
        return 0.5 * (xc * S(xc) + r * r * np.arcsin(xc / r))

    bps = [x0, x1]
    for yy in (y0, y1):
        xb = np.sqrt(np.clip(r * r - yy * yy, 0.0, None))
        bps += [xb, -xb]
    bps += [np.full_like(x0, r), np.full_like(x0, -r)]
    B = np.stack([np.clip(b, x0, x1) for b in bps], axis=-1)
    B.sort(axis=-1)
    p, q = B[..., :-1], B[..., 1:]
    m = 0.5 * (p + q)
    Sm = S(m)
    inside = (np.abs(m) < r) & (q > p)
    y0e, y1e = y0[..., None], y1[..., None]
    top_is_line = y1e < Sm
    bot_is_line = y0e > -Sm
    top_int = np.where(top_is_line, y1e * (q - p), P(q) - P(p))
    bot_int = np.where(bot_is_line, y0e * (q - p), -(P(q) - P(p)))
    top_m = np.where(top_is_line, y1e, Sm)
    bot_m = np.where(bot_is_line, y0e, -Sm)
    piece = np.where(inside & (top_m > bot_m), top_int - bot_int, 0.0)
    return piece.sum(axis=-1)


def cell_fractions(grid: Grid, x0: NDArray, r: float) -> NDArray:
    """Fraction of each cell's volume inside B_r(x0)."""
    h = grid.h
    c = grid.cell_centers
    x0 = np.asarray(x0, dtype=float)
    d = c - x0
    half = 0.5 * h
    # nearest and farthest corner distances
    near = np.sqrt(np.sum(np.clip(np.abs(d) - half, 0.0, None) ** 2, axis=-1))
    far = np.sqrt(np.sum((np.abs(d) + half) ** 2, axis=-1))
    frac = np.zeros(grid.cell_weight.shape)
    frac[far <= r] = 1.0
    cut = (near < r) & (far > r)
    if not np.any(cut):
        return frac
    dc = d[cut]
    if grid.n == 2:
        area = disk_rect_area(dc[:, 0] - half, dc[:, 0] + half, dc[:, 1] - half, dc[:, 1] + half, r)
        frac[cut] = area / (h * h)
    else:
        m = 6
        off = (np.arange(m) + 0.5) / m - 0.5
        sub = np.stack(np.meshgrid(off, off, off, indexing="ij"), axis=-1).reshape(-1, 3) * h
        inside = np.sum((dc[:, None, :] + sub[None, :, :]) ** 2, axis=-1) < r * r
        frac[cut] = inside.mean(axis=1)
    return frac


def integrate_cells(grid: Grid, cell_values: NDArray, x0: NDArray, r: float) -> float:
    """∫_{B_r(x0)} f dμ_a given cell-centre values of f (midpoint rule)."""
    _check_ball(grid, x0, r, 0.0)
    frac = cell_fractions(grid, x0, r)
    w = frac * grid.cell_weight
    used = w > 0
    vals = cell_values[used]
    if not np.all(np.isfinite(vals)):
        raise GridError("integrand undefined on cells meeting the ball")
    return float(np.sum(w[used] * vals))


def weighted_volume_integral(f: ScalarField, x0: NDArray, r: float) -> float:
    """∫_{B_r(x0)} f dμ_a; cell values are corner averages."""
    return integrate_cells(f.grid, cell_average(f), x0, r)


@dataclass(frozen=True)
class SphereRule:
    """Nodes (unit directions) and weights for ∫_{∂B_r} · |x_n|^a dH^{n-1}."""

    directions: NDArray
    weights: NDArray


def gauss_jacobi(m: int, alpha: float, beta: float) -> tuple[NDArray, NDArray]:
    """m-point Gauss rule for (1-x)^alpha (1+x)^beta on [-1, 1].

    Golub-Welsch on the Jacobi recurrence. scipy's roots_jacobi loses accuracy
    when alpha = beta lies close to, but not at, -1/2.
    """
    k = np.arange(m, dtype=float)
    ab = alpha + beta
    with np.errstate(invalid="ignore", divide="ignore"):
        diag = (beta * beta - alpha * alpha) / ((2 * k + ab) * (2 * k + ab + 2))
        kk = k[1:]
        off2 = 4 * kk * (kk + alpha) * (kk + beta) * (kk + ab) / (
            (2 * kk + ab) ** 2 * (2 * kk + ab + 1) * (2 * kk + ab - 1)
        )
    # the first terms are 0/0 when alpha + beta is 0 or -1
    diag[0] = (beta - alpha) / (ab + 2)
    if m > 1:
        off2[0] = 4 * (1 + alpha) * (1 + beta) / ((2 + ab) ** 2 * (3 + ab))
    x, vec = linalg.eigh_tridiagonal(diag, np.sqrt(off2))
    mu0 = math.exp((ab + 1) * math.log(2.0) + math.lgamma(alpha + 1) + math.lgamma(beta + 1) - math.lgamma(ab + 2))
    return x, mu0 * vec[0] ** 2


def sphere_rule(n: int, r: float, h: float, a: float, weighted: bool = True) -> SphereRule:
    M = max(64, math.ceil(2 * math.pi * r / h))
    if n == 2:
        if not weighted:
            th = 2 * math.pi * np.arange(M) / M
            dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)
            return SphereRule(dirs, np.full(M, 2 * math.pi * r / M))
        # Gauss-Jacobi in t = cos θ on each semicircle: weight (1-t²)^((a-1)/2)
        m = (M + 1) // 2
        al = 0.5 * (a - 1.0)
        t, w = gauss_jacobi(m, al, al)
        st = np.sqrt(np.clip((1 - t) * (1 + t), 0.0, None))  # no cancellation at nodes near ±1
        up = np.stack([t, st], axis=-1)
        lo = np.stack([t, -st], axis=-1)
        dirs = np.concatenate([up, lo])
        wts = np.concatenate([w, w]) * r ** (1.0 + a)
        return SphereRule(dirs, wts)
    # n = 3: t = x_n / r with Gauss-Jacobi weight |t|^a on each hemisphere, trapezoid in azimuth
    mt = max(16, math.ceil(M / 4))
    if weighted:
        tg, wg = gauss_jacobi(mt, 0.0, a)  # on [-1,1] with (1+x)^a
        t = 0.5 * (tg + 1.0)
        wt = wg * 0.5 ** (1.0 + a)
    else:
        tg, wg = special.roots_legendre(mt)
        t = 0.5 * (tg + 1.0)
        wt = 0.5 * wg
    phi = 2 * math.pi * np.arange(M) / M
    T, PH = np.meshgrid(t, phi, indexing="ij")
    WT = np.broadcast_to(wt[:, None], T.shape) * (2 * math.pi / M)
    rho = np.sqrt(np.clip((1 - T) * (1 + T), 0.0, None))
    up = np.stack([rho * np.cos(PH), rho * np.sin(PH), T], axis=-1).reshape(-1, 3)
    lo = up * np.array([1.0, 1.0, -1.0])
    dirs = np.concatenate([up, lo])
    wexp = (2.0 + a) if weighted else 2.0
    wts = np.concatenate([WT.ravel(), WT.ravel()]) * r**wexp
    return SphereRule(dirs, wts)


def sphere_points(grid: Grid, x0: NDArray, r: float, weighted: bool = True) -> tuple[NDArray, NDArray, NDArray]:
    """(points, unit normals, weights) of the sphere rule around ``x0``."""
    _check_ball(grid, x0, r, math.sqrt(grid.n) * grid.h)
    rule = sphere_rule(grid.n, r, grid.h, grid.params.a, weighted)
    pts = np.asarray(x0, dtype=float) + r * rule.directions
    return pts, rule.directions, rule.weights


def sphere_integral(f: FieldLike, x0: NDArray, r: float, weighted: bool = True, grid: Grid | None = None) -> float:
    """∫_{∂B_r(x0)} f |x_n|^a dH^{n-1} (weight dropped when ``weighted`` is False)."""
    if isinstance(f, ScalarField):
        grid = f.grid
        func = lambda p: interpolate(f, p)  # noqa: E731
    else:
        func = f
        if grid is None:
            raise GridError("grid required with a callable integrand")
    pts, _, w = sphere_points(grid, x0, r, weighted)
    vals = func(pts)
    if not np.all(np.isfinite(vals)):
        raise GridError("integrand undefined on the sphere")
    return float(np.dot(w, vals))


def thin_disk_integral(f: FieldLike, x0: NDArray, r: float, grid: Grid | None = None) -> float:
    """∫_{B'_r(x0)} f dH^{n-1} by midpoint rule on plane nodes (dual cells clipped)."""
    if isinstance(f, ScalarField):
        grid = f.grid
    elif grid is None:
        raise GridError("grid required with a callable integrand")
    x0 = np.asarray(x0, dtype=float)
    _check_ball(grid, x0, r, 0.0)
    pm = grid.plane_mask
    xh = grid.points[pm][:, :-1]
    h = grid.h
    d = xh - x0[:-1]
    if grid.n == 2:
        w = _segment_length(d[:, 0] - h / 2, d[:, 0] + h / 2, 0.0, r)
    else:
        w = disk_rect_area(d[:, 0] - h / 2, d[:, 0] + h / 2, d[:, 1] - h / 2, d[:, 1] + h / 2, r)
    used = w > 0
    if isinstance(f, ScalarField):
        vals = f.values[pm][used]
    else:
        vals = f(grid.points[pm][used])
    return float(np.dot(w[used], vals))
