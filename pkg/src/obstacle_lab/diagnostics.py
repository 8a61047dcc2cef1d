"""Monotone quantities (H, D, frequency, Weiss energy) and residuals of the identities they satisfy."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .grid import (
    GridError,
    ScalarField,
    cell_gradient,
    gradient,
    integrate_cells,
    interpolate,
    sphere_points,
)

TRUST_FRACTION = 0.8
RADIUS_RATIO = 0.85
TOL_MONO = 1e-6
DIAGNOSTICS_HEADER = (
    "r", "H", "D", "N", "W", "res_rellich", "res_Hp", "res_Dp", "res_Db", "res_weiss",
)


class DiagnosticsError(ValueError):
    pass


class UndefinedFrequencyError(DiagnosticsError):
    """H vanishes, so the frequency quotient is undefined."""


class PreconditionError(DiagnosticsError):
    pass


class DegenerateFitError(DiagnosticsError):
    pass


class _Calculus:
    """Per-field cache of nodal and cell-centre gradients."""

    def __init__(self, u: ScalarField):
        self.u = u
        self.grid = u.grid
        self.s = u.grid.params.s
        self.a = u.grid.params.a
        self.n = u.grid.n
        self._grad = None
        self._cell_sq = None

    @property
    def grad(self) -> NDArray:
        if self._grad is None:
            self._grad = gradient(self.u).values
        return self._grad

    @property
    def cell_sq(self) -> NDArray:
        if self._cell_sq is None:
            g = cell_gradient(self.u)
            self._cell_sq = np.sum(g * g, axis=-1)
        return self._cell_sq

    def check(self, x0: NDArray, r: float) -> None:
        if x0.shape != (self.n,) or x0[-1] != 0.0:
            raise PreconditionError("center must be a point of the thin plane")
        limit = TRUST_FRACTION * self.grid.params.R_dom
        if float(np.linalg.norm(x0)) + r > limit * (1 + 1e-12):
            raise PreconditionError(
                f"radius {r} around {x0.tolist()} leaves the trusted region |x0|+r <= {limit}"
            )

    def H(self, x0: NDArray, r: float) -> float:
        pts, _, w = sphere_points(self.grid, x0, r)
        v = interpolate(self.u, pts)
        return float(np.dot(w, v * v))

    def D(self, x0: NDArray, r: float) -> float:
        return integrate_cells(self.grid, self.cell_sq, x0, r)

    def boundary_terms(self, x0: NDArray, r: float) -> dict[str, float]:
        """Sphere integrals of |∇u|², (∇u·ν)², u ∇u·ν and u², all with weight |x_n|^a."""
        pts, nu, w = sphere_points(self.grid, x0, r)
        v = interpolate(self.u, pts)
        g = interpolate(self.grad, pts, grid=self.grid)
        gn = np.sum(g * nu, axis=-1)
        return {
            "grad2": float(np.dot(w, np.sum(g * g, axis=-1))),
            "gn2": float(np.dot(w, gn * gn)),
            "ugn": float(np.dot(w, v * gn)),
            "u2": float(np.dot(w, v * v)),
            # integrand of the Weiss derivative in original coordinates
            "weiss": float(np.dot(w, (r * gn - (1 + self.s) * v) ** 2)),
        }


def _center(x0, n: int) -> NDArray:
    return np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)


def _weiss(H: float, D: float, r: float, n: int, s: float) -> float:
    return D / r ** (n + 1) - (1 + s) * H / r ** (n + 2)


def H_D_at(u: ScalarField, x0=None, r: float = 1.0) -> tuple[float, float]:
    """(∫_{∂B_r} u²|x_n|^a, ∫_{B_r} |∇u|² dμ_a) around x0."""
    c = _Calculus(u)
    x0 = _center(x0, c.n)
    c.check(x0, r)
    return c.H(x0, r), c.D(x0, r)


def _frequency_from(H: float, D: float, r: float) -> float:
    if not H > 0.0:
        raise UndefinedFrequencyError(f"H = {H} at r = {r}; trace vanishes on the sphere")
    return r * D / H


def frequency(u: ScalarField, x0=None, r: float = 1.0) -> float:
    H, D = H_D_at(u, x0, r)
    return _frequency_from(H, D, r)


def weiss_energy(u: ScalarField, x0=None, r: float = 1.0) -> float:
    H, D = H_D_at(u, x0, r)
    n, s = u.grid.n, u.grid.params.s
    W = _weiss(H, D, r, n, s)
    if H > 0:
        alt = H / r ** (n + 2) * (_frequency_from(H, D, r) - (1 + s))
        scale = max(abs(D) / r ** (n + 1), abs(H) / r ** (n + 2), 1e-300)
        if abs(W - alt) > 1e-12 * scale:
            raise DiagnosticsError("Weiss energy disagrees with its frequency form")
    return W


@dataclass(frozen=True)
class IdentityResiduals:
    rellich: float
    Hp: float
    Dp: float
    Db: float
    rellich_lhs: float
    rellich_rhs: float
    Hp_fd: float
    Dp_fd: float


def _identity_residuals(c: _Calculus, x0: NDArray, r: float, dr: float) -> IdentityResiduals:
    n, a, s = c.n, c.a, c.s
    bt = c.boundary_terms(x0, r)
    D = c.D(x0, r)
    H = bt["u2"]
    rel_l = bt["grad2"]
    rel_r = (n - 2 + a) / r * D + 2 * bt["gn2"]
    Hp_fd = (c.H(x0, r + dr) - c.H(x0, r - dr)) / (2 * dr)
    Dp_fd = (c.D(x0, r + dr) - c.D(x0, r - dr)) / (2 * dr)
    Hp = (n - 2 * s) / r * H + 2 * bt["ugn"]
    return IdentityResiduals(
        rellich=abs(rel_l - rel_r),
        Hp=abs(Hp_fd - Hp),
        Dp=abs(Dp_fd - rel_r),
        Db=abs(D - bt["ugn"]),
        rellich_lhs=rel_l,
        rellich_rhs=rel_r,
        Hp_fd=Hp_fd,
        Dp_fd=Dp_fd,
    )


def _fd_step(u: ScalarField) -> float:
    return 2.0 * u.grid.h


def identity_residuals(u: ScalarField, x0=None, r: float = 1.0) -> IdentityResiduals:
    """Rellich, H′, D′ and boundary-form-of-D residuals; derivatives by central FD with Δr = 2h."""
    c = _Calculus(u)
    x0 = _center(x0, c.n)
    dr = _fd_step(u)
    c.check(x0, r + dr)
    return _identity_residuals(c, x0, r, dr)


@dataclass(frozen=True)
class WeissDerivative:
    fd: float
    formula: float
    residual: float
    scale: float


def _weiss_derivative(c: _Calculus, x0: NDArray, r: float, dr: float) -> WeissDerivative:
    n, s = c.n, c.s

    def W(rr):
        return _weiss(c.H(x0, rr), c.D(x0, rr), rr, n, s)

    fd = (W(r + dr) - W(r - dr)) / (2 * dr)
    bt = c.boundary_terms(x0, r)
    # (2/r)∫_{∂B_1}(∇u_r·ν − (1+s)u_r)²|x_n|^a, pulled back to ∂B_r(x0)
    formula = 2.0 * bt["weiss"] / r ** (n + 3)
    scale = max(bt["u2"] / r ** (n + 3), 1e-300)
    return WeissDerivative(fd, formula, abs(fd - formula), scale)


def weiss_derivative_residual(u: ScalarField, x0=None, r: float = 1.0) -> WeissDerivative:
    c = _Calculus(u)
    x0 = _center(x0, c.n)
    dr = _fd_step(u)
    c.check(x0, r + dr)
    return _weiss_derivative(c, x0, r, dr)


# ---------------------------------------------------------------------------
# radius sweeps
# ---------------------------------------------------------------------------


@dataclass
class DiagnosticsSeries:
    x0: NDArray
    radii: NDArray
    H: NDArray
    D: NDArray
    N: NDArray
    W: NDArray
    n: int
    s: float
    res_rellich: NDArray = field(default=None)
    res_Hp: NDArray = field(default=None)
    res_Dp: NDArray = field(default=None)
    res_Db: NDArray = field(default=None)
    res_weiss: NDArray = field(default=None)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.radii = np.asarray(self.radii, dtype=float)
        m = self.radii.size
        if m and np.any(np.diff(self.radii) <= 0):
            raise DiagnosticsError("radii must be strictly increasing")
        for name in ("res_rellich", "res_Hp", "res_Dp", "res_Db", "res_weiss"):
            if getattr(self, name) is None:
                setattr(self, name, np.full(m, np.nan))

    @property
    def H_over_r(self) -> NDArray:
        return self.H / self.radii ** (self.n + 2)

    def quantity(self, which: str) -> NDArray:
        if which == "N":
            return self.N
        if which == "W":
            return self.W
        if which == "H_over_r":
            return self.H_over_r
        raise ValueError(f"unknown quantity {which!r}")

    def rows(self):
        for i in range(self.radii.size):
            yield (
                self.radii[i], self.H[i], self.D[i], self.N[i], self.W[i],
                self.res_rellich[i], self.res_Hp[i], self.res_Dp[i], self.res_Db[i],
                self.res_weiss[i],
            )


def default_radii(u: ScalarField, x0=None, r_max: float | None = None, r_min: float | None = None) -> NDArray:
    """Geometric radii r_max·0.85^k, increasing, down to r_min (default 8h)."""
    x0 = _center(x0, u.grid.n)
    dr = _fd_step(u)
    if r_max is None:
        r_max = TRUST_FRACTION * u.grid.params.R_dom - float(np.linalg.norm(x0)) - dr
    if r_min is None:
        r_min = 8 * u.grid.h
    if r_max < r_min:
        raise PreconditionError(f"empty radius window [{r_min}, {r_max}]")
    k = int(math.floor(math.log(r_min / r_max) / math.log(RADIUS_RATIO) + 1e-12))
    return r_max * RADIUS_RATIO ** np.arange(k, -1, -1)


def diagnostics_series(
    u: ScalarField,
    x0=None,
    radii=None,
    residuals: bool = True,
) -> DiagnosticsSeries:
    """Evaluate H, D, N, W (and optionally every identity residual) on a radius list."""
    c = _Calculus(u)
    x0 = _center(x0, c.n)
    radii = default_radii(u, x0) if radii is None else np.asarray(radii, dtype=float)
    dr = _fd_step(u)
    n, s = c.n, c.s
    m = radii.size
    H = np.empty(m)
    D = np.empty(m)
    res = {k: np.full(m, np.nan) for k in ("rellich", "Hp", "Dp", "Db", "weiss")}
    for i, r in enumerate(radii):
        c.check(x0, r + (dr if residuals else 0.0))
        H[i], D[i] = c.H(x0, r), c.D(x0, r)
        if residuals:
            ir = _identity_residuals(c, x0, r, dr)
            res["rellich"][i], res["Hp"][i], res["Dp"][i], res["Db"][i] = ir.rellich, ir.Hp, ir.Dp, ir.Db
            res["weiss"][i] = _weiss_derivative(c, x0, r, dr).residual
    with np.errstate(divide="ignore", invalid="ignore"):
        N = np.where(H > 0, radii * D / H, np.nan)
    W = D / radii ** (n + 1) - (1 + s) * H / radii ** (n + 2)
    return DiagnosticsSeries(
        x0, radii, H, D, N, W, n, s,
        res["rellich"], res["Hp"], res["Dp"], res["Db"], res["weiss"],
    )


@dataclass(frozen=True)
class MonotonicityReport:
    which: str
    violations: tuple[tuple[int, float, float], ...]  # (index i, r_i, drop from i to i+1)
    tolerance: float

    @property
    def ok(self) -> bool:
        return not self.violations


def monotonicity_scan(series: DiagnosticsSeries, which: str = "N", tol: float = TOL_MONO) -> MonotonicityReport:
    """Adjacent radius pairs where the quantity drops by more than tol·max|quantity|."""
    q = series.quantity(which)
    if q.size < 3:
        raise PreconditionError("monotonicity scan needs at least three radii")
    finite = q[np.isfinite(q)]
    scale = float(np.max(np.abs(finite))) if finite.size else 0.0
    thr = tol * max(scale, 1e-300)
    drops = q[:-1] - q[1:]
    bad = np.flatnonzero(drops > thr)
    return MonotonicityReport(
        which, tuple((int(i), float(series.radii[i]), float(drops[i])) for i in bad), thr
    )


@dataclass(frozen=True)
class FloorReport:
    min_N: float
    floor: float
    ok: bool


def frequency_floor_check(series: DiagnosticsSeries, free_boundary, tol: float = TOL_MONO) -> FloorReport:
    """min_r N ≥ (1+s) − tol at a center certified on the free boundary.

    ``free_boundary`` is any object exposing ``contains(x0) -> bool``.
    """
    if free_boundary is None or not free_boundary.contains(series.x0):
        raise PreconditionError("center is not a detected free-boundary point")
    floor = 1 + series.s - tol
    mn = float(np.nanmin(series.N))
    return FloorReport(mn, floor, mn >= floor)


@dataclass(frozen=True)
class DecayFit:
    C: float
    gamma_emp: float
    residual: float
    window: tuple[float, float]
    samples: int


def power_law_fit(r: NDArray, q: NDArray, min_samples: int = 5, floor: float = 1e-12) -> DecayFit:
    """Least-squares line through (log r, log q) using the samples with q > floor."""
    r = np.asarray(r, dtype=float)
    q = np.asarray(q, dtype=float)
    keep = np.isfinite(q) & (q > floor)
    if keep.sum() < min_samples:
        raise DegenerateFitError(f"only {int(keep.sum())} samples above {floor}; need {min_samples}")
    x, y = np.log(r[keep]), np.log(q[keep])
    slope, icpt = np.polyfit(x, y, 1)
    resid = float(np.max(np.abs(y - (slope * x + icpt))))
    return DecayFit(float(math.exp(icpt)), float(slope), resid, (float(r[keep].min()), float(r[keep].max())), int(keep.sum()))


def decay_fit(series: DiagnosticsSeries, window: tuple[float, float] | None = None) -> DecayFit:
    """W ≈ C r^γ on the series (optionally restricted to a radius window)."""
    r, W = series.radii, series.W
    if window is not None:
        sel = (r >= window[0] * (1 - 1e-12)) & (r <= window[1] * (1 + 1e-12))
        r, W = r[sel], W[sel]
    return power_law_fit(r, W)


def nondegeneracy_estimate(series: DiagnosticsSeries, free_boundary=None) -> float:
    """H0 = min_r H(r)/r^{n+2}; must be positive at a regular free-boundary point."""
    if free_boundary is not None and not free_boundary.contains(series.x0):
        raise PreconditionError("center is not a detected free-boundary point")
    H0 = float(np.min(series.H_over_r))
    if not H0 > 0:
        raise DiagnosticsError(f"nondegeneracy fails: min H/r^(n+2) = {H0}")
    return H0


def write_series_csv(series: DiagnosticsSeries, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTICS_HEADER)
        for row in series.rows():
            w.writerow([f"{v:.17g}" for v in row])


__all__ = [
    "DIAGNOSTICS_HEADER",
    "DecayFit",
    "DegenerateFitError",
    "DiagnosticsError",
    "DiagnosticsSeries",
    "FloorReport",
    "GridError",
    "IdentityResiduals",
    "MonotonicityReport",
    "PreconditionError",
    "UndefinedFrequencyError",
    "WeissDerivative",
    "H_D_at",
    "decay_fit",
    "default_radii",
    "diagnostics_series",
    "frequency",
    "frequency_floor_check",
    "identity_residuals",
    "monotonicity_scan",
    "nondegeneracy_estimate",
    "power_law_fit",
    "weiss_derivative_residual",
    "weiss_energy",
    "write_series_csv",
]
