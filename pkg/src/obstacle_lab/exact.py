"""Closed-form (1+s)-homogeneous global solutions, the cone they span, and projections onto it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import optimize

from .grid import (
    Grid,
    GridError,
    ScalarField,
    cell_average,
    cell_fractions,
    cell_gradient,
    integrate_cells,
    interpolate,
    sphere_integral,
    sphere_points,
)


class SingularPointError(ValueError):
    """Gradient requested on the contact half-line where h_e is not differentiable."""


def _as_direction(e, n: int) -> NDArray:
    """Normalise ``e`` to a unit vector of R^{n-1} (the plane directions)."""
    e = np.atleast_1d(np.asarray(e, dtype=float))
    if e.shape != (n - 1,):
        raise ValueError(f"direction must have {n - 1} components, got {e.shape}")
    nrm = np.linalg.norm(e)
    if abs(nrm - 1.0) > 1e-12:
        raise ValueError(f"direction must be a unit vector, |e| = {nrm}")
    return e


@dataclass(frozen=True)
class ConeElement:
    lam: float
    e: tuple[float, ...]

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if abs(math.hypot(*self.e) - 1.0) > 1e-12:
            raise ValueError("cone direction must be a unit vector")

    @property
    def direction(self) -> NDArray:
        return np.asarray(self.e, dtype=float)


@dataclass(frozen=True)
class TangentVector:
    alpha: float
    xi: tuple[float, ...] = ()


@dataclass(frozen=True)
class AppendixProfile:
    a0: float
    a_coeffs: tuple[float, ...]
    s: float


def _split(x: NDArray, e: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    x = np.asarray(x, dtype=float)
    xe = x[..., :-1] @ e
    xn = x[..., -1]
    rho = np.sqrt(xe * xe + xn * xn)
    return xe, xn, rho


def _base(xe: NDArray, xn: NDArray, rho: NDArray) -> NDArray:
    """ρ + x̂·e, rewritten as x_n²/(ρ − x̂·e) on the contact side to avoid cancellation."""
    with np.errstate(divide="ignore", invalid="ignore"):
        alt = xn * xn / (rho - xe)
    return np.where(xe >= 0.0, rho + xe, np.where(rho - xe > 0, alt, 0.0))


def h_e_eval(x: NDArray, e, s: float) -> NDArray:
    """h_e(x) = (x̂·e/s − ρ)(ρ + x̂·e)^s with ρ = √((x̂·e)² + x_n²)."""
    x = np.asarray(x, dtype=float)
    e = _as_direction(e, x.shape[-1])
    xe, xn, rho = _split(x, e)
    base = _base(xe, xn, rho)
    val = (xe / s - rho) * base**s
    # exact zero on the contact half-line (0^s times a finite factor)
    return np.where(base == 0.0, 0.0, val)


def h_e_grad(x: NDArray, e, s: float) -> NDArray:
    """Closed-form gradient; raises on the contact half-line {x_n=0, x̂·e ≤ 0}."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    e = _as_direction(e, n)
    xe, xn, rho = _split(x, e)
    base = _base(xe, xn, rho)
    if np.any((xn == 0.0) & (xe <= 0.0)):
        raise SingularPointError("h_e is not differentiable on the contact half-line")
    d_e = (1.0 - s * s) / s * base**s
    d_n = -(1.0 + s) * xn * base ** (s - 1.0)
    g = np.zeros(x.shape)
    g[..., :-1] = d_e[..., None] * e
    g[..., -1] = d_n
    return g


def R_a_h(xhat: NDArray, e, s: float) -> NDArray:
    """Weighted normal flux lim ε^a ∂_n h_e(x̂, ε)."""
    xhat = np.asarray(xhat, dtype=float)
    e = np.atleast_1d(np.asarray(e, dtype=float))
    xe = xhat @ e if xhat.ndim and xhat.shape[-1] == e.shape[0] else xhat * e[0]
    return np.where(xe >= 0.0, 0.0, -(1.0 + s) * (2.0 * np.abs(xe)) ** (1.0 - s))


def cone_function(c: ConeElement, s: float):
    def f(p):
        if c.lam == 0.0:
            return np.zeros(np.shape(p)[:-1])
        return c.lam * h_e_eval(p, c.direction, s)

    return f


def sample_cone_element(c: ConeElement, g: Grid) -> ScalarField:
    return ScalarField.from_function(g, cone_function(c, g.params.s), symmetric=True)


def _check_tangent(e: NDArray, t: TangentVector, n: int) -> NDArray:
    if n == 2:
        if len(t.xi) not in (0, 1) or (len(t.xi) == 1 and t.xi[0] != 0.0):
            raise ValueError("for n=2 the tangent space is span{h_e}; xi must be empty")
        return np.zeros(1)
    xi = np.asarray(t.xi if t.xi else np.zeros(n - 1), dtype=float)
    if xi.shape != (n - 1,):
        raise ValueError(f"xi must have {n - 1} plane components")
    if abs(xi @ e) > 1e-12:
        raise ValueError("xi must be orthogonal to e")
    return xi


def v_e_xi(x: NDArray, e, xi: NDArray, s: float) -> NDArray:
    """x̂·ξ (ρ + x̂·e)^s."""
    x = np.asarray(x, dtype=float)
    e = _as_direction(e, x.shape[-1])
    xe, xn, rho = _split(x, e)
    return (x[..., :-1] @ xi) * _base(xe, xn, rho) ** s


def tangent_field(e, t: TangentVector, g: Grid) -> ScalarField:
    """Samples of α h_e + v_{e,ξ}, an element of the tangent plane at h_e."""
    s = g.params.s
    e = _as_direction(e, g.n)
    xi = _check_tangent(e, t, g.n)
    return ScalarField.from_function(
        g, lambda p: t.alpha * h_e_eval(p, e, s) + v_e_xi(p, e, xi, s), symmetric=True
    )


def appendix_profile_eval(p: AppendixProfile, x: NDArray) -> NDArray:
    """a0 h_{e_{n-1}} + (Σ a_i x_i)(√(x_{n-1}² + x_n²) + x_{n-1})^s."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if len(p.a_coeffs) > max(n - 2, 0):
        raise ValueError(f"n={n} admits at most {n - 2} coefficients a_i")
    e = np.zeros(n - 1)
    e[-1] = 1.0
    out = p.a0 * h_e_eval(x, e, p.s)
    if p.a_coeffs:
        lin = x[..., : len(p.a_coeffs)] @ np.asarray(p.a_coeffs, dtype=float)
        y, z = x[..., n - 2], x[..., n - 1]
        out = out + lin * _base(y, z, np.sqrt(y * y + z * z)) ** p.s
    return out


# ---------------------------------------------------------------------------
# projection onto the cone
# ---------------------------------------------------------------------------


class _InnerProduct:
    """Discrete inner product on B_1 (or ∂B_1) for fields on a common grid."""

    def __init__(self, grid: Grid, norm: str):
        if norm not in ("H1", "sphere-L2"):
            raise ValueError(f"unknown norm {norm!r}")
        self.grid = grid
        self.norm = norm
        self.x0 = np.zeros(grid.n)
        if norm == "H1":
            self.w = cell_fractions(grid, self.x0, 1.0) * grid.cell_weight
            self.used = self.w > 0

    def features(self, f: ScalarField) -> NDArray:
        if self.norm == "H1":
            gcell = cell_gradient(f)[self.used]
            vcell = cell_average(f)[self.used]
            return np.concatenate([gcell, vcell[:, None]], axis=1)
        pts, _, _ = sphere_points(self.grid, self.x0, 1.0)
        return interpolate(f, pts)[:, None]

    def weights(self) -> NDArray:
        if self.norm == "H1":
            return self.w[self.used]
        return sphere_points(self.grid, self.x0, 1.0)[2]

    def dot(self, F: NDArray, G: NDArray) -> float:
        val = float(np.dot(self.weights(), np.sum(F * G, axis=1)))
        if not math.isfinite(val):
            raise GridError("field undefined on the unit ball used for projection")
        return val


def project_to_cone(f: ScalarField, norm: str = "H1") -> tuple[ConeElement, float]:
    """Nearest element λ h_e of the cone in the discrete H¹(B_1, μ_a) or sphere-L² metric.

    For n = 2 both directions e = ±1 are tried; for n = 3 a 64-point scan of the
    circle of directions is refined by golden-section search.
    """
    g = f.grid
    s = g.params.s
    ip = _InnerProduct(g, norm)
    F = ip.features(f)
    ff = ip.dot(F, F)
    e1 = tuple([1.0] + [0.0] * (g.n - 2))
    if ff == 0.0:
        return ConeElement(0.0, e1), 0.0

    def score(e: NDArray) -> tuple[float, float, float]:
        H = ip.features(ScalarField.from_function(g, lambda p: h_e_eval(p, e, s)))
        fh = ip.dot(F, H)
        hh = ip.dot(H, H)
        lam = max(0.0, fh / hh)
        R = F - lam * H  # direct residual norm; the expanded form cancels near the cone
        return lam, ip.dot(R, R), fh

    if g.n == 2:
        best = None
        for sign in (1.0, -1.0):
            lam, d2, _ = score(np.array([sign]))
            if best is None or d2 < best[1] - 1e-15 * ff:
                best = (lam, d2, (sign,))
        lam, d2, e = best
        if lam == 0.0:
            e = e1
        return ConeElement(lam, e), math.sqrt(d2)

    def d2_of(phi: float) -> float:
        return score(np.array([math.cos(phi), math.sin(phi)]))[1]

    phis = 2 * math.pi * np.arange(64) / 64
    vals = np.array([d2_of(p) for p in phis])
    k = int(np.argmin(vals))
    step = 2 * math.pi / 64
    res = optimize.minimize_scalar(
        d2_of, bracket=(phis[k] - step, phis[k], phis[k] + step), method="golden", tol=1e-10
    )
    phi = float(res.x) if res.fun <= vals[k] else float(phis[k])
    e = np.array([math.cos(phi), math.sin(phi)])
    lam, d2, _ = score(e)
    if lam == 0.0:
        return ConeElement(0.0, e1), math.sqrt(ff)
    return ConeElement(lam, (float(e[0]), float(e[1]))), math.sqrt(d2)


def sphere_l2_distance_to(f: ScalarField, c: ConeElement, p: int = 2) -> float:
    """(∫_{∂B_1} |f − λ h_e|^p |x_n|^a)^(1/p) for p in {1, 2}."""
    s = f.grid.params.s
    def integrand(pts):
        diff = interpolate(f, pts) - cone_function(c, s)(pts)
        return np.abs(diff) ** p

    val = sphere_integral(integrand, np.zeros(f.grid.n), 1.0, grid=f.grid)
    return val if p == 1 else math.sqrt(val)


def h1_volume_energy(f: ScalarField, x0=None, r: float = 1.0) -> float:
    """∫_{B_r(x0)} |∇f|² dμ_a with cell-centre gradients."""
    x0 = np.zeros(f.grid.n) if x0 is None else np.asarray(x0, dtype=float)
    g = cell_gradient(f)
    return integrate_cells(f.grid, np.sum(g * g, axis=-1), x0, r)


def half_integer_modes(coefficients, e: float = 1.0):
    """Closed-form solutions for n = 2, s = 1/2 with free boundary at the origin.

    u = h_e + Σ_m c_m ρ^{3/2+2m} cos((3/2+2m)θ_e), θ_e ∈ [0, π] the angle from (e, 0)
    in the upper half plane, extended evenly.  Each mode vanishes on the contact ray
    with nonpositive flux there, so the sum solves the problem whenever all c_m ≥ 0.
    """
    coeffs = [float(c) for c in coefficients]
    if any(c < 0 for c in coeffs):
        raise ValueError("mode amplitudes must be nonnegative")
    if e not in (1.0, -1.0):
        raise ValueError("e must be +1 or -1")

    def u(p):
        p = np.asarray(p, dtype=float)
        x, y = e * p[..., 0], np.abs(p[..., 1])
        rho = np.hypot(x, y)
        th = np.arctan2(y, x)
        out = math.sqrt(2.0) * rho**1.5 * np.cos(1.5 * th)
        for m, c in enumerate(coeffs, start=1):
            k = 1.5 + 2 * m
            out = out + c * rho**k * np.cos(k * th)
        return out

    return u
