"""Rescalings u(x0 + r x)/r^{1+s}, free-boundary extraction, point classification and blow-up fits."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .diagnostics import (
    TRUST_FRACTION,
    DegenerateFitError,
    PreconditionError,
    frequency,
    power_law_fit,
)
from .exact import ConeElement, project_to_cone, sphere_l2_distance_to
from .grid import Grid, ProblemParams, ScalarField, build_grid, interpolate
from .solver import Solution

TOL_CLASS = 0.05
DEFAULT_UNIT_SPACING = 1.0 / 32
CLASSIFICATION_HEADER = ("x0", "r", "lambda", "e", "dist", "N")


@dataclass(eq=False)
class RescaledField:
    base: ScalarField
    x0: NDArray
    r: float
    field: ScalarField

    @property
    def grid(self) -> Grid:
        return self.field.grid


def _unit_grid(base: Grid, m: int) -> Grid:
    """Grid on B_{1+2/m} with spacing 1/m (two spare layers outside the unit sphere)."""
    hu = 1.0 / m
    params = ProblemParams(n=base.n, s=base.params.s, h=hu, R_dom=(m + 2) * hu)
    return build_grid(params, min_cells=8)


def _aligned(base: Grid, x0: NDArray, r: float) -> int | None:
    """m = r/h when r is an integer number (≥ 8) of cells and x0 is a node; else None."""
    m = r / base.h
    mi = int(round(m))
    if mi < 8 or abs(m - mi) > 1e-9 * max(1.0, m):
        return None
    q = x0 / base.h
    if np.any(np.abs(q - np.round(q)) > 1e-9):
        return None
    return mi


def rescale(u: ScalarField, x0=None, r: float = 1.0, unit_spacing: float | None = None) -> RescaledField:
    """Samples of u(x0 + r·x)/r^{1+s} on a grid covering the unit ball.

    When r is a whole number m ≥ 8 of base cells and x0 is a base node, the unit grid
    has spacing 1/m and the samples are exact nodal copies; otherwise values are
    interpolated onto a grid of spacing ``unit_spacing`` (default 1/32).
    """
    g = u.grid
    x0 = np.zeros(g.n) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (g.n,) or x0[-1] != 0.0:
        raise PreconditionError("rescaling center must lie on the thin plane")
    if r <= 0:
        raise PreconditionError("rescaling radius must be positive")
    limit = TRUST_FRACTION * g.params.R_dom
    if float(np.linalg.norm(x0)) + r > limit * (1 + 1e-12):
        raise PreconditionError(f"radius {r} around {x0.tolist()} exceeds the trusted reach {limit}")
    s = g.params.s
    m = _aligned(g, x0, r) if unit_spacing is None else None
    if m is not None:
        ug = _unit_grid(g, m)
        off = np.round(x0 / g.h).astype(int) + g.N
        idx = tuple(slice(o - ug.N, o + ug.N + 1) for o in off)
        vals = np.array(u.values[idx], dtype=float)
        vals[~ug.mask] = np.nan
        vals = vals / r ** (1 + s)
        if u.symmetric:
            vals = np.where(ug.mask, vals, np.nan)
        f = ScalarField(ug, vals, symmetric=u.symmetric)
        return RescaledField(u, x0, r, f)
    hu = DEFAULT_UNIT_SPACING if unit_spacing is None else unit_spacing
    mu = int(round(1.0 / hu))
    if abs(mu * hu - 1.0) > 1e-12:
        raise PreconditionError("unit spacing must be 1/m for an integer m")
    ug = _unit_grid(g, mu)
    f = ScalarField.from_function(
        ug, lambda p: interpolate(u, x0 + r * p) / r ** (1 + s), symmetric=u.symmetric
    )
    return RescaledField(u, x0, r, f)


# ---------------------------------------------------------------------------
# free boundary
# ---------------------------------------------------------------------------


@dataclass
class FreeBoundary:
    grid: Grid
    contact: NDArray  # full-grid boolean mask: Λ
    boundary: NDArray  # full-grid boolean mask: Γ
    threshold: float
    frequencies: dict = field(default_factory=dict)  # node index tuple -> N(8h)

    @property
    def points(self) -> NDArray:
        return self.grid.points[self.boundary]

    @property
    def contact_points(self) -> NDArray:
        return self.grid.points[self.contact]

    def contains(self, x0) -> bool:
        x0 = np.asarray(x0, dtype=float)
        pts = self.points
        if pts.size == 0:
            return False
        return bool(np.min(np.max(np.abs(pts - x0), axis=1)) <= 1e-9 * self.grid.h)

    def in_contact(self, x0) -> bool:
        idx = self.grid.index_of(np.asarray(x0, dtype=float))
        return idx is not None and bool(self.contact[idx])

    def contact_side_points(self) -> NDArray:
        """Γ nodes that belong to Λ: the last contact node before the positivity set."""
        return self.grid.points[self.boundary & self.contact]


def contact_and_boundary(u: Solution | ScalarField, tol: float = 1e-10, frequencies: bool = True) -> FreeBoundary:
    """Λ = plane nodes with u ≤ 10·tol; Γ = plane nodes whose closed plane neighbourhood meets Λ and its complement."""
    f = u.u if isinstance(u, Solution) else u
    g = f.grid
    pm = g.plane_mask
    if not np.any(pm):
        raise PreconditionError("grid has no thin-plane nodes")
    thr = 10.0 * tol
    vals = np.nan_to_num(f.values, nan=np.inf)
    contact = pm & (vals <= thr)
    positive = pm & ~contact
    n = g.n
    near_c = contact.copy()
    near_p = positive.copy()
    for k in range(n - 1):
        for shift in (1, -1):
            near_c |= _shift(contact, shift, k)
            near_p |= _shift(positive, shift, k)
    boundary = pm & near_c & near_p
    fb = FreeBoundary(g, contact, boundary, thr)
    if frequencies:
        r_min = 8 * g.h
        for p in fb.points:
            key = g.index_of(p)
            try:
                fb.frequencies[key] = frequency(f, p, r_min)
            except Exception:  # outside trusted region or vanishing trace
                fb.frequencies[key] = math.nan
    return fb


def _shift(mask: NDArray, shift: int, axis: int) -> NDArray:
    out = np.zeros_like(mask)
    src = [slice(None)] * mask.ndim
    dst = [slice(None)] * mask.ndim
    if shift > 0:
        src[axis], dst[axis] = slice(0, -shift), slice(shift, None)
    else:
        src[axis], dst[axis] = slice(-shift, None), slice(0, shift)
    out[tuple(dst)] = mask[tuple(src)]
    return out


class PointClass(str, enum.Enum):
    REGULAR = "regular"
    HIGHER = "higher-frequency"
    NOT_ON_GAMMA = "not-on-Gamma"


def classify_point(
    u: ScalarField,
    x0,
    r_min: float | None = None,
    free_boundary: FreeBoundary | None = None,
    tol: float = 1e-10,
) -> tuple[PointClass, float]:
    """Regular iff N(r_min) ≤ 1 + s + 0.05; N is nondecreasing so N(r_min) bounds N(0+) from above."""
    fb = free_boundary if free_boundary is not None else contact_and_boundary(u, tol, frequencies=False)
    x0 = np.asarray(x0, dtype=float)
    if not fb.contains(x0):
        return PointClass.NOT_ON_GAMMA, math.nan
    r_min = 8 * u.grid.h if r_min is None else r_min
    N = frequency(u, x0, r_min)
    s = u.grid.params.s
    return (PointClass.REGULAR if N <= 1 + s + TOL_CLASS else PointClass.HIGHER), N


@dataclass(frozen=True)
class BlowupFitRow:
    r: float
    cone: ConeElement
    dist: float
    N: float


def blowup_fit(
    u: ScalarField,
    x0,
    r_list: Sequence[float],
    free_boundary: FreeBoundary | None = None,
    norm: str = "H1",
    tol: float = 1e-10,
) -> list[BlowupFitRow]:
    """Cone projection of u_{x0,r} for each radius (increasing order in the output)."""
    x0 = np.asarray(x0, dtype=float)
    radii = sorted(float(r) for r in r_list)
    kind, _ = classify_point(u, x0, radii[0], free_boundary, tol)
    if kind is not PointClass.REGULAR:
        raise PreconditionError(f"blow-up fit needs a regular free-boundary point, got {kind.value}")
    rows = []
    for r in radii:
        rf = rescale(u, x0, r)
        cone, dist = project_to_cone(rf.field, norm)
        rows.append(BlowupFitRow(r, cone, dist, frequency(u, x0, r)))
    return rows


@dataclass(frozen=True)
class UniquenessReport:
    radii: tuple[float, ...]
    distances: tuple[float, ...]
    limit: ConeElement
    exponent: float
    required: float
    status: str  # "ok" | "too-slow" | "degenerate-success"

    @property
    def ok(self) -> bool:
        return self.status in ("ok", "degenerate-success")


def uniqueness_rate_from_family(
    family: Callable[[float], ScalarField],
    r_list: Sequence[float],
    gamma: float,
    limit: ConeElement | None = None,
    noise: float | None = None,
) -> UniquenessReport:
    """Sphere-L¹ distance of each u_r to the limit λ h_e, fitted to C r^p; requires p ≥ γ/2 − 0.1.

    ``family(r)`` returns the rescaled field at radius r; the limit defaults to the
    cone fit at the smallest radius.
    """
    radii = np.array(sorted(float(r) for r in r_list))
    fields = [family(r) for r in radii]
    if limit is None:
        limit, _ = project_to_cone(fields[0], "H1")
    d = np.array([sphere_l2_distance_to(f, limit, p=1) for f in fields])
    if noise is None:
        hu = fields[0].grid.h
        noise = 5.0 * hu * hu * max(limit.lam, 1.0)
    required = gamma / 2 - 0.1
    if np.all(d <= noise):
        return UniquenessReport(tuple(radii), tuple(d), limit, math.nan, required, "degenerate-success")
    try:
        fit = power_law_fit(radii, d, min_samples=3, floor=noise)
    except DegenerateFitError:
        return UniquenessReport(tuple(radii), tuple(d), limit, math.nan, required, "degenerate-success")
    status = "ok" if fit.gamma_emp >= required else "too-slow"
    return UniquenessReport(tuple(radii), tuple(d), limit, fit.gamma_emp, required, status)


def uniqueness_rate_check(
    u: ScalarField,
    x0,
    r_list: Sequence[float],
    gamma: float,
    limit: ConeElement | None = None,
) -> UniquenessReport:
    x0 = np.asarray(x0, dtype=float)
    return uniqueness_rate_from_family(lambda r: rescale(u, x0, r).field, r_list, gamma, limit)


def write_classification_csv(rows: Sequence[tuple[NDArray, BlowupFitRow]], path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLASSIFICATION_HEADER)
        for x0, row in rows:
            w.writerow([
                " ".join(f"{c:.17g}" for c in np.asarray(x0)),
                f"{row.r:.17g}",
                f"{row.cone.lam:.17g}",
                " ".join(f"{c:.17g}" for c in row.cone.e),
                f"{row.dist:.17g}",
                f"{row.N:.17g}",
            ])


__all__ = [
    "CLASSIFICATION_HEADER",
    "BlowupFitRow",
    "FreeBoundary",
    "PointClass",
    "RescaledField",
    "UniquenessReport",
    "blowup_fit",
    "classify_point",
    "contact_and_boundary",
    "rescale",
    "uniqueness_rate_check",
    "uniqueness_rate_from_family",
    "write_classification_csv",
]
