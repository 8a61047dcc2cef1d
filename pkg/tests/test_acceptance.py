"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Tolerances are fixed here, next to the checks that use them.  Run with ``pytest -s`` to see
the lines inline; they are also collected in the terminal summary.
"""

import math

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, he_field, modes_solution
from obstacle_lab.blowup import (
    blowup_fit,
    contact_and_boundary,
    uniqueness_rate_check,
    uniqueness_rate_from_family,
)
from obstacle_lab.diagnostics import (
    H_D_at,
    decay_fit,
    default_radii,
    diagnostics_series,
    frequency,
    frequency_floor_check,
    identity_residuals,
    monotonicity_scan,
    weiss_derivative_residual,
    weiss_energy,
)
from obstacle_lab.epiperimetric import default_family, epiperimetric_gap
from obstacle_lab.exact import (
    AppendixProfile,
    ConeElement,
    appendix_profile_eval,
    h_e_eval,
    half_integer_modes,
    sample_cone_element,
)
from obstacle_lab.grid import ProblemParams, ScalarField, build_grid
from obstacle_lab.solver import assemble, operator_residual, optimal_omega, solve_psor
from oracles import FullGridProblem, active_set_qp, he_oracle_n2

H64 = 1 / 64


def report(k: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {k} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _rel(x, ref):
    return abs(x - ref) / abs(ref)


# 1 ---------------------------------------------------------------------------


def test_1_oracle_identities():
    s, h = 0.5, H64
    tol = 5 * h
    u = he_field(s, h)  # R_dom = 1.5 so that r = 1 and its FD neighbours are trusted
    oracle = he_oracle_n2(s)
    # the quadrature oracle and the closed-form values must agree before either is used
    analytic = {"H1": 2 * math.pi, "D1": 3 * math.pi, "rellich": 9 * math.pi}
    assert all(_rel(oracle[k], v) < 1e-12 for k, v in analytic.items())
    H, D = H_D_at(u, None, 1.0)
    radii = np.geomspace(0.1, 0.8, 12)
    N = np.array([frequency(u, None, r) for r in radii])
    W = []
    for r in radii:
        Hr, _ = H_D_at(u, None, r)
        W.append(abs(weiss_energy(u, None, r)) / ((1 + s) * Hr / r**4))  # relative to one of its two terms
    ir = identity_residuals(u, None, 1.0)
    errs = {
        "H": _rel(H, analytic["H1"]),
        "D": _rel(D, analytic["D1"]),
        "N": float(np.max(np.abs(N - 1.5) / 1.5)),
        "W": float(max(W)),
        "rellich_lhs": _rel(ir.rellich_lhs, analytic["rellich"]),
        "rellich_rhs": _rel(ir.rellich_rhs, analytic["rellich"]),
    }
    ok = all(v <= tol for v in errs.values())
    report(1, ok, "relative errors " + ", ".join(f"{k}={v:.2e}" for k, v in errs.items()) + f" (bound 5h={tol:.4f})")


# 2 ---------------------------------------------------------------------------


def test_2_identity_residuals_refine():
    # centre (0.5, 0) with r ≤ 0.4 keeps every ball at distance ≥ 0.1 from {x ≤ 0, y = 0}
    x0 = np.array([0.5, 0.0])
    radii = (0.15, 0.2, 0.3, 0.4)
    worst = math.inf
    where = ""
    for s in (0.25, 0.5, 0.75):
        for r in radii:
            a = identity_residuals(he_field(s, 1 / 64), x0, r)
            b = identity_residuals(he_field(s, 1 / 128), x0, r)
            for name in ("rellich", "Hp", "Dp", "Db"):
                ratio = getattr(a, name) / getattr(b, name)
                if ratio < worst:
                    worst, where = ratio, f"s={s} r={r} {name}"
    report(2, worst >= 1.8, f"smallest residual reduction 1/64→1/128 is {worst:.2f} ({where}); need ≥ 1.8")


# 3 ---------------------------------------------------------------------------


def _he_error(h):
    grid = build_grid(ProblemParams(2, 0.5, h, 1.0))
    g = half_integer_modes([])  # h_e at s = 1/2
    sol = solve_psor(assemble(grid, g), omega=optimal_omega(grid), tol=1e-10)
    ex = ScalarField.from_function(grid, g, symmetric=True)
    return float(np.nanmax(np.abs(sol.u.values - ex.values)))


def test_3_solver_correctness():
    errs = [_he_error(h) for h in (1 / 32, 1 / 64, 1 / 128)]
    decreasing = errs[0] > errs[1] > errs[2]

    grid = build_grid(ProblemParams(2, 0.5, H64, 1.0))
    p = assemble(grid, half_integer_modes([]))
    tol = 1e-10
    a = solve_psor(p, omega=optimal_omega(grid), tol=tol, initial="zero")
    b = solve_psor(p, omega=optimal_omega(grid), tol=tol, initial="harmonic")
    guess_gap = float(np.nanmax(np.abs(a.u.values - b.u.values)))

    qp_gap = 0.0
    for s in (0.25, 0.5, 0.75):
        g = lambda q, s=s: h_e_eval(q, [1.0], s)  # noqa: E731
        fp = FullGridProblem(2, s, 1 / 8, 1.0, g)
        x, _, _ = active_set_qp(fp.A, fp.b, fp.constrained)
        sol = solve_psor(assemble(build_grid(ProblemParams(2, s, 1 / 8, 1.0)), g), tol=1e-14)
        qp_gap = max(qp_gap, float(np.nanmax(np.abs(sol.u.values - fp.to_grid(x)))))

    ok = errs[1] <= 0.05 and decreasing and guess_gap <= 10 * tol and qp_gap <= 1e-9
    report(
        3, ok,
        f"max error h=1/32,1/64,1/128: {errs[0]:.2e}, {errs[1]:.2e}, {errs[2]:.2e}; "
        f"initial-guess gap {guess_gap:.1e} (≤ {10 * tol:.0e}); QP gap {qp_gap:.1e} (≤ 1e-9)",
    )


# 4, 5 ------------------------------------------------------------------------

PERTURBED = [(2.0,), (4.0,), (6.0,), (8.0,), (10.0,)]


def _centre(sol, tol):
    fb = contact_and_boundary(sol, tol, frequencies=False)
    pts = fb.contact_side_points()
    return fb, pts[np.argmin(np.linalg.norm(pts, axis=1))]


def test_4_monotonicity_suite():
    violations = 0
    min_N = math.inf
    floor_ok = True
    for c in PERTURBED:
        sol, _, tol = modes_solution(c)
        fb, x0 = _centre(sol, tol)
        ser = diagnostics_series(sol.u, x0, default_radii(sol.u, x0))
        for q in ("N", "W", "H_over_r"):
            violations += len(monotonicity_scan(ser, q, 1e-6).violations)
        fl = frequency_floor_check(ser, fb, 1e-4)
        floor_ok &= fl.ok
        min_N = min(min_N, fl.min_N)
    ok = violations == 0 and floor_ok
    report(4, ok, f"{len(PERTURBED)} data, {violations} monotonicity violations; min N on Γ = {min_N:.5f} (≥ 1.5 − 1e-4)")


def test_5_weiss_derivative_formula():
    h = H64
    dr = 2 * h
    bound = 5 * (h + dr * dr)
    worst = 0.0
    for c in PERTURBED:
        sol, _, tol = modes_solution(c)
        _, x0 = _centre(sol, tol)
        for r in (0.1, 0.2, 0.3, 0.4, 0.5):
            wd = weiss_derivative_residual(sol.u, x0, r)
            worst = max(worst, wd.residual / wd.scale)
    report(5, worst <= bound, f"max |FD − formula|/scale over 5 radii × {len(PERTURBED)} data = {worst:.2e} (≤ {bound:.2e})")


# 6 ---------------------------------------------------------------------------


def test_6_epiperimetric_family():
    fam = default_family()
    reps = [epiperimetric_gap(d, H64) for d in fam]
    violated = [r.datum_id for r in reps if r.status == "violated" or r.W_star > r.W_c + 1e-10]
    kappas = [r.kappa_emp for r in reps if r.status == "ok"]
    min_kappa = min(kappas) if kappas else math.nan
    drift = 0.0
    for d, r in zip(fam, reps):
        if r.status != "ok":
            continue
        for gamma in (0.5, 2.0):
            drift = max(drift, abs(epiperimetric_gap(d.scaled(gamma), H64).kappa_emp - r.kappa_emp))
    ok = not violated and kappas and min_kappa > 0 and drift <= 1e-10
    report(
        6, bool(ok),
        f"{len(fam)} data, {len(violated)} violated, {len(kappas)} ok, min kappa = {min_kappa:.4f}, "
        f"scaling drift {drift:.1e} (≤ 1e-10)",
    )


# 7 ---------------------------------------------------------------------------


def test_7_decay_and_uniqueness():
    sol, _, tol = modes_solution((10.0,))
    _, x0 = _centre(sol, tol)
    ser = diagnostics_series(sol.u, x0, default_radii(sol.u, x0), residuals=False)
    fit = decay_fit(ser, (0.1, 0.5))
    rep = uniqueness_rate_check(sol.u, x0, [0.125, 0.1875, 0.25, 0.375, 0.5], fit.gamma_emp)

    g = build_grid(ProblemParams(2, 0.5, 1 / 32, 1.25))

    def family(r):
        # λh_e plus an r^0.6-sized even perturbation: the sphere distance to λh_e is exactly ∝ r^0.6
        return ScalarField.from_function(
            g, lambda q: h_e_eval(q, [1.0], 0.5) + r**0.6 * (1.0 + q[:, 0] ** 2), symmetric=True
        )

    synth = uniqueness_rate_from_family(family, np.geomspace(0.05, 0.5, 6), 1.2, limit=ConeElement(1.0, (1.0,)))
    ok = (
        fit.gamma_emp > 0
        and fit.residual <= 0.1
        and rep.exponent > 0
        and abs(synth.exponent - 0.6) <= 0.02
    )
    report(
        7, ok,
        f"decay gamma={fit.gamma_emp:.3f} residual={fit.residual:.3f} (≤ 0.1); uniqueness exponent "
        f"{rep.exponent:.3f} ({rep.status}); synthetic r^0.6 → {synth.exponent:.4f}",
    )


# 8 ---------------------------------------------------------------------------


def test_8_blowup_classification():
    rng = np.random.default_rng(8)
    h = H64
    grid = build_grid(ProblemParams(2, 0.5, h, 1.0))
    worst_d = worst_l = 0.0
    wrong_e = 0
    for _ in range(10):
        lam = float(rng.uniform(0.2, 3.0))
        e = (float(rng.choice([-1.0, 1.0])),)
        u = sample_cone_element(ConeElement(lam, e), grid)
        for row in blowup_fit(u, np.zeros(2), [0.3, 0.5, 0.7]):
            worst_d = max(worst_d, row.dist)
            worst_l = max(worst_l, abs(row.cone.lam - lam))
            wrong_e += row.cone.e != e
    ok = worst_d <= 5 * h and worst_l <= 5 * h and wrong_e == 0
    report(8, ok, f"10 cones: max dist {worst_d:.2e}, max λ error {worst_l:.2e} (≤ 5h={5 * h:.4f}), {wrong_e} wrong directions")


# 9 ---------------------------------------------------------------------------


def _profile_residual(s, h):
    prof = AppendixProfile(0.0, (1.0,), s)
    grid = build_grid(ProblemParams(3, s, h, 1.0))
    f = ScalarField.from_function(grid, lambda p: appendix_profile_eval(prof, p), symmetric=True)
    r = operator_residual(f)
    P = grid.points
    dist = np.hypot(np.maximum(P[..., 1], 0.0), P[..., 2])  # distance to {x2 ≤ 0, x3 = 0}
    sel = (dist >= 0.25) & (grid.radius <= 0.75) & np.isfinite(r)
    return float(np.max(np.abs(r[sel])))


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_9_profile_residual_second_order(s):
    errs = [_profile_residual(s, h) for h in (1 / 16, 1 / 32, 1 / 64)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    # second order: each halving should cut the residual by close to 4; 3.2 allows pre-asymptotic drift
    ok = all(q >= 3.2 for q in ratios)
    report(
        9, ok,
        f"s={s}: max residual h=1/16,1/32,1/64: " + ", ".join(f"{e:.2e}" for e in errs)
        + f"; ratios {ratios[0]:.2f}, {ratios[1]:.2f} (≥ 3.2, order ≈ {math.log2(min(ratios)):.2f})",
    )
