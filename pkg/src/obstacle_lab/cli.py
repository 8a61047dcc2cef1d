"""Command-line experiment runner: ``obstacle-lab run <config>`` and ``obstacle-lab describe``."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

from . import __version__
from .blowup import (
    CLASSIFICATION_HEADER,
    PointClass,
    blowup_fit,
    classify_point,
    contact_and_boundary,
    uniqueness_rate_check,
    write_classification_csv,
)
from .config import EXPERIMENTS, SCHEMA, ConfigError, ExperimentConfig, describe_schema, load_config
from .diagnostics import (
    DIAGNOSTICS_HEADER,
    DegenerateFitError,
    DiagnosticsError,
    decay_fit,
    default_radii,
    diagnostics_series,
    frequency_floor_check,
    identity_residuals,
    monotonicity_scan,
    nondegeneracy_estimate,
    weiss_derivative_residual,
    write_series_csv,
)
from .epiperimetric import (
    EPI_HEADER,
    DegenerateSweepError,
    HomogeneousDatum,
    cone_datum,
    default_family,
    epiperimetric_gap,
    perturbed_datum,
    sphere_quad,
    summarize_reports,
    write_epi_csv,
)
from .exact import ConeElement, h_e_eval, h_e_grad, half_integer_modes, sample_cone_element
from .grid import ProblemParams, ScalarField, build_grid
from .solver import (
    NonConvergenceError,
    Solution,
    assemble,
    kkt_check,
    optimal_omega,
    read_snapshot,
    solve_psor,
    write_snapshot,
)

log = logging.getLogger("obstacle_lab")

THREADS_ENV = "OBSTACLE_LAB_THREADS"
DECAY_RESIDUAL_MAX = 0.1  # largest log-space deviation allowed in the W decay fit
SUMMARY_SCHEMA = {
    "experiment": "experiment name",
    "version": "package version",
    "params": "{n, s, a, h, R_dom}",
    "results": "experiment-specific key results (numbers printed with 17 significant digits)",
    "checks": "{check name: true/false} for every invariant evaluated",
    "pass": "true iff every check holds and every solve converged",
    "files": "artifact file names written next to the summary",
    "metadata": "{timestamp (UTC ISO 8601), threads}; the only time-dependent content",
}


class ExperimentFailure(RuntimeError):
    pass


def thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        v = int(raw)
    except ValueError:
        log.warning("%s=%r is not an integer; using 1", THREADS_ENV, raw)
        return 1
    return max(1, v)


def _pmap(fn: Callable, items: list, threads: int) -> list:
    """Order-preserving map; the numba kernels release the GIL so threads overlap."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return float(f"{f:.17g}") if math.isfinite(f) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _direction(cfg: ExperimentConfig) -> np.ndarray:
    n = cfg.params.n
    e = cfg.floats("datum", "e")
    if e is None:
        e = [1.0] + [0.0] * (n - 2)
    e = np.asarray(e, dtype=float)
    if e.shape != (n - 1,) or abs(np.linalg.norm(e) - 1.0) > 1e-12:
        raise ConfigError(f"e must be a unit vector with {n - 1} components", "datum", "e", cfg._line("datum", "e"))
    return e


def _scalar(cfg: ExperimentConfig, key: str, default: float) -> float:
    v = cfg.floats("datum", key, [default])
    if len(v) != 1:
        raise ConfigError("expected a single number", "datum", key, cfg._line("datum", key))
    return v[0]


def homogeneous_datum_from(cfg: ExperimentConfig) -> HomogeneousDatum:
    p = cfg.params
    kind = cfg.datum.get("kind", "perturbation")
    if kind == "cone":
        return cone_datum(_scalar(cfg, "lambda", 1.0), _direction(cfg), p.n, p.s)
    if kind == "perturbation":
        if "id" in cfg.datum:
            i = _scalar(cfg, "id", 0)
            fam = default_family(p.n, p.s)
            if i != int(i) or not 0 <= i < len(fam):
                raise ConfigError(f"id must be an integer in [0, {len(fam) - 1}]", "datum", "id", cfg._line("datum", "id"))
            return fam[int(i)]
        k = _scalar(cfg, "k", 2)
        if k != int(k) or k < 0:
            raise ConfigError("k must be a nonnegative integer", "datum", "k", cfg._line("datum", "k"))
        return perturbed_datum(_direction(cfg), int(k), _scalar(cfg, "eps", 0.1), p.n, p.s)
    raise ConfigError(f"datum kind {kind!r} is not a homogeneous trace", "datum", "kind", cfg._line("datum", "kind"))


def boundary_datum(cfg: ExperimentConfig, default_kind: str):
    """(callable or field for the solver, exact solution callable or None, label)."""
    p = cfg.params
    kind = cfg.datum.get("kind", default_kind)
    if kind == "cone":
        lam = _scalar(cfg, "lambda", 1.0)
        if lam < 0:
            raise ConfigError("lambda must be nonnegative", "datum", "lambda", cfg._line("datum", "lambda"))
        e = _direction(cfg)
        f = lambda x: lam * h_e_eval(x, e, p.s)  # noqa: E731
        return f, f, f"cone(lambda={lam:g})"
    if kind == "modes":
        if p.n != 2 or p.s != 0.5:
            raise ConfigError("kind=modes requires n=2 and s=1/2", "datum", "kind", cfg._line("datum", "kind"))
        coeffs = cfg.floats("datum", "coefficients", [10.0])
        try:
            f = half_integer_modes(coeffs)
        except ValueError as exc:
            raise ConfigError(str(exc), "datum", "coefficients", cfg._line("datum", "coefficients")) from None
        return f, f, "modes(" + ",".join(f"{c:g}" for c in coeffs) + ")"
    if kind == "field":
        fld = read_snapshot(cfg.datum["path"])
        if fld.grid.params != p:
            raise ConfigError("field snapshot parameters differ from [params]", "datum", "path", cfg._line("datum", "path"))
        return fld, None, "field"
    if kind in ("perturbation",):
        d = homogeneous_datum_from(cfg)
        return d.extension, None, d.label
    raise ConfigError(f"datum kind {kind!r} not valid for this experiment", "datum", "kind", cfg._line("datum", "kind"))


def _solve(cfg: ExperimentConfig, g) -> tuple[Solution, float]:
    grid = build_grid(cfg.params)
    p = assemble(grid, g)
    gb = p.boundary_values[p.boundary_mask]
    scale = max(1.0, float(np.max(np.abs(gb)))) if gb.size else 1.0
    omega = cfg.omega if cfg.omega is not None else optimal_omega(grid)
    sol = solve_psor(p, omega=omega, tol=cfg.tol * scale, max_iter=cfg.max_iter)
    return sol, cfg.tol * scale


def _center(cfg: ExperimentConfig, fb) -> np.ndarray:
    raw = cfg.radii.get("center", "auto").strip()
    n = cfg.params.n
    if raw == "auto":
        pts = fb.contact_side_points()
        if pts.shape[0] == 0:
            pts = fb.points
        if pts.shape[0] == 0:
            return np.zeros(n)
        i = int(np.lexsort(tuple(pts[:, k] for k in reversed(range(n))) + (np.linalg.norm(pts, axis=1),))[0])
        return pts[i]
    c = np.asarray(cfg.floats("radii", "center"), dtype=float)
    if c.shape == (n - 1,):
        c = np.concatenate([c, [0.0]])
    if c.shape != (n,) or c[-1] != 0.0:
        raise ConfigError("center must be a plane point", "radii", "center", cfg._line("radii", "center"))
    return c


def _radius_window(cfg: ExperimentConfig, u: ScalarField, x0) -> np.ndarray:
    r_min = cfg.floats("radii", "r_min", [None])[0]
    r_max = cfg.floats("radii", "r_max", [None])[0]
    return default_radii(u, x0, r_max, r_min)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def run_solve(cfg: ExperimentConfig, out: str, threads: int) -> dict:
    g, exact, label = boundary_datum(cfg, "cone")
    sol, tol = _solve(cfg, g)
    kkt = kkt_check(sol, tol)
    write_snapshot(sol.u, os.path.join(out, "solution.txt"), {"datum": label})
    res = {
        "datum": label,
        "iterations": sol.iterations,
        "final_update": sol.final_update,
        "energy": sol.energy,
        "kkt": kkt.__dict__,
    }
    checks = {
        "converged": sol.converged,
        "kkt": kkt.passed(cfg.kkt_tol),
        "plane_nonnegative": kkt.min_plane >= -1e-14,
    }
    if exact is not None:
        ex = ScalarField.from_function(sol.u.grid, exact, symmetric=True)
        res["max_error_vs_closed_form"] = float(np.nanmax(np.abs(sol.u.values - ex.values)))
    return {"results": res, "checks": checks, "files": ["solution.txt"]}


def _default_diag_kind(cfg):
    return "modes" if (cfg.params.n == 2 and cfg.params.s == 0.5) else "perturbation"


def run_diagnostics(cfg: ExperimentConfig, out: str, threads: int) -> dict:
    g, exact, label = boundary_datum(cfg, _default_diag_kind(cfg))
    sol, tol = _solve(cfg, g)
    fb = contact_and_boundary(sol, tol, frequencies=False)
    x0 = _center(cfg, fb)
    radii = _radius_window(cfg, sol.u, x0)
    series = diagnostics_series(sol.u, x0, radii)
    write_series_csv(series, os.path.join(out, "diagnostics.csv"))
    mono = {w: monotonicity_scan(series, w, cfg.mono_tol) for w in ("N", "W", "H_over_r")}
    on_gamma = fb.contains(x0)
    checks = {"converged": sol.converged}
    res = {
        "datum": label,
        "center": x0,
        "center_on_free_boundary": on_gamma,
        "radii": [float(series.radii[0]), float(series.radii[-1]), int(series.radii.size)],
        "violations": {w: len(m.violations) for w, m in mono.items()},
        "min_W": float(np.min(series.W)),
    }
    for w, m in mono.items():
        checks[f"monotone_{w}"] = m.ok
    if on_gamma:
        floor = frequency_floor_check(series, fb, 1e-4)
        res["min_N"] = floor.min_N
        checks["frequency_floor"] = floor.ok
        try:
            res["H0"] = nondegeneracy_estimate(series, fb)
            checks["nondegeneracy"] = True
        except DiagnosticsError as exc:
            res["H0"] = float(np.min(series.H_over_r))
            res["nondegeneracy_error"] = str(exc)
            checks["nondegeneracy"] = False
        checks["W_nonnegative"] = res["min_W"] >= -1e-8
    h = cfg.params.h
    reach = series.radii[-1]
    wd_r = [r for r in (0.1, 0.2, 0.3, 0.4, 0.5) if 8 * h <= r <= reach]
    wd = _pmap(lambda r: weiss_derivative_residual(sol.u, x0, r), wd_r, threads)
    dr = 2 * h
    res["weiss_derivative"] = [
        {"r": r, "fd": d.fd, "formula": d.formula, "residual": d.residual, "bound": 5 * (h + dr * dr) * d.scale}
        for r, d in zip(wd_r, wd)
    ]
    checks["weiss_derivative"] = all(d.residual <= 5 * (h + dr * dr) * d.scale for d in wd)
    return {"results": res, "checks": checks, "files": ["diagnostics.csv"]}


def run_blowup(cfg: ExperimentConfig, out: str, threads: int) -> dict:
    g, exact, label = boundary_datum(cfg, _default_diag_kind(cfg))
    sol, tol = _solve(cfg, g)
    fb = contact_and_boundary(sol, tol, frequencies=False)
    x0 = _center(cfg, fb)
    kind, N0 = classify_point(sol.u, x0, free_boundary=fb, tol=tol)
    res = {"datum": label, "center": x0, "class": kind.value, "N_rmin": N0}
    checks = {"converged": sol.converged, "regular": kind is PointClass.REGULAR}
    files = []
    if kind is PointClass.REGULAR:
        reach = 0.8 * cfg.params.R_dom - float(np.linalg.norm(x0))
        r_list = cfg.floats("radii", "list", [0.125, 0.1875, 0.25, 0.375, 0.5])
        r_list = [r for r in r_list if 8 * cfg.params.h <= r <= reach]
        rows = blowup_fit(sol.u, x0, r_list, fb, tol=tol)
        write_classification_csv([(x0, r) for r in rows], os.path.join(out, "classification.csv"))
        files.append("classification.csv")
        res["fits"] = [{"r": r.r, "lambda": r.cone.lam, "e": r.cone.e, "dist": r.dist, "N": r.N} for r in rows]
        series = diagnostics_series(sol.u, x0, _radius_window(cfg, sol.u, x0), residuals=False)
        win = cfg.floats("radii", "decay_window", [0.1, 0.5])
        try:
            fit = decay_fit(series, (win[0], win[1]))
            res["decay"] = {"C": fit.C, "gamma_emp": fit.gamma_emp, "residual": fit.residual}
            checks["decay_positive"] = fit.gamma_emp > 0
            checks["decay_fit_residual"] = fit.residual <= DECAY_RESIDUAL_MAX
            rep = uniqueness_rate_check(sol.u, x0, r_list, fit.gamma_emp)
            res["uniqueness"] = {
                "exponent": rep.exponent,
                "required": rep.required,
                "status": rep.status,
                "distances": rep.distances,
            }
            checks["uniqueness_rate"] = rep.ok
        except DegenerateFitError as exc:
            res["decay"] = {"status": f"degenerate: {exc}"}
    return {"results": res, "checks": checks, "files": files}


def run_epiperimetric(cfg: ExperimentConfig, out: str, threads: int) -> dict:
    p = cfg.params
    if cfg.datum.get("kind", "family") == "family":
        fam = default_family(p.n, p.s)
    else:
        fam = [homogeneous_datum_from(cfg)]
    reports = _pmap(lambda c: epiperimetric_gap(c, p.h, cfg.tol), fam, threads)
    write_epi_csv(reports, os.path.join(out, "epiperimetric.csv"))
    checks = {"no_violation": all(r.status != "violated" for r in reports)}
    res = {"count": len(reports), "statuses": {k: sum(r.status == k for r in reports) for k in ("ok", "degenerate", "violated")}}
    try:
        kmin, _ = summarize_reports(reports)
        res["min_kappa_emp"] = kmin
        checks["min_kappa_positive"] = kmin > 0
        first = next(i for i, r in enumerate(reports) if r.status == "ok")
        ks = [epiperimetric_gap(fam[first].scaled(gm), p.h, cfg.tol).kappa_emp for gm in (0.5, 2.0)]
        res["scaling_kappa"] = {"datum": reports[first].datum_id, "gamma_0.5": ks[0], "gamma_2": ks[1]}
        checks["scaling_invariance"] = all(abs(k - reports[first].kappa_emp) <= 1e-10 for k in ks)
    except DegenerateSweepError:
        res["min_kappa_emp"] = None
        res["note"] = "all data degenerate"
    return {"results": res, "checks": checks, "files": ["epiperimetric.csv"]}


def run_verify_oracle(cfg: ExperimentConfig, out: str, threads: int) -> dict:
    """Identities on the sampled closed form h_e, against independent adaptive quadrature."""
    p = cfg.params
    params = p if p.R_dom >= 1.25 + 4 * p.h else ProblemParams(p.n, p.s, p.h, 1.5)
    grid = build_grid(params)
    e = _direction(cfg)
    u = sample_cone_element(ConeElement(1.0, tuple(e)), grid)
    s, a, n, h = p.s, p.a, p.n, p.h

    def he2(w):
        return h_e_eval(w, e, s) ** 2

    def grad2(w):
        g = h_e_grad(w, e, s)
        return np.sum(g * g, axis=-1)

    H_ex = sphere_quad(he2, n, a)
    D_ex = (1 + s) * H_ex
    rel_ex = sphere_quad(grad2, n, a)
    x0 = np.zeros(n)
    series = diagnostics_series(u, x0, np.array([1.0]), residuals=False)
    H1, D1 = float(series.H[0]), float(series.D[0])
    ir = identity_residuals(u, x0, 1.0)
    tolr = 5 * h
    radii = default_radii(u, x0, 0.8, max(0.1, 8 * h))
    sr = diagnostics_series(u, x0, radii, residuals=True)
    N_err = float(np.max(np.abs(sr.N - (1 + s)))) / (1 + s)
    W_rel = float(np.max(np.abs(sr.W) / sr.H_over_r))
    res = {
        "grid_R_dom": params.R_dom,
        "H1": H1, "H1_expected": H_ex,
        "D1": D1, "D1_expected": D_ex,
        "rellich_lhs": ir.rellich_lhs, "rellich_rhs": ir.rellich_rhs, "rellich_expected": rel_ex,
        "N_max_rel_error": N_err,
        "W_max_rel": W_rel,
        "residuals_max": {
            "rellich": float(np.max(sr.res_rellich)),
            "Hp": float(np.max(sr.res_Hp)),
            "Dp": float(np.max(sr.res_Dp)),
            "Db": float(np.max(sr.res_Db)),
        },
    }
    checks = {
        "H1": abs(H1 - H_ex) <= tolr * H_ex,
        "D1": abs(D1 - D_ex) <= tolr * D_ex,
        "N_constant": N_err <= tolr,
        "W_zero": W_rel <= tolr,
        "rellich_lhs": abs(ir.rellich_lhs - rel_ex) <= tolr * rel_ex,
        "rellich_rhs": abs(ir.rellich_rhs - rel_ex) <= tolr * rel_ex,
    }
    write_series_csv(sr, os.path.join(out, "diagnostics.csv"))
    return {"results": res, "checks": checks, "files": ["diagnostics.csv"]}


RUNNERS = {
    "solve": run_solve,
    "diagnostics": run_diagnostics,
    "blowup": run_blowup,
    "epiperimetric": run_epiperimetric,
    "verify-oracle": run_verify_oracle,
}


def run(cfg: ExperimentConfig) -> tuple[int, dict]:
    """Execute the configured experiment; returns (exit status, summary)."""
    threads = thread_cap()
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    p = cfg.params
    summary = {
        "experiment": cfg.experiment,
        "version": __version__,
        "params": {"n": p.n, "s": p.s, "a": p.a, "h": p.h, "R_dom": p.R_dom},
    }
    try:
        body = RUNNERS[cfg.experiment](cfg, out, threads)
        status = 0 if all(body["checks"].values()) else 1
    except NonConvergenceError as exc:
        body = {"results": {"error": str(exc)}, "checks": {"converged": False}, "files": []}
        status = 1
    summary.update(body)
    summary["pass"] = status == 0
    summary["metadata"] = {
        "timestamp": _dt.datetime.now(tz=_dt.timezone.utc).isoformat(),
        "threads": threads,
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return status, summary


def describe() -> str:
    exps = {
        "solve": "solve the obstacle problem for the datum; writes solution.txt and a KKT report",
        "diagnostics": "solve, then H, D, N, W and identity residuals on geometric radii around the center; diagnostics.csv",
        "blowup": "solve, detect the free boundary, classify the center, fit blow-ups and check decay/uniqueness; classification.csv",
        "epiperimetric": "empirical epiperimetric gap over the shipped 20-datum family (or one datum); epiperimetric.csv",
        "verify-oracle": "identities on the closed-form solution h_e versus adaptive quadrature; diagnostics.csv",
    }
    lines = [
        f"obstacle-lab {__version__} (config schema version 1)",
        "",
        "USAGE",
        "  obstacle-lab run <config-path>",
        "  obstacle-lab describe",
        f"  environment: {THREADS_ENV}=<k> caps worker threads (default 1)",
        "",
        "EXPERIMENTS",
    ]
    lines += [f"  {k:<14} {v}" for k, v in exps.items()]
    assert set(exps) == set(EXPERIMENTS)
    lines += [
        "",
        "CONFIG (INI: flat key = value pairs grouped in sections)",
        describe_schema(),
        "",
        "OUTPUTS (all floating-point values printed with 17 significant digits)",
        "  diagnostics.csv      header: " + ",".join(DIAGNOSTICS_HEADER),
        "  classification.csv   header: " + ",".join(CLASSIFICATION_HEADER)
        + "  (x0 and e are space-separated vectors)",
        "  epiperimetric.csv    header: " + ",".join(EPI_HEADER),
        "  solution.txt         line 1 '# {json header with n, s, a, h, R_dom, symmetric}',"
        " line 2 '# index x1 .. xn value', then one row per active node (row-major flat index)",
        "  summary.json         keys:",
    ]
    lines += [f"    {k:<11} {v}" for k, v in SUMMARY_SCHEMA.items()]
    lines += [
        "",
        "EXIT STATUS",
        "  0 all checks pass; 1 a check failed or a solve did not converge; 2 configuration or input error",
    ]
    return "\n".join(lines) + "\n"


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="obstacle-lab", description="Thin obstacle problem experiment runner")
    sub = ap.add_subparsers(dest="cmd", required=True)
    pr = sub.add_parser("run", help="run the experiment described by a config file")
    pr.add_argument("config")
    pr.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("describe", help="print experiments, config schema and output formats")
    args = ap.parse_args(argv)
    if args.cmd == "describe":
        sys.stdout.write(describe())
        return 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        status, summary = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    verdict = "PASS" if summary["pass"] else "FAIL"
    print(f"{cfg.experiment}: {verdict} ({cfg.output_dir})")
    for k, v in summary["checks"].items():
        print(f"  {k}: {'ok' if v else 'FAILED'}")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
