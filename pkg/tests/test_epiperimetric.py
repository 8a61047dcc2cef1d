import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obstacle_lab.diagnostics import weiss_energy
from obstacle_lab.epiperimetric import (
    EPI_HEADER,
    AuxiliaryInput,
    DatumError,
    DegenerateSweepError,
    HomogeneousDatum,
    auxiliary_from_datum,
    auxiliary_functional,
    classify_gap,
    cone_datum,
    constant_datum,
    default_family,
    epiperimetric_gap,
    homogeneous_extension,
    homogeneous_weiss,
    perturbed_datum,
    sphere_quad,
    summarize_reports,
    write_epi_csv,
)
from obstacle_lab.exact import h_e_eval
from obstacle_lab.grid import ProblemParams, ScalarField, build_grid
from oracles import sphere_weight_mass


def test_datum_validation():
    with pytest.raises(DatumError, match="not even"):
        HomogeneousDatum(2, 0.5, lambda w: 1.0 + w[..., 1])
    with pytest.raises(DatumError, match="negative"):
        HomogeneousDatum(2, 0.5, lambda w: 0.5 - w[..., 0] ** 2)
    with pytest.raises(DatumError, match="non-finite"):
        HomogeneousDatum(2, 0.5, lambda w: np.full(w.shape[:-1], np.nan))
    d = constant_datum(2.0, 2, 0.5)
    with pytest.raises(DatumError, match="disagree"):
        homogeneous_extension(d, build_grid(ProblemParams(2, 0.3, 1 / 16, 1.0)))


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_sphere_quad_weight_mass(n, s):
    a = 1 - 2 * s
    got = sphere_quad(lambda w: np.ones(w.shape[:-1]), n, a)
    assert got == pytest.approx(sphere_weight_mass(n, a), rel=1e-10)
    # second moment of the normal component
    got2 = sphere_quad(lambda w: w[..., -1] ** 2, n, a)
    assert got2 == pytest.approx(sphere_weight_mass(n, a + 2), rel=1e-10)


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_constant_datum_weiss(n, s):
    # |∇c̄|² = (1+s)² on the sphere, so W = (1+s)(s − n)/(n+1) · ∫|ω_n|^a
    a = 1 - 2 * s
    exact = (1 + s) * (s - n) / (n + 1) * sphere_weight_mass(n, a)
    assert homogeneous_weiss(constant_datum(1.0, n, s)) == pytest.approx(exact, rel=1e-10)


@pytest.mark.parametrize("n, e", [(2, (1.0,)), (2, (-1.0,)), (3, (0.6, 0.8))])
@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_cone_weiss_vanishes(n, e, s):
    assert abs(homogeneous_weiss(cone_datum(1.7, e, n, s))) < 1e-8


@settings(max_examples=10)
@given(st.floats(0.05, 20.0))
def test_weiss_is_quadratic(gamma):
    d = perturbed_datum((1.0,), 2, 0.2)
    assert homogeneous_weiss(d.scaled(gamma)) == pytest.approx(gamma**2 * homogeneous_weiss(d), rel=1e-9)


def test_numeric_gradient_fallback_matches_analytic():
    d = perturbed_datum((1.0,), 3, 0.2)
    bare = HomogeneousDatum(2, 0.5, d.func)
    assert homogeneous_weiss(bare) == pytest.approx(homogeneous_weiss(d), rel=1e-4)  # central differences with step 1e-6


def test_classify_gap():
    assert classify_gap("x", 2.0, 1.0).kappa_emp == pytest.approx(0.5)
    assert classify_gap("x", 2.0, 1.0).status == "ok"
    assert classify_gap("x", 1e-10, 0.0).status == "degenerate"
    v = classify_gap("x", 1.0, 1.0 + 1e-6)
    assert v.status == "violated" and math.isnan(v.kappa_emp)
    assert classify_gap("x", 1.0, 1.0 + 1e-11).status == "ok"
    with pytest.raises(DegenerateSweepError):
        summarize_reports([classify_gap("x", 0.0, 0.0)])


@pytest.mark.parametrize("k, eps", [(0, 0.2), (2, 0.1), (4, 0.2)])
def test_gap_admissible_and_scale_invariant(k, eps):
    d = perturbed_datum((-1.0,), k, eps)
    rep = epiperimetric_gap(d, h=1 / 32)
    assert rep.W_star <= rep.W_c
    assert rep.energy_drop >= 0
    for gamma in (0.5, 2.0):
        r2 = epiperimetric_gap(d.scaled(gamma), h=1 / 32)
        assert r2.W_c == pytest.approx(gamma**2 * rep.W_c, rel=1e-10)
        if rep.status == "ok":
            assert r2.kappa_emp == pytest.approx(rep.kappa_emp, abs=1e-10)


def test_cone_is_already_minimal():
    rep = epiperimetric_gap(cone_datum(1.0, (1.0,), 2, 0.5), h=1 / 32)
    assert rep.status == "degenerate"
    assert rep.energy_drop <= 1e-3


def test_constant_datum_minimizer_energy():
    # c ≡ 1, n = 2, s = 1/2: the constant 1 is admissible with zero Dirichlet energy,
    # so W_star → 0 − (3/2)·2π = −3π as h → 0
    reps = [epiperimetric_gap(constant_datum(1.0, 2, 0.5), h=h) for h in (1 / 32, 1 / 64)]
    errs = [abs(r.W_star + 3 * math.pi) for r in reps]
    assert errs[1] < errs[0]
    assert errs[1] < 5 / 64 * 3 * math.pi
    assert reps[1].W_c == pytest.approx(-1.5 * math.pi, rel=1e-10)
    assert reps[1].status == "degenerate"


def test_default_family_and_csv(tmp_path):
    fam = default_family()
    assert len(fam) == 20
    assert len({d.label for d in fam}) == 20
    reps = [epiperimetric_gap(d, h=1 / 32) for d in fam[:4]]
    path = tmp_path / "e.csv"
    write_epi_csv(reps, path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == EPI_HEADER
    assert [r[0] for r in rows[1:]] == [d.label for d in fam[:4]]
    assert float(rows[1][1]) == reps[0].W_c


def test_auxiliary_functional_reduces_to_weiss():
    g = build_grid(ProblemParams(2, 0.5, 1 / 64, 1.25))
    d = perturbed_datum((1.0,), 2, 0.2)
    c = homogeneous_extension(d, g)
    inp = AuxiliaryInput(c, 0.0, d.func, 0.5)
    assert auxiliary_functional(inp) == pytest.approx(weiss_energy(c, None, 1.0), rel=0.02)


def test_auxiliary_functional_admissibility():
    g = build_grid(ProblemParams(2, 0.5, 1 / 32, 1.25))
    d = perturbed_datum((1.0,), 0, 0.2)
    c = homogeneous_extension(d, g)
    with pytest.raises(ValueError):
        auxiliary_functional(AuxiliaryInput(c, -1.0, d.func, 0.5))
    # wrong boundary trace
    assert auxiliary_functional(AuxiliaryInput(c, 0.0, lambda p: d.func(p) + 1.0, 0.5)) == math.inf
    # z + θh_e negative on the plane
    neg = ScalarField.from_function(g, lambda p: -np.ones(p.shape[0]), symmetric=True)
    assert auxiliary_functional(AuxiliaryInput(neg, 0.0, lambda p: -np.ones(p.shape[0]), 0.5)) == math.inf
    # z = c − λh_e with θ = λ keeps z + θh_e = c ≥ 0 on the plane
    inp = auxiliary_from_datum(c, 1.0, (1.0,), d.func)
    assert np.isfinite(auxiliary_functional(inp))
    z_expected = c.values - np.where(g.mask, h_e_eval(g.points, [1.0], 0.5), np.nan)
    assert np.nanmax(np.abs(inp.z.values - z_expected)) < 1e-13
