import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obstacle_lab.blowup import (
    CLASSIFICATION_HEADER,
    PointClass,
    blowup_fit,
    classify_point,
    contact_and_boundary,
    rescale,
    uniqueness_rate_from_family,
    write_classification_csv,
)
from obstacle_lab.diagnostics import PreconditionError
from obstacle_lab.exact import ConeElement, h_e_eval, sample_cone_element
from obstacle_lab.grid import ProblemParams, ScalarField, build_grid


def _cone_field(lam=1.3, e=(1.0,), s=0.5, h=1 / 64, R=1.0):
    g = build_grid(ProblemParams(2, s, h, R))
    return sample_cone_element(ConeElement(lam, e), g)


def test_aligned_rescale_of_cone_is_exact():
    u = _cone_field()
    rf = rescale(u, None, 0.5)
    assert rf.grid.h == pytest.approx(1 / 32)
    ref = sample_cone_element(ConeElement(1.3, (1.0,)), rf.grid)
    assert np.nanmax(np.abs(rf.field.values - ref.values)) < 1e-13
    assert rf.field.symmetric


def test_interpolated_rescale_of_cone_is_close():
    u = _cone_field()
    rf = rescale(u, None, 0.37)
    assert rf.grid.h == pytest.approx(1 / 32)
    ref = sample_cone_element(ConeElement(1.3, (1.0,)), rf.grid)
    scale = np.nanmax(np.abs(ref.values))
    assert np.nanmax(np.abs(rf.field.values - ref.values)) < 0.02 * scale


def test_rescale_preconditions():
    u = _cone_field()
    with pytest.raises(PreconditionError, match="thin plane"):
        rescale(u, np.array([0.0, 0.1]), 0.2)
    with pytest.raises(PreconditionError, match="positive"):
        rescale(u, None, 0.0)
    with pytest.raises(PreconditionError, match="trusted reach"):
        rescale(u, np.array([0.5, 0.0]), 0.5)
    with pytest.raises(PreconditionError, match="1/m"):
        rescale(u, None, 0.3, unit_spacing=0.3)


@pytest.mark.parametrize("e", [1.0, -1.0])
def test_contact_set_and_free_boundary_of_cone(e):
    u = _cone_field(e=(e,))
    fb = contact_and_boundary(u, 1e-12)
    x = fb.contact_points[:, 0]
    assert np.all(e * x <= 0)
    assert fb.contains(np.zeros(2))
    assert fb.in_contact(np.zeros(2))
    # Γ is the origin and its positive-side neighbour
    assert sorted(fb.points[:, 0].tolist()) == sorted([0.0, e / 64])
    assert np.array_equal(fb.contact_side_points(), np.zeros((1, 2)))
    key = u.grid.index_of(np.zeros(2))
    assert fb.frequencies[key] == pytest.approx(1.5, abs=0.02)


def test_classification():
    u = _cone_field()
    kind, N = classify_point(u, np.zeros(2))
    assert kind is PointClass.REGULAR and N == pytest.approx(1.5, abs=0.02)
    # x² − y² is harmonic (a = 0) with frequency 2 and touches the plane only at 0
    g = build_grid(ProblemParams(2, 0.5, 1 / 64, 1.0))
    q = ScalarField.from_function(g, lambda p: p[:, 0] ** 2 - p[:, 1] ** 2, symmetric=True)
    kind, N = classify_point(q, np.zeros(2), tol=1e-14)
    assert kind is PointClass.HIGHER and N == pytest.approx(2.0, abs=0.02)
    kind, N = classify_point(u, np.array([0.5, 0.0]))
    assert kind is PointClass.NOT_ON_GAMMA and math.isnan(N)
    with pytest.raises(PreconditionError, match="regular"):
        blowup_fit(q, np.zeros(2), [0.25], tol=1e-14)


@pytest.mark.parametrize("lam, e", [(1.3, 1.0), (0.4, -1.0)])
def test_blowup_fit_recovers_cone(lam, e, tmp_path):
    u = _cone_field(lam, (e,))
    rows = blowup_fit(u, np.zeros(2), [0.5, 0.25])
    assert [r.r for r in rows] == [0.25, 0.5]
    for row in rows:
        assert row.cone.e == (e,)
        assert row.cone.lam == pytest.approx(lam, rel=1e-9)
        assert row.dist <= 1e-9 * lam
        assert row.N == pytest.approx(1.5, abs=0.02)
    path = tmp_path / "c.csv"
    write_classification_csv([(np.zeros(2), r) for r in rows], path)
    table = list(csv.reader(path.open()))
    assert tuple(table[0]) == CLASSIFICATION_HEADER
    assert len(table) == 3
    assert float(table[1][2]) == rows[0].cone.lam


def _synthetic_family(p, amp=1.0):
    g = build_grid(ProblemParams(2, 0.5, 1 / 32, 1.25))

    def family(r):
        return ScalarField.from_function(
            g, lambda q: h_e_eval(q, [1.0], 0.5) + amp * r**p * (1.0 + q[:, 0] ** 2), symmetric=True
        )

    return family


@settings(max_examples=8)
@given(st.floats(0.3, 2.0))
def test_uniqueness_rate_recovers_synthetic_exponent(p):
    radii = np.geomspace(0.05, 0.5, 6)
    rep = uniqueness_rate_from_family(_synthetic_family(p), radii, gamma=2 * p, limit=ConeElement(1.0, (1.0,)))
    assert rep.exponent == pytest.approx(p, abs=0.02)
    assert rep.ok and rep.status == "ok"
    rep2 = uniqueness_rate_from_family(_synthetic_family(p), radii, gamma=2 * p + 1.0, limit=ConeElement(1.0, (1.0,)))
    assert rep2.status == "too-slow" and not rep2.ok


def test_uniqueness_degenerate_success():
    radii = [0.1, 0.2, 0.4]
    rep = uniqueness_rate_from_family(_synthetic_family(1.0, amp=0.0), radii, gamma=3.0)
    assert rep.status == "degenerate-success" and rep.ok
    assert math.isnan(rep.exponent)
    assert rep.limit.lam == pytest.approx(1.0, rel=1e-9)
