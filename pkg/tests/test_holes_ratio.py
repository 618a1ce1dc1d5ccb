import csv

import numpy as np
import pytest

from metastab.errors import AmbiguityError, TruncationError
from metastab.holes_ratio import (checked_mixture, extrapolate_to_zero, full_holes, h_p_build,
                                  half_orbit, hat_h_p, hole_measure, induced_holes,
                                  lhr_closed_form, lhr_sweep, mixture, t2_only, write_ratio_csv)
from metastab.inducing import induce, induced_eval
from metastab.map_core import MapParams, build_map
from metastab.transfer_op import StepDensity, l1_distance


def off_edges(x, pieces):
    return x[~np.isin(x, pieces.ravel())]


def in_union(x, pieces):
    return np.any((x[:, None] > pieces[None, :, 0]) & (x[:, None] < pieces[None, :, 1]), axis=1)


@pytest.mark.parametrize("eps", [0.01, 0.05, 0.125])
def test_full_holes_by_sampling(eps):
    m = build_map(MapParams(0.5, eps))
    Hl, Hr = full_holes(m)
    x = off_edges(np.linspace(0, 0.5, 200_001)[1:-1], Hl.pieces)
    crossing = m.eval(x) > 0.5
    np.testing.assert_array_equal(crossing, in_union(x, Hl.pieces))
    x = off_edges(np.linspace(0.5, 1, 200_001)[1:-1], Hr.pieces)
    crossing = m.eval(x) < 0.5
    np.testing.assert_array_equal(crossing, in_union(x, Hr.pieces))
    assert Hr.lebesgue == pytest.approx(2 * eps / (8 / 3 * (1 + 2 * eps)))


def test_no_holes_at_zero():
    m = build_map(MapParams(0.5, 0.0))
    Hl, Hr = full_holes(m)
    assert len(Hl) == len(Hr) == 0
    assert Hl.lebesgue == 0.0
    im = induce(m, 50)
    assert len(induced_holes(im)[0]) == 0


def test_induced_holes_by_sampling():
    m = build_map(MapParams(0.5, 0.05))
    im = induce(m, 400)
    Hl, _ = induced_holes(im)
    lo, hi = im.cylinders.residual
    x = np.linspace(0.25, 0.5, 40_001)[1:-1]
    x = off_edges(x[(x < lo) | (x > hi)], Hl.pieces)
    y = np.array([induced_eval(im, v)[0] for v in x])
    np.testing.assert_array_equal(y > 0.5, in_union(x, Hl.pieces))
    assert Hl.tail_bound == pytest.approx(im.cylinders.residual_length)
    assert Hl.tags[:3] == ("Z1-T2", "Z2-T2", "Z2-T3")


def test_half_orbit():
    m = build_map(MapParams(0.5, 0.05))
    v = half_orbit(m, 5)
    assert v[1] == 0.5
    assert m.eval(v[3]) == pytest.approx(v[2])


def test_t2_only_subset():
    im = induce(build_map(MapParams(0.5, 0.05)), 100)
    Hl, _ = induced_holes(im)
    H2 = t2_only(Hl)
    assert all(t.endswith("T2") for t in H2.tags)
    assert 0 < H2.lebesgue < Hl.lebesgue


def test_hole_measure_step_density():
    im = induce(build_map(MapParams(0.5, 0.05)), 100)
    Hl, Hr = induced_holes(im)
    from metastab.transfer_op import delta_grid
    g = delta_grid(64)
    f = StepDensity(g, np.ones(g.m)).normalized()
    assert hole_measure(Hl, f) == pytest.approx(Hl.lebesgue / 0.75)
    assert hole_measure(Hr, f) == pytest.approx(Hr.lebesgue / 0.75)
    with pytest.raises(TypeError):
        hole_measure(Hl, np.ones(3))


def test_extrapolate_linear_exact():
    e = np.array([0.1, 0.05, 0.025, 0.0125])
    # the point at 0.1 is ignored, so its value does not matter
    vals = 2 + 3 * e
    vals[0] = 100.0
    assert extrapolate_to_zero(e, vals) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        extrapolate_to_zero([0.1, 0.05], [1, 2])


def test_mixture_weights():
    w = mixture(0.5, 0.4, 1.0)
    assert w.lambda_hat == pytest.approx(1 / 3)
    lam_p = (1 / 3) * 1.0 / ((1 / 3) * 1.0 + (2 / 3) * 0.4)
    assert w.lambda_p == pytest.approx(lam_p)
    assert w.odds == pytest.approx(lam_p / (1 - lam_p))
    # lambda_p c_l = lambda_hat c_p: both routes to the mixed Kac constant agree
    assert w.lambda_p * 0.4 == pytest.approx(w.lambda_hat * w.c_tau_p)
    with pytest.raises(ValueError):
        mixture(-1.0, 0.4, 1.0)
    with pytest.raises(ValueError):
        mixture(0.5, 1.4, 1.0)


def test_checked_mixture_refuses_disagreement():
    with pytest.raises(TruncationError):
        checked_mixture(0.5, 0.8, 0.4, 1.0)
    assert checked_mixture(0.5, 0.52, 0.4, 1.0).lhr == 0.5


@pytest.fixture(scope="module")
def lab_ref(lab_small):
    return lab_small.reference()


def test_closed_form_and_sweep(lab_ref):
    c = lab_ref.closed
    assert 0 < c.value < np.inf
    assert c.value_t2_only > c.value
    assert c.tail < 5e-3 * c.denominator
    assert lab_ref.sweep.extrapolated == pytest.approx(c.value, rel=0.1)
    assert np.all(np.diff(lab_ref.sweep.epsilon) < 0)


def test_closed_form_needs_unperturbed(lab_small):
    ref = lab_small.reference()
    with pytest.raises(AmbiguityError):
        lhr_closed_form(ref.hat_l, ref.hat_r, lab_small.induced(0.05))


def test_sweep_rejects_bad_order(lab_small):
    ref = lab_small.reference()
    with pytest.raises(ValueError):
        lhr_sweep(ref.hat_l, ref.hat_r, [lab_small.induced(0.05), lab_small.induced(0.1)])


def test_h_p_routes_agree(lab_small, lab_ref):
    w = lab_ref.weights
    comb = h_p_build(w, lab_ref.h_l, lab_ref.h_r)
    pb = h_p_build(w, lab_ref.h_l, lab_ref.h_r, im=lab_ref.im, method="pullback")
    assert comb.integral() == pytest.approx(1.0, abs=1e-12)
    assert l1_distance(comb, pb) < 1e-4
    hat = hat_h_p(w, lab_ref.hat_l, lab_ref.hat_r)
    assert hat.integral() == pytest.approx(1.0)
    assert hat.integrate(0.25, 0.5)[0] == pytest.approx(w.lambda_hat)
    assert comb.integrate(0.0, 0.5)[0] == pytest.approx(w.lambda_p, abs=1e-9)
    with pytest.raises(ValueError):
        h_p_build(w, lab_ref.h_l, lab_ref.h_r, method="other")
    with pytest.raises(ValueError):
        h_p_build(w, lab_ref.h_l, lab_ref.h_r, method="pullback")


def test_write_ratio_csv(tmp_path):
    write_ratio_csv([dict(epsilon=0.1, mu_hat_l_hole=1, mu_hat_r_hole=2, ratio_induced=2,
                          ratio_full=2, c_tau_eps=0.7)], tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epsilon", "mu_hat_l_hole", "mu_hat_r_hole", "ratio_induced", "ratio_full",
                       "c_tau_eps"]
