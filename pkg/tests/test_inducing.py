import csv
import math

import numpy as np
import pytest
from scipy.optimize import brentq

from metastab.errors import DomainError, UnresolvedRegionError
from metastab.inducing import (Q38, boundary_orbit, build_cylinders, default_depth, induce,
                               induced_adler_constant, induced_deriv, induced_eval,
                               return_derivative_check, return_time_oracle, orbit_decay_check,
                               tail_sum_model, write_cylinders_csv, write_orbit_csv)
from metastab.map_core import MapParams, build_map, t1_eval


def brentq_orbit(a, e, n):
    """Backward orbit of 1/4 by bracketing, independent of the Newton inverse."""
    A = 4 ** a * (1 + 4 * e)
    out = [0.25]
    for _ in range(n):
        y = out[-1]
        out.append(brentq(lambda x: x + A * x ** (1 + a) - y, 0.0, y, xtol=1e-300, rtol=1e-15))
    return np.array(out)


@pytest.fixture(scope="module")
def im05():
    return induce(build_map(MapParams(0.5, 0.0)), 2000)


@pytest.fixture(scope="module")
def im05e():
    return induce(build_map(MapParams(0.5, 0.05)), 2000)


@pytest.mark.parametrize("a,e", [(0.5, 0.0), (0.3, 0.05), (0.8, 0.125)])
def test_orbit_against_bracketing(a, e):
    o = boundary_orbit(build_map(MapParams(a, e)), 60)
    np.testing.assert_allclose(o.b, brentq_orbit(a, e, 60), rtol=1e-13)


def test_first_orbit_point():
    o = boundary_orbit(build_map(MapParams(0.5, 0.0)), 1)
    assert o.b[1] == pytest.approx(0.1424600727495133, rel=1e-14)
    assert o.b[1] + 2 * o.b[1] ** 1.5 == pytest.approx(0.25, rel=1e-15)


def test_orbit_asymptotics(im05):
    b = im05.orbit.b
    n = np.arange(len(b))
    scaled = b[1:] * n[1:] ** 2.0
    assert np.all(np.diff(b) < 0)
    # b_n n^(1/alpha) tends to (alpha 4^alpha)^(-1/alpha) = 1 at alpha = 1/2
    assert scaled[-1] == pytest.approx(1.0, rel=1e-2)
    assert 1.0 < scaled[-1] < scaled[99]


def test_orbit_needs_positive_length():
    with pytest.raises(ValueError):
        boundary_orbit(build_map(MapParams(0.5, 0.0)), 0)


def test_gap_index(im05):
    o = im05.orbit
    for k in (1, 2, 17, 500):
        lo, hi = o.gap(k)
        assert int(o.gap_index(0.5 * (lo + hi))) == k
    assert int(o.gap_index(o.b[o.N] / 2)) == o.N + 1
    assert o.gap(0) == (0.25, 1.0)


def test_default_depth_meets_targets():
    N = default_depth(0.5, 0.0)
    o = boundary_orbit(build_map(MapParams(0.5, 0.0)), N)
    assert o.b[-1] < 1e-6
    assert default_depth(0.3, 0.0) < N


def test_tail_model_against_partial_sums(im05):
    # explicit sum from N to M plus the model beyond M must reproduce the model beyond N
    p = im05.params
    b = im05.orbit.b
    N, M = 500, 2000
    w = b[:-1] - b[1:]  # w[k] = |W_{k+1}|
    explicit = sum(n * w[n - 2] for n in range(N + 1, M + 1))
    model_N = tail_sum_model(p.alpha, p.t1_coef, b[N], N, b[N - 1])
    model_M = tail_sum_model(p.alpha, p.t1_coef, b[M], M, b[M - 1])
    assert explicit + model_M == pytest.approx(model_N, rel=2e-3)


def test_cylinders_tile_delta(im05e):
    cyl = im05e.cylinders
    ll, lr = cyl.lengths()
    total = ll.sum() + lr.sum() + cyl.residual_length
    assert total == pytest.approx(0.75, rel=1e-12)
    # adjacent left pieces share endpoints
    assert np.all(cyl.left[2:, 0] == cyl.left[1:-1, 1])
    assert np.all(cyl.right[2:, 1] == cyl.right[1:-1, 0])


def test_cylinder_orbit_mismatch(im05):
    with pytest.raises(ValueError):
        build_cylinders(build_map(MapParams(0.5, 0.05)), im05.orbit)


@pytest.mark.parametrize("eps", [0.0, 0.05])
def test_index_matches_oracle(eps):
    im = induce(build_map(MapParams(0.5, eps)), 3000)
    rng = np.random.default_rng(7)
    x = 0.25 + 0.75 * rng.random(20_000)
    # add points right next to the cylinder boundaries
    x = np.concatenate([x, np.nextafter(im.cylinders.left[2:200, 1], 0),
                        np.nextafter(im.cylinders.right[2:200, 0], 1)])
    idx = im.cylinders.index_of(x)
    keep = idx > 0
    tau = return_time_oracle(im.map, x[keep])
    np.testing.assert_array_equal(idx[keep], tau)


def test_index_residual(im05):
    lo, hi = im05.cylinders.residual
    assert im05.cylinders.index_of(0.5 * (lo + hi))[0] == 0
    assert im05.cylinders.index_of(Q38)[0] == 0


def test_induced_eval_matches_iteration(im05e):
    m = im05e.map
    for x in (0.26, 0.3, 0.37, 0.374, 0.38, 0.45, 0.55, 0.7, 0.95):
        y, tau = induced_eval(im05e, x)
        orb = m.iterate(x, tau)
        assert tau == return_time_oracle(m, x)
        assert y == pytest.approx(orb[-1], rel=1e-11)


def test_induced_eval_errors(im05):
    with pytest.raises(DomainError):
        induced_eval(im05, 0.1)
    with pytest.raises(UnresolvedRegionError):
        induced_eval(im05, Q38)
    with pytest.raises(UnresolvedRegionError):
        induced_deriv(im05, Q38)


def test_induced_deriv_finite_difference(im05e):
    for x in (0.3, 0.37, 0.38, 0.6, 0.9):
        h = 1e-9 * min(abs(x - Q38), 1.0)
        d = (induced_eval(im05e, x + h)[0] - induced_eval(im05e, x - h)[0]) / (2 * h)
        assert induced_deriv(im05e, x) == pytest.approx(abs(d), rel=1e-4)
    assert induced_deriv(im05e, 0.625) == pytest.approx(8 / 3 * 1.1)


def test_return_time_oracle_scalar_and_cap():
    m = build_map(MapParams(0.5, 0.0))
    assert return_time_oracle(m, 0.6) == 1
    assert return_time_oracle(m, Q38, cap=50) == -1


@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.8])
def test_orbit_decay(alpha):
    o = boundary_orbit(build_map(MapParams(alpha, 0.0)), 2000)
    rep = orbit_decay_check(o, alpha)
    assert rep.violations == 0
    assert rep.d > 1.0
    assert rep.c0 == pytest.approx(1 / (4 * (1 + alpha) ** (1 / alpha)))
    assert rep.ok


def test_orbit_decay_c0_gives_d_one():
    a = 0.5
    c0 = 1 / (4 * (1 + a) ** (1 / a))
    assert c0 ** a * 4 ** a * (1 + a) == pytest.approx(1.0)


def test_return_derivative_direct_product(im05):
    rep = return_derivative_check(im05, 5, 60)
    assert rep.violations == 0
    # spot check one derivative by explicit forward iteration
    p = im05.params
    lo, hi = im05.orbit.gap(5)
    y = 0.5 * (lo + hi)
    x = y
    for _ in range(10):
        x = brentq(lambda s: float(t1_eval(p, s)) - x, 0.0, x, xtol=1e-300, rtol=1e-15)
    d = 4.0
    u = x
    for _ in range(10):
        d *= 1 + 1.5 * 2 * u ** 0.5
        u = float(t1_eval(p, u))
    assert u == pytest.approx(y, rel=1e-12)
    n = 5 + 11
    assert d >= (n / 7) ** rep.eta


def test_return_derivative_rejects_bad_k(im05):
    with pytest.raises(ValueError):
        return_derivative_check(im05, 0, 10)


def test_induced_adler_bounded(im05):
    a100 = induced_adler_constant(im05, 100)
    a400 = induced_adler_constant(im05, 400)
    assert math.isfinite(a400)
    assert a400 == pytest.approx(a100, rel=0.05)


def test_csv_writers(tmp_path, im05):
    write_cylinders_csv(im05, tmp_path / "c.csv", n_max=10)
    write_orbit_csv(im05.orbit, tmp_path / "o.csv")
    with open(tmp_path / "c.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["n", "piece_side", "lo", "hi", "image_lo", "image_hi", "length"]
    assert len(rows) == 1 + 20 + 3
    with open(tmp_path / "o.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["n", "b_n", "b_n_scaled"]
    assert len(rows) == im05.N + 2
