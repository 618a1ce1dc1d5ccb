import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from metastab.errors import ConvergenceError, GridError, NumericalError
from metastab.inducing import induce, induced_eval
from metastab.map_core import MapParams, build_map
from metastab.transfer_op import (Grid, StepDensity, apply_pf, block_start, build_induced_ulam,
                                  build_ulam, bv_norm, delta_grid, l1_distance, lasota_yorke_fit,
                                  ly_test_family, stationary_density, total_variation, write_coo,
                                  write_density_csv)


@pytest.fixture(scope="module")
def induced_small():
    im = induce(build_map(MapParams(0.5, 0.05)))
    return im, build_induced_ulam(im, delta_grid(256))


@pytest.fixture(scope="module")
def induced_zero():
    im = induce(build_map(MapParams(0.5, 0.0)))
    return im, build_induced_ulam(im, delta_grid(256))


def test_grid_validation():
    with pytest.raises(GridError):
        Grid(np.array([0.0, 1.0]))
    with pytest.raises(GridError):
        Grid(np.array([0.0, 0.5, 0.5, 1.0]))
    g = delta_grid(8)
    assert g.m == 16
    assert 0.375 in g.edges and 0.5 in g.edges
    assert g.cell_of(0.5) == 8


def test_step_density_validation():
    g = Grid.uniform(0, 1, 4)
    with pytest.raises(GridError):
        StepDensity(g, np.ones(3))
    with pytest.raises(ValueError):
        StepDensity(g, -np.ones(4))


def brute_integral(f, lo, hi):
    e = f.grid.edges
    tot = 0.0
    for i in range(f.grid.m):
        a, b = max(lo, e[i]), min(hi, e[i + 1])
        if b > a:
            tot += f.values[i] * (b - a)
    return tot


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=5, max_size=5),
       st.floats(-0.2, 1.2), st.floats(-0.2, 1.2))
def test_integrate_matches_brute_force(vals, a, b):
    g = Grid(np.array([0.0, 0.1, 0.35, 0.5, 0.9, 1.0]))
    f = StepDensity(g, np.array(vals))
    lo, hi = min(a, b), max(a, b)
    assert f.integrate(lo, hi)[0] == pytest.approx(brute_integral(f, lo, hi), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=7, max_size=7),
       st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3))
def test_l1_distance_on_refinement(v1, v2):
    f = StepDensity(Grid.uniform(0, 1, 7), np.array(v1))
    g = StepDensity(Grid(np.array([0.0, 0.2, 0.75, 1.0])), np.array(v2))
    x = (np.arange(70_000) + 0.5) / 70_000  # every cell boundary is a multiple of 1/70000
    ref = np.abs(f(x) - g(x)).mean()
    assert l1_distance(f, g) == pytest.approx(ref, abs=1e-9)
    assert l1_distance(f, g) == pytest.approx(l1_distance(g, f))


def test_l1_support_mismatch():
    f = StepDensity(Grid.uniform(0, 1, 4), np.ones(4))
    g = StepDensity(Grid.uniform(0.25, 1, 4), np.ones(4))
    with pytest.raises(GridError):
        l1_distance(f, g)


def test_variation_and_bv():
    f = StepDensity(Grid.uniform(0, 1, 4), np.array([1.0, 3.0, 0.0, 0.0]))
    assert total_variation(f) == 5.0
    assert bv_norm(f) == pytest.approx(6.0)
    assert f(1.5) == 0.0
    assert f.left_limit(0.5) == 3.0 and f(0.5) == 0.0


def preimage_overlap(br, a, b, c, d):
    """|[a, b] & br^{-1}[c, d]| by bracketing on the branch."""
    lo, hi = max(a, br.lo), min(b, br.hi)
    if hi <= lo:
        return 0.0
    f = lambda x: float(br.eval(x))
    ya, yb = f(lo), f(hi)
    ymin, ymax = min(ya, yb), max(ya, yb)
    c2, d2 = max(c, ymin), min(d, ymax)
    if d2 <= c2:
        return 0.0

    def inv(y):
        if y <= ymin:
            return lo if ya <= yb else hi
        if y >= ymax:
            return hi if ya <= yb else lo
        return brentq(lambda x: f(x) - y, lo, hi, xtol=1e-15)

    return abs(inv(d2) - inv(c2))


def test_full_map_ulam_entries():
    m = build_map(MapParams(0.5, 0.05))
    g = Grid.uniform(0, 1, 64)
    op = build_ulam(m.branches, g)
    np.testing.assert_allclose(op.row_sums(), 1.0, atol=1e-12)
    assert op.leak_total == 0.0
    P = op.P.toarray()
    e = g.edges
    rng = np.random.default_rng(3)
    for i in rng.choice(64, 12, replace=False):
        for j in range(64):
            ref = sum(preimage_overlap(br, e[i], e[i + 1], e[j], e[j + 1]) for br in m.branches)
            assert P[i, j] == pytest.approx(ref / g.widths[i], abs=1e-10)


def test_leak_is_recorded():
    m = build_map(MapParams(0.5, 0.0))
    g = Grid.uniform(0.5, 1.0, 32)
    op = build_ulam(m.branches[3:], g)
    assert op.leak_total == 0.0
    g2 = Grid.uniform(0.25, 0.5, 32)
    op2 = build_ulam(m.branches[1:3], g2)
    assert op2.leak_total > 0.0
    np.testing.assert_allclose(op2.row_sums() + op2.leak, 1.0, atol=1e-12)
    with pytest.raises(NumericalError):
        stationary_density(op2)


def test_induced_rows_stochastic(induced_small):
    im, op = induced_small
    np.testing.assert_allclose(op.row_sums(), 1.0, atol=1e-12)
    assert op.row_defect < 1e-9
    assert op.redistributed < 1e-7


def test_induced_rows_against_sampling(induced_small):
    im, op = induced_small
    g = op.grid
    P = op.P
    for x0 in (0.27, 0.33, 0.36, 0.39, 0.45, 0.6, 0.85):
        i = int(g.cell_of(x0))
        a, b = g.edges[i], g.edges[i + 1]
        xs = a + (b - a) * (np.arange(20_000) + 0.5) / 20_000
        ys = np.array([induced_eval(im, x)[0] for x in xs])
        row = np.bincount(g.cell_of(ys), minlength=g.m) / xs.size
        dense = P.getrow(i).toarray().ravel()
        assert np.abs(row - dense).sum() < 5e-3


def test_power_and_direct_agree(induced_small):
    _, op = induced_small
    f = stationary_density(op)
    h = stationary_density(op, method="direct")
    assert f.integral() == pytest.approx(1.0)
    assert l1_distance(f, h) < 1e-8
    assert l1_distance(apply_pf(op, f), f) < 1e-10


def test_unperturbed_blocks(induced_zero):
    _, op = induced_zero
    g = op.grid
    hr = stationary_density(op, start=block_start(g, 0.5, 1.0))
    hl = stationary_density(op, start=block_start(g, 0.25, 0.5))
    right = g.midpoints > 0.5
    np.testing.assert_allclose(hr.values[right], 2.0, atol=1e-10)
    assert hl.integrate(0.5, 1.0)[0] == 0.0
    assert hl.values[~right].min() > 3.0


def test_stationary_errors(induced_small):
    _, op = induced_small
    with pytest.raises(ConvergenceError) as info:
        stationary_density(op, max_iter=1, start=block_start(op.grid, 0.25, 0.3))
    assert info.value.residual > 0
    with pytest.raises(ValueError):
        stationary_density(op, method="eig")


def test_apply_pf_conserves_mass(induced_small):
    _, op = induced_small
    f = StepDensity(op.grid, np.linspace(1, 2, op.grid.m)).normalized()
    assert apply_pf(op, f).integral() == pytest.approx(1.0, abs=1e-12)


def test_lasota_yorke_envelope(induced_small):
    _, op = induced_small
    fam = ly_test_family(op.grid)
    fit = lasota_yorke_fit(op, fam)
    assert fit.beta < 1.0
    assert fit.max_violation < 1e-6 * max(1.0, fit.B)
    for f in fam[:10]:
        assert f.integral() == pytest.approx(1.0)


def test_writers(tmp_path, induced_small):
    _, op = induced_small
    write_coo(op, tmp_path / "p.coo")
    first = (tmp_path / "p.coo").read_text().splitlines()
    assert first[0].split()[0] == str(op.m)
    assert len(first) == op.P.nnz + 1
    write_density_csv(stationary_density(op), tmp_path / "h.csv")
    with open(tmp_path / "h.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["cell_lo", "cell_hi", "value"]
    assert len(rows) == op.m + 1
