import csv

import numpy as np
import pytest

from metastab.errors import TruncationError
from metastab.inducing import Q38, induce, return_time_oracle
from metastab.map_core import MapParams, build_map, t1_inverse_array
from metastab.pullback import (kac_constant, mixture_kac, pullback, summary_block,
                               write_pullback_csv)
from metastab.transfer_op import (StepDensity, build_induced_ulam, delta_grid,
                                  stationary_density)


@pytest.fixture(scope="module")
def solved():
    model = build_map(MapParams(0.5, 0.05))
    im = induce(model)
    op = build_induced_ulam(im, delta_grid(1024))
    hat = stationary_density(op)
    kc = kac_constant(im.cylinders, hat)
    return model, im, hat, kc, pullback(model, im, hat, kc, K=200, S=16)


def test_kac_against_sampled_return_times(solved):
    # draw points from hat_h by inverting its distribution function, then iterate the map
    model, im, hat, kc, _ = solved
    rng = np.random.default_rng(11)
    cdf = np.concatenate([[0.0], np.cumsum(hat.mass)])
    u = rng.random(100_000)
    i = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, hat.grid.m - 1)
    e = hat.grid.edges
    x = e[i] + (u - cdf[i]) / hat.mass[i] * (e[i + 1] - e[i])
    tau = return_time_oracle(model, x, cap=200_000)
    assert np.all(tau > 0)
    assert tau.mean() == pytest.approx(kc.mean_return_time, rel=0.02)


def test_kac_series_parts(solved):
    _, im, hat, kc, _ = solved
    assert kc.c_tau == pytest.approx(1.0 / (kc.partial + kc.tail))
    assert 0 < kc.tail <= kc.tail_bound < 1e-3
    assert kc.mu.sum() + hat.integrate(*im.cylinders.residual)[0] == pytest.approx(1.0, abs=1e-9)
    assert kc.N == im.N


def test_kac_requires_normalised_density(solved):
    _, im, hat, _, _ = solved
    with pytest.raises(ValueError):
        kac_constant(im.cylinders, hat.scaled(2.0))


def test_kac_tail_too_large_for_slow_exponent():
    model = build_map(MapParams(0.8, 0.0))
    im = induce(model, 20_000)
    g = delta_grid(64)
    hat = StepDensity(g, np.ones(g.m)).normalized()
    with pytest.raises(TruncationError) as info:
        kac_constant(im.cylinders, hat)
    assert info.value.bound > 1e-3


def test_total_mass_before_renormalisation(solved):
    pb = solved[-1]
    assert pb.raw_integral() == pytest.approx(1.0, abs=5e-3)
    assert pb.renormalized().integral() == pytest.approx(1.0, abs=1e-12)
    assert pb.renorm_magnitude == pytest.approx(abs(pb.raw_integral() - 1.0))
    assert pb.unresolved_mass > 0


def test_delta_part_is_scaled_induced_density(solved):
    _, _, hat, kc, pb = solved
    assert pb.delta.integral() == pytest.approx(kc.c_tau)
    x = np.array([0.3, 0.4, 0.7])
    np.testing.assert_allclose(pb.evaluate(x), kc.c_tau * hat(x))


def test_gap_masses_follow_tower(solved):
    # mu(W_k) = mu(W_{k+1}) + c mu_hat(Z_{k+1}): the preimage of W_k is W_{k+1} and two cylinder pieces
    _, _, _, kc, pb = solved
    w = np.sum(np.diff(pb.w_edges, axis=1) * pb.w_values, axis=1)
    for k in range(1, 20):
        rhs = w[k] + kc.c_tau * kc.mu[k]
        assert w[k - 1] == pytest.approx(rhs, rel=2e-3)


def test_invariance_across_quarter(solved):
    # measure of A in Delta equals the measure of its preimage, part of which lies in W_1
    model, _, hat, kc, pb = solved
    p = model.params
    a, b = 0.26, 0.30
    lhs = kc.c_tau * hat.integrate(a, b)[0]
    pre_t1 = t1_inverse_array(p, np.array([a, b]))
    part_w = pb.integrate_points(pre_t1[0], pre_t1[1])
    lo2, hi2 = Q38 - b / p.s2, Q38 - a / p.s2
    lo3, hi3 = Q38 + a / 4, Q38 + b / 4
    part_delta = kc.c_tau * (hat.integrate(lo2, hi2)[0] + hat.integrate(lo3, hi3)[0])
    assert part_w + part_delta == pytest.approx(lhs, rel=5e-3)


def test_forward_sum_matches_backward_recursion(solved):
    model, _, _, _, pb = solved
    p = model.params
    S = pb.w_values.shape[1]
    e1 = pb.w_edges[0]
    y = 0.5 * (e1[:-1] + e1[1:])
    for k in range(1, 60):
        if k > 1:
            y = t1_inverse_array(p, y)
        if k in (1, 2, 10, 59):
            # the forward closure error shrinks like depth_ratio**1.5
            np.testing.assert_allclose(pb.evaluate(y, depth_ratio=1e-5) / pb.scale,
                                       pb.w_values[k - 1], rtol=1e-6)
            np.testing.assert_allclose(pb.evaluate(y) / pb.scale, pb.w_values[k - 1], rtol=1e-4)
    assert S == 16


def test_growth_on_gaps(solved):
    pb = solved[-1]
    ks = np.arange(1, pb.K + 1)
    sup = np.array([pb.sup_on_gap(k) for k in ks])
    assert np.all(np.diff(sup) > 0)
    ratio = sup / ks
    assert ratio[9:].max() / ratio[9:].min() < 4


def test_as_step_layout(solved):
    pb = solved[-1]
    f, tags = pb.as_step()
    assert f.grid.support == (0.0, 1.0)
    assert f.integral() == pytest.approx(pb.integral(), rel=1e-12)
    assert tags[0] == 0 and tags[1] == pb.K and tags[-1] == -1
    assert set(np.unique(tags[tags > 0])) == set(range(1, pb.K + 1))
    assert pb.b_K == pytest.approx(pb.w_edges[-1, 0])


def test_depth_is_capped():
    model = build_map(MapParams(0.5, 0.0))
    im = induce(model, 40)
    g = delta_grid(64)
    hat = StepDensity(g, np.where(g.midpoints > 0.5, 2.0, 0.0))
    kc = kac_constant(im.cylinders, hat)
    assert kc.c_tau == 1.0
    pb = pullback(model, im, hat, kc, K=500, S=4)
    assert pb.K == 38
    assert np.all(pb.w_values == 0.0)


def test_mixture_kac():
    assert mixture_kac(0.3, 0.5, 1.0) == pytest.approx(1 / (0.3 / 0.5 + 0.7))
    assert mixture_kac(1.0, 0.4, 1.0) == pytest.approx(0.4)


def test_writer_and_summary(tmp_path, solved):
    pb = solved[-1]
    write_pullback_csv(pb, tmp_path / "pb.csv")
    with open(tmp_path / "pb.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x_lo", "x_hi", "value", "region_tag"]
    assert rows[1][3] == "unresolved" and rows[-1][3] == "delta"
    assert "c_tau" in summary_block(pb)
