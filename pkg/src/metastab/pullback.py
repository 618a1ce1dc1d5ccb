"""Invariant densities of the full map recovered from induced densities.

Given the stationary density ``hat_h`` of the induced map on Delta, the
invariant density of the full map is ``c * hat_h`` on Delta and on
(0, 1/4) it solves ``h(x) = g(x) + h(T1^{-1}x) / DT1(T1^{-1}x)`` with

    g(y) = c * (hat_h(3/8 - y/s2) / s2 + hat_h(3/8 + y/4) / 4),

the contribution of the two linear preimages of ``y``. Unrolling gives
``h(x) = sum_m g(y_m) / prod_{i<=m} DT1(y_i)`` along the backward orbit
``y_m = T1^{-m}(x)``. Deep in the orbit ``g`` is constant, equal to
``g0``, and ``h(y) ~ g0 / (A y**alpha)`` with ``A`` the coefficient of ``T1``;
that asymptote closes the recursion.

``c`` is the Kac constant, the reciprocal of the mean return time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TruncationError
from .inducing import Q38, CylinderSet, InducedModel, induce, tail_sum_model
from .map_core import MapModel, MapParams, build_map, t1_deriv, t1_inverse_array
from .transfer_op import (Grid, StepDensity, block_start, build_induced_ulam, delta_grid,
                          stationary_density)

KAC_TAIL_MAX = 1e-3
REMAINDER_MAX = 1e-2


@dataclass(frozen=True)
class KacConstants:
    """Kac constant ``c_tau`` with its series split into resolved part and tail.

    ``mu[n-1]`` is the induced measure of ``Z_n``. ``tail`` is the modelled
    contribution of the cylinders beyond ``N`` and ``tail_bound`` an upper
    bound for it.
    """

    c_tau: float
    partial: float
    tail: float
    tail_bound: float
    mu: np.ndarray = field(repr=False)
    h_res_left: float = 0.0
    h_res_right: float = 0.0

    @property
    def mean_return_time(self) -> float:
        """``sum_k k mu_hat(Z_k)``, i.e. ``1 / c_tau``."""
        return self.partial + self.tail

    @property
    def N(self) -> int:
        return self.mu.size


def _tail_sums(cyl: CylinderSet):
    p_alpha, eps = cyl.orbit.alpha, cyl.orbit.epsilon
    A = 4.0 ** p_alpha * (1.0 + 4.0 * eps)
    b = cyl.orbit.b
    N = cyl.N
    S1 = tail_sum_model(p_alpha, A, b[N], N, b_prev=b[N - 1])
    inc = p_alpha * A * (1.0 - (1.0 + p_alpha) * A * b[N] ** p_alpha / 2.0)
    S1_hi = tail_sum_model(p_alpha, A, b[N], N, b_prev=b[N - 1], increment=inc)
    return S1, S1_hi


def kac_constant(cyl: CylinderSet, hat_density: StepDensity) -> KacConstants:
    """``c_tau^{-1} = sum_n n mu_hat(Z_n)`` with a modelled tail beyond ``N``.

    Raises :class:`TruncationError` when the tail bound exceeds 1e-3.
    """
    mass = hat_density.integral()
    if abs(mass - 1.0) > 1e-9:
        raise ValueError(f"induced density must have integral 1, got {mass!r}")
    N = cyl.N
    left, right = cyl.left[1:], cyl.right[1:]
    mu = hat_density.integrate(left[:, 0], left[:, 1]) + hat_density.integrate(right[:, 0], right[:, 1])
    n = np.arange(1, N + 1)
    partial = float(np.sum(n * mu))
    hL = float(hat_density.left_limit(Q38))
    hR = float(hat_density(Q38))
    S1, S1_hi = _tail_sums(cyl)
    tail = (hL / cyl.s2 + hR / 4.0) * S1
    bound = max(hL, hR) * (1.0 / cyl.s2 + 0.25) * S1_hi
    if bound > KAC_TAIL_MAX:
        raise TruncationError(f"Kac tail bound {bound:.3g} exceeds {KAC_TAIL_MAX}; increase N",
                              bound=bound)
    mu.setflags(write=False)
    return KacConstants(1.0 / (partial + tail), partial, tail, bound, mu, hL, hR)


def mixture_kac(lambda_hat: float, c_l: float, c_r: float) -> float:
    """Kac constant of ``lambda_hat * hat_h_l + (1 - lambda_hat) * hat_h_r``."""
    return 1.0 / (lambda_hat / c_l + (1.0 - lambda_hat) / c_r)


@dataclass(frozen=True)
class PullbackDensity:
    """Full-interval density: ``c * hat_h`` on Delta, a sub-grid on each ``W_k`` for ``k <= K``.

    ``w_edges[k-1]`` are the ``S + 1`` sub-grid nodes of ``W_k`` (increasing) and
    ``w_values[k-1]`` the values at the sub-cell midpoints. The interval
    ``[0, b_K)`` is a single cell carrying ``unresolved_mass``, computed
    from the tower structure. ``scale`` multiplies everything; it is 1
    before renormalisation.
    """

    params: MapParams
    hat: StepDensity = field(repr=False)
    kac: KacConstants
    w_edges: np.ndarray = field(repr=False)
    w_values: np.ndarray = field(repr=False)
    unresolved_mass: float
    remainder: float
    g_left: np.ndarray = field(repr=False)
    scale: float = 1.0

    @property
    def c_tau(self) -> float:
        return self.kac.c_tau

    @property
    def K(self) -> int:
        return self.w_edges.shape[0]

    @property
    def b_K(self) -> float:
        return float(self.w_edges[-1, 0])

    @property
    def delta(self) -> StepDensity:
        return self.hat.scaled(self.c_tau * self.scale)

    def raw_integral(self) -> float:
        w = np.diff(self.w_edges, axis=1)
        return float(self.c_tau * self.hat.integral() + np.sum(w * self.w_values)
                     + self.unresolved_mass)

    @property
    def renorm_magnitude(self) -> float:
        return abs(1.0 / self.scale - 1.0) if self.scale != 1.0 else abs(self.raw_integral() - 1.0)

    def renormalized(self) -> "PullbackDensity":
        from dataclasses import replace
        return replace(self, scale=1.0 / self.raw_integral())

    def integral(self) -> float:
        return self.scale * self.raw_integral()

    def as_step(self) -> tuple[StepDensity, np.ndarray]:
        """Step density on [0, 1] and per-cell tags (-1 Delta, k for ``W_k``, 0 unresolved)."""
        K, S1 = self.w_edges.shape
        we = self.w_edges[::-1]  # W_K first
        inner = np.concatenate([we[:, :-1].ravel(), [0.25]])
        edges = np.concatenate([[0.0], inner, self.hat.grid.edges[1:]])
        vals = np.concatenate([[self.unresolved_mass / self.b_K],
                               self.w_values[::-1].ravel(),
                               self.c_tau * self.hat.values])
        tags = np.concatenate([[0], np.repeat(np.arange(K, 0, -1), S1 - 1),
                               np.full(self.hat.grid.m, -1)])
        return StepDensity(Grid(edges), vals * self.scale), tags

    def sup_on_gap(self, k: int) -> float:
        return float(self.w_values[k - 1].max() * self.scale)

    def _g(self, y):
        p = self.params
        c = self.c_tau
        return c * (self.hat.left_limit(Q38 - y / p.s2) / p.s2 + self.hat(Q38 + y / 4.0) / 4.0)

    def evaluate(self, x, depth_ratio: float = 1e-3):
        """Pointwise value, summing the backward ``T1`` orbit of each ``x < 1/4``.

        The sum stops once the orbit is below ``depth_ratio * x`` and is
        closed with the asymptote ``g / (A y**alpha)``.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        on_delta = x >= 0.25
        out[on_delta] = self.c_tau * self.hat(x[on_delta])
        sel = np.flatnonzero(~on_delta)
        if sel.size:
            out[sel] = _forward_sum(self, x[sel], depth_ratio)
        return out * self.scale

    def integrate_points(self, lo: float, hi: float, panels: int = 256, order: int = 8) -> float:
        """Composite Gauss-Legendre integral of :meth:`evaluate` over ``[lo, hi]``."""
        if hi <= lo:
            return 0.0
        t, w = np.polynomial.legendre.leggauss(order)
        e = np.linspace(lo, hi, panels + 1)
        half = 0.5 * np.diff(e)
        mid = 0.5 * (e[:-1] + e[1:])
        xs = (mid[:, None] + half[:, None] * t[None, :]).ravel()
        vals = self.evaluate(xs).reshape(panels, order)
        return float(np.sum(vals * w[None, :] * half[:, None]))


def _forward_sum(pb: PullbackDensity, x, depth_ratio):
    p = pb.params
    A, a = p.t1_coef, p.alpha
    acc = pb._g(x)
    prod = np.ones_like(x)
    y = x.copy()
    target = x * depth_ratio
    active = np.arange(x.size)
    while active.size:
        y = t1_inverse_array(p, y)
        prod = prod * t1_deriv(p, y)
        done = y < target[active]
        if np.any(done):
            yd = y[done]
            acc[active[done]] += pb._g(yd) / (A * yd ** a) / prod[done]
        keep = ~done
        acc[active[keep]] += pb._g(y[keep]) / prod[keep]
        active, y, prod = active[keep], y[keep], prod[keep]
    return acc


def pullback(model: MapModel, im: InducedModel, hat_density: StepDensity, kc: KacConstants,
             K: int = 500, S: int = 32, depth_ratio: float = 1e-3) -> PullbackDensity:
    """Full-map density from the induced density ``hat_density``.

    The values on ``W_1..W_K`` come from one backward recursion along the
    ``T1``-preimages of ``S`` sub-cells of ``W_1``, continued until the
    orbit is ``depth_ratio`` times below ``b_K`` and closed there with the
    asymptote. ``K`` is capped at ``N - 2``. ``remainder`` is the largest share of a reported value that
    comes from the closure; above 1% a :class:`TruncationError` is raised.
    """
    p = model.params
    A, a = p.t1_coef, p.alpha
    N = im.N
    K = min(int(K), N - 2)
    if K < 1:
        raise ValueError(f"the cylinder depth N={N} is too small for a pull-back")
    b = np.asarray(im.orbit.b)
    c = kc.c_tau
    t = np.linspace(0.0, 1.0, S + 1)
    nodes = b[1] + (0.25 - b[1]) * t
    nodes[-1] = 0.25
    pts = np.concatenate([nodes, 0.5 * (nodes[:-1] + nodes[1:])])
    # depth where the orbit is depth_ratio * b_K: b_j ~ (alpha A j)^(-1/alpha)
    J = int(math.ceil(K * depth_ratio ** (-a))) + 64

    def g(y):
        return c * (hat_density.left_limit(Q38 - y / p.s2) / p.s2 + hat_density(Q38 + y / 4.0) / 4.0)

    G = np.empty((J + 1, pts.size))
    D = np.empty((J + 1, pts.size))
    edges = np.empty((K, S + 1))
    y = pts
    for j in range(J + 1):
        if j:
            prev_low = y[0]
            y = t1_inverse_array(p, y)
            y[S] = prev_low
        if j < K:
            edges[j] = y[:S + 1]
        G[j] = g(y)
        D[j] = t1_deriv(p, y)
    closure = G[J] / (A * y ** a)
    h = closure
    r = closure.copy()
    vals = np.empty((K, S))
    frac = 0.0
    for j in range(J - 1, -1, -1):
        h = G[j] + h / D[j + 1]
        r = r / D[j + 1]
        if j < K:
            vals[j] = h[S + 1:]
            pos = h > 0
            if np.any(pos):
                frac = max(frac, float(np.max(r[pos] / h[pos])))
    if frac > REMAINDER_MAX:
        raise TruncationError(f"closure carries {frac:.3g} of the pull-back values", bound=frac)

    # mass of the points of W_k, k > K: c * sum_{n >= K+2} (n-K-1) mu(Z_n) plus the tail model
    n = np.arange(1, N + 1)
    mu = kc.mu
    resolved = float(np.sum(np.where(n >= K + 2, (n - K - 1) * mu, 0.0)))
    S1, _ = _tail_sums(im.cylinders)
    tail = (kc.h_res_left / p.s2 + kc.h_res_right / 4.0) * (S1 - (K + 1) * b[N - 1])
    unresolved = c * (resolved + tail)
    edges.setflags(write=False)
    vals.setflags(write=False)
    g_nodes = G[0, :S + 1].copy()
    return PullbackDensity(p, hat_density, kc, edges, vals, unresolved, frac, g_nodes)


def induced_solution(model: MapModel, grid: Grid, N: int | None = None, start=None,
                     im: InducedModel | None = None):
    """Induced model, Ulam operator and stationary density for one map."""
    im = induce(model, N) if im is None else im
    op = build_induced_ulam(im, grid)
    hat = stationary_density(op, start=start)
    return im, op, hat


def reference_densities(alpha: float, grid: Grid | int = 2 ** 14, N: int | None = None,
                        K: int = 500, S: int = 32):
    """``(h_l, h_r)`` at ``epsilon = 0``: pull-backs of the two block densities."""
    if not isinstance(grid, Grid):
        grid = delta_grid(int(grid))
    model = build_map(MapParams(alpha, 0.0))
    im = induce(model, N)
    op = build_induced_ulam(im, grid)
    hat_l = stationary_density(op, start=block_start(grid, 0.25, 0.5))
    hat_r = stationary_density(op, start=block_start(grid, 0.5, 1.0))
    h_l = pullback(model, im, hat_l, kac_constant(im.cylinders, hat_l), K=K, S=S)
    h_r = pullback(model, im, hat_r, kac_constant(im.cylinders, hat_r), K=K, S=S)
    return h_l, h_r


def perturbed_density(alpha: float, epsilon: float, grid: Grid | int = 2 ** 14,
                      N: int | None = None, K: int = 500, S: int = 32) -> PullbackDensity:
    """Pull-back of the unique induced stationary density for ``epsilon > 0``."""
    if not epsilon > 0:
        raise ValueError("perturbed_density needs epsilon > 0")
    if not isinstance(grid, Grid):
        grid = delta_grid(int(grid))
    model = build_map(MapParams(alpha, epsilon))
    im, _, hat = induced_solution(model, grid, N)
    return pullback(model, im, hat, kac_constant(im.cylinders, hat), K=K, S=S)


def write_pullback_csv(pb: PullbackDensity, path) -> None:
    """CSV with columns x_lo, x_hi, value, region_tag."""
    f, tags = pb.as_step()
    e = f.grid.edges
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_lo", "x_hi", "value", "region_tag"])
        for lo, hi, v, tg in zip(e[:-1], e[1:], f.values, tags):
            tag = "delta" if tg < 0 else ("unresolved" if tg == 0 else f"W_{tg}")
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(v)), tag])


def summary_block(pb: PullbackDensity) -> str:
    return (f"c_tau = {pb.c_tau!r}\n"
            f"tail_bound = {pb.kac.tail_bound!r}\n"
            f"renorm_magnitude = {pb.renorm_magnitude!r}\n"
            f"closure_remainder = {pb.remainder!r}\n")
