"""First-return system of the map on Delta = [1/4, 1].

Geometry
--------
The boundary orbit ``b_0 = 1/4``, ``b_n = T1^{-1}(b_{n-1})`` cuts [0, 1/4]
into gaps ``W_k = (b_k, b_{k-1})``. A point of (1/4, 1/2) close to 3/8 is
sent by ``T2`` or ``T3`` into some ``W_{n-1}`` and then needs ``n - 1``
further steps of ``T1`` to come back, so its return time is ``n``.

Everything near 3/8 is handled in the coordinate ``u = s_i |x - 3/8|``,
i.e. the value of ``T2`` (slope ``s2``) or ``T3`` (slope 4). In that
coordinate the left and right pieces of the cylinder ``Z_n`` are both
``W_{n-1}``, except for ``n = 1`` where the ``T2`` piece is
``(1/4, 1/2 + eps)`` and the ``T3`` piece is ``(1/4, 1/2)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError, UnresolvedRegionError
from .map_core import MapModel, t1_deriv, t1_eval, t1_inverse, t1_inverse_array, t1_second

Q38 = 0.375
DELTA = (0.25, 1.0)


@dataclass(frozen=True)
class BoundaryOrbit:
    """``b[0] = 1/4 > b[1] > ... > b[N] > 0`` for fixed map parameters."""

    b: np.ndarray = field(repr=False)
    alpha: float
    epsilon: float

    @property
    def N(self) -> int:
        return len(self.b) - 1

    def gap(self, k: int) -> tuple[float, float]:
        """``W_k``; ``W_0`` is Delta itself."""
        if k == 0:
            return DELTA
        return (float(self.b[k]), float(self.b[k - 1]))

    def gap_index(self, x):
        """Index ``k`` with ``x`` in ``W_k`` for ``0 < x < 1/4``; ``N + 1`` below ``b_N``."""
        x = np.asarray(x, dtype=float)
        # b is decreasing: count entries >= x
        return np.searchsorted(-self.b, -x, side="right")


def boundary_orbit(model: MapModel, N: int) -> BoundaryOrbit:
    """Backward orbit of 1/4 under ``T1`` of length ``N + 1``."""
    N = int(N)
    if N < 1:
        raise ValueError("N must be at least 1")
    p = model.params
    b = np.empty(N + 1)
    b[0] = 0.25
    for n in range(1, N + 1):
        b[n] = t1_inverse(p, b[n - 1])
        if not (0.0 < b[n] < b[n - 1]):
            raise NumericalError(f"boundary orbit lost monotonicity at n={n}")
    b.setflags(write=False)
    return BoundaryOrbit(b, p.alpha, p.epsilon)


def default_depth(alpha: float, epsilon: float = 0.0, b_max: float = 1e-6,
                  tail_target: float = 1e-4, cap: int = 100_000) -> int:
    """Smallest depth with ``b_N < b_max`` and modelled Kac tail below ``tail_target``.

    The tail test uses the continuum model of the orbit, so it is cheap;
    ``cap`` bounds the result for exponents where the tail decays too
    slowly to ever meet the target.
    """
    A = 4.0 ** alpha * (1.0 + 4.0 * epsilon)
    s2 = 4.0 * (1.0 + 2.0 * epsilon)
    # b_n ~ (4**alpha + alpha*A*n)**(-1/alpha)
    n = 1
    while n < cap:
        bn = (4.0 ** alpha + alpha * A * n) ** (-1.0 / alpha)
        if bn < b_max and (1.0 / s2 + 0.25) * tail_sum_model(alpha, A, bn, n) <= tail_target:
            return n
        n = int(n * 1.1) + 1
    return cap


def tail_sum_model(alpha: float, A: float, b_N: float, N: int,
                   b_prev: float | None = None, increment: float | None = None) -> float:
    """Modelled ``sum_{n>N} n |W_{n-1}|`` given the orbit point ``b_N``.

    Beyond ``N`` the orbit is continued by
    ``b_j**(-alpha) = b_N**(-alpha) + increment*(j-N)`` with default
    increment ``alpha*A``, which makes ``sum_{j>=N} b_j`` a Hurwitz zeta
    value. Summation by parts gives ``(N+1) b_{N-1} + sum_{j>=N} b_j``.
    ``b_prev`` is ``b_{N-1}``; the model value is used when it is omitted.
    A smaller ``increment`` gives a slower orbit and hence an upper bound.
    """
    from scipy.special import zeta

    aA = alpha * A if increment is None else increment
    q = b_N ** (-alpha) / aA
    s_b = aA ** (-1.0 / alpha) * float(zeta(1.0 / alpha, q))
    if b_prev is None:
        b_prev = (b_N ** (-alpha) - aA) ** (-1.0 / alpha) if b_N ** (-alpha) > aA else 0.25
    return (N + 1) * b_prev + s_b


@dataclass(frozen=True)
class CylinderSet:
    """Cylinders ``Z_1..Z_N`` in both ``x`` and ``u`` coordinates.

    ``u_lo[n], u_hi[n]`` (index ``n`` from 1) bound the ``u``-image of the
    ``n``-th piece on each side; ``left`` and ``right`` hold the matching
    ``x`` intervals. ``right[1]`` extends to 1.
    """

    orbit: BoundaryOrbit = field(repr=False)
    s2: float
    epsilon: float
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    u_left: np.ndarray = field(repr=False)
    u_right: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.orbit.N

    @property
    def residual(self) -> tuple[float, float]:
        """Open neighbourhood of 3/8 holding the cylinders with ``n > N``."""
        bN1 = self.orbit.b[self.N - 1]
        return (Q38 - bN1 / self.s2, Q38 + bN1 / 4.0)

    @property
    def residual_length(self) -> float:
        bN1 = self.orbit.b[self.N - 1]
        return bN1 / self.s2 + bN1 / 4.0

    def return_time(self, n: int) -> int:
        return int(n)

    def lengths(self):
        """Lebesgue measure of the left and right pieces, computed in ``u`` (exact near 3/8)."""
        ll = (self.u_left[1:, 1] - self.u_left[1:, 0]) / self.s2
        lr = (self.u_right[1:, 1] - self.u_right[1:, 0]) / 4.0
        lr = lr.copy()
        lr[0] += 0.5  # (1/2, 1) sits in Z_1
        return ll, lr

    def index_of(self, x):
        """Cylinder index of points of Delta; 0 marks the residual region.

        Points on a boundary between two cylinders go to the one on the left.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.ones(x.shape, dtype=np.int64)
        b = self.orbit.b
        N = self.N
        lo, hi = self.residual
        left = (x >= 0.25) & (x <= Q38)
        right = (x > Q38) & (x <= 0.4375)
        u_l = self.s2 * (Q38 - x[left])
        # left piece (a_{n-1}, a_n] has u in [b_{n-1}, b_{n-2}); the boundary a_n
        # belongs to Z_n, i.e. u = b_{n-1} counts as level n
        kl = np.searchsorted(-b, -u_l, side="left")
        out[left] = np.minimum(kl + 1, N + 1)
        u_r = 4.0 * (x[right] - Q38)
        # right piece (a'_n, a'_{n-1}]: u in (b_{n-1}, b_{n-2}]; u = b_{n-2} is level n
        kr = np.searchsorted(-b, -u_r, side="right")
        out[right] = np.minimum(kr + 1, N + 1)
        out[(x > lo) & (x < hi)] = 0
        out[(out > N)] = 0
        return out


def build_cylinders(model: MapModel, orbit: BoundaryOrbit) -> CylinderSet:
    """Cylinder endpoints ``a_n = 3/8 - b_{n-1}/s2`` and ``a'_n = 3/8 + b_{n-1}/4``."""
    p = model.params
    if abs(orbit.alpha - p.alpha) > 0 or abs(orbit.epsilon - p.epsilon) > 0:
        raise ValueError("orbit and map parameters differ")
    s2 = p.s2
    N = orbit.N
    b = np.asarray(orbit.b)
    top = 0.5 + p.epsilon
    u_left = np.zeros((N + 1, 2))
    u_right = np.zeros((N + 1, 2))
    u_left[1] = (0.25, top)
    u_right[1] = (0.25, 0.5)
    u_left[2:, 0] = b[1:N]
    u_left[2:, 1] = b[0:N - 1]
    u_right[2:] = u_left[2:]
    left = np.zeros((N + 1, 2))
    right = np.zeros((N + 1, 2))
    left[1:, 0] = Q38 - u_left[1:, 1] / s2
    left[1:, 1] = Q38 - u_left[1:, 0] / s2
    left[1, 0] = 0.25
    right[1:, 0] = Q38 + u_right[1:, 0] / 4.0
    right[1:, 1] = Q38 + u_right[1:, 1] / 4.0
    right[1, 1] = 1.0
    for arr in (left, right, u_left, u_right):
        arr.setflags(write=False)
    return CylinderSet(orbit, s2, p.epsilon, left, right, u_left, u_right)


@dataclass(frozen=True)
class InducedModel:
    """Map, boundary orbit and cylinders of the induced system for one parameter pair."""

    map: MapModel
    orbit: BoundaryOrbit = field(repr=False)
    cylinders: CylinderSet = field(repr=False)

    @property
    def params(self):
        return self.map.params

    @property
    def N(self) -> int:
        return self.orbit.N

    def branch_image(self, n: int, side: str) -> tuple[float, float]:
        """Image of the ``n``-th cylinder piece under the induced map (``n <= N``)."""
        top = 0.5 + self.params.epsilon
        if side == "left":
            return (0.25, top)
        if n == 1:
            return (0.25, 0.5)
        return (0.25, top)

    def pieces(self, n_max: int | None = None):
        """Yield ``(n, side, lo, hi)`` for the cylinder pieces inside (1/4, 1/2)."""
        n_max = self.N if n_max is None else min(n_max, self.N)
        for n in range(1, n_max + 1):
            lo, hi = self.cylinders.left[n]
            yield n, "left", float(lo), float(hi)
            lo, hi = self.cylinders.right[n]
            yield n, "right", float(lo), min(float(hi), 0.5)


def induce(model: MapModel, N: int | None = None) -> InducedModel:
    """Build the induced model, choosing the depth with :func:`default_depth` if needed."""
    p = model.params
    if N is None:
        N = default_depth(p.alpha, p.epsilon)
    orbit = boundary_orbit(model, N)
    return InducedModel(model, orbit, build_cylinders(model, orbit))


def induced_eval(im: InducedModel, x: float) -> tuple[float, int]:
    """``(T^tau(x), tau)`` with ``tau`` the first return time of ``x`` to Delta."""
    x = float(x)
    if not (0.25 <= x <= 1.0):
        raise DomainError(f"induced map is defined on [1/4, 1], got {x!r}")
    n = int(im.cylinders.index_of(x)[0])
    if n == 0:
        raise UnresolvedRegionError(f"x={x!r} lies in the unresolved neighbourhood of 3/8")
    if x >= 0.5 or n == 1:
        return im.map.eval(x), 1
    p = im.params
    u = p.s2 * (Q38 - x) if x <= Q38 else 4.0 * (x - Q38)
    for _ in range(n - 1):
        u = float(t1_eval(p, u))
    return u, n


def induced_deriv(im: InducedModel, x: float) -> float:
    """Absolute derivative of the induced branch containing ``x``, via accumulated logs."""
    x = float(x)
    n = int(im.cylinders.index_of(x)[0])
    if n == 0:
        raise UnresolvedRegionError(f"x={x!r} lies in the unresolved neighbourhood of 3/8")
    p = im.params
    if x >= 0.5:
        # partition points belong to the branch on their right, as in MapModel.eval
        return abs(im.map.deriv(x, side="right"))
    s = p.s2 if x <= Q38 else 4.0
    u = s * abs(x - Q38)
    logd = math.log(s)
    for _ in range(n - 1):
        logd += math.log(float(t1_deriv(p, u)))
        u = float(t1_eval(p, u))
    return math.exp(logd)


def return_time_oracle(model: MapModel, x, cap: int = 100_000):
    """Smallest ``n >= 1`` with ``T^n(x)`` in Delta by direct iteration; ``-1`` past ``cap``.

    Accepts a scalar or an array; arrays are iterated together.
    """
    xa = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    out = np.full(xa.shape, -1, dtype=np.int64)
    active = np.arange(xa.size)
    cur = xa
    for n in range(1, cap + 1):
        cur = model.eval(cur)
        back = cur >= 0.25
        out[active[back]] = n
        active = active[~back]
        cur = cur[~back]
        if active.size == 0:
            break
    return int(out[0]) if np.ndim(x) == 0 else out


@dataclass(frozen=True)
class OrbitDecayReport:
    alpha: float
    c0: float
    c: float
    delta: float
    d: float
    c_empirical: float
    violations: int
    min_ratio: float

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.d > 1.0


def orbit_decay_check(orbit: BoundaryOrbit, alpha: float) -> OrbitDecayReport:
    """Check ``b_k >= c0 k**(-1/alpha)`` with ``c0 = 1/(4 (1+alpha)**(1/alpha))``.

    ``c0`` alone gives ``d = 1`` exactly; the strict inequality ``d > 1``
    needs a slightly larger constant ``c = c0 + delta``. Any ``c`` below
    both the empirical ``min_k b_k k**(1/alpha)`` and the asymptotic
    constant ``(alpha 4**alpha)**(-1/alpha)`` works; the midpoint between
    ``c0`` and that ceiling is reported.
    """
    a = float(alpha)
    b = np.asarray(orbit.b)
    k = np.arange(1, len(b))
    c0 = 1.0 / (4.0 * (1.0 + a) ** (1.0 / a))
    scaled = b[1:] * k ** (1.0 / a)
    c_emp = float(scaled.min())
    ceiling = min(c_emp, (a * 4.0 ** a) ** (-1.0 / a))
    delta = 0.5 * (ceiling - c0)
    c = c0 + delta
    d = c ** a * 4.0 ** a * (1.0 + a)
    viol = int(np.count_nonzero(scaled < c0))
    return OrbitDecayReport(a, c0, c, delta, d, c_emp, viol, float((scaled / c0).min()))


@dataclass(frozen=True)
class ReturnDerivativeReport:
    k: int
    n_max: int
    d: float
    eta: float
    violations: int
    min_slack: float
    reciprocal_sum: float
    sum_over_k: float
    samples: int


def return_derivative_check(im: InducedModel, k: int, n_max: int, samples: int = 33,
                         d: float | None = None) -> ReturnDerivativeReport:
    """Lower bound on derivatives of the return branches over ``W_k``.

    For ``x`` in ``W_k`` and ``k < n <= n_max`` the derivative of ``T^{n-k}``
    at ``T_i^{-1} T1^{-(n-k-1)} x`` is ``s_i`` times the product of ``DT1``
    along the backward orbit; it is compared with
    ``(n/(k+2))**eta_k``, ``eta_k = d (k+2)/(k+2+d)``. The slack is the
    ratio of the smaller actual derivative (``i = 3``) to the bound.
    ``reciprocal_sum`` is the largest, over sampled ``x``, of the sum of
    reciprocal derivatives over both sides and all ``n``.
    """
    k = int(k)
    if k < 1:
        raise ValueError("k must be at least 1")
    p = im.params
    if d is None:
        d = orbit_decay_check(im.orbit, p.alpha).d
    eta = d * (k + 2) / (k + 2 + d)
    N_ext = max(k, n_max)
    if k > im.N:
        raise ValueError("k exceeds the depth of the boundary orbit")
    lo, hi = im.orbit.gap(k)
    t = (np.arange(samples) + 0.5) / samples
    y = lo + (hi - lo) * t
    logprod = np.zeros_like(y)
    s_min = 4.0
    inv_sides = 1.0 / p.s2 + 1.0 / 4.0
    viol = 0
    min_slack = np.inf
    rsum = np.zeros_like(y)
    for n in range(k + 1, N_ext + 1):
        # n - k - 1 backward T1 steps have been taken
        bound = (n / (k + 2.0)) ** eta
        actual = s_min * np.exp(logprod)
        slack = actual / bound
        viol += int(np.count_nonzero(slack < 1.0))
        min_slack = min(min_slack, float(slack.min()))
        rsum += inv_sides * np.exp(-logprod)
        y = t1_inverse_array(p, y)
        logprod += np.log(t1_deriv(p, y))
    rs = float(rsum.max())
    return ReturnDerivativeReport(k, n_max, float(d), float(eta), viol, float(min_slack), rs, rs / k, samples)


def induced_adler_constant(im: InducedModel, n_max: int = 200, samples: int = 65) -> float:
    """``sup |D^2 That| / (D That)**2`` over the branches with ``n <= n_max``.

    For ``That = T1^{n-1} o T_i`` the ratio ``r`` obeys
    ``r_j(x) = R(z_{j-1}) + r_{j-1}(x) / DT1(z_{j-1})`` with ``R = T1''/T1'**2``
    and ``z_j`` the ``j``-th point of the orbit; the linear first step
    contributes nothing. The branches through ``T4`` are linear.
    """
    p = im.params
    n_max = min(int(n_max), im.N)
    t = (np.arange(samples) + 0.5) / samples
    best = 0.0
    for n in range(2, n_max + 1):
        ulo, uhi = im.cylinders.u_left[n]
        z = ulo + (uhi - ulo) * t
        r = np.zeros_like(z)
        for _ in range(n - 1):
            d1 = t1_deriv(p, z)
            r = t1_second(p, z) / d1 ** 2 + r / d1
            z = t1_eval(p, z)
        best = max(best, float(np.abs(r).max()))
    return best


def write_cylinders_csv(im: InducedModel, path, n_max: int | None = None) -> None:
    """CSV with columns n, piece_side, lo, hi, image_lo, image_hi, length."""
    ll, lr = im.cylinders.lengths()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "piece_side", "lo", "hi", "image_lo", "image_hi", "length"])
        for n, side, lo, hi in im.pieces(n_max):
            ilo, ihi = im.branch_image(n, side)
            length = ll[n - 1] if side == "left" else min(lr[n - 1], hi - lo)
            w.writerow([n, side, repr(lo), repr(hi), repr(ilo), repr(ihi), repr(float(length))])
        for br in im.map.branches[3:]:
            ilo, ihi = br.image
            w.writerow([1, br.id, repr(br.lo), repr(br.hi), repr(ilo), repr(ihi), repr(br.hi - br.lo)])


def write_orbit_csv(orbit: BoundaryOrbit, path) -> None:
    """CSV with columns n, b_n, b_n*n**(1/alpha)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "b_n", "b_n_scaled"])
        for n, bn in enumerate(orbit.b):
            w.writerow([n, repr(float(bn)), repr(float(bn * n ** (1.0 / orbit.alpha)))])
