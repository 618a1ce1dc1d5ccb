"""The perturbed intermittent map on [0, 1] and its monotone branches.

The map has a neutral fixed point at 0 (branch ``T1``), two linear
branches on [1/4, 1/2] and a canonical right part made of three linear
branches on [1/2, 1] with a single spike of depth ``epsilon`` at 13/16.
At ``epsilon = 0`` both halves [0, 1/2] and [1/2, 1] are invariant.

Linear branches are written in factored form around their zeros
(``T2 = s2 * (3/8 - x)``, ``T3 = 4 * (x - 3/8)``) so that points close to
3/8, where the cylinders of the induced map accumulate, keep full
relative precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AmbiguityError, DomainError, NumericalError, ParameterError, RangeError

S_R = 13.0 / 16.0
B_MID = 0.5
PARTITION = (0.0, 0.25, 0.375, 0.5, 0.625, 0.8125, 1.0)
BRANCH_IDS = ("T1", "T2", "T3", "T4", "T5", "T6")

NEWTON_TOL = 1e-14
NEWTON_MAXITER = 100


@dataclass(frozen=True)
class MapParams:
    """Exponent ``alpha`` of the neutral fixed point and spike depth ``epsilon``."""

    alpha: float
    epsilon: float = 0.0

    def __post_init__(self):
        a, e = float(self.alpha), float(self.epsilon)
        if not (0.0 < a < 1.0) or not math.isfinite(a):
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not (0.0 <= e <= 0.125) or not math.isfinite(e):
            raise ParameterError(f"epsilon must lie in [0, 1/8], got {self.epsilon!r}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "epsilon", e)

    @property
    def t1_coef(self) -> float:
        """Coefficient ``4**alpha * (1 + 4 eps)`` of ``x**(1+alpha)`` in ``T1``."""
        return 4.0 ** self.alpha * (1.0 + 4.0 * self.epsilon)

    @property
    def s2(self) -> float:
        """Absolute slope of ``T2``."""
        return 4.0 * (1.0 + 2.0 * self.epsilon)

    @property
    def s_spike(self) -> float:
        """Absolute slope of the two spike branches ``T5`` and ``T6``."""
        return 8.0 / 3.0 * (1.0 + 2.0 * self.epsilon)


def _pow1a(x, alpha):
    """``x**(1+alpha)`` as ``x*exp(alpha*log x)`` with 0 mapped to 0."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    xp = x[pos]
    out[pos] = xp * np.exp(alpha * np.log(xp))
    return out


def _powa(x, alpha):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(alpha * np.log(x[pos]))
    return out


def t1_eval(params: MapParams, x):
    x = np.asarray(x, dtype=float)
    return x + params.t1_coef * _pow1a(x, params.alpha)


def t1_deriv(params: MapParams, x):
    x = np.asarray(x, dtype=float)
    return 1.0 + (1.0 + params.alpha) * params.t1_coef * _powa(x, params.alpha)


def t1_second(params: MapParams, x):
    """Second derivative of ``T1``; infinite at 0 since ``alpha < 1``."""
    x = np.asarray(x, dtype=float)
    a = params.alpha
    with np.errstate(divide="ignore"):
        return np.where(
            x > 0,
            a * (1.0 + a) * params.t1_coef * np.exp((a - 1.0) * np.log(np.maximum(x, 1e-300))),
            np.inf,
        )


def t1_inverse(params: MapParams, y: float) -> float:
    """Invert ``T1`` at a scalar ``y`` in [0, 1/2 + eps].

    Safeguarded Newton iteration: a Newton step that leaves the current
    bracket is replaced by bisection. The bracket starts at
    ``[0, min(y, 1/4)]``.
    """
    y = float(y)
    top = 0.5 + params.epsilon
    if not (0.0 <= y <= top * (1.0 + 1e-15)):
        raise RangeError(f"T1 inverse needs y in [0, {top}], got {y!r}")
    if y == 0.0:
        return 0.0
    if y >= top:
        return 0.25
    A, a = params.t1_coef, params.alpha
    lo, hi = 0.0, min(y, 0.25)
    x = _t1_inverse_guess(np.array([y]), A, a)[0]
    x = min(max(x, lo), hi)
    for _ in range(NEWTON_MAXITER):
        xa = math.exp(a * math.log(x)) if x > 0 else 0.0
        f = x + A * x * xa - y
        if abs(f) <= NEWTON_TOL * max(y, 1e-300) or f == 0.0:
            return x
        if f > 0:
            hi = x
        else:
            lo = x
        fp = 1.0 + (1.0 + a) * A * xa
        xn = x - f / fp
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi)
        if xn == x or hi - lo <= 2.0 * np.spacing(hi):
            return xn
        x = xn
    raise NumericalError(f"T1 inverse did not converge at y={y!r}")


def _t1_inverse_guess(y, A, a):
    # second-order series inverse; never below the root
    g = np.maximum(y - A * _pow1a(y, a), 0.0)
    return np.minimum(y - A * _pow1a(g, a), 0.25)


def t1_inverse_array(params: MapParams, y) -> np.ndarray:
    """Vectorised inverse of ``T1``.

    Newton iterates started to the right of the root decrease
    monotonically to it because ``T1`` is convex and increasing; the
    starting point is a second-order series inverse which is always to
    the right of the root.
    """
    y = np.asarray(y, dtype=float)
    if y.size and (y.min() < 0.0 or y.max() > (0.5 + params.epsilon) * (1.0 + 1e-15)):
        raise RangeError("T1 inverse: values outside [0, 1/2 + eps]")
    A, a = params.t1_coef, params.alpha
    x = _t1_inverse_guess(y, A, a)
    pos = y > 0
    for _ in range(NEWTON_MAXITER):
        xa = _powa(x, a)
        f = x + A * x * xa - y
        step = np.where(pos, f / (1.0 + (1.0 + a) * A * xa), 0.0)
        x = x - step
        if not np.any(np.abs(step) > 4e-16 * x):
            break
    else:
        raise NumericalError("vectorised T1 inverse did not converge")
    return np.where(pos, x, 0.0)


@dataclass(frozen=True)
class Branch:
    """A strictly monotone branch of the map on a closed interval."""

    id: str
    lo: float
    hi: float
    increasing: bool
    eval: Callable = field(repr=False)
    deriv: Callable = field(repr=False)
    inverse: Callable = field(repr=False)

    @property
    def domain(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    @property
    def image(self) -> tuple[float, float]:
        a, b = float(self.eval(self.lo)), float(self.eval(self.hi))
        return (a, b) if self.increasing else (b, a)

    def slope_range(self, samples: int = 257) -> tuple[float, float]:
        xs = np.linspace(self.lo, self.hi, samples)
        d = np.abs(self.deriv(xs))
        return float(d.min()), float(d.max())


class MapModel:
    """The six-branch map for fixed parameters. Immutable."""

    partition_points = PARTITION
    s_r = S_R
    b = B_MID

    def __init__(self, params: MapParams):
        self.params = params
        self.branches = tuple(_make_branches(params))
        self._by_id = {br.id: br for br in self.branches}
        self._pp = np.array(PARTITION)

    def __repr__(self):
        return f"MapModel(alpha={self.params.alpha}, epsilon={self.params.epsilon})"

    def branch(self, branch_id: str) -> Branch:
        return self._by_id[branch_id]

    def branch_index(self, x):
        """Index of the active branch: right branch at partition points, left one at 1."""
        idx = np.searchsorted(self._pp, x, side="right") - 1
        return np.clip(idx, 0, 5)

    def eval(self, x):
        """Evaluate the map at a scalar or array ``x`` in [0, 1]."""
        xa = np.asarray(x, dtype=float)
        if xa.size and (np.isnan(xa).any() or xa.min() < 0.0 or xa.max() > 1.0):
            raise DomainError("map evaluated outside [0, 1]")
        out = _piecewise(self, xa, "eval")
        return float(out) if np.ndim(x) == 0 else out

    def deriv(self, x, side: str | None = None):
        """Signed derivative of the active branch.

        At an interior partition point the derivative is one-sided and
        ``side`` (``"left"`` or ``"right"``) must be given.
        """
        xa = np.asarray(x, dtype=float)
        if xa.size and (xa.min() < 0.0 or xa.max() > 1.0):
            raise DomainError("derivative requested outside [0, 1]")
        interior = np.isin(xa, self._pp[1:-1])
        if side is None and np.any(interior):
            raise AmbiguityError("derivative at a partition point needs side='left' or 'right'")
        if side == "left":
            idx = np.clip(np.searchsorted(self._pp, xa, side="left") - 1, 0, 5)
        elif side in (None, "right"):
            idx = self.branch_index(xa)
        else:
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
        out = np.empty_like(xa)
        for k, br in enumerate(self.branches):
            sel = idx == k
            if np.any(sel):
                out[sel] = br.deriv(xa[sel])
        return float(out) if np.ndim(x) == 0 else out

    def branch_inverse(self, branch_id: str, y):
        br = self.branch(branch_id)
        lo, hi = br.image
        ya = np.asarray(y, dtype=float)
        tol = 1e-15
        if ya.size and (ya.min() < lo - tol or ya.max() > hi + tol):
            raise RangeError(f"{branch_id} inverse: value outside image [{lo}, {hi}]")
        out = br.inverse(np.clip(ya, lo, hi))
        return float(out) if np.ndim(y) == 0 else out

    def iterate(self, x: float, n: int) -> list[float]:
        """Orbit ``[x, T(x), ..., T^n(x)]``."""
        orbit = [float(x)]
        for _ in range(int(n)):
            orbit.append(self.eval(orbit[-1]))
        return orbit

    def branch_table(self) -> list[dict]:
        rows = []
        for br in self.branches:
            ilo, ihi = br.image
            smin, smax = br.slope_range()
            rows.append(dict(branch_id=br.id, domain_lo=br.lo, domain_hi=br.hi,
                             image_lo=ilo, image_hi=ihi, slope_min=smin, slope_max=smax))
        return rows


def _piecewise(model, x, attr):
    idx = model.branch_index(x)
    out = np.empty_like(x)
    for k, br in enumerate(model.branches):
        sel = idx == k
        if np.any(sel):
            out[sel] = getattr(br, attr)(x[sel])
    return out


def _make_branches(p: MapParams):
    eps, s2, ss = p.epsilon, p.s2, p.s_spike
    q = 0.375

    def const(c):
        return lambda x: np.full(np.shape(x), c, dtype=float)

    yield Branch("T1", 0.0, 0.25, True,
                 lambda x: t1_eval(p, x), lambda x: t1_deriv(p, x),
                 lambda y: t1_inverse_array(p, y))
    yield Branch("T2", 0.25, q, False,
                 lambda x: s2 * (q - np.asarray(x, dtype=float)), const(-s2),
                 lambda y: q - np.asarray(y, dtype=float) / s2)
    yield Branch("T3", q, 0.5, True,
                 lambda x: 4.0 * (np.asarray(x, dtype=float) - q), const(4.0),
                 lambda y: q + np.asarray(y, dtype=float) / 4.0)
    yield Branch("T4", 0.5, 0.625, True,
                 lambda x: 4.0 * (np.asarray(x, dtype=float) - q), const(4.0),
                 lambda y: q + np.asarray(y, dtype=float) / 4.0)
    yield Branch("T5", 0.625, S_R, False,
                 lambda x: 1.0 - ss * (np.asarray(x, dtype=float) - 0.625), const(-ss),
                 lambda y: 0.625 + (1.0 - np.asarray(y, dtype=float)) / ss)
    yield Branch("T6", S_R, 1.0, True,
                 lambda x: (0.5 - eps) + ss * (np.asarray(x, dtype=float) - S_R), const(ss),
                 lambda y: S_R + (np.asarray(y, dtype=float) - (0.5 - eps)) / ss)


def build_map(params: MapParams) -> MapModel:
    """Construct the six-branch model for ``params``."""
    if not isinstance(params, MapParams):
        raise ParameterError("build_map expects a MapParams instance")
    return MapModel(params)


def adler_constant(model: MapModel, x_min: float = 1e-6) -> dict[str, float]:
    """Per-branch ``sup |T''| / (T')**2``.

    Linear branches contribute 0. On ``T1`` the ratio behaves like
    ``x**(alpha-1)`` near the neutral fixed point and is unbounded, so
    the supremum is taken over ``[x_min, 1/4]`` (where it sits at
    ``x_min``). The quantity that must stay bounded is the one of the
    induced map, see :func:`metastab.inducing.induced_adler_constant`.
    """
    p = model.params
    out = {br.id: 0.0 for br in model.branches}
    xs = np.geomspace(x_min, 0.25, 4097)
    out["T1"] = float(np.max(np.abs(t1_second(p, xs)) / t1_deriv(p, xs) ** 2))
    return out
