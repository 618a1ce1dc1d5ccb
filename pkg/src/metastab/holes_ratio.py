"""Holes between the two halves, their measures and the mixture weights.

For ``epsilon > 0`` mass crosses 1/2 through two holes. On the full map
the left hole straddles 1/4 (both ``T1`` and ``T2`` exceed 1/2 near 1/4)
and the right hole surrounds the bottom of the spike at 13/16.

For the induced map, with ``v_n = T1^{-(n-1)}(1/2)`` the point of
``W_{n-1}`` that returns exactly onto 1/2, the left hole consists of

* ``(a_{n-1}, 3/8 - v_n/s2)`` on the ``T2`` side of every cylinder ``Z_n``,
* ``(3/8 + v_n/4, a'_{n-1})`` on the ``T3`` side for ``n >= 2``.

The ``T3`` pieces carry roughly as much mass as the ``T2`` pieces. A
variant counting only the ``T2`` pieces is also provided.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import AmbiguityError, TruncationError
from .inducing import Q38, InducedModel
from .map_core import S_R, MapModel, t1_deriv, t1_inverse
from .pullback import PullbackDensity, mixture_kac
from .transfer_op import StepDensity

LHR_TAIL_MAX = 5e-3


@dataclass(frozen=True)
class HoleSet:
    """Labelled intervals forming one hole.

    ``tags`` name each piece: the branch for the full system, and
    ``"Z{n}-T2"``/``"Z{n}-T3"``/``"T5"``/``"T6"`` for the induced one.
    ``tail_bound`` bounds the Lebesgue measure of pieces beyond the last
    resolved cylinder.
    """

    side: str
    system: str
    epsilon: float
    pieces: np.ndarray = field(repr=False)
    tags: tuple = field(repr=False)
    tail_bound: float = 0.0

    def __len__(self):
        return len(self.pieces)

    @property
    def lebesgue(self) -> float:
        return float(np.sum(self.pieces[:, 1] - self.pieces[:, 0])) if len(self) else 0.0


def _holeset(side, system, eps, pieces, tags, tail=0.0):
    arr = np.array(pieces, dtype=float).reshape(-1, 2)
    arr.setflags(write=False)
    return HoleSet(side, system, float(eps), arr, tuple(tags), float(tail))


def full_holes(model: MapModel) -> tuple[HoleSet, HoleSet]:
    """``H_l = [0,1/2] & T^{-1}(1/2,1]`` and ``H_r = [1/2,1] & T^{-1}[0,1/2)``."""
    p = model.params
    eps = p.epsilon
    if eps == 0.0:
        return _holeset("left", "full", 0.0, [], []), _holeset("right", "full", 0.0, [], [])
    lo = t1_inverse(p, 0.5)
    hi = Q38 - 0.5 / p.s2
    w = eps / p.s_spike
    H_l = _holeset("left", "full", eps, [(lo, 0.25), (0.25, hi)], ["T1", "T2"])
    H_r = _holeset("right", "full", eps, [(S_R - w, S_R), (S_R, S_R + w)], ["T5", "T6"])
    return H_l, H_r


def half_orbit(model: MapModel, N: int) -> np.ndarray:
    """``v[n] = T1^{-(n-1)}(1/2)`` for ``n = 1..N`` (``v[0]`` unused)."""
    p = model.params
    v = np.empty(N + 1)
    v[0] = np.nan
    v[1] = 0.5
    for n in range(2, N + 1):
        v[n] = t1_inverse(p, v[n - 1])
    return v


def induced_holes(im: InducedModel, N: int | None = None) -> tuple[HoleSet, HoleSet]:
    """Induced holes built from the preimages of 1/2 under every return branch with ``n <= N``."""
    p = im.params
    eps = p.epsilon
    if eps == 0.0:
        return (_holeset("left", "induced", 0.0, [], []),
                _holeset("right", "induced", 0.0, [], []))
    N = im.N if N is None else min(int(N), im.N)
    v = half_orbit(im.map, N)
    pieces, tags = [], []
    cl, cr = im.cylinders.left, im.cylinders.right
    for n in range(1, N + 1):
        pieces.append((cl[n, 0], Q38 - v[n] / p.s2))
        tags.append(f"Z{n}-T2")
        if n >= 2:
            pieces.append((Q38 + v[n] / 4.0, cr[n, 1]))
            tags.append(f"Z{n}-T3")
    # the cylinders beyond N lie in the residual region; the holes there are smaller still
    tail = im.cylinders.residual_length
    w = eps / p.s_spike
    H_l = _holeset("left", "induced", eps, pieces, tags, tail)
    H_r = _holeset("right", "induced", eps, [(S_R - w, S_R), (S_R, S_R + w)], ["T5", "T6"])
    return H_l, H_r


def t2_only(holes: HoleSet) -> HoleSet:
    """The induced left hole restricted to its ``T2``-side pieces."""
    keep = [i for i, t in enumerate(holes.tags) if t.endswith("T2")]
    return _holeset(holes.side, holes.system, holes.epsilon, holes.pieces[keep],
                    [holes.tags[i] for i in keep], holes.tail_bound)


def hole_measure(holes: HoleSet, density) -> float:
    """Measure of the hole under a step density or a pulled-back density.

    Pieces below 1/4 of a :class:`PullbackDensity` are integrated from its
    pointwise values.
    """
    if len(holes) == 0:
        return 0.0
    lo, hi = holes.pieces[:, 0], holes.pieces[:, 1]
    if isinstance(density, StepDensity):
        return float(np.sum(density.integrate(lo, hi)))
    if isinstance(density, PullbackDensity):
        total = 0.0
        delta = density.delta
        for a, b in holes.pieces:
            if b <= 0.25:
                total += density.integrate_points(a, b)
            elif a >= 0.25:
                total += float(delta.integrate(a, b)[0])
            else:
                total += density.integrate_points(a, 0.25) + float(delta.integrate(0.25, b)[0])
        return total
    raise TypeError(f"unsupported density type {type(density).__name__}")


@dataclass(frozen=True)
class LHRClosedForm:
    value: float
    numerator: float
    denominator: float
    denominator_t2: float
    tail: float
    terms: int

    @property
    def value_t2_only(self) -> float:
        return self.numerator / self.denominator_t2


def lhr_closed_form(hat_h_l: StepDensity, hat_h_r: StepDensity, im: InducedModel,
                    n_max: int | None = None) -> LHRClosedForm:
    """Limiting hole ratio from one-sided derivatives at the preimages of 1/2.

    Numerator: ``hat_h_r(s_r) (1/|D_l T(s_r)| + 1/|D_r T(s_r)|)``. Denominator:
    the sum over all return branches of ``hat_h_l / |D That|`` at the point
    sent onto 1/2, with the one-sided value of ``hat_h_l`` taken from the
    side where the hole opens. Terms decay like ``n**(-1-1/alpha)``; the
    remainder beyond the last term is estimated from that rate and must
    stay below 0.5% of the sum.
    """
    p = im.params
    if p.epsilon != 0.0:
        raise AmbiguityError("the closed form uses the unperturbed system")
    s = p.s_spike
    num = float(hat_h_r.left_limit(S_R)) / s + float(hat_h_r(S_R)) / s
    n_max = im.N if n_max is None else min(int(n_max), im.N)
    b = np.asarray(im.orbit.b)
    # at epsilon = 0 the point of W_{n-1} sent onto 1/2 is b_{n-2}, and its
    # T1-orbit runs b_{n-2}, ..., b_0 = 1/4
    logD = np.concatenate([[0.0], np.cumsum(np.log(t1_deriv(p, b[:max(n_max - 1, 0)])))])
    n = np.arange(1, n_max + 1)
    u = np.where(n == 1, 0.5, b[np.maximum(n - 2, 0)])
    inv = np.exp(-logD[n - 1])
    h2 = hat_h_l(Q38 - u / p.s2)
    h3 = hat_h_l.left_limit(Q38 + u / 4.0)
    t2 = h2 * inv / p.s2
    t3 = np.where(n >= 2, h3 * inv / 4.0, 0.0)
    terms = t2 + t3
    den = float(terms.sum())
    a = p.alpha
    tail = float(terms[-1] * n_max * a)
    if tail > LHR_TAIL_MAX * den:
        raise TruncationError(f"closed-form denominator tail {tail:.3g} too large", bound=tail)
    den += tail
    den2 = float(t2.sum() + t2[-1] * n_max * a)
    return LHRClosedForm(num / den, num, den, den2, tail, n_max)


@dataclass(frozen=True)
class SweepTable:
    epsilon: np.ndarray
    mu_hat_l: np.ndarray
    mu_hat_r: np.ndarray
    ratio: np.ndarray
    extrapolated: float


def extrapolate_to_zero(eps, vals) -> float:
    """Value at 0 of the least-squares line through the three smallest-``eps`` points."""
    eps = np.asarray(eps, dtype=float)
    vals = np.asarray(vals, dtype=float)
    order = np.argsort(eps)[:3]
    if order.size < 3:
        raise ValueError("extrapolation needs at least three points")
    coef = np.polyfit(eps[order], vals[order], 1)
    return float(coef[-1])


def lhr_sweep(hat_h_l: StepDensity, hat_h_r: StepDensity, models: list[InducedModel]) -> SweepTable:
    """Ratios ``mu_hat_r(H_r,eps) / mu_hat_l(H_l,eps)`` under the unperturbed densities.

    ``models`` holds the induced models for a decreasing list of positive
    ``epsilon``; the holes come from them, the densities do not change.
    """
    eps = np.array([im.params.epsilon for im in models])
    if np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("epsilon list must be positive and strictly decreasing")
    ml, mr = [], []
    for im in models:
        Hl, Hr = induced_holes(im)
        ml.append(hole_measure(Hl, hat_h_l))
        mr.append(hole_measure(Hr, hat_h_r))
    ml, mr = np.array(ml), np.array(mr)
    ratio = mr / ml
    return SweepTable(eps, ml, mr, ratio, extrapolate_to_zero(eps, ratio))


@dataclass(frozen=True)
class MixtureWeights:
    lhr: float
    lambda_hat: float
    lambda_p: float
    c_tau_l: float
    c_tau_r: float

    @property
    def c_tau_p(self) -> float:
        return mixture_kac(self.lambda_hat, self.c_tau_l, self.c_tau_r)

    @property
    def odds(self) -> float:
        """``lambda_p / (1 - lambda_p)``."""
        return self.lambda_p / (1.0 - self.lambda_p)


def mixture(lhr: float, c_tau_l: float, c_tau_r: float) -> MixtureWeights:
    """Weights with ``lambda_hat / (1 - lambda_hat) = lhr`` and the full-map weight ``lambda_p``."""
    if not lhr > 0:
        raise ValueError("lhr must be positive")
    for c in (c_tau_l, c_tau_r):
        if not (0.0 < c <= 1.0):
            raise ValueError("Kac constants must lie in (0, 1]")
    lam_hat = lhr / (1.0 + lhr)
    lam_p = lam_hat * c_tau_r / (lam_hat * c_tau_r + (1.0 - lam_hat) * c_tau_l)
    return MixtureWeights(float(lhr), float(lam_hat), float(lam_p), float(c_tau_l), float(c_tau_r))


def checked_mixture(closed: float, extrapolated: float, c_tau_l: float, c_tau_r: float,
                    max_rel: float = 0.25) -> MixtureWeights:
    """:func:`mixture` from the closed-form ratio, refused when the two estimates disagree."""
    rel = abs(closed - extrapolated) / abs(closed)
    if rel > max_rel:
        raise TruncationError(f"hole-ratio estimates disagree by {rel:.1%}", bound=rel)
    return mixture(closed, c_tau_l, c_tau_r)


def h_p_combination(weights: MixtureWeights, h_l: PullbackDensity, h_r: PullbackDensity) -> StepDensity:
    """``lambda_p h_l + (1 - lambda_p) h_r`` on the common refinement of their grids."""
    from .transfer_op import Grid

    fl, _ = h_l.as_step()
    fr, _ = h_r.as_step()
    e = np.union1d(fl.grid.edges, fr.grid.edges)
    mid = 0.5 * (e[:-1] + e[1:])
    vals = (weights.lambda_p * fl.values[fl.grid.cell_of(mid)]
            + (1.0 - weights.lambda_p) * fr.values[fr.grid.cell_of(mid)])
    return StepDensity(Grid(e), vals)


def hat_h_p(weights: MixtureWeights, hat_h_l: StepDensity, hat_h_r: StepDensity) -> StepDensity:
    """``lambda_hat hat_h_l + (1 - lambda_hat) hat_h_r`` on the shared Delta grid."""
    lam = weights.lambda_hat
    return StepDensity(hat_h_l.grid, lam * hat_h_l.values + (1.0 - lam) * hat_h_r.values)


def write_ratio_csv(rows: list[dict], path) -> None:
    cols = ["epsilon", "mu_hat_l_hole", "mu_hat_r_hole", "ratio_induced", "ratio_full", "c_tau_eps"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(r[c])) for c in cols])


def h_p_build(weights: MixtureWeights, h_l: PullbackDensity, h_r: PullbackDensity,
              im: InducedModel | None = None, method: str = "combination") -> StepDensity:
    """The limit density, either as the mixture of ``h_l`` and ``h_r`` or as a pull-back.

    ``method="pullback"`` pulls back ``hat_h_p`` with its own Kac constant
    through the unperturbed induced model ``im``; the result is normalised.
    """
    if method == "combination":
        return h_p_combination(weights, h_l, h_r)
    if method != "pullback":
        raise ValueError(f"unknown method {method!r}")
    if im is None:
        raise ValueError("the pull-back construction needs the unperturbed induced model")
    from .pullback import kac_constant, pullback

    hat = hat_h_p(weights, h_l.hat, h_r.hat)
    pb = pullback(im.map, im, hat, kac_constant(im.cylinders, hat), K=h_l.K,
                  S=h_l.w_edges.shape[1] - 1)
    return pb.renormalized().as_step()[0]
