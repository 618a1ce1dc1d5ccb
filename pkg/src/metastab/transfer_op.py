"""Ulam discretisation of transfer operators and step-density utilities.

Matrix entries are exact interval geometry: for a monotone branch the
preimages of the grid nodes inside its image, together with the grid
nodes inside its domain, cut the domain into segments that each map into
a single image cell. No sampling is involved.

Densities are handled as mass vectors internally (``value * width``), so
non-uniform grids need no special treatment and ``v P`` is the push-forward.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.sparse.linalg import spsolve

from .errors import ConvergenceError, GridError, NumericalError
from .inducing import Q38, InducedModel
from .map_core import t1_inverse_array

ROW_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Partition of ``[edges[0], edges[-1]]`` into ``m = len(edges) - 1`` cells."""

    edges: np.ndarray = field(repr=False)

    def __post_init__(self):
        e = np.array(self.edges, dtype=float)
        if e.ndim != 1 or e.size < 3:
            raise GridError("a grid needs at least two cells")
        if not np.all(np.diff(e) > 0):
            raise GridError("grid edges must be strictly increasing")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @classmethod
    def uniform(cls, lo: float, hi: float, m: int) -> "Grid":
        return cls(np.linspace(lo, hi, int(m) + 1))

    @property
    def m(self) -> int:
        return self.edges.size - 1

    @property
    def support(self) -> tuple[float, float]:
        return float(self.edges[0]), float(self.edges[-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def cell_of(self, x):
        """Index of the cell containing ``x``; a shared edge belongs to the cell on its right."""
        idx = np.searchsorted(self.edges, x, side="right") - 1
        return np.clip(idx, 0, self.m - 1)

    def __repr__(self):
        lo, hi = self.support
        return f"Grid(m={self.m}, support=[{lo}, {hi}])"


def delta_grid(m: int) -> Grid:
    """Grid on [1/4, 1] with ``m`` equal cells on [1/4, 1/2] and ``m`` on [1/2, 1].

    Keeps 3/8 and 1/2 as nodes whenever ``m`` is even.
    """
    left = np.linspace(0.25, 0.5, int(m) + 1)
    right = np.linspace(0.5, 1.0, int(m) + 1)
    return Grid(np.concatenate([left, right[1:]]))


@dataclass(frozen=True)
class StepDensity:
    """Piecewise-constant function on a grid."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.m,):
            raise GridError("one value per cell is required")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("density values must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_mass(cls, grid: Grid, mass) -> "StepDensity":
        return cls(grid, np.maximum(np.asarray(mass, dtype=float), 0.0) / grid.widths)

    @property
    def mass(self) -> np.ndarray:
        return self.values * self.grid.widths

    def integral(self) -> float:
        return float(self.mass.sum())

    def __call__(self, x):
        """Cell lookup; zero outside the support."""
        x = np.asarray(x, dtype=float)
        lo, hi = self.grid.support
        out = self.values[self.grid.cell_of(x)]
        return np.where((x >= lo) & (x <= hi), out, 0.0)

    def left_limit(self, x):
        """Value on the cell to the left of ``x`` (differs from ``self(x)`` only at edges)."""
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.searchsorted(self.grid.edges, x, side="left") - 1, 0, self.grid.m - 1)
        return self.values[idx]

    def integrate(self, lo, hi):
        """``int_lo^hi f`` for arrays of bounds; bounds are clipped to the support."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        e = self.grid.edges
        lo_c = np.clip(lo, e[0], e[-1])
        hi_c = np.clip(np.maximum(hi, lo), e[0], e[-1])
        il = self.grid.cell_of(lo_c)
        ih = self.grid.cell_of(hi_c)
        ih = np.where((hi_c == e[ih]) & (ih > il), ih - 1, ih)
        cum = np.concatenate([[0.0], np.cumsum(self.mass)])
        v = self.values
        same = il == ih
        out = np.where(
            same,
            v[il] * (hi_c - lo_c),
            v[il] * (e[il + 1] - lo_c) + (cum[ih] - cum[il + 1]) + v[ih] * (hi_c - e[ih]),
        )
        return out

    def scaled(self, c: float) -> "StepDensity":
        return StepDensity(self.grid, self.values * c)

    def normalized(self) -> "StepDensity":
        return self.scaled(1.0 / self.integral())


def _common_values(f: StepDensity, g: StepDensity):
    ef, eg = f.grid.edges, g.grid.edges
    if abs(ef[0] - eg[0]) > 1e-15 or abs(ef[-1] - eg[-1]) > 1e-15:
        raise GridError("densities live on different supports")
    if ef.size == eg.size and np.array_equal(ef, eg):
        return f.grid.widths, f.values, g.values
    e = np.union1d(ef, eg)
    mid = 0.5 * (e[:-1] + e[1:])
    return np.diff(e), f.values[f.grid.cell_of(mid)], g.values[g.grid.cell_of(mid)]


def l1_distance(f: StepDensity, g: StepDensity) -> float:
    """``int |f - g|`` on the common refinement of the two grids."""
    w, a, b = _common_values(f, g)
    return float(np.sum(np.abs(a - b) * w))


def total_variation(f: StepDensity) -> float:
    """Sum of absolute jumps between adjacent cells (the support boundary is not a jump)."""
    return float(np.abs(np.diff(f.values)).sum())


def bv_norm(f: StepDensity) -> float:
    return total_variation(f) + float(np.sum(np.abs(f.values) * f.grid.widths))


@dataclass(frozen=True)
class UlamOperator:
    """Row-(sub)stochastic matrix ``P[i, j] = |I_i & T^{-1} I_j| / |I_i|``.

    ``leak`` is the fraction of each cell mapped outside the support.
    For induced operators ``unresolved`` holds the fraction of each cell
    lying in the truncated neighbourhood of 3/8; that mass has been moved
    into ``P`` (see :func:`build_induced_ulam`) and ``redistributed`` is its
    total as a measure. ``row_defect`` is the largest deviation of
    ``row sum + leak`` from 1 found before any correction.
    """

    grid: Grid
    P: sp.csr_matrix = field(repr=False)
    leak: np.ndarray = field(repr=False)
    unresolved: np.ndarray = field(repr=False, default=None)
    redistributed: float = 0.0
    row_defect: float = 0.0

    @property
    def m(self) -> int:
        return self.grid.m

    @property
    def leak_total(self) -> float:
        return float(np.sum(self.leak * self.grid.widths))

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.P.sum(axis=1)).ravel()

    def __repr__(self):
        return f"UlamOperator(m={self.m}, nnz={self.P.nnz}, leak_total={self.leak_total:.3g})"


class _Accumulator:
    """COO triplets plus dense rows for cells receiving many thin pieces."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.dense: dict[tuple[int, int], np.ndarray] = {}
        self.dense_cols: dict[int, np.ndarray] = {}

    def add(self, rows, cols, lengths):
        self.rows.append(np.asarray(rows, dtype=np.int64))
        self.cols.append(np.asarray(cols, dtype=np.int64))
        self.vals.append(np.asarray(lengths, dtype=float))

    def add_dense(self, key: int, row: int, seg_lengths):
        acc = self.dense.get((key, row))
        if acc is None:
            self.dense[(key, row)] = np.array(seg_lengths, dtype=float)
        else:
            acc += seg_lengths

    def matrix(self):
        g = self.grid
        for (key, row), acc in sorted(self.dense.items()):
            cols = self.dense_cols[key]
            nz = acc != 0.0
            self.add(np.full(int(nz.sum()), row), cols[nz], acc[nz])
        if self.rows:
            r = np.concatenate(self.rows)
            c = np.concatenate(self.cols)
            v = np.concatenate(self.vals) / g.widths[r]
        else:
            r = c = np.zeros(0, dtype=np.int64)
            v = np.zeros(0)
        P = sp.coo_matrix((v, (r, c)), shape=(g.m, g.m)).tocsr()
        P.sum_duplicates()
        return P


def _branch_segments(branch, grid: Grid, acc: _Accumulator, leak: np.ndarray):
    e = grid.edges
    lo = max(branch.lo, e[0])
    hi = min(branch.hi, e[-1])
    if hi <= lo:
        return
    ilo, ihi = branch.image
    ynodes = e[(e > ilo) & (e < ihi)]
    xs = np.asarray(branch.inverse(ynodes), dtype=float) if ynodes.size else np.zeros(0)
    xs = xs[(xs > lo) & (xs < hi)]
    dn = e[(e > lo) & (e < hi)]
    pts = np.unique(np.concatenate([[lo, hi], xs, dn]))
    length = np.diff(pts)
    keep = length > 0
    pts_mid = 0.5 * (pts[:-1] + pts[1:])[keep]
    length = length[keep]
    dom = grid.cell_of(pts_mid)
    y = np.asarray(branch.eval(pts_mid), dtype=float)
    inside = (y >= e[0]) & (y <= e[-1])
    acc.add(dom[inside], grid.cell_of(y[inside]), length[inside])
    if np.any(~inside):
        np.add.at(leak, dom[~inside], length[~inside])


def build_ulam(branches: Iterable, grid: Grid) -> UlamOperator:
    """Ulam matrix of a piecewise monotone map given by its branches.

    Each branch needs ``lo``, ``hi``, ``image`` and vectorised ``eval`` and
    ``inverse``. Mass sent outside the support is recorded in ``leak``.
    """
    acc = _Accumulator(grid)
    leak_len = np.zeros(grid.m)
    for br in branches:
        _branch_segments(br, grid, acc, leak_len)
    P = acc.matrix()
    leak = leak_len / grid.widths
    defect = float(np.abs(np.asarray(P.sum(axis=1)).ravel() + leak - 1.0).max())
    return UlamOperator(grid, P, leak, np.zeros(grid.m), 0.0, defect)


@dataclass(frozen=True)
class _Side:
    s: float
    sign: float  # x = 3/8 + sign * u / s
    u_nodes: np.ndarray


def build_induced_ulam(im: InducedModel, grid: Grid) -> UlamOperator:
    """Ulam matrix of the induced map on a grid over Delta.

    All return branches with ``n <= N`` are included. They share one
    backward orbit: the ``u``-preimages of the image nodes at level ``n``
    are ``T1^{-(n-1)}`` of the nodes, for both the ``T2`` and ``T3`` sides.
    A level whose piece sits inside a single cell is added as a dense row
    update. Mass of the unresolved neighbourhood of 3/8 is spread over the
    image cells with the distribution of the deepest resolved level.
    """
    p = im.params
    e = grid.edges
    lo_s, hi_s = grid.support
    if abs(lo_s - 0.25) > 1e-15 or abs(hi_s - 1.0) > 1e-15:
        raise GridError("the induced operator needs a grid on [1/4, 1]")
    eps, s2 = p.epsilon, p.s2
    b = np.asarray(im.orbit.b)
    N = im.N
    top = 0.5 + eps

    acc = _Accumulator(grid)
    Y = np.concatenate([[0.25], e[(e > 0.25) & (e < top)], [top]])
    Ycols = grid.cell_of(0.5 * (Y[:-1] + Y[1:]))
    acc.dense_cols[0] = Ycols
    Y3 = np.concatenate([[0.25], e[(e > 0.25) & (e < 0.5)], [0.5]])
    Y3cols = grid.cell_of(0.5 * (Y3[:-1] + Y3[1:]))

    left = _Side(s2, -1.0, np.sort(s2 * (Q38 - e[(e > 0.25) & (e < Q38)])))
    right = _Side(4.0, 1.0, np.sort(4.0 * (e[(e > Q38) & (e < 0.5)] - Q38)))

    def level(U, cols, side: _Side, dense_key):
        nodes = side.u_nodes
        i0 = np.searchsorted(nodes, U[0], side="right")
        i1 = np.searchsorted(nodes, U[-1], side="left")
        if i0 >= i1 and dense_key is not None:
            row = int(grid.cell_of(Q38 + side.sign * 0.5 * (U[0] + U[-1]) / side.s))
            acc.add_dense(dense_key, row, np.diff(U) / side.s)
            return
        pts = np.concatenate([U, nodes[i0:i1]])
        pts.sort(kind="mergesort")
        mid = 0.5 * (pts[:-1] + pts[1:])
        length = np.diff(pts) / side.s
        seg = np.clip(np.searchsorted(U, mid, side="right") - 1, 0, U.size - 2)
        rows = grid.cell_of(Q38 + side.sign * mid / side.s)
        keep = length > 0
        acc.add(rows[keep], cols[seg[keep]], length[keep])

    # n = 1: T2 piece onto (1/4, top), T3 piece onto (1/4, 1/2)
    level(Y.copy(), Ycols, left, None)
    level(Y3.copy(), Y3cols, right, None)
    U = Y.copy()
    for n in range(2, N + 1):
        U = t1_inverse_array(p, U)
        U[0], U[-1] = b[n - 1], b[n - 2]
        level(U, Ycols, left, 0)
        level(U, Ycols, right, 0)

    # unresolved neighbourhood of 3/8: u < b_{N-1} on both sides
    unresolved_len = np.zeros(grid.m)
    bN1 = b[N - 1]
    for lo, hi in ((Q38 - bN1 / s2, Q38), (Q38, Q38 + bN1 / 4.0)):
        i, j = grid.cell_of(lo), grid.cell_of(np.nextafter(hi, 0.0))
        for c in range(int(i), int(j) + 1):
            unresolved_len[c] += max(0.0, min(hi, e[c + 1]) - max(lo, e[c]))
    dist = np.diff(U)
    dist = dist / dist.sum()
    for c in np.flatnonzero(unresolved_len):
        acc.add_dense(0, int(c), unresolved_len[c] * dist)

    for br in im.map.branches[3:]:
        _branch_segments(br, grid, acc, np.zeros(grid.m))
    P = acc.matrix()
    rs = np.asarray(P.sum(axis=1)).ravel()
    defect = float(np.abs(rs - 1.0).max())
    if defect > 1e-9:
        raise NumericalError(f"induced Ulam rows deviate from 1 by {defect:.3g}")
    if defect > ROW_TOL:
        P = sp.diags(1.0 / rs) @ P
        P = P.tocsr()
    unresolved = unresolved_len / grid.widths
    return UlamOperator(grid, P, np.zeros(grid.m), unresolved,
                        float(unresolved_len.sum()), defect)


def stationary_density(op: UlamOperator, tol: float = 1e-12, max_iter: int = 200_000,
                       start: StepDensity | np.ndarray | None = None,
                       method: str = "power") -> StepDensity:
    """Left fixed vector of ``P`` as a density with integral 1.

    ``method="power"`` iterates ``v <- v P`` (renormalised each step) from
    ``start`` until ``||v P - v||_1 <= tol``; the iteration stays inside
    any closed block containing the support of ``start``. ``method="direct"``
    solves the linear system with one equation replaced by the
    normalisation, which is preferable for slowly mixing matrices.
    """
    g = op.grid
    if op.leak_total > 1e-9:
        raise NumericalError(f"operator leaks {op.leak_total:.3g} of its mass")
    PT = op.P.T.tocsr()
    if method == "direct":
        A = (PT - sp.identity(g.m, format="csr")).tolil()
        A[g.m - 1, :] = np.ones(g.m)
        rhs = np.zeros(g.m)
        rhs[-1] = 1.0
        v = spsolve(A.tocsc(), rhs)
        v = np.maximum(v, 0.0)
        v /= v.sum()
        return StepDensity.from_mass(g, v)
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    if start is None:
        v = g.widths / (g.support[1] - g.support[0])
    elif isinstance(start, StepDensity):
        v = start.mass.copy()
    else:
        v = np.asarray(start, dtype=float).copy()
    v = v / v.sum()
    res = np.inf
    for _ in range(int(max_iter)):
        w = PT @ v
        w /= w.sum()
        res = float(np.abs(w - v).sum())
        v = w
        if res <= tol:
            return StepDensity.from_mass(g, v)
    raise ConvergenceError(f"power iteration stopped at residual {res:.3g}", residual=res)


def apply_pf(op: UlamOperator, f: StepDensity) -> StepDensity:
    """One step of the discrete transfer operator."""
    return StepDensity.from_mass(op.grid, op.P.T @ f.mass)


def block_start(grid: Grid, lo: float, hi: float) -> np.ndarray:
    """Uniform mass vector on the cells inside ``[lo, hi]``."""
    mid = grid.midpoints
    v = np.where((mid > lo) & (mid < hi), grid.widths, 0.0)
    return v / v.sum()


@dataclass(frozen=True)
class LYFit:
    beta: float
    B: float
    max_violation: float
    n_tests: int


def ly_test_family(grid: Grid, n_positions: int = 24,
                   widths: Sequence[float] = (1 / 16, 1 / 64, 1 / 256, 1 / 1024)) -> list[StepDensity]:
    """Normalised indicators of short intervals spread over the support.

    Interval endpoints are snapped to grid nodes.
    """
    lo, hi = grid.support
    e = grid.edges
    fam = []
    for w in widths:
        for t in (np.arange(n_positions) + 0.5) / n_positions:
            c = lo + (hi - lo) * t
            i = int(np.searchsorted(e, c - w / 2))
            j = int(np.searchsorted(e, c + w / 2))
            j = max(j, i + 1)
            vals = np.zeros(grid.m)
            vals[i:j] = 1.0
            fam.append(StepDensity(grid, vals).normalized())
    return fam


def lasota_yorke_fit(op: UlamOperator, test_family: Sequence[StepDensity]) -> LYFit:
    """Tightest envelope ``var(Pf) <= beta var(f) + B ||f||_1`` over the family.

    A linear program minimises the mean of the bound over the family
    subject to the bound holding for every member, so ``max_violation``
    is zero up to solver tolerance.
    """
    X = np.array([[total_variation(f), f.integral()] for f in test_family])
    y = np.array([total_variation(apply_pf(op, f)) for f in test_family])
    res = linprog(X.mean(axis=0), A_ub=-X, b_ub=-y, bounds=[(0, None), (0, None)])
    if not res.success:
        raise NumericalError(f"Lasota-Yorke envelope fit failed: {res.message}")
    coef = res.x
    viol = float(np.max(y - X @ coef))
    return LYFit(float(coef[0]), float(coef[1]), viol, len(test_family))


def write_coo(op: UlamOperator, path) -> None:
    """Coordinate list with a header line ``m support_lo support_hi leak_total``."""
    coo = op.P.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lo, hi = op.grid.support
    with open(path, "w") as fh:
        fh.write(f"{op.m} {lo!r} {hi!r} {op.leak_total!r}\n")
        for k in order:
            fh.write(f"{coo.row[k]} {coo.col[k]} {coo.data[k]!r}\n")


def write_density_csv(f: StepDensity, path) -> None:
    e = f.grid.edges
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_lo", "cell_hi", "value"])
        for a, b, v in zip(e[:-1], e[1:], f.values):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(v))])
