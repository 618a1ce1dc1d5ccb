"""Experiment driver: epsilon sweeps, asymptotics, Monte Carlo and reports.

A :class:`Lab` caches the expensive objects (induced operators,
stationary densities, pull-backs) for one configuration, so that the
different experiments can share them. All outputs are deterministic for
a given configuration; run times go to the log only.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, MetastabError
from .ergodic_graph import build_access_graph, ergodic_component_bound
from .holes_ratio import (checked_mixture, full_holes, h_p_build, hat_h_p, hole_measure,
                          induced_holes, lhr_closed_form, lhr_sweep)
from .inducing import InducedModel, induce, return_derivative_check, orbit_decay_check
from .map_core import MapModel, MapParams, build_map
from .pullback import PullbackDensity, kac_constant, pullback
from .transfer_op import (StepDensity, UlamOperator, block_start, build_induced_ulam, delta_grid,
                          lasota_yorke_fit, ly_test_family, stationary_density)

log = logging.getLogger("metastab")

DEFAULT_SCHEDULE = tuple(0.1 * 2.0 ** -j for j in range(5))


@dataclass(frozen=True)
class ExperimentConfig:
    """Parameters of a batch run. ``cylinder_N = None`` picks the depth automatically."""

    alpha: float = 0.5
    eps_schedule: tuple = DEFAULT_SCHEDULE
    epsilon: float = 0.05
    grid_m: int = 2 ** 14
    cylinder_N: int | None = None
    K: int = 500
    S: int = 32
    mc_steps: int = 10 ** 7
    mc_chains: int = 1000
    mc_burn: int = 1000
    mc_bins: int = 100
    k_max: int = 64
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "eps_schedule", tuple(float(e) for e in self.eps_schedule))
        self.validate()

    def validate(self):
        try:
            MapParams(self.alpha, 0.0)
        except MetastabError as exc:
            raise ConfigError(str(exc)) from None
        eps = np.array(self.eps_schedule)
        if eps.size == 0 or np.any(eps <= 0) or np.any(eps > 0.125):
            raise ConfigError("eps_schedule entries must lie in (0, 1/8]")
        if np.any(np.diff(eps) >= 0):
            raise ConfigError("eps_schedule must be strictly decreasing")
        if not (0.0 <= self.epsilon <= 0.125):
            raise ConfigError("epsilon must lie in [0, 1/8]")
        if self.grid_m < 2 or self.grid_m % 8:
            raise ConfigError("grid_m must be a positive multiple of 8")
        if self.cylinder_N is not None and self.cylinder_N < 8:
            raise ConfigError("cylinder_N must be at least 8")
        for name in ("K", "S", "mc_steps", "mc_chains", "mc_bins", "k_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.mc_burn < 0:
            raise ConfigError("mc_burn must be nonnegative")

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


def load_config_file(path) -> dict:
    """Flat ``key = value`` TOML file as a dict."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"config must be flat; section [{k}] found")
    return data


def rng_for(seed: int, tag: str) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, tag)``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Perturbed:
    epsilon: float
    model: MapModel
    im: InducedModel
    op: UlamOperator
    hat: StepDensity
    pb_raw: PullbackDensity

    @property
    def pb(self) -> PullbackDensity:
        return self.pb_raw.renormalized()


@dataclass
class Reference:
    model: MapModel
    im: InducedModel
    op: UlamOperator
    hat_l: StepDensity
    hat_r: StepDensity
    h_l_raw: PullbackDensity
    h_r_raw: PullbackDensity
    closed: object
    sweep: object
    weights: object
    extra: dict = field(default_factory=dict)

    @property
    def h_l(self) -> PullbackDensity:
        return self.h_l_raw.renormalized()

    @property
    def h_r(self) -> PullbackDensity:
        return self.h_r_raw.renormalized()


class Lab:
    """Caching front end for one :class:`ExperimentConfig`."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.grid = delta_grid(config.grid_m)
        self._ref: Reference | None = None
        self._ref_error: MetastabError | None = None
        self._pert: dict[float, Perturbed] = {}
        self._ims: dict[float, InducedModel] = {}
        self._ops: dict[float, UlamOperator] = {}

    def induced(self, epsilon: float) -> InducedModel:
        eps = float(epsilon)
        if eps not in self._ims:
            self._ims[eps] = induce(build_map(MapParams(self.config.alpha, eps)),
                                    self.config.cylinder_N)
        return self._ims[eps]

    def reference(self) -> Reference:
        if self._ref_error is not None:
            raise self._ref_error
        try:
            return self._build_reference()
        except MetastabError as exc:
            self._ref_error = exc
            raise

    def _build_reference(self) -> Reference:
        if self._ref is None:
            t0 = time.perf_counter()
            cfg = self.config
            im = self.induced(0.0)
            op = build_induced_ulam(im, self.grid)
            hat_l = stationary_density(op, start=block_start(self.grid, 0.25, 0.5))
            hat_r = stationary_density(op, start=block_start(self.grid, 0.5, 1.0))
            h_l = pullback(im.map, im, hat_l, kac_constant(im.cylinders, hat_l), K=cfg.K, S=cfg.S)
            h_r = pullback(im.map, im, hat_r, kac_constant(im.cylinders, hat_r), K=cfg.K, S=cfg.S)
            closed = lhr_closed_form(hat_l, hat_r, im)
            # the extrapolation needs three points; short schedules fall back to the default
            sched = cfg.eps_schedule if len(cfg.eps_schedule) >= 3 else DEFAULT_SCHEDULE
            sweep = lhr_sweep(hat_l, hat_r, [self.induced(e) for e in sched])
            weights = checked_mixture(closed.value, sweep.extrapolated, h_l.c_tau, h_r.c_tau)
            self._ref = Reference(im.map, im, op, hat_l, hat_r, h_l, h_r, closed, sweep, weights)
            log.info("reference alpha=%g built in %.1f s", cfg.alpha, time.perf_counter() - t0)
        return self._ref

    def h_p(self) -> StepDensity:
        ref = self.reference()
        if "h_p" not in ref.extra:
            ref.extra["h_p"] = h_p_build(ref.weights, ref.h_l, ref.h_r)
        return ref.extra["h_p"]

    def h_p_pullback(self) -> StepDensity:
        ref = self.reference()
        if "h_p_pb" not in ref.extra:
            ref.extra["h_p_pb"] = h_p_build(ref.weights, ref.h_l, ref.h_r, im=ref.im,
                                            method="pullback")
        return ref.extra["h_p_pb"]

    def operator(self, epsilon: float) -> UlamOperator:
        eps = float(epsilon)
        if eps == 0.0:
            return self.reference().op
        if eps not in self._ops:
            self._ops[eps] = build_induced_ulam(self.induced(eps), self.grid)
        return self._ops[eps]

    def perturbed(self, epsilon: float) -> Perturbed:
        eps = float(epsilon)
        if eps not in self._pert:
            t0 = time.perf_counter()
            cfg = self.config
            im = self.induced(eps)
            op = self.operator(eps)
            hat = stationary_density(op)
            pb = pullback(im.map, im, hat, kac_constant(im.cylinders, hat), K=cfg.K, S=cfg.S)
            self._pert[eps] = Perturbed(eps, im.map, im, op, hat, pb)
            log.info("epsilon=%g solved in %.1f s", eps, time.perf_counter() - t0)
        return self._pert[eps]


@dataclass
class SweepRow:
    """One epsilon of a sweep. ``status`` is ``"ok"`` or the failure reason.

    ``runtime_ms`` is logged but never written to the CSV files, which must
    be byte-identical between runs.
    """

    epsilon: float
    l1_distance_h_eps_h_p: float = math.nan
    l1_region_I: float = math.nan
    l1_region_II: float = math.nan
    l1_region_III: float = math.nan
    l1_unresolved: float = math.nan
    ratio_limit: float = math.nan
    ratio_full: float = math.nan
    ratio_induced: float = math.nan
    mu_hat_l_hole: float = math.nan
    mu_hat_r_hole: float = math.nan
    mu_full_hole_l: float = math.nan
    mu_full_hole_r: float = math.nan
    c_mu_hat_hole_l: float = math.nan
    c_mu_hat_hole_r: float = math.nan
    c_tau_eps: float = math.nan
    c_tau_p: float = math.nan
    c_tau_diff: float = math.nan
    mean_return_time: float = math.nan
    lambda_p_target: float = math.nan
    odds_target: float = math.nan
    tail_bound: float = math.nan
    leak_total: float = math.nan
    renorm_magnitude: float = math.nan
    runtime_ms: float = math.nan
    status: str = "ok"


def region_l1(f: StepDensity, tags_f, g: StepDensity, tags_g) -> dict:
    """L1 distance split into Delta (I), mismatched gap index (II), matched gap index (III)
    and the unresolved cells near 0."""
    e = np.union1d(f.grid.edges, g.grid.edges)
    mid = 0.5 * (e[:-1] + e[1:])
    cf, cg = f.grid.cell_of(mid), g.grid.cell_of(mid)
    diff = np.abs(f.values[cf] - g.values[cg]) * np.diff(e)
    tf, tg = tags_f[cf], tags_g[cg]
    unres = (tf == 0) | (tg == 0)
    delta = (tf < 0) & (tg < 0)
    two = ~unres & ~delta & (tf != tg)
    three = ~unres & ~delta & (tf == tg)
    return dict(I=float(diff[delta].sum()), II=float(diff[two].sum()),
                III=float(diff[three].sum()), unresolved=float(diff[unres].sum()),
                total=float(diff.sum()))


def h_p_tags(lab: Lab) -> tuple[StepDensity, np.ndarray]:
    ref = lab.reference()
    f = lab.h_p()
    fl, tags_l = ref.h_l.as_step()
    return f, tags_l[fl.grid.cell_of(f.grid.midpoints)]


def sweep_row(lab: Lab, epsilon: float) -> SweepRow:
    """All per-epsilon quantities; failures are caught and recorded in ``status``."""
    row = SweepRow(float(epsilon))
    t0 = time.perf_counter()
    try:
        ref = lab.reference()
        w = ref.weights
        per = lab.perturbed(epsilon)
        pb = per.pb
        f_eps, tags_eps = pb.as_step()
        f_p, tags_p = h_p_tags(lab)
        reg = region_l1(f_eps, tags_eps, f_p, tags_p)
        row.l1_distance_h_eps_h_p = reg["total"]
        row.l1_region_I, row.l1_region_II = reg["I"], reg["II"]
        row.l1_region_III, row.l1_unresolved = reg["III"], reg["unresolved"]

        Hl, Hr = full_holes(per.model)
        Hl_hat, Hr_hat = induced_holes(per.im)
        mu_l0 = hole_measure(Hl, ref.h_l)
        mu_r0 = hole_measure(Hr, ref.h_r)
        row.ratio_limit = mu_r0 / mu_l0
        row.mu_full_hole_l = hole_measure(Hl, pb)
        row.mu_full_hole_r = hole_measure(Hr, pb)
        row.mu_hat_l_hole = hole_measure(Hl_hat, per.hat)
        row.mu_hat_r_hole = hole_measure(Hr_hat, per.hat)
        c = pb.c_tau * pb.scale
        row.c_mu_hat_hole_l = c * row.mu_hat_l_hole
        row.c_mu_hat_hole_r = c * row.mu_hat_r_hole
        row.ratio_full = row.mu_full_hole_r / row.mu_full_hole_l
        row.ratio_induced = row.mu_hat_r_hole / row.mu_hat_l_hole
        row.c_tau_eps = pb.c_tau
        row.c_tau_p = w.c_tau_p
        row.c_tau_diff = abs(pb.c_tau - w.c_tau_p)
        row.mean_return_time = pb.kac.mean_return_time
        row.lambda_p_target = w.lambda_p
        row.odds_target = w.odds
        row.tail_bound = pb.kac.tail_bound
        row.leak_total = per.op.redistributed
        row.renorm_magnitude = per.pb_raw.renorm_magnitude
    except MetastabError as exc:
        row.status = f"{type(exc).__name__}: {exc}"
    row.runtime_ms = 1e3 * (time.perf_counter() - t0)
    log.info("row epsilon=%g status=%s runtime_ms=%.0f", row.epsilon, row.status, row.runtime_ms)
    return row


def run_sweep(config: ExperimentConfig, lab: Lab | None = None) -> list[SweepRow]:
    lab = Lab(config) if lab is None else lab
    return [sweep_row(lab, e) for e in config.eps_schedule]


CONVERGE_COLUMNS = ("epsilon", "l1_distance_h_eps_h_p", "l1_region_I", "l1_region_II",
                    "l1_region_III", "l1_unresolved", "ratio_full", "ratio_induced", "c_tau_eps",
                    "c_tau_p", "c_tau_diff", "mean_return_time", "lambda_p_target",
                    "tail_bound", "leak_total", "renorm_magnitude", "status")
RATIO_COLUMNS = ("epsilon", "mu_hat_l_hole", "mu_hat_r_hole", "ratio_induced", "ratio_full",
                 "c_tau_eps", "ratio_limit", "odds_target", "mu_full_hole_l", "c_mu_hat_hole_l",
                 "mu_full_hole_r", "c_mu_hat_hole_r", "lambda_p_target", "tail_bound",
                 "leak_total", "renorm_magnitude", "status")


def _fmt(v):
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_rows(rows: list[SweepRow], columns, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in columns])


def write_long(series: dict, path) -> None:
    """Plot-ready long-format CSV with columns series, x, y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "x", "y"])
        for name, (xs, ys) in series.items():
            for x, y in zip(xs, ys):
                w.writerow([name, repr(float(x)), repr(float(y))])


def run_convergence(config: ExperimentConfig, lab: Lab | None = None,
                    out: Path | None = None) -> list[SweepRow]:
    """Distance between ``h_eps`` and the limit density along the schedule."""
    rows = run_sweep(config, lab)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_rows(rows, CONVERGE_COLUMNS, out / "converge.csv")
        eps = [r.epsilon for r in rows]
        write_long({k: (eps, [getattr(r, k) for r in rows])
                    for k in ("l1_distance_h_eps_h_p", "l1_region_I", "l1_region_II",
                              "l1_region_III", "c_tau_diff")}, out / "converge_plot.csv")
    return rows


def run_ratio(config: ExperimentConfig, lab: Lab | None = None,
              out: Path | None = None) -> tuple[list[SweepRow], dict]:
    """Hole-measure ratios along the schedule and the mixture weights."""
    lab = Lab(config) if lab is None else lab
    rows = run_sweep(config, lab)
    ref = lab.reference()
    summary = dict(lhr_closed=ref.closed.value, lhr_closed_t2_only=ref.closed.value_t2_only,
                   lhr_extrapolated=ref.sweep.extrapolated, lambda_hat=ref.weights.lambda_hat,
                   lambda_p=ref.weights.lambda_p, c_tau_l=ref.weights.c_tau_l,
                   c_tau_r=ref.weights.c_tau_r, c_tau_p=ref.weights.c_tau_p)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_rows(rows, RATIO_COLUMNS, out / "ratio.csv")
        write_summary(summary, out / "ratio_summary.txt")
    return rows, summary


def write_summary(d: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("# tolerances used by the checks are engineering choices\n")
        for k, v in d.items():
            fh.write(f"{k} = {_fmt(v) if not isinstance(v, (int, np.integer)) else v}\n")


def density_slope(pb: PullbackDensity, lo: float = 1e-4, hi: float = 1e-2, n: int = 41) -> float:
    """Least-squares slope of ``log h`` against ``log x`` on log-spaced points."""
    x = np.geomspace(lo, hi, n)
    return float(np.polyfit(np.log(x), np.log(pb.evaluate(x)), 1)[0])


def run_asymptotics(config: ExperimentConfig, lab: Lab | None = None,
                    out: Path | None = None, with_schedule: bool = True) -> dict:
    """Blow-up rate near 0, growth of the density on the gaps and the tower estimates."""
    lab = Lab(config) if lab is None else lab
    ref = lab.reference()
    h_l = ref.h_l
    lam = ref.weights.lambda_p
    K = h_l.K
    ks = np.arange(1, K + 1)
    sup_hp = np.array([lam * h_l.sup_on_gap(k) for k in ks])
    per_k = sup_hp / ks
    band = (ks >= 10) & (ks <= 500)
    sub = orbit_decay_check(ref.im.orbit, config.alpha)
    rep = dict(alpha=config.alpha, slope=density_slope(h_l), slope_target=-config.alpha,
               sup_hp_over_k_max=float(per_k.max()),
               sup_hp_over_k_band_ratio=float(per_k[band].max() / per_k[band].min()),
               orbit_decay_violations=sub.violations, orbit_decay_d=sub.d, orbit_decay_c=sub.c)
    for k in (5, 20, 100):
        if k + 1 < ref.im.N:
            r = return_derivative_check(ref.im, k, k + 500, d=sub.d)
            rep[f"return_derivative_k{k}_violations"] = r.violations
            rep[f"return_derivative_k{k}_min_slack"] = r.min_slack
            rep[f"return_derivative_k{k}_sum_over_k"] = r.sum_over_k
    if with_schedule:
        mrt = []
        for e in config.eps_schedule:
            try:
                mrt.append(lab.perturbed(e).pb_raw.kac.mean_return_time)
            except MetastabError:
                mrt.append(math.nan)
        mrt = np.array(mrt)
        rep["mean_return_time_max"] = float(np.nanmax(mrt))
        rep["mean_return_time_variation"] = float((np.nanmax(mrt) - np.nanmin(mrt)) / np.nanmax(mrt))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_summary(rep, out / "asymptotics.txt")
        x = np.geomspace(1e-6, 0.25, 60)
        write_long({"h_l": (x, h_l.evaluate(x)), "sup_hp_over_k": (ks, per_k)},
                   out / "asymptotics_plot.csv")
    return rep


def run_lasota_yorke(config: ExperimentConfig, lab: Lab | None = None) -> dict:
    """Envelope Lasota-Yorke constants of the induced operator along the schedule."""
    lab = Lab(config) if lab is None else lab
    fam = ly_test_family(lab.grid)
    fits = [lasota_yorke_fit(lab.operator(e), fam) for e in config.eps_schedule]
    beta = np.array([f.beta for f in fits])
    B = np.array([f.B for f in fits])
    return dict(fits=fits, beta_max=float(beta.max()),
                beta_variation=float((beta.max() - beta.min()) / beta.max()),
                B_variation=float((B.max() - B.min()) / B.max()))


def simulate(model: MapModel, rng: np.random.Generator, chains: int, steps: int, burn: int,
             bins: np.ndarray) -> tuple[np.ndarray, float]:
    """Birkhoff histogram (counts per bin) of ``chains`` orbits and their time fraction left of 1/2."""
    x = rng.random(chains)
    for _ in range(burn):
        x = model.eval(x)
    counts = np.zeros(bins.size - 1)
    left = 0
    for _ in range(steps):
        x = model.eval(x)
        counts += np.bincount(np.clip(np.searchsorted(bins, x, side="right") - 1, 0, bins.size - 2),
                              minlength=bins.size - 1)
        left += int(np.count_nonzero(x < 0.5))
    return counts, left / (chains * steps)


def run_montecarlo(config: ExperimentConfig, epsilon: float | None = None, lab: Lab | None = None,
                   out: Path | None = None, tag: str = "mc") -> dict:
    """Orbit histogram against the pulled-back density."""
    lab = Lab(config) if lab is None else lab
    eps = config.epsilon if epsilon is None else float(epsilon)
    if eps < 0.02:
        log.warning("epsilon=%g: metastable switching is too slow for %d steps", eps, config.mc_steps)
    model = build_map(MapParams(config.alpha, eps))
    bins = np.linspace(0.0, 1.0, config.mc_bins + 1)
    steps = max(1, config.mc_steps // config.mc_chains)
    counts, left = simulate(model, rng_for(config.seed, f"{tag}:{eps!r}"), config.mc_chains,
                            steps, config.mc_burn, bins)
    hist = counts / counts.sum() / np.diff(bins)
    rep = dict(epsilon=eps, left_fraction=left, samples=int(counts.sum()))
    if eps > 0:
        pb = lab.perturbed(eps).pb
        f, _ = pb.as_step()
        ref_mass = f.integrate(bins[:-1], bins[1:])
        rep["l1_histogram_pullback"] = float(np.abs(counts / counts.sum() - ref_mass).sum())
        rep["left_mass_pullback"] = float(f.integrate(0.0, 0.5)[0])
    try:
        rep["lambda_p"] = lab.reference().weights.lambda_p
    except MetastabError:
        rep["lambda_p"] = math.nan
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "mc.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "histogram"])
            for a, b, h in zip(bins[:-1], bins[1:], hist):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(h))])
        write_summary(rep, out / "mc_summary.txt")
    rep["histogram"] = hist
    rep["bins"] = bins
    return rep


def run_graph(config: ExperimentConfig, epsilon: float | None = None,
              out: Path | None = None):
    eps = config.epsilon if epsilon is None else float(epsilon)
    model = build_map(MapParams(config.alpha, eps))
    g = build_access_graph(model, config.k_max)
    rep = ergodic_component_bound(g)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "graph.dot").write_text(g.to_dot())
        (out / "graph.txt").write_text(rep.text())
    return g, rep


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    try:
        return replace(config, **kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
