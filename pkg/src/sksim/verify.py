"""Statistical verification: Laplace-identity, Poissonization, martingale and
moment tests, with explicit discretization-bias budgets.

Every estimator here is a sample mean of a bounded functional, so plain
CLT confidence intervals apply.  Pass rules combine a 3-sigma statistical
band with an additive bias allowance ``tol_disc`` covering the dt, delta,
epsilon and grid biases of the engine; thresholds are recorded in every
report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .engine import (
    AtomicMeasure,
    CampaignTask,
    DressedSnapshot,
    SimParams,
    SkeletonSnapshot,
    SuperSnapshot,
    run_campaign,
)
from .exceptions import PreconditionError
from .families import SpatialFn
from .mechanism import BranchingMechanism, MartingaleFunction, OffspringLaw
from .motion import Motion, TORUS
from .solver import solve_u

DEFAULT_TOL_DISC = 2e-2
KS_ALPHA = 0.01


@dataclass(frozen=True)
class LaplaceEstimate:
    """Monte Carlo estimate of a Laplace functional (values in (0, 1])."""

    point_estimate: float
    std_error: float
    replicates: int
    functional: str = ""

    @classmethod
    def from_values(cls, values: np.ndarray, functional: str = "") -> "LaplaceEstimate":
        values = np.asarray(values, dtype=float)
        if values.size < 2:
            raise PreconditionError("need at least 2 replicates for a standard error")
        return cls(point_estimate=float(values.mean()),
                   std_error=float(values.std(ddof=1) / np.sqrt(values.size)),
                   replicates=int(values.size), functional=functional)


@dataclass(frozen=True)
class TestReport:
    name: str
    statistic: float
    passed: bool
    z_score: Optional[float] = None
    p_value: Optional[float] = None
    thresholds: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    details: dict = field(default_factory=dict)

    def to_json_line(self) -> str:
        payload = {
            "name": self.name,
            "statistic": self.statistic,
            "passed": bool(self.passed),
            "z_score": self.z_score,
            "p_value": self.p_value,
            "thresholds": self.thresholds,
            "config_fingerprint": self.config_fingerprint,
            "details": self.details,
        }
        return json.dumps(payload, sort_keys=True)


# ---------------------------------------------------------------------------
# snapshot reducers used by engine campaigns


@dataclass(frozen=True)
class StandardReducer:
    """Reduces a snapshot to named scalars: Laplace exponents, region data, masses.

    ``laplace`` entries are (name, f, h): the reduced value is
    exp(-<f, Lambda> - <h, Z>) with either part optional.  ``regions`` adds,
    per interval B, the skeleton count in B and <w 1_B, Lambda>.
    """

    laplace: tuple = ()
    regions: tuple = ()
    w: Optional[MartingaleFunction] = None

    def __call__(self, snap) -> dict:
        out: dict = {}
        if isinstance(snap, SuperSnapshot):
            masses, pos, zpos = snap.masses, snap.positions, None
        elif isinstance(snap, DressedSnapshot):
            masses, pos, zpos = snap.lam_masses, snap.lam_positions, snap.z_positions
            out["xstar_mass"] = snap.xstar_mass
            out["immigrants"] = float(snap.immigrant_count)
            out["z_count"] = float(zpos.size)
        elif isinstance(snap, SkeletonSnapshot):
            out["count"] = float(snap.positions.size)
            for name, _f, h in self.laplace:
                expo = float(np.sum(np.asarray(h(snap.positions)))) if h is not None else 0.0
                out[name] = float(np.exp(-expo))
            return out
        else:
            raise PreconditionError(f"unknown snapshot type {type(snap)!r}")
        out["total_mass"] = float(masses.sum())
        for name, f, h in self.laplace:
            expo = 0.0
            if f is not None and masses.size:
                expo += float(masses @ np.asarray(f(pos), dtype=float))
            if h is not None and zpos is not None and zpos.size:
                expo += float(np.sum(np.asarray(h(zpos), dtype=float)))
            out[name] = float(np.exp(-expo))
        if self.regions:
            if self.w is None:
                raise PreconditionError("regions require the martingale function")
            for i, (lo, hi) in enumerate(self.regions):
                in_b = (pos >= lo) & (pos < hi)
                out[f"lam_w_B{i}"] = float(
                    masses[in_b] @ np.asarray(self.w(pos[in_b]), dtype=float)) \
                    if np.any(in_b) else 0.0
                if zpos is not None:
                    out[f"z_count_B{i}"] = float(np.count_nonzero((zpos >= lo) & (zpos < hi)))
        return out


# ---------------------------------------------------------------------------
# estimators


def mc_laplace(paths: Sequence, f: Optional[SpatialFn] = None,
               h: Optional[SpatialFn] = None, functional: str = "") -> LaplaceEstimate:
    """Sample mean and standard error of exp(-<f, Lambda_T> - <h, Z_T>).

    ``paths`` may hold AtomicMeasure instances (plain superprocess states,
    the h-term is omitted) or (AtomicMeasure, skeleton positions) pairs.
    """
    if len(paths) == 0:
        raise PreconditionError("empty replicate input")
    vals = np.empty(len(paths))
    for i, item in enumerate(paths):
        if isinstance(item, AtomicMeasure):
            measure, zpos = item, None
        else:
            measure, zpos = item
        expo = measure.integrate(f) if f is not None else 0.0
        if h is not None and zpos is not None and len(zpos):
            expo += float(np.sum(np.asarray(h(np.asarray(zpos)), dtype=float)))
        vals[i] = np.exp(-expo)
    tag = functional or f"laplace(f={getattr(f, 'tag', None)}, h={getattr(h, 'tag', None)})"
    return LaplaceEstimate.from_values(vals, tag)


def _interval_period(motion: Motion) -> Optional[float]:
    return motion.domain.length if motion.domain.mode == TORUS else None


def laplace_rhs(mech: BranchingMechanism, w: Optional[MartingaleFunction], motion: Motion,
                mu: AtomicMeasure, f: Optional[SpatialFn], h: Optional[SpatialFn],
                T: float, dt: float) -> float:
    """Deterministic side of the main identity: exp(-<u_{f + w(1 - e^{-h})}(., T), mu>)."""
    grid = motion.domain.grid
    data = np.zeros(grid.shape)
    if f is not None:
        data = data + np.asarray(f(grid), dtype=float)
    if h is not None:
        if w is None:
            raise PreconditionError("an h-component requires the martingale function")
        data = data + np.asarray(w(grid), dtype=float) * (1.0 - np.exp(-np.asarray(h(grid), dtype=float)))
    fld = solve_u(mech, motion, data, T, dt)
    return float(np.exp(-fld.inner(T, mu, period=_interval_period(motion))))


def identity_report(values: np.ndarray, rhs: float, name: str,
                    tol_disc: float = DEFAULT_TOL_DISC,
                    fingerprint: str = "") -> TestReport:
    """CI rule |L - R| <= 3 se + tol_disc for a vector of replicate Laplace values."""
    est = LaplaceEstimate.from_values(values, name)
    diff = abs(est.point_estimate - rhs)
    bound = 3.0 * est.std_error + tol_disc
    z = (est.point_estimate - rhs) / est.std_error if est.std_error > 0 else np.inf
    return TestReport(
        name=name, statistic=diff, passed=bool(diff <= bound), z_score=float(z),
        thresholds={"sigma": 3.0, "tol_disc": tol_disc, "bound": bound,
                    "std_error": est.std_error, "replicates": est.replicates},
        config_fingerprint=fingerprint,
        details={"lhs": est.point_estimate, "rhs": rhs})


def identity_check(mech: BranchingMechanism, w: MartingaleFunction, motion: Motion,
                   mu: AtomicMeasure, f: Optional[SpatialFn], h: Optional[SpatialFn],
                   T: float, params: SimParams, replicates: int,
                   offspring: Optional[OffspringLaw] = None,
                   tol_disc: float = DEFAULT_TOL_DISC, jobs: int = 1,
                   solver_dt: Optional[float] = None,
                   fingerprint: str = "") -> TestReport:
    """End-to-end main-identity check: dressed Monte Carlo against the u-solver."""
    reducer = StandardReducer(laplace=(("lap", f, h),))
    task = CampaignTask(kind="dressed", mech=mech, motion=motion, mu=mu, params=params,
                        T=T, times=(T,), reducer=reducer, w=w, offspring=offspring)
    res = run_campaign(task, replicates, jobs=jobs)
    values = res[T]["lap"]
    rhs = laplace_rhs(mech, w, motion, mu, f, h, T, solver_dt or params.dt)
    return identity_report(values, rhs, name="identity-check", tol_disc=tol_disc,
                           fingerprint=fingerprint)


# ---------------------------------------------------------------------------
# Poissonization


def randomized_pit(lams: np.ndarray, counts: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Randomized probability integral transform of Poisson counts.

    U = F(N - 1; lam) + V pmf(N; lam) is exactly uniform when N ~ Poisson(lam),
    including the degenerate lam = 0 case.
    """
    lams = np.asarray(lams, dtype=float)
    counts = np.asarray(counts)
    v = rng.random(counts.shape)
    return stats.poisson.cdf(counts - 1, lams) + v * stats.poisson.pmf(counts, lams)


def poissonization_report(lam_matrix: np.ndarray, count_matrix: np.ndarray,
                          rng: np.random.Generator, alpha: float = KS_ALPHA,
                          fingerprint: str = "") -> TestReport:
    """KS test of pooled randomized-PIT uniforms, plus a cross-region
    correlation screen.  Matrices are (replicates, regions)."""
    lam_matrix = np.atleast_2d(np.asarray(lam_matrix, dtype=float))
    count_matrix = np.atleast_2d(np.asarray(count_matrix))
    m, r = lam_matrix.shape
    if m < 2:
        raise PreconditionError("need at least 2 replicates")
    pit = randomized_pit(lam_matrix, count_matrix, rng)
    ks_stat, p_pooled = stats.kstest(pit.ravel(), "uniform")
    per_region = [float(stats.kstest(pit[:, j], "uniform").pvalue) for j in range(r)]
    rho_bound = 3.0 / np.sqrt(m)
    max_rho = 0.0
    for a in range(r):
        for b in range(a + 1, r):
            rho = float(np.corrcoef(pit[:, a], pit[:, b])[0, 1])
            max_rho = max(max_rho, abs(rho))
    passed = (p_pooled >= alpha) and (max_rho <= rho_bound)
    return TestReport(
        name="poissonization", statistic=float(ks_stat), passed=bool(passed),
        p_value=float(p_pooled),
        thresholds={"alpha": alpha, "rho_bound": rho_bound},
        config_fingerprint=fingerprint,
        details={"per_region_p": per_region, "max_cross_region_rho": max_rho,
                 "replicates": m, "regions": r})


def poissonization_test(dressed_snapshots: Sequence[DressedSnapshot],
                        w: MartingaleFunction,
                        regions: Sequence[tuple[float, float]],
                        rng: np.random.Generator, alpha: float = KS_ALPHA,
                        fingerprint: str = "") -> TestReport:
    """Check that Z_t given Lambda_t looks Poisson with intensity w Lambda_t."""
    if len(dressed_snapshots) < 500:
        raise PreconditionError("poissonization test needs at least 500 replicates")
    for lo, hi in regions:
        if not lo < hi:
            raise PreconditionError("regions must be non-empty intervals")
    m, r = len(dressed_snapshots), len(regions)
    lams = np.zeros((m, r))
    counts = np.zeros((m, r), dtype=int)
    for i, snap in enumerate(dressed_snapshots):
        for j, (lo, hi) in enumerate(regions):
            in_b = (snap.lam_positions >= lo) & (snap.lam_positions < hi)
            if np.any(in_b):
                lams[i, j] = snap.lam_masses[in_b] @ np.asarray(
                    w(snap.lam_positions[in_b]), dtype=float)
            counts[i, j] = int(np.count_nonzero(
                (snap.z_positions >= lo) & (snap.z_positions < hi)))
    return poissonization_report(lams, counts, rng, alpha=alpha, fingerprint=fingerprint)


def synthetic_poisson_counts(lam_matrix: np.ndarray, scale: float,
                             rng: np.random.Generator) -> np.ndarray:
    """Direct-sampling oracle: counts ~ Poisson(scale * lam) per entry."""
    return rng.poisson(scale * np.asarray(lam_matrix, dtype=float))


# ---------------------------------------------------------------------------
# martingale and growth tests


def martingale_report(values_by_time: dict, exact: float,
                      tol_disc: float = DEFAULT_TOL_DISC,
                      name: str = "w-martingale", fingerprint: str = "") -> TestReport:
    """Each time's estimate of E e^{-<w, X_t>} against the exact t=0 value."""
    worst_excess = -np.inf
    worst_z = 0.0
    per_time = {}
    for t, vals in sorted(values_by_time.items()):
        est = LaplaceEstimate.from_values(np.asarray(vals), f"mart@{t}")
        diff = abs(est.point_estimate - exact)
        excess = diff - (3.0 * est.std_error + tol_disc)
        z = (est.point_estimate - exact) / est.std_error if est.std_error else np.inf
        per_time[str(t)] = {"estimate": est.point_estimate, "std_error": est.std_error,
                            "z": z}
        if excess > worst_excess:
            worst_excess = excess
            worst_z = z
    return TestReport(
        name=name, statistic=float(worst_excess), passed=bool(worst_excess <= 0),
        z_score=float(worst_z),
        thresholds={"sigma": 3.0, "tol_disc": tol_disc, "exact": exact},
        config_fingerprint=fingerprint, details=per_time)


def martingale_test(mech: BranchingMechanism, w: MartingaleFunction, motion: Motion,
                    mu: AtomicMeasure, times: Sequence[float], params: SimParams,
                    replicates: int, tol_disc: float = DEFAULT_TOL_DISC,
                    jobs: int = 1, fingerprint: str = "") -> TestReport:
    """Simulates the (P, psi)-superprocess and checks constancy of E e^{-<w, X_t>}."""
    reducer = StandardReducer(laplace=(("expw", w.w, None),))
    task = CampaignTask(kind="superprocess", mech=mech, motion=motion, mu=mu,
                        params=params, T=max(times), times=tuple(times), reducer=reducer)
    res = run_campaign(task, replicates, jobs=jobs)
    exact = float(np.exp(-mu.integrate(w.w)))
    values_by_time = {t: res[t]["expw"] for t in times if t in res}
    return martingale_report(values_by_time, exact, tol_disc=tol_disc,
                             fingerprint=fingerprint)


def skeleton_moment_report(counts: np.ndarray, n0: float, q: float, m: float, T: float,
                           tol_disc: float = 0.0, fingerprint: str = "") -> TestReport:
    """Sample-mean population against N0 exp(q (m - 1) T)."""
    counts = np.asarray(counts, dtype=float)
    target = n0 * np.exp(q * (m - 1.0) * T)
    mean = float(counts.mean())
    se = float(counts.std(ddof=1) / np.sqrt(counts.size)) if counts.size > 1 else 0.0
    diff = abs(mean - target)
    bound = 3.0 * se + tol_disc
    return TestReport(
        name="skeleton-moment", statistic=diff, passed=bool(diff <= bound),
        z_score=float((mean - target) / se) if se else None,
        thresholds={"sigma": 3.0, "tol_disc": tol_disc, "target": target,
                    "std_error": se},
        config_fingerprint=fingerprint,
        details={"mean": mean, "replicates": int(counts.size)})


def skeleton_moment_test(offspring: OffspringLaw, motion: Motion, w: MartingaleFunction,
                         init_positions: np.ndarray, T: float, params: SimParams,
                         replicates: int, jobs: int = 1,
                         fingerprint: str = "") -> TestReport:
    """Grows ``replicates`` skeletons from a fixed configuration and checks the mean."""
    if not offspring.mech.homogeneous:
        raise PreconditionError("skeleton moment test requires a homogeneous configuration")
    mu = AtomicMeasure(np.ones(len(init_positions)), np.asarray(init_positions, dtype=float))
    reducer = StandardReducer()
    task = CampaignTask(kind="skeleton", mech=offspring.mech, motion=motion, mu=mu,
                        params=params, T=T, times=(T,), reducer=reducer, w=w,
                        offspring=offspring, init_skeleton_poisson=False)
    res = run_campaign(task, replicates, jobs=jobs)
    counts = res[T]["count"]
    x0 = float(np.asarray(motion.domain.grid[0]))
    q = float(np.asarray(offspring.q(x0)))
    m = offspring.mean_offspring(x0)
    return skeleton_moment_report(counts, n0=len(init_positions), q=q, m=m, T=T,
                                  fingerprint=fingerprint)


def write_reports_jsonl(reports: Sequence[TestReport], fh) -> None:
    for rep in reports:
        fh.write(rep.to_json_line() + "\n")


def summary_table(reports: Sequence[TestReport]) -> str:
    lines = []
    for rep in reports:
        mark = "PASS" if rep.passed else "FAIL"
        extra = f"p={rep.p_value:.4g}" if rep.p_value is not None else \
            (f"z={rep.z_score:+.2f}" if rep.z_score is not None else "")
        lines.append(f"[{mark}] {rep.name:<24s} stat={rep.statistic:.4g} {extra}")
    return "\n".join(lines)
