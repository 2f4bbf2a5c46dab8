"""Event-driven Monte Carlo: skeleton, mass-particle superprocess, dressed pair.

Populations advance on a global clock of step ``dt``.  Event rates are frozen
at each step's start position (order-dt bias).  Within a step the offspring
count of every mass-delta particle is drawn from the exact linear
birth-death descendant law for its frozen rates, so the mean and variance of
the branching increment carry no per-step truncation error; spatially
varying rates are handled by evaluating the coefficient fields at particle
positions, and jump/immigration point processes are thinned against their
grid suprema.

Reproducibility: every replicate owns a counter-based Philox stream keyed by
(master seed, replicate index), and all draws inside a step happen in a
fixed documented order (superprocess move/branch/jump, skeleton move/branch,
immigration).  Aggregation across replicates is a final reduction, so
results do not depend on scheduling.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .exceptions import GrowthError, PreconditionError
from .mechanism import (
    BranchingMechanism,
    MartingaleFunction,
    OffspringLaw,
    effective_linear_rate,
    tilt,
)
from .motion import Motion, TORUS

CONTINUOUS = "continuous"
DISCONTINUOUS = "discontinuous"
BRANCH_POINT = "branch-point"

SNAPSHOT_MAGIC = b"SKSIM1"

_KIND_CODES = {CONTINUOUS: 0.0, DISCONTINUOUS: 1.0, BRANCH_POINT: 2.0, "branch": 3.0}


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite atomic measure: parallel arrays of strictly positive masses and positions."""

    masses: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        p = np.asarray(self.positions, dtype=float)
        if m.shape != p.shape:
            raise PreconditionError("masses and positions must have matching shapes")
        if np.any(m <= 0):
            raise PreconditionError("atom masses must be strictly positive")
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "positions", p)

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple[float, float]]) -> "AtomicMeasure":
        pairs = list(atoms)
        return cls(np.array([a[0] for a in pairs], dtype=float),
                   np.array([a[1] for a in pairs], dtype=float))

    @classmethod
    def empty(cls) -> "AtomicMeasure":
        return cls(np.empty(0), np.empty(0))

    def __len__(self) -> int:
        return self.masses.size

    def __iter__(self):
        return zip(self.masses, self.positions)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def integrate(self, fn) -> float:
        """<f, mu> for a vectorised function of position."""
        if self.masses.size == 0:
            return 0.0
        return float(self.masses @ np.asarray(fn(self.positions), dtype=float))


@dataclass(frozen=True)
class SkeletonParticle:
    id: int
    parent_id: int
    position: float
    birth_time: float
    death_time: Optional[float] = None
    offspring_count: Optional[int] = None


@dataclass(frozen=True)
class ImmigrationEvent:
    time: float
    kind: str
    site: float
    initial_mass: float
    source_particle: int


@dataclass(frozen=True)
class BranchEvent:
    time: float
    site: float
    parent_id: int
    offspring_count: int


@dataclass(frozen=True)
class DressedState:
    """Snapshot of the dressed pair.

    ``sources`` labels each atom of Lambda with its component: 0 for the
    initial tilted copy, positive integers for individual immigrants, so the
    decomposition of Lambda into component states stays reconstructible.
    """

    time: float
    Lambda: AtomicMeasure
    Z: tuple[SkeletonParticle, ...]
    event_log: tuple
    sources: np.ndarray = None
    immigrants_launched: int = 0


@dataclass(frozen=True)
class SimParams:
    """Numerical knobs of a simulation run.

    ``delta`` is the mass carried by each superprocess particle, ``epsilon``
    the surrogate initial mass of continuous immigrants.  ``T`` is the
    default horizon when an operation is called without an explicit one.
    """

    dt: float = 1e-3
    delta: float = 1e-2
    epsilon: float = 1e-2
    rng_seed: int = 0
    T: float = 1.0
    population_ceiling: int = 1_000_000
    log_events: bool = True

    def __post_init__(self):
        for name in ("dt", "delta", "epsilon", "T"):
            if not getattr(self, name) > 0:
                raise PreconditionError(f"SimParams.{name} must be positive")


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based per-replicate stream: Philox keyed by (seed, index)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def mass_to_count(mass: float, delta: float) -> int:
    """Number of mass-delta particles representing ``mass`` (tolerant ceiling)."""
    if mass <= 0:
        return 0
    return max(1, int(math.ceil(mass / delta - 1e-9)))


# ---------------------------------------------------------------------------
# per-step branching law: exact linear birth-death descendant distribution


def _bd_step_params(ae, beta, delta: float, dt: float):
    """(p_die, p_geo) for the descendant count after one step of length dt.

    Per-particle birth rate beta/delta + max(ae, 0) and death rate
    beta/delta + max(-ae, 0) reproduce the mean drift ae and the quadratic
    fluctuation 2 beta per unit mass as delta -> 0.  The descendant count of
    a linear birth-death process is 0 with probability p_die, else geometric
    with success parameter p_geo.
    """
    ae = np.asarray(ae, dtype=float)
    beta = np.asarray(beta, dtype=float)
    lam = beta / delta + np.maximum(ae, 0.0)
    mu = beta / delta + np.maximum(-ae, 0.0)
    drift = lam - mu
    # lam*g - mu never vanishes off the critical branch and has the sign of g - 1
    crit = np.abs(drift) * dt < 1e-12
    g = np.exp(np.where(crit, 0.0, drift * dt))
    denom = np.where(crit, 1.0, lam * g - mu)
    p_crit = lam * dt / (1.0 + lam * dt)
    p0 = np.where(crit, p_crit, mu * (g - 1.0) / denom)
    eta = np.where(crit, p_crit, lam * (g - 1.0) / denom)
    p0 = np.clip(p0, 0.0, 1.0)
    eta = np.clip(eta, 0.0, 1.0 - 1e-15)
    return p0, 1.0 - eta


class _Kinematics:
    """Precompiled Euler-Maruyama step; constant coefficients on the torus skip
    per-step coefficient evaluation and killing masks entirely."""

    def __init__(self, motion: Motion, dt: float, extra_drift=None):
        self.motion = motion
        self.dt = dt
        self.extra_drift = extra_drift  # callable(pos) -> array, or None
        from .families import is_constant
        self.fast = (motion.domain.mode == TORUS and extra_drift is None
                     and is_constant(motion.drift) and is_constant(motion.diffusion))
        if self.fast:
            x0 = motion.domain.grid[:1]
            self.drift_dt = float(np.asarray(motion.drift(x0))[0]) * dt
            self.sig_sqdt = math.sqrt(float(np.asarray(motion.diffusion(x0))[0]) * dt)
            self.lo = motion.domain.bounds[0]
            self.length = motion.domain.length

    def move(self, pos: np.ndarray, noise: np.ndarray):
        """Returns (positions, alive) with alive=None meaning all alive."""
        if self.fast:
            out = pos + self.sig_sqdt * noise
            if self.drift_dt:
                out += self.drift_dt
            out -= self.lo
            np.mod(out, self.length, out=out)
            out += self.lo
            return out, None
        extra = self.extra_drift(pos) if self.extra_drift is not None else None
        pos, alive = self.motion.move(pos, self.dt, noise, extra_drift=extra)
        return pos, (None if alive.all() else alive)


class _SuperEngine:
    """Steps a population of mass-delta particles under one branching mechanism."""

    def __init__(self, mech: BranchingMechanism, motion: Motion, params: SimParams):
        self.mech = mech
        self.motion = motion
        self.delta = params.delta
        self.dt = params.dt
        self.kin = _Kinematics(motion, params.dt)
        grid = motion.domain.grid
        self.jump_sizes = mech.jump_sizes()
        self.jump_counts = [mass_to_count(u, self.delta) for u in self.jump_sizes]
        self.jump_sup = [float(np.max(np.asarray(atom.intensity(grid), dtype=float)))
                         for atom in mech.jumps]
        self.homogeneous = mech.homogeneous
        if self.homogeneous:
            x0 = grid[:1]
            ae = float(np.asarray(effective_linear_rate(mech, x0))[0])
            beta = float(np.asarray(mech.beta(x0))[0])
            self.trivial = (beta == 0.0) and (ae == 0.0)
            p_die, p_geo = _bd_step_params(ae, beta, self.delta, self.dt)
            self.p_die, self.p_geo = float(p_die), float(p_geo)
        else:
            self.trivial = False

    def step(self, pos: np.ndarray, src: np.ndarray, rng: np.random.Generator):
        """Move, branch, jump.  Returns the new (positions, sources)."""
        n = pos.size
        if n == 0:
            return pos, src
        # 1. motion
        noise = rng.standard_normal(n)
        pos, alive = self.kin.move(pos, noise)
        if alive is not None:
            pos, src = pos[alive], src[alive]
            n = pos.size
            if n == 0:
                return pos, src
        # 2. branching (exact per-step birth-death descendant law)
        if self.homogeneous:
            p_die, p_geo, trivial = self.p_die, self.p_geo, self.trivial
        else:
            ae = effective_linear_rate(self.mech, pos)
            beta = np.asarray(self.mech.beta(pos), dtype=float)
            trivial = not (np.any(ae) or np.any(beta))
            if not trivial:
                p_die, p_geo = _bd_step_params(ae, beta, self.delta, self.dt)
        if not trivial:
            u = rng.random(n)
            counts = rng.geometric(p_geo, size=n)
            counts[u < p_die] = 0
            pos = pos.repeat(counts)
            src = src.repeat(counts)
            n = pos.size
            if n == 0:
                return pos, src
        # 3. atomic jumps: thinned against the grid sup of each intensity
        for j, u_j in enumerate(self.jump_sizes):
            lam = n * self.delta * self.jump_sup[j] * self.dt
            k = int(rng.poisson(lam)) if lam > 0 else 0
            if k == 0:
                continue
            idx = rng.integers(0, n, size=k)
            if not self.homogeneous:
                c_here = np.asarray(self.mech.jumps[j].intensity(pos[idx]), dtype=float)
                idx = idx[rng.random(k) < c_here / self.jump_sup[j]]
            if idx.size:
                add = np.repeat(pos[idx], self.jump_counts[j])
                pos = np.concatenate([pos, add])
                src = np.concatenate([src, np.repeat(src[idx], self.jump_counts[j])])
        return pos, src


class _SkeletonEngine:
    """Steps the branching particle diffusion under the w-transformed motion."""

    def __init__(self, offspring: OffspringLaw, motion: Motion, w: MartingaleFunction,
                 params: SimParams):
        self.law = offspring
        self.motion = motion
        self.w = w
        self.dt = params.dt
        self.q_sup = offspring.q_sup()
        self.p_candidate = 1.0 - math.exp(-self.q_sup * params.dt) if self.q_sup > 0 else 0.0
        self.constant_w = w.is_constant()
        self.homogeneous = offspring.mech.homogeneous and self.constant_w
        if not self.constant_w:
            grid = motion.domain.grid
            self._grad_grid = motion.grid_gradient(np.asarray(w(grid), dtype=float))
        self.kin = _Kinematics(motion, params.dt,
                               extra_drift=None if self.constant_w else self._extra_drift)

    def _extra_drift(self, pos: np.ndarray):
        if self.constant_w:
            return None
        if self.w.w.has_gradient:
            grad = np.asarray(self.w.gradient(pos), dtype=float)
        else:
            grad = np.interp(pos, self.motion.domain.grid, self._grad_grid)
        return np.asarray(self.motion.diffusion(pos), dtype=float) * grad \
            / np.asarray(self.w(pos), dtype=float)

    def step(self, pos, ids, births, next_id: int, t_new: float,
             rng: np.random.Generator, log: Optional[list]):
        """Move then branch by thinning.  Returns updated arrays and branch sites.

        ``branch_draws`` in the return value lists (site, offspring_count) for
        every accepted branch event, for the dressed construction to graft
        branch-point immigrants on.
        """
        n = pos.size
        branch_draws: list[tuple[float, int]] = []
        if n == 0:
            return pos, ids, births, next_id, branch_draws
        noise = rng.standard_normal(n)
        pos, alive = self.kin.move(pos, noise)
        if alive is not None:
            pos, ids, births = pos[alive], ids[alive], births[alive]
            n = pos.size
            if n == 0:
                return pos, ids, births, next_id, branch_draws
        if self.p_candidate == 0.0:
            return pos, ids, births, next_id, branch_draws
        u = rng.random(n)
        cand = np.flatnonzero(u < self.p_candidate)
        if cand.size:
            if self.homogeneous:
                acc = cand
            else:
                q_here = np.asarray(self.law.q(pos[cand]), dtype=float)
                acc = cand[rng.random(cand.size) < q_here / self.q_sup]
            if acc.size:
                counts = self.law.sample_counts(pos[acc], rng)
                keep = np.ones(n, dtype=bool)
                keep[acc] = False
                new_pos = [pos[keep]]
                new_ids = [ids[keep]]
                new_births = [births[keep]]
                for i, k in zip(acc, counts):
                    k = int(k)
                    branch_draws.append((float(pos[i]), k))
                    if log is not None:
                        log.append(BranchEvent(time=t_new, site=float(pos[i]),
                                               parent_id=int(ids[i]), offspring_count=k))
                    new_pos.append(np.full(k, pos[i]))
                    new_ids.append(np.arange(next_id, next_id + k, dtype=np.int64))
                    new_births.append(np.full(k, t_new))
                    next_id += k
                pos = np.concatenate(new_pos)
                ids = np.concatenate(new_ids)
                births = np.concatenate(new_births)
        return pos, ids, births, next_id, branch_draws


# ---------------------------------------------------------------------------
# operations


def thin_jump(x: float, u: float, w: MartingaleFunction, rng: np.random.Generator) -> int:
    """Poisson mark of a mass-u jump at x: k ~ Poisson(w(x) u).

    Callers route k = 0 to the kept small-jump stream, k = 1 to discontinuous
    immigration and k >= 2 to branch-type contributions.
    """
    if not u > 0:
        raise PreconditionError("jump size must be positive")
    lam = float(np.asarray(w(x))) * u
    return int(rng.poisson(lam)) if lam > 0 else 0


def sample_initial_skeleton(mu: AtomicMeasure, w: MartingaleFunction,
                            rng: np.random.Generator) -> np.ndarray:
    """Positions of the initial Poisson field: count ~ Poisson(w(x) m) per atom of mu."""
    out = []
    for mass, x in mu:
        lam = float(np.asarray(w(x))) * mass
        k = int(rng.poisson(lam)) if lam > 0 else 0
        if k:
            out.append(np.full(k, x))
    return np.concatenate(out) if out else np.empty(0)


def _snapshot_steps(times: Sequence[float], dt: float, n_steps: int) -> dict[int, float]:
    mapping: dict[int, float] = {}
    for t in times:
        idx = int(round(t / dt))
        idx = min(max(idx, 0), n_steps)
        mapping.setdefault(idx, t)
    return mapping


def _resolve_T(T, params: SimParams) -> float:
    return params.T if T is None else float(T)


def simulate_superprocess(mech: BranchingMechanism, motion: Motion, mu: AtomicMeasure,
                          T: float | None, params: SimParams, rng: np.random.Generator,
                          snapshot_times: Sequence[float] | None = None):
    """Mass-particle approximation of the (P, psi)-superprocess from mu.

    Returns a list of (time, AtomicMeasure) snapshots (always including 0 and T).
    """
    T = _resolve_T(T, params)
    n_steps = int(round(T / params.dt))
    times = sorted(set([0.0, T] + list(snapshot_times or [])))
    snaps = _snapshot_steps(times, params.dt, n_steps)
    eng = _SuperEngine(mech, motion, params)

    pos = np.concatenate([np.full(mass_to_count(m, params.delta), x) for m, x in mu]) \
        if len(mu) else np.empty(0)
    src = np.zeros(pos.size, dtype=np.int64)

    out = []
    if 0 in snaps:
        out.append((snaps[0], AtomicMeasure(np.full(pos.size, params.delta), pos.copy())))
    for step_i in range(1, n_steps + 1):
        pos, src = eng.step(pos, src, rng)
        if pos.size > params.population_ceiling:
            raise GrowthError(f"population {pos.size} exceeded ceiling at step {step_i}")
        if step_i in snaps:
            out.append((snaps[step_i], AtomicMeasure(np.full(pos.size, params.delta), pos.copy())))
    return out


@dataclass
class SkeletonTrajectory:
    snapshots: list  # (time, positions array, ids array)
    event_log: list

    def particles_at(self, t: float) -> tuple[float, np.ndarray]:
        for time, pos, _ids in self.snapshots:
            if abs(time - t) < 1e-9:
                return time, pos
        raise KeyError(f"no skeleton snapshot at t={t}")


def simulate_skeleton(offspring: OffspringLaw, motion: Motion, w: MartingaleFunction,
                      init: np.ndarray, T: float | None, params: SimParams,
                      rng: np.random.Generator,
                      snapshot_times: Sequence[float] | None = None) -> SkeletonTrajectory:
    """Branching particle diffusion under the w-transformed motion.

    ``init`` is an array of initial positions (e.g. from
    :func:`sample_initial_skeleton`).
    """
    T = _resolve_T(T, params)
    n_steps = int(round(T / params.dt))
    times = sorted(set([0.0, T] + list(snapshot_times or [])))
    snaps = _snapshot_steps(times, params.dt, n_steps)
    eng = _SkeletonEngine(offspring, motion, w, params)

    pos = np.asarray(init, dtype=float).copy()
    ids = np.arange(pos.size, dtype=np.int64)
    births = np.zeros(pos.size)
    next_id = pos.size
    log: list = []
    log_sink = log if params.log_events else None

    snapshots = []
    if 0 in snaps:
        snapshots.append((snaps[0], pos.copy(), ids.copy()))
    t = 0.0
    for step_i in range(1, n_steps + 1):
        t = step_i * params.dt
        pos, ids, births, next_id, _ = eng.step(pos, ids, births, next_id, t, rng, log_sink)
        if pos.size > params.population_ceiling:
            raise GrowthError(f"skeleton population {pos.size} exceeded ceiling")
        if step_i in snaps:
            snapshots.append((snaps[step_i], pos.copy(), ids.copy()))
    return SkeletonTrajectory(snapshots=snapshots, event_log=log)


def simulate_dressed(mech: BranchingMechanism, w: MartingaleFunction, motion: Motion,
                     mu: AtomicMeasure, T: float | None, params: SimParams,
                     rng: np.random.Generator,
                     offspring: OffspringLaw | None = None,
                     snapshot_times: Sequence[float] | None = None) -> list[DressedState]:
    """Dressed skeleton (Lambda, Z): tilted superprocess plus Poissonian immigration.

    Construction: an independent tilted copy from mu; a skeleton started from
    a Poisson(w mu) field; along every alive skeleton particle, discontinuous
    immigrants at rate sum_j c_j u_j e^{-w u_j} and continuous immigrants at
    rate 2 beta / epsilon (each starting a tilted superprocess from mass
    epsilon at the particle's site); at each branch event an extra immigrant
    of mass drawn from eta.  Lambda is the superposition of the tilted copy
    and every immigrant state.
    """
    T = _resolve_T(T, params)
    if offspring is None:
        from .mechanism import build_offspring_law
        offspring = build_offspring_law(mech, w)
    tilted = tilt(mech, w)
    n_steps = int(round(T / params.dt))
    times = sorted(set([0.0, T] + list(snapshot_times or [])))
    snaps = _snapshot_steps(times, params.dt, n_steps)

    sup_eng = _SuperEngine(tilted, motion, params)
    skel_eng = _SkeletonEngine(offspring, motion, w, params)
    grid = motion.domain.grid

    # immigration rate data (suprema for thinning in the spatially varying case)
    beta_grid = np.asarray(mech.beta(grid), dtype=float)
    cont_rate_sup = 2.0 * float(np.max(beta_grid)) / params.epsilon
    eps_count = mass_to_count(params.epsilon, params.delta)
    disc_sizes = mech.jump_sizes()
    w_grid_vals = np.asarray(w(grid), dtype=float)
    disc_rate_sup = []
    for atom, u_j in zip(mech.jumps, disc_sizes):
        c_grid = np.asarray(atom.intensity(grid), dtype=float)
        disc_rate_sup.append(float(np.max(c_grid * u_j * np.exp(-w_grid_vals * u_j))))
    disc_rate_total = float(sum(disc_rate_sup))
    disc_counts = [mass_to_count(u_j, params.delta) for u_j in disc_sizes]
    homog = mech.homogeneous and w.is_constant()
    if homog and disc_sizes.size:
        x0 = grid[:1]
        wgt = np.array([float(np.asarray(atom.intensity(x0))[0]) * u_j
                        * math.exp(-float(np.asarray(w(x0))[0]) * u_j)
                        for atom, u_j in zip(mech.jumps, disc_sizes)])
        disc_atom_cdf = np.cumsum(wgt / wgt.sum())
    cont_rate_dt = cont_rate_sup * params.dt

    def disc_rate_at(x):
        out = 0.0
        wx = float(np.asarray(w(x)))
        for atom, u_j in zip(mech.jumps, disc_sizes):
            out += float(np.asarray(atom.intensity(x))) * u_j * math.exp(-wx * u_j)
        return out

    # initial configuration
    pos_sup = np.concatenate([np.full(mass_to_count(m, params.delta), x) for m, x in mu]) \
        if len(mu) else np.empty(0)
    src_sup = np.zeros(pos_sup.size, dtype=np.int64)   # 0 marks the X* component
    pos_sk = sample_initial_skeleton(mu, w, rng)
    ids_sk = np.arange(pos_sk.size, dtype=np.int64)
    births_sk = np.zeros(pos_sk.size)
    next_skel_id = pos_sk.size
    next_source = 1
    log: list = []
    log_sink = log if params.log_events else None
    spawn_sites: list[float] = []
    spawn_counts: list[int] = []
    spawn_sources: list[int] = []

    def launch(t, site, count, kind, mass, source_particle):
        nonlocal next_source
        spawn_sites.append(site)
        spawn_counts.append(count)
        spawn_sources.append(next_source)
        next_source += 1
        if log_sink is not None:
            log_sink.append(ImmigrationEvent(time=t, kind=kind, site=float(site),
                                             initial_mass=float(mass),
                                             source_particle=int(source_particle)))

    def snapshot(t):
        lam = AtomicMeasure(np.full(pos_sup.size, params.delta), pos_sup.copy())
        z = tuple(SkeletonParticle(id=int(i), parent_id=-1, position=float(x),
                                   birth_time=float(b))
                  for i, x, b in zip(ids_sk, pos_sk, births_sk))
        return DressedState(time=t, Lambda=lam, Z=z, event_log=tuple(log),
                            sources=src_sup.copy(), immigrants_launched=next_source - 1)

    out = []
    if 0 in snaps:
        out.append(snapshot(snaps[0]))

    for step_i in range(1, n_steps + 1):
        t = step_i * params.dt
        # 1. all superprocess-type mass (X* and prior immigrants)
        pos_sup, src_sup = sup_eng.step(pos_sup, src_sup, rng)
        # 2. skeleton motion and branching
        pos_sk, ids_sk, births_sk, next_skel_id, branches = skel_eng.step(
            pos_sk, ids_sk, births_sk, next_skel_id, t, rng, log_sink)
        # 3. branch-point immigration from this step's branch events
        for site, k in branches:
            y = offspring.sample_branch_mass(site, k, rng)
            if y > 0:
                launch(t, site, mass_to_count(y, params.delta), BRANCH_POINT, y, -1)
        n_sk = pos_sk.size
        if n_sk:
            # 4. discontinuous immigration along the skeleton (thinned)
            if disc_rate_total > 0:
                k_cand = int(rng.poisson(n_sk * disc_rate_total * params.dt))
                for _ in range(k_cand):
                    i = int(rng.integers(0, n_sk))
                    x_i = float(pos_sk[i])
                    if homog:
                        j = int(np.searchsorted(disc_atom_cdf, rng.random()))
                    else:
                        if rng.random() >= disc_rate_at(x_i) / disc_rate_total:
                            continue
                        wgt = np.array([float(np.asarray(atom.intensity(x_i))) * u_j
                                        * math.exp(-float(np.asarray(w(x_i))) * u_j)
                                        for atom, u_j in zip(mech.jumps, disc_sizes)])
                        j = int(np.searchsorted(np.cumsum(wgt / wgt.sum()), rng.random()))
                    launch(t, x_i, disc_counts[j], DISCONTINUOUS, float(disc_sizes[j]),
                           int(ids_sk[i]))
            # 5. continuous immigration (excursion surrogate)
            if cont_rate_dt > 0:
                if homog:
                    k_cont = int(rng.poisson(n_sk * cont_rate_dt))
                    for _ in range(k_cont):
                        i = int(rng.integers(0, n_sk))
                        launch(t, float(pos_sk[i]), eps_count, CONTINUOUS,
                               params.epsilon, int(ids_sk[i]))
                else:
                    lam = 2.0 * np.asarray(mech.beta(pos_sk), dtype=float) \
                        / params.epsilon * params.dt
                    counts = rng.poisson(lam)
                    for i in np.flatnonzero(counts):
                        for _ in range(int(counts[i])):
                            launch(t, float(pos_sk[i]), eps_count, CONTINUOUS,
                                   params.epsilon, int(ids_sk[i]))
        if spawn_sites:
            pos_sup = np.concatenate([pos_sup, np.repeat(spawn_sites, spawn_counts)])
            src_sup = np.concatenate([src_sup, np.repeat(spawn_sources, spawn_counts)])
            spawn_sites.clear()
            spawn_counts.clear()
            spawn_sources.clear()
        if pos_sup.size + pos_sk.size > params.population_ceiling:
            raise GrowthError(f"dressed population {pos_sup.size + pos_sk.size} "
                              f"exceeded ceiling at step {step_i}")
        if step_i in snaps:
            out.append(snapshot(snaps[step_i]))
    return out


# ---------------------------------------------------------------------------
# replicate campaigns: reduced statistics over per-replicate Philox streams


@dataclass(frozen=True)
class SuperSnapshot:
    time: float
    masses: np.ndarray
    positions: np.ndarray


@dataclass(frozen=True)
class DressedSnapshot:
    time: float
    lam_masses: np.ndarray
    lam_positions: np.ndarray
    z_positions: np.ndarray
    xstar_mass: float
    immigrant_count: int


@dataclass(frozen=True)
class SkeletonSnapshot:
    time: float
    positions: np.ndarray


@dataclass(frozen=True)
class CampaignTask:
    """Everything one worker needs to simulate a block of replicates."""

    kind: str  # superprocess | dressed | skeleton
    mech: BranchingMechanism
    motion: Motion
    mu: AtomicMeasure
    params: SimParams
    T: float
    times: tuple[float, ...]
    reducer: Callable
    w: Optional[MartingaleFunction] = None
    offspring: Optional[OffspringLaw] = None
    init_skeleton_poisson: bool = True


def _run_one(task: CampaignTask, index: int) -> dict:
    rng = replicate_rng(task.params.rng_seed, index)
    result: dict = {}
    if task.kind == "superprocess":
        snaps = simulate_superprocess(task.mech, task.motion, task.mu, task.T,
                                      task.params, rng, snapshot_times=task.times)
        for t, measure in snaps:
            result[t] = task.reducer(SuperSnapshot(t, measure.masses, measure.positions))
    elif task.kind == "dressed":
        states = simulate_dressed(task.mech, task.w, task.motion, task.mu, task.T,
                                  task.params, rng, offspring=task.offspring,
                                  snapshot_times=task.times)
        for st in states:
            z_pos = np.array([p.position for p in st.Z])
            xstar = float(st.Lambda.masses[st.sources == 0].sum()) if len(st.Lambda) else 0.0
            snap = DressedSnapshot(st.time, st.Lambda.masses, st.Lambda.positions,
                                   z_pos, xstar_mass=xstar,
                                   immigrant_count=st.immigrants_launched)
            result[st.time] = task.reducer(snap)
    elif task.kind == "skeleton":
        if task.init_skeleton_poisson:
            init = sample_initial_skeleton(task.mu, task.w, rng)
        else:
            init = task.mu.positions.copy()
        traj = simulate_skeleton(task.offspring, task.motion, task.w, init, task.T,
                                 task.params, rng, snapshot_times=task.times)
        for t, pos, _ids in traj.snapshots:
            result[t] = task.reducer(SkeletonSnapshot(t, pos))
    else:
        raise PreconditionError(f"unknown campaign kind {task.kind!r}")
    return result


def _run_chunk(task: CampaignTask, indices: Sequence[int]) -> list[dict]:
    return [_run_one(task, i) for i in indices]


def run_campaign(task: CampaignTask, replicates: int, jobs: int = 1) -> dict:
    """Simulate ``replicates`` independent replicates and gather reduced values.

    Returns {time: {name: np.ndarray over replicates}}.  The reduction is
    a plain ordered concatenation, so the output is independent of ``jobs``.
    """
    if replicates < 1:
        raise PreconditionError("need at least one replicate")
    indices = list(range(replicates))
    if jobs <= 1 or replicates < 4:
        rows = _run_chunk(task, indices)
    else:
        chunk = max(1, replicates // (jobs * 4))
        blocks = [indices[i:i + chunk] for i in range(0, replicates, chunk)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, [task] * len(blocks), blocks))
        rows = [r for part in parts for r in part]
    out: dict = {}
    for t in rows[0]:
        names = rows[0][t].keys()
        out[t] = {name: np.array([row[t][name] for row in rows]) for name in names}
    return out


# ---------------------------------------------------------------------------
# export: event CSV and the compact binary snapshot format


def event_rows(events: Iterable, replicate: int) -> list[tuple]:
    """Flatten an event log into (replicate, time, kind, site, mass) rows."""
    rows = []
    for ev in events:
        if isinstance(ev, ImmigrationEvent):
            rows.append((replicate, ev.time, ev.kind, ev.site, ev.initial_mass))
        elif isinstance(ev, BranchEvent):
            rows.append((replicate, ev.time, "branch", ev.site, float(ev.offspring_count)))
        else:
            raise PreconditionError(f"unknown event type {type(ev)!r}")
    return rows


def write_events_csv(rows: Iterable[tuple], fh) -> None:
    fh.write("replicate,time,kind,site,mass\n")
    for rep, t, kind, site, mass in rows:
        fh.write(f"{rep},{t:.17g},{kind},{site:.17g},{mass:.17g}\n")


def write_snapshot_bin(rows: Iterable[tuple], fh) -> None:
    """Binary snapshot: magic 'SKSIM1', little-endian u64 count, then per row
    five little-endian float64: replicate, time, kind code, site, mass."""
    rows = list(rows)
    fh.write(SNAPSHOT_MAGIC)
    fh.write(struct.pack("<Q", len(rows)))
    for rep, t, kind, site, mass in rows:
        code = _KIND_CODES.get(kind, float(len(_KIND_CODES))) if isinstance(kind, str) else float(kind)
        fh.write(struct.pack("<5d", float(rep), float(t), code, float(site), float(mass)))


def read_snapshot_bin(fh) -> list[tuple]:
    magic = fh.read(len(SNAPSHOT_MAGIC))
    if magic != SNAPSHOT_MAGIC:
        raise PreconditionError(f"bad snapshot magic {magic!r}")
    (count,) = struct.unpack("<Q", fh.read(8))
    names = {v: k for k, v in _KIND_CODES.items()}
    out = []
    for _ in range(count):
        rep, t, code, site, mass = struct.unpack("<5d", fh.read(40))
        out.append((int(rep), t, names.get(code, str(code)), site, mass))
    return out
