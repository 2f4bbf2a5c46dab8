"""Branching mechanism, martingale function, tilted mechanism and skeleton laws.

The jump measure is restricted to a finite atomic form sum_j c_j(x) delta_{u_j},
which keeps the mechanism, its exponential tilt, the skeleton branch rate and
the offspring/branch-mass laws exactly computable without quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import families
from .exceptions import (
    InvalidMartingaleFunction,
    ModelError,
    PreconditionError,
)
from .families import SpatialFn, certify

_Q_FLOOR = -1e-12  # branch rate must not be negative beyond rounding noise


@dataclass(frozen=True)
class JumpAtom:
    """One atom of the jump measure: mass jumps of fixed ``size`` with spatial weight ``intensity``."""

    size: float
    intensity: SpatialFn

    def __post_init__(self):
        if not self.size > 0:
            raise ModelError(f"jump atom size must be strictly positive, got {self.size}")


@dataclass(frozen=True)
class BranchingMechanism:
    """Local branching mechanism: linear drift, quadratic part, finite atomic jumps.

    ``homogeneous`` is set when every coefficient comes from the constant
    family, which unlocks the scalar root finder and fast simulation paths.
    """

    alpha: SpatialFn
    beta: SpatialFn
    jumps: tuple[JumpAtom, ...] = ()
    homogeneous: bool = False

    @classmethod
    def from_constants(cls, alpha: float, beta: float,
                       jumps: Sequence[tuple[float, float]] = ()) -> "BranchingMechanism":
        """Spatially constant mechanism; ``jumps`` is a list of (size, weight) pairs."""
        atoms = tuple(JumpAtom(u, families.constant(c, tag=f"c(u={u})")) for u, c in jumps)
        return cls(alpha=families.constant(alpha, tag="alpha"),
                   beta=families.constant(beta, tag="beta"),
                   jumps=atoms, homogeneous=True)

    def jump_sizes(self) -> np.ndarray:
        return np.array([atom.size for atom in self.jumps])

    def jump_intensities(self, x) -> list:
        """c_j(x) for each atom, evaluated vectorised."""
        x = np.asarray(x, dtype=float)
        return [atom.intensity(x) for atom in self.jumps]

    def validate_on_grid(self, grid: np.ndarray) -> "BranchingMechanism":
        """Certify all coefficients on ``grid`` and check sign constraints."""
        alpha = certify(self.alpha, grid)
        beta = certify(self.beta, grid)
        if np.any(beta(grid) < 0):
            raise ModelError("beta must be non-negative on the grid")
        atoms = []
        for atom in self.jumps:
            inten = certify(atom.intensity, grid)
            if np.any(inten(grid) < 0):
                raise ModelError(f"jump intensity for u={atom.size} is negative on the grid")
            atoms.append(JumpAtom(atom.size, inten))
        # finite atom lists automatically give sup_x sum_j c_j (u ^ u^2) < inf;
        # certify() has already asserted finiteness of each c_j
        return BranchingMechanism(alpha, beta, tuple(atoms), homogeneous=self.homogeneous)


def eval_psi(mech: BranchingMechanism, x, z):
    """psi(x, z) = -alpha z + beta z^2 + sum_j c_j (e^{-z u_j} - 1 + z u_j)."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise PreconditionError("psi is defined for z >= 0")
    out = -mech.alpha(x) * z + mech.beta(x) * z * z
    for atom in mech.jumps:
        zu = z * atom.size
        out = out + atom.intensity(x) * (np.exp(-zu) - 1.0 + zu)
    return float(out) if np.ndim(out) == 0 else out


def eval_psi_prime(mech: BranchingMechanism, x, z):
    """d/dz psi(x, z) = -alpha + 2 beta z + sum_j c_j u_j (1 - e^{-z u_j})."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise PreconditionError("psi' is defined for z >= 0")
    out = -mech.alpha(x) + 2.0 * mech.beta(x) * z
    for atom in mech.jumps:
        out = out + atom.intensity(x) * atom.size * (1.0 - np.exp(-z * atom.size))
    return float(out) if np.ndim(out) == 0 else out


def effective_linear_rate(mech: BranchingMechanism, x):
    """alpha(x) - sum_j c_j(x) u_j: the mean drift left once the jump
    compensator is pulled into the linear term (used by the particle engine)."""
    x = np.asarray(x, dtype=float)
    out = mech.alpha(x)
    for atom in mech.jumps:
        out = out - atom.intensity(x) * atom.size
    return out


def find_w_star(mech: BranchingMechanism) -> float:
    """Unique positive root of the scalar mechanism, by bracketing and bisection.

    Only meaningful for spatially constant coefficients with conservative
    motion, where the martingale-function condition degenerates to psi(w*) = 0.
    """
    if not mech.homogeneous:
        raise PreconditionError("find_w_star requires a spatially homogeneous mechanism")
    x0 = np.array(0.0)

    def f(z):
        return eval_psi(mech, x0, z)

    if eval_psi_prime(mech, x0, 0.0) >= 0:
        raise ModelError("mechanism is not supercritical: psi'(0) >= 0, no positive root")
    lo = 1e-12
    if f(lo) >= 0:
        raise ModelError("psi does not dip negative near 0; no positive root found")
    hi = 1.0
    for _ in range(200):
        if f(hi) > 0:
            break
        hi *= 2.0
    else:
        raise ModelError("no sign change located: mechanism appears critical or subcritical")
    # psi is convex with psi(0) = 0, so the positive root is unique: bisect
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class MartingaleFunction:
    """Validated martingale function: strictly positive, bounded, small generator residual.

    ``grid`` is the certification grid; ``residual_sup`` the sup over it of
    the generator-equation defect |L w - psi(., w)|.
    """

    w: SpatialFn
    residual_sup: float
    lower_bound: float
    grid: np.ndarray

    def __call__(self, x):
        return self.w(x)

    def gradient(self, x):
        return self.w.gradient(x)

    @property
    def bound(self) -> float:
        return self.w.bound

    def is_constant(self) -> bool:
        return families.is_constant(self.w)


def validate_w(mech: BranchingMechanism, motion, w_candidate: SpatialFn,
               tol: float = 1e-6) -> MartingaleFunction:
    """Check the generator equation for ``w_candidate`` on the motion grid.

    The residual is the grid sup of |L w - psi(., w)| computed with the
    motion module's discrete generator.  Success returns a certified
    ``MartingaleFunction``; failure raises with the residual profile attached.
    """
    grid = motion.domain.grid
    w_grid = np.asarray(w_candidate(grid), dtype=float)
    if w_grid.shape != grid.shape:
        w_grid = np.broadcast_to(w_grid, grid.shape).copy()
    if np.any(w_grid <= 0):
        raise PreconditionError("candidate w must be strictly positive on the grid")
    residual = motion.discrete_generator(w_grid) - eval_psi(mech, grid, w_grid)
    residual_sup = float(np.max(np.abs(residual)))
    if residual_sup > tol:
        raise InvalidMartingaleFunction(
            f"generator residual sup {residual_sup:.3e} exceeds tolerance {tol:.3e}",
            residual=residual, residual_sup=residual_sup)
    w = certify(w_candidate, grid)
    return MartingaleFunction(w=w, residual_sup=residual_sup,
                              lower_bound=float(np.min(w_grid)), grid=grid)


def constant_root_w(mech: BranchingMechanism, motion, tol: float = 1e-6) -> MartingaleFunction:
    """Martingale function for the conservative-motion tier: w identically w*."""
    w_star = find_w_star(mech)
    return validate_w(mech, motion, families.constant(w_star, tag="w*"), tol=tol)


class _TiltedAlpha:
    """alpha*(x) = -psi'(x, w(x)); a class rather than a closure so it pickles."""

    def __init__(self, mech: BranchingMechanism, w: SpatialFn):
        self.mech = mech
        self.w = w

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(-eval_psi_prime(self.mech, x, self.w(x)))


class _TiltedIntensity:
    """c_j*(x) = c_j(x) e^{-w(x) u_j}."""

    def __init__(self, atom: JumpAtom, w: SpatialFn):
        self.atom = atom
        self.w = w

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.atom.intensity(x) * np.exp(-self.w(x) * self.atom.size)


def tilt(mech: BranchingMechanism, w: MartingaleFunction) -> BranchingMechanism:
    """Exponentially tilted mechanism: the branching law of the conditioned process.

    The tilted linear coefficient is -psi'(x, w(x)); the quadratic part is
    unchanged; every jump weight picks up the factor e^{-w(x) u_j}.  Satisfies
    psi_tilted(x, z) = psi(x, z + w(x)) - psi(x, w(x)).
    """
    if not isinstance(w, MartingaleFunction):
        raise PreconditionError("tilt requires a validated MartingaleFunction")
    alpha_star = SpatialFn(_TiltedAlpha(mech, w.w), tag="alpha*")
    atoms = tuple(
        JumpAtom(atom.size, SpatialFn(_TiltedIntensity(atom, w.w), tag=f"c*(u={atom.size})"))
        for atom in mech.jumps)
    return BranchingMechanism(alpha=alpha_star, beta=mech.beta, jumps=atoms,
                              homogeneous=mech.homogeneous and w.is_constant())


@dataclass(frozen=True)
class OffspringLaw:
    """Skeleton branch rate q and offspring / branch-mass laws.

    The exact identity w q = beta w^2 + sum_j c_j (1 - e^{-w u_j} - w u_j e^{-w u_j})
    guarantees the untruncated offspring law sums to one, so ``tail_mass`` is
    one minus the truncated sum.  Branch-mass law eta(x, n) is supported on
    {0} union {u_j}: the quadratic part contributes the zero-mass point at
    n = 2 only.
    """

    mech: BranchingMechanism
    w: MartingaleFunction
    n_max: int

    def q(self, x):
        x = np.asarray(x, dtype=float)
        wx = self.w(x)
        return eval_psi_prime(self.mech, x, wx) - eval_psi(self.mech, x, wx) / wx

    def q_sup(self) -> float:
        return float(np.max(self.q(self.w.grid)))

    def _weights(self, xs: np.ndarray):
        """Unnormalised component weights at 1-d positions ``xs``.

        Returns (beta_w2, per_atom) with per_atom[j] of shape (len(xs), n_max+1):
        c_j (w u_j)^n / n! e^{-w u_j}, zeroed for n < 2.
        """
        wx = np.asarray(self.w(xs), dtype=float)
        beta_w2 = np.asarray(self.mech.beta(xs), dtype=float) * wx * wx
        ns = np.arange(self.n_max + 1)
        lg = np.array([math.lgamma(n + 1) for n in ns])
        per_atom = []
        for atom in self.mech.jumps:
            wu = wx * atom.size
            cj = np.asarray(atom.intensity(xs), dtype=float)
            with np.errstate(divide="ignore"):
                logwu = np.log(np.maximum(wu, 1e-300))
            term = cj[:, None] * np.exp(np.outer(logwu, ns) - lg[None, :] - wu[:, None])
            term[:, :2] = 0.0
            per_atom.append(term)
        return beta_w2, per_atom

    def p_table(self, x) -> np.ndarray:
        """Offspring probabilities p(x, n) for n = 0..n_max; rows per position.

        Positions where q(x) = 0 (linear mechanisms) get an all-zero row: no
        branch event can ever be sampled there.
        """
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        xs = np.atleast_1d(x)
        wq = np.asarray(self.w(xs), dtype=float) * np.asarray(self.q(xs), dtype=float)
        beta_w2, per_atom = self._weights(xs)
        tab = np.zeros((xs.size, self.n_max + 1))
        tab[:, 2] += beta_w2
        for term in per_atom:
            tab += term
        with np.errstate(invalid="ignore", divide="ignore"):
            tab = np.where(wq[:, None] > 1e-14, tab / np.maximum(wq, 1e-300)[:, None], 0.0)
        return tab[0] if scalar else tab

    def p(self, x, n: int):
        if not 2 <= n <= self.n_max:
            return np.zeros(np.shape(x)) if np.ndim(x) else 0.0
        return self.p_table(x)[..., n]

    def tail_mass(self, x):
        return np.clip(1.0 - self.p_table(x).sum(axis=-1), 0.0, None)

    def eta(self, x: float, n: int):
        """Branch-mass law at a single position: (mass values, probabilities)."""
        if n < 2 or n > self.n_max:
            raise PreconditionError(f"eta is defined for 2 <= n <= n_max, got n={n}")
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        beta_w2, per_atom = self._weights(xs)
        values = np.array([0.0] + [atom.size for atom in self.mech.jumps])
        weights = np.empty(values.size)
        weights[0] = beta_w2[0] if n == 2 else 0.0
        for j, term in enumerate(per_atom):
            weights[j + 1] = term[0, n]
        total = weights.sum()
        if total <= 0:
            raise ModelError(f"eta(x={x}, n={n}) has no support: p_n vanishes here")
        return values, weights / total

    def mean_branch_mass(self, x: float, n: int) -> float:
        values, probs = self.eta(x, n)
        return float(values @ probs)

    def mean_offspring(self, x) -> float:
        """m(x) = sum_n n p(x, n) over the truncated law."""
        tab = self.p_table(np.asarray(x, dtype=float))
        return float(tab @ np.arange(self.n_max + 1))

    def sample_counts(self, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Offspring counts for branch events at positions ``xs`` (inverse CDF)."""
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        tab = self.p_table(xs)
        row_sums = tab.sum(axis=1, keepdims=True)
        if np.any(row_sums <= 0):
            raise ModelError("offspring sampling attempted where q(x) = 0")
        cdf = np.cumsum(tab / row_sums, axis=1)
        u = rng.random(xs.size)
        return (u[:, None] > cdf).sum(axis=1).astype(np.int64)

    def sample_branch_mass(self, x: float, n: int, rng: np.random.Generator) -> float:
        values, probs = self.eta(x, n)
        return float(rng.choice(values, p=probs))


def build_offspring_law(mech: BranchingMechanism, w: MartingaleFunction,
                        n_max: int = 8, tail_tol: float = 1e-12) -> OffspringLaw:
    """Construct the skeleton branching data, extending n_max until the
    truncated offspring mass is below ``tail_tol`` at every grid node."""
    if n_max < 2:
        raise PreconditionError("n_max must be at least 2")
    grid = w.grid
    probe = OffspringLaw(mech=mech, w=w, n_max=n_max)
    q_grid = np.asarray(probe.q(grid))
    if np.any(q_grid < _Q_FLOOR):
        raise ModelError(f"branch rate q dips to {float(np.min(q_grid)):.3e} < 0; "
                         "mechanism/martingale data inconsistent")
    active = q_grid > 1e-14
    while n_max <= 400:
        law = OffspringLaw(mech=mech, w=w, n_max=n_max)
        if not np.any(active):
            return law
        tails = law.tail_mass(grid)
        if float(np.max(tails[active])) <= tail_tol:
            return law
        n_max += 4
    raise ModelError("offspring tail does not shrink below tail_tol by n_max=400")
