"""Underlying diffusion: Euler-Maruyama stepping, h-transform, discrete generator.

Two domain modes: ``killed-interval`` (the literal model: paths die on exit)
and ``torus`` (conservative wrap-around motion, which makes a constant
martingale function exactly valid).  Positions are scalars; the dimension
field exists for forward compatibility but every operation here is 1-d.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .exceptions import DomainError, ModelError, PreconditionError
from .families import SpatialFn, certify

KILLED = "killed-interval"
TORUS = "torus"


@dataclass(frozen=True)
class DomainSpec:
    """Spatial domain: interval with killing, or circle of the same circumference."""

    mode: str
    bounds: tuple[float, float]
    grid_nodes: int

    def __post_init__(self):
        if self.mode not in (KILLED, TORUS):
            raise ModelError(f"domain mode must be '{KILLED}' or '{TORUS}', got {self.mode!r}")
        l, r = self.bounds
        if not l < r:
            raise ModelError(f"domain bounds must satisfy l < r, got {self.bounds}")
        if self.grid_nodes < 3:
            raise ModelError("grid_nodes must be at least 3")

    @property
    def length(self) -> float:
        return self.bounds[1] - self.bounds[0]

    @property
    def spacing(self) -> float:
        if self.mode == TORUS:
            return self.length / self.grid_nodes
        return self.length / (self.grid_nodes + 1)

    @property
    def grid(self) -> np.ndarray:
        l, _ = self.bounds
        h = self.spacing
        if self.mode == TORUS:
            return l + h * np.arange(self.grid_nodes)
        # interior nodes; the Dirichlet-zero ghost values sit at both endpoints
        return l + h * (1 + np.arange(self.grid_nodes))

    def contains(self, x) -> np.ndarray:
        l, r = self.bounds
        x = np.asarray(x, dtype=float)
        if self.mode == TORUS:
            return np.ones_like(x, dtype=bool)
        return (x > l) & (x < r)

    def wrap(self, x):
        """Map positions into the fundamental interval (torus mode only)."""
        l, _ = self.bounds
        return l + np.mod(np.asarray(x, dtype=float) - l, self.length)


@dataclass(frozen=True)
class Motion:
    """Diffusion with drift ``b`` and diffusion coefficient ``a`` (so sigma = sqrt(a))."""

    drift: SpatialFn
    diffusion: SpatialFn
    domain: DomainSpec
    dimension: int = 1

    def __post_init__(self):
        if self.dimension != 1:
            raise ModelError("only 1-d motion is implemented")
        grid = self.domain.grid
        a = np.asarray(certify(self.diffusion, grid)(grid))
        if np.any(a < 0):
            raise ModelError("diffusion coefficient a(x) must be non-negative on the grid")
        certify(self.drift, grid)

    def sigma(self, x):
        return np.sqrt(np.asarray(self.diffusion(x), dtype=float))

    def require_in_domain(self, x):
        if not np.all(self.domain.contains(x)):
            raise DomainError(f"position outside domain {self.domain.bounds}")

    # ------------------------------------------------------------------
    # vectorised kinematics used by the particle engine

    def move(self, positions: np.ndarray, dt: float, noise: np.ndarray,
             extra_drift: Optional[np.ndarray] = None):
        """One Euler-Maruyama step for an array of positions.

        Returns (new_positions, alive_mask); on the torus the mask is all
        True, in killed mode positions that left the interval keep their
        pre-step value and are flagged dead.
        """
        b = np.asarray(self.drift(positions), dtype=float)
        if extra_drift is not None:
            b = b + extra_drift
        prop = positions + b * dt + self.sigma(positions) * np.sqrt(dt) * noise
        if self.domain.mode == TORUS:
            return self.domain.wrap(prop), np.ones(prop.shape, dtype=bool)
        alive = self.domain.contains(prop)
        return np.where(alive, prop, positions), alive

    def grid_gradient(self, values: np.ndarray) -> np.ndarray:
        """Second-order gradient of grid values; one-sided at killed boundaries."""
        h = self.domain.spacing
        if self.domain.mode == TORUS:
            return (np.roll(values, -1) - np.roll(values, 1)) / (2.0 * h)
        return np.gradient(values, h, edge_order=2)

    def discrete_generator(self, f: np.ndarray) -> np.ndarray:
        """Apply the finite-difference generator (1/2) a f'' + b f' to grid values.

        Central differences throughout; torus wraps periodically, killed mode
        uses Dirichlet-zero ghost values beyond both ends.
        """
        grid = self.domain.grid
        f = np.asarray(f, dtype=float)
        if f.shape != grid.shape:
            raise PreconditionError("f must be defined on all grid nodes")
        h = self.domain.spacing
        if self.domain.mode == TORUS:
            up = np.roll(f, -1)
            dn = np.roll(f, 1)
        else:
            up = np.append(f[1:], 0.0)
            dn = np.append(0.0, f[:-1])
        a = np.asarray(self.diffusion(grid), dtype=float)
        b = np.asarray(self.drift(grid), dtype=float)
        return 0.5 * a * (up - 2.0 * f + dn) / (h * h) + b * (up - dn) / (2.0 * h)

    def generator_matrix(self) -> sp.csr_matrix:
        """Sparse matrix form of :meth:`discrete_generator` (used by the solvers)."""
        grid = self.domain.grid
        n = grid.size
        h = self.domain.spacing
        a = np.asarray(self.diffusion(grid), dtype=float)
        b = np.asarray(self.drift(grid), dtype=float)
        diff = 0.5 * a / (h * h)
        adv = b / (2.0 * h)
        main = -2.0 * diff
        upper = diff[:-1] + adv[:-1]
        lower = diff[1:] - adv[1:]
        mat = sp.diags([lower, main, upper], offsets=[-1, 0, 1], format="lil")
        if self.domain.mode == TORUS:
            mat[0, n - 1] = diff[0] - adv[0]
            mat[n - 1, 0] = diff[n - 1] + adv[n - 1]
        return mat.tocsr()


@dataclass(frozen=True)
class PathState:
    """One simulated path: current position, liveness, and the killing time if any."""

    position: float
    alive: bool = True
    kill_time: Optional[float] = None
    time: float = 0.0


def step(motion: Motion, state: PathState, dt: float, noise: float) -> PathState:
    """Euler-Maruyama update of a single path; kills on exit in killed mode."""
    if not state.alive:
        raise PreconditionError("cannot step a killed path")
    if not dt > 0:
        raise PreconditionError("dt must be positive")
    pos, alive = motion.move(np.atleast_1d(np.float64(state.position)), dt,
                             np.atleast_1d(np.float64(noise)))
    t = state.time + dt
    if bool(alive[0]):
        return PathState(position=float(pos[0]), alive=True, time=t)
    return PathState(position=state.position, alive=False, kill_time=t, time=t)


def htransform_drift(motion: Motion, w, x):
    """Drift of the w-transformed motion: b(x) + a(x) grad w(x) / w(x).

    Uses the closed-form gradient when the martingale function carries one;
    otherwise falls back to grid central differences (one-sided at killed
    boundaries) interpolated to ``x``.
    """
    x = np.asarray(x, dtype=float)
    motion.require_in_domain(x)
    if w.w.has_gradient:
        grad = np.asarray(w.gradient(x), dtype=float)
    else:
        grid = motion.domain.grid
        grad_grid = motion.grid_gradient(np.asarray(w(grid), dtype=float))
        grad = np.interp(x, grid, grad_grid)
    out = np.asarray(motion.drift(x), dtype=float) + np.asarray(motion.diffusion(x), dtype=float) * grad / np.asarray(w(x), dtype=float)
    return float(out) if np.ndim(out) == 0 else out


def step_htransformed(motion: Motion, w, state: PathState, dt: float, noise: float) -> PathState:
    """As :func:`step` but with the h-transformed drift."""
    if not state.alive:
        raise PreconditionError("cannot step a killed path")
    if not dt > 0:
        raise PreconditionError("dt must be positive")
    x = np.atleast_1d(np.float64(state.position))
    extra = np.asarray(motion.diffusion(x)) * _wgrad(motion, w, x) / np.asarray(w(x))
    pos, alive = motion.move(x, dt, np.atleast_1d(np.float64(noise)), extra_drift=extra)
    t = state.time + dt
    if bool(alive[0]):
        return PathState(position=float(pos[0]), alive=True, time=t)
    return PathState(position=state.position, alive=False, kill_time=t, time=t)


def _wgrad(motion: Motion, w, x):
    if w.w.has_gradient:
        return np.asarray(w.gradient(x), dtype=float)
    grid = motion.domain.grid
    grad_grid = motion.grid_gradient(np.asarray(w(grid), dtype=float))
    return np.interp(x, grid, grad_grid)
