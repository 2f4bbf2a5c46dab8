"""Deterministic solvers for the Laplace-exponent equations.

All four fields (u, u-star, the terminal-value field fT and the skeleton
field v / hT) are integrated forward in time with Strang splitting:
Crank-Nicolson half-steps for the discrete generator (tridiagonal, solved
with a factorisation reused across steps) around an explicit midpoint step
for the reaction.  Terminal-value problems are produced by reversing the
corresponding initial-value solve, never by backward stepping.

The skeleton field is integrated in the transformed variable
g = w e^{-v}, whose reaction psi*(u* - g) - psi*(u*) is evaluated through
the base mechanism as psi(w + u* - g) - psi(w + u*) so that every
mechanism evaluation stays at non-negative arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .exceptions import BlowUpError, GridMismatchError, PreconditionError, SchemeError
from .families import SpatialFn
from .mechanism import BranchingMechanism, MartingaleFunction, eval_psi, tilt
from .motion import Motion

DataLike = Union["TestFunction", SpatialFn, np.ndarray, float]

DEFAULT_CEILING = 1e6


@dataclass(frozen=True)
class TestFunction:
    """Non-negative bounded test function with a description tag."""

    fn: SpatialFn
    tag: str = ""

    def __call__(self, x):
        return self.fn(x)


@dataclass(frozen=True)
class SolverField:
    """A space-time field: values[i, j] at times[i], grid[j]."""

    grid: np.ndarray
    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def time_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 + 1e-9 * abs(t):
            raise GridMismatchError(f"time {t} is not on the solver time mesh")
        return idx

    def at_time(self, t: float) -> np.ndarray:
        return self.values[self.time_index(t)]

    def initial(self) -> np.ndarray:
        return self.values[0]

    def final(self) -> np.ndarray:
        return self.values[-1]

    def inner(self, t: float, atoms, period: float | None = None) -> float:
        """<field(., t), mu> for an atomic measure (mass, position) iterable."""
        vals = self.at_time(t)
        out = 0.0
        for mass, pos in atoms:
            out += mass * float(np.interp(pos, self.grid, vals, period=period))
        return out

    def to_csv(self, path, tag: str | None = None):
        tag = tag if tag is not None else self.meta.get("equation", "field")
        with open(path, "w") as fh:
            fh.write("t,x,value,field\n")
            for i, t in enumerate(self.times):
                for j, x in enumerate(self.grid):
                    fh.write(f"{t:.17g},{x:.17g},{self.values[i, j]:.17g},{tag}\n")


def reverse_time(fld: SolverField, equation: str) -> SolverField:
    """Terminal-value field from an initial-value solve: F(x, t) = U(x, T - t)."""
    meta = dict(fld.meta)
    meta["equation"] = equation
    return replace(fld, values=fld.values[::-1].copy(), meta=meta)


def _grid_data(data: DataLike, grid: np.ndarray) -> np.ndarray:
    if isinstance(data, TestFunction):
        data = data.fn
    if isinstance(data, SpatialFn):
        vals = np.asarray(data(grid), dtype=float)
    elif np.ndim(data) == 0:
        vals = np.full(grid.shape, float(data))
    else:
        vals = np.asarray(data, dtype=float)
        if vals.shape != grid.shape:
            raise GridMismatchError("grid data shape does not match the domain grid")
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise PreconditionError("initial/terminal data must be finite and non-negative")
    return vals.copy()


def _time_mesh(T: float, dt: float):
    if not T > 0 or not dt > 0:
        raise PreconditionError("T and dt must be positive")
    n = max(1, int(round(T / dt)))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        dt = T / n
    return n, dt, np.linspace(0.0, T, n + 1)


class _CrankNicolson:
    """Half-step propagator (I - tau L)^{-1} (I + tau L) with tau = dt/4."""

    def __init__(self, motion: Motion, dt: float):
        L = motion.generator_matrix()
        n = L.shape[0]
        eye = sp.identity(n, format="csc")
        tau = dt / 4.0
        self._plus = (eye + tau * L).tocsr()
        self._lu = splu((eye - tau * L).tocsc())

    def half_step(self, u: np.ndarray) -> np.ndarray:
        return self._lu.solve(self._plus @ u)


def _march(motion: Motion, data: np.ndarray, T: float, dt: float, reaction,
           ceiling: float, floor_tol: float = 1e-8):
    """Strang loop shared by the u- and g-solvers.

    ``reaction(values, i)`` performs the explicit midpoint reaction step of
    length dt from time index i and returns the updated values.
    """
    n, dt, times = _time_mesh(T, dt)
    cn = _CrankNicolson(motion, dt)
    out = np.empty((n + 1, data.size))
    out[0] = data
    u = data.copy()
    for i in range(n):
        u = cn.half_step(u)
        u = reaction(u, i, dt)
        u = cn.half_step(u)
        lo = float(np.min(u))
        if lo < -floor_tol:
            raise SchemeError(f"solution dipped to {lo:.3e} at t={times[i + 1]:.6g}")
        np.clip(u, 0.0, None, out=u)
        if float(np.max(u)) > ceiling:
            raise BlowUpError(f"solution exceeded ceiling {ceiling:.3g} at t={times[i + 1]:.6g}")
        out[i + 1] = u
    return times, out


def solve_u(mech: BranchingMechanism, motion: Motion, f: DataLike, T: float,
            dt: float, ceiling: float = DEFAULT_CEILING) -> SolverField:
    """Log-Laplace field of the superprocess: du/dt = L u - psi(x, u), u(., 0) = f."""
    grid = motion.domain.grid
    data = _grid_data(f, grid)

    def reaction(u, i, step):
        k1 = -np.asarray(eval_psi(mech, grid, u))
        mid = np.clip(u + step * k1, 0.0, None)
        k2 = -np.asarray(eval_psi(mech, grid, mid))
        return u + 0.5 * step * (k1 + k2)

    times, values = _march(motion, data, T, dt, reaction, ceiling)
    return SolverField(grid=grid, times=times, values=values,
                       meta={"equation": "u", "T": T, "dt": dt})


def solve_u_star(mech: BranchingMechanism, w: MartingaleFunction, motion: Motion,
                 f: DataLike, T: float, dt: float,
                 ceiling: float = DEFAULT_CEILING) -> SolverField:
    """Same as :func:`solve_u` with the tilted mechanism."""
    fld = solve_u(tilt(mech, w), motion, f, T, dt, ceiling=ceiling)
    meta = dict(fld.meta)
    meta["equation"] = "u*"
    return replace(fld, meta=meta)


def solve_fT(mech: BranchingMechanism, w: MartingaleFunction, motion: Motion,
             f: DataLike, T: float, dt: float,
             ceiling: float = DEFAULT_CEILING) -> SolverField:
    """Terminal-value field fT(x, t) = u*_f(x, T - t) with fT(., T) = f."""
    return reverse_time(solve_u_star(mech, w, motion, f, T, dt, ceiling=ceiling), "fT")


def solve_v(mech: BranchingMechanism, w: MartingaleFunction, motion: Motion,
            f: DataLike, h: DataLike, T: float, dt: float,
            u_star: SolverField | None = None,
            ceiling: float = DEFAULT_CEILING) -> SolverField:
    """Skeleton Laplace field v with v(., 0) = h, integrated via g = w e^{-v}.

    ``u_star`` may pass a precomputed field from :func:`solve_u_star` for the
    same (f, T, dt); it is solved here otherwise.
    """
    grid = motion.domain.grid
    w_grid = np.asarray(w(grid), dtype=float)
    h_grid = _grid_data(h, grid)
    if u_star is None:
        u_star = solve_u_star(mech, w, motion, f, T, dt, ceiling=ceiling)
    n, dt_eff, times = _time_mesh(T, dt)
    if u_star.values.shape[0] != n + 1:
        raise GridMismatchError("precomputed u* field has a different time mesh")

    ustar_vals = u_star.values

    def reaction(g, i, step):
        us0 = ustar_vals[i]
        us1 = ustar_vals[i + 1]
        k1 = np.asarray(eval_psi(mech, grid, np.clip(w_grid + us0 - g, 0.0, None))) \
            - np.asarray(eval_psi(mech, grid, w_grid + us0))
        mid = np.clip(g + step * k1, 0.0, None)
        k2 = np.asarray(eval_psi(mech, grid, np.clip(w_grid + us1 - mid, 0.0, None))) \
            - np.asarray(eval_psi(mech, grid, w_grid + us1))
        return g + 0.5 * step * (k1 + k2)

    g0 = w_grid * np.exp(-h_grid)
    times, g_vals = _march(motion, g0, T, dt, reaction, ceiling=np.inf)

    over = g_vals - w_grid[None, :]
    worst = float(np.max(over))
    if worst > 1e-7 * max(1.0, float(np.max(w_grid))):
        raise SchemeError(f"g exceeded w by {worst:.3e}: v would go negative")
    g_vals = np.minimum(g_vals, w_grid[None, :])
    gmin = float(np.min(g_vals))
    if gmin <= 0.0:
        raise SchemeError(f"g reached {gmin:.3e}: v blew up")
    v_vals = -np.log(g_vals / w_grid[None, :])
    return SolverField(grid=grid, times=times, values=v_vals,
                       meta={"equation": "v", "T": T, "dt": dt})


def solve_hT(mech: BranchingMechanism, w: MartingaleFunction, motion: Motion,
             f: DataLike, h: DataLike, T: float, dt: float,
             u_star: SolverField | None = None,
             ceiling: float = DEFAULT_CEILING) -> SolverField:
    """Terminal-value skeleton field hT(x, t) = v_{f,h}(x, T - t) with hT(., T) = h."""
    return reverse_time(
        solve_v(mech, w, motion, f, h, T, dt, u_star=u_star, ceiling=ceiling), "hT")


def kappa(fT: SolverField, hT: SolverField, w: MartingaleFunction) -> SolverField:
    """Combined field kappa = fT + w (1 - e^{-hT}) on the shared mesh."""
    if fT.grid.shape != hT.grid.shape or not np.allclose(fT.grid, hT.grid):
        raise GridMismatchError("fT and hT live on different grids")
    if fT.times.shape != hT.times.shape or not np.allclose(fT.times, hT.times):
        raise GridMismatchError("fT and hT live on different time meshes")
    w_grid = np.asarray(w(fT.grid), dtype=float)
    vals = fT.values + w_grid[None, :] * (1.0 - np.exp(-hT.values))
    return SolverField(grid=fT.grid, times=fT.times, values=vals,
                       meta={"equation": "kappa", "T": fT.meta.get("T"),
                             "dt": fT.meta.get("dt")})


# ---------------------------------------------------------------------------
# scalar tier: spatially homogeneous configurations reduce to an ODE


def scalar_flow(psi_scalar, c: float, times, rtol: float = 1e-10):
    """Integrate u' = -psi(u), u(0) = c, returning values at ``times``.

    Classic fixed-step RK4 with global step halving until two successive
    refinements agree to ``rtol``; independent of the PDE machinery so it can
    serve as an oracle for it.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0):
        raise PreconditionError("times must be non-negative")
    T = float(times.max()) if times.size else 0.0

    def rhs(u):
        return -psi_scalar(max(u, 0.0))

    def run(n_steps):
        if T == 0.0:
            return np.full(times.shape, c)
        dt = T / n_steps
        u = float(c)
        ts = [0.0]
        us = [u]
        for _ in range(n_steps):
            k1 = rhs(u)
            k2 = rhs(u + 0.5 * dt * k1)
            k3 = rhs(u + 0.5 * dt * k2)
            k4 = rhs(u + dt * k3)
            u = u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            ts.append(ts[-1] + dt)
            us.append(u)
        return np.interp(times, ts, us)

    n = 64
    prev = run(n)
    for _ in range(14):
        n *= 2
        cur = run(n)
        if np.max(np.abs(cur - prev)) <= rtol * (1.0 + np.max(np.abs(cur))):
            return cur if cur.size > 1 else float(cur[0])
        prev = cur
    return prev if prev.size > 1 else float(prev[0])


def scalar_u(mech: BranchingMechanism, c: float, times, rtol: float = 1e-10):
    """Scalar tier for a homogeneous mechanism: u(t) solving u' = -psi(u), u(0) = c."""
    if not mech.homogeneous:
        raise PreconditionError("scalar tier requires a homogeneous mechanism")
    x0 = np.array(0.0)
    return scalar_flow(lambda z: eval_psi(mech, x0, z), c, times, rtol=rtol)


# ---------------------------------------------------------------------------
# Picard iteration on the mild form: an independent discretisation used only
# as a cross-check oracle against the IMEX solver


def picard_u(mech: BranchingMechanism, motion: Motion, f: DataLike, T: float,
             n_time: int = 24, iterations: int = 3) -> SolverField:
    """Mild-form fixed point u = P_t f - int_0^t P_s psi(., u(., t-s)) ds.

    The semigroup is the dense matrix exponential of the discrete generator
    and the time integral a trapezoid rule, so none of the IMEX machinery is
    reused.  Coarse by construction; meant for tolerance-level cross-checks.
    """
    grid = motion.domain.grid
    data = _grid_data(f, grid)
    L = motion.generator_matrix().toarray()
    dt = T / n_time
    import scipy.linalg

    E = scipy.linalg.expm(L * dt)
    # P[j] applies the semigroup at time j*dt
    P = [np.eye(grid.size)]
    for _ in range(n_time):
        P.append(E @ P[-1])

    times = np.linspace(0.0, T, n_time + 1)
    u = np.array([P[j] @ data for j in range(n_time + 1)])
    base = u.copy()
    for _ in range(iterations):
        psi_of_u = np.array([np.asarray(eval_psi(mech, grid, np.clip(u[j], 0.0, None)))
                             for j in range(n_time + 1)])
        new = base.copy()
        for j in range(1, n_time + 1):
            terms = np.array([P[s] @ psi_of_u[j - s] for s in range(j + 1)])
            weights = np.full(j + 1, dt)
            weights[0] = weights[-1] = 0.5 * dt
            new[j] = base[j] - weights @ terms
        u = new
    return SolverField(grid=grid, times=times, values=np.clip(u, 0.0, None),
                       meta={"equation": "u-picard", "T": T, "dt": dt})
