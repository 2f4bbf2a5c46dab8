"""Shared fixtures: the two homogeneous torus tiers and a killed-interval tier."""

import numpy as np
import pytest

from sksim import families as F
from sksim import mechanism as M
from sksim import motion as Mo

TWO_PI = 2.0 * np.pi


@pytest.fixture(scope="session")
def torus_domain():
    return Mo.DomainSpec(mode="torus", bounds=(0.0, TWO_PI), grid_nodes=201)


@pytest.fixture(scope="session")
def torus_motion(torus_domain):
    return Mo.Motion(drift=F.constant(0.0), diffusion=F.constant(1.0),
                     domain=torus_domain)


@pytest.fixture(scope="session")
def quad_mech():
    """Quadratic tier: psi(z) = -z + z^2, w* = 1, dyadic skeleton."""
    return M.BranchingMechanism.from_constants(1.0, 1.0)


@pytest.fixture(scope="session")
def quad_w(quad_mech, torus_motion):
    return M.constant_root_w(quad_mech, torus_motion)


@pytest.fixture(scope="session")
def quad_law(quad_mech, quad_w):
    return M.build_offspring_law(quad_mech, quad_w)


@pytest.fixture(scope="session")
def atom_mech():
    """Single-atom tier: psi(z) = -z + 2(e^{-z} - 1 + z), supercritical, beta = 0."""
    return M.BranchingMechanism.from_constants(1.0, 0.0, jumps=[(1.0, 2.0)])


@pytest.fixture(scope="session")
def atom_w(atom_mech, torus_motion):
    return M.constant_root_w(atom_mech, torus_motion)


@pytest.fixture(scope="session")
def atom_law(atom_mech, atom_w):
    return M.build_offspring_law(atom_mech, atom_w)


@pytest.fixture(scope="session")
def killed_sine_tier():
    """Killed interval with w = sin(pi x) on (0, 1), valid for a linear mechanism.

    With b = 0 and a constant, L sin(pi x) = -(a pi^2 / 2) sin(pi x), so the
    linear mechanism psi(z) = -(a pi^2 / 2) z satisfies the generator
    equation exactly; w vanishes at the killing boundary as a genuine
    extinction-type martingale function must.  The residual tolerance covers
    the O(h^2) central-difference error of the sine profile.
    """
    a0 = 1.0
    alpha = 0.5 * a0 * np.pi**2
    domain = Mo.DomainSpec(mode="killed-interval", bounds=(0.0, 1.0), grid_nodes=201)
    motion = Mo.Motion(drift=F.constant(0.0), diffusion=F.constant(a0), domain=domain)
    mech = M.BranchingMechanism.from_constants(alpha, 0.0)
    w = M.validate_w(mech, motion, F.sine(1.0, np.pi, tag="w=sin"), tol=2e-4)
    return {"a0": a0, "alpha": alpha, "domain": domain, "motion": motion,
            "mech": mech, "w": w}
