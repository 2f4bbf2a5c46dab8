"""Mechanism algebra: psi, the tilt, the root, and the skeleton laws."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from sksim import families as F
from sksim import mechanism as M
from sksim.exceptions import InvalidMartingaleFunction, ModelError, PreconditionError

X0 = np.array(0.0)


def psi_scalar(mech):
    return lambda z: M.eval_psi(mech, X0, z)


# ---------------------------------------------------------------------------
# eval_psi / eval_psi_prime


def test_psi_at_zero_is_zero(quad_mech, atom_mech):
    assert M.eval_psi(quad_mech, X0, 0.0) == 0.0
    assert M.eval_psi(atom_mech, X0, 0.0) == 0.0


def test_psi_quadratic_arithmetic(quad_mech):
    # -alpha z + beta z^2 at z = 2: -2 + 4
    assert M.eval_psi(quad_mech, X0, 2.0) == pytest.approx(2.0, abs=1e-15)


def test_psi_root_of_mixed_mechanism_by_bisection_oracle():
    # alpha = beta = 1 with one atom (u=1, c=1): psi(z) = z^2 + e^{-z} - 1
    mech = M.BranchingMechanism.from_constants(1.0, 1.0, jumps=[(1.0, 1.0)])
    root = brentq(psi_scalar(mech), 1e-9, 5.0, xtol=1e-14)
    assert abs(M.eval_psi(mech, X0, root)) < 1e-12
    assert root == pytest.approx(0.7145563847430631, abs=1e-9)
    assert M.find_w_star(mech) == pytest.approx(root, abs=1e-10)


def test_psi_prime_trivial_values(quad_mech):
    assert M.eval_psi_prime(quad_mech, X0, 0.0) == pytest.approx(-1.0)
    assert M.eval_psi_prime(quad_mech, X0, 1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("z", [0.0, 0.3, 1.0, 2.7])
def test_psi_prime_matches_central_difference(atom_mech, z):
    h = 1e-6
    zp, zm = z + h, max(z - h, 0.0)
    fd = (M.eval_psi(atom_mech, X0, zp) - M.eval_psi(atom_mech, X0, zm)) / (zp - zm)
    val = M.eval_psi_prime(atom_mech, X0, z)
    assert abs(val - fd) < 1e-6 * (1.0 + abs(val))


def test_psi_rejects_negative_z(quad_mech):
    with pytest.raises(PreconditionError):
        M.eval_psi(quad_mech, X0, -0.1)


# ---------------------------------------------------------------------------
# find_w_star


def test_w_star_quadratic_families():
    assert M.find_w_star(M.BranchingMechanism.from_constants(1.0, 1.0)) == \
        pytest.approx(1.0, abs=1e-12)
    assert M.find_w_star(M.BranchingMechanism.from_constants(2.0, 1.0)) == \
        pytest.approx(2.0, abs=1e-12)


def test_w_star_single_atom_vs_oracle(atom_mech):
    oracle = brentq(psi_scalar(atom_mech), 1e-9, 10.0, xtol=1e-14)
    assert M.find_w_star(atom_mech) == pytest.approx(oracle, abs=1e-10)


def test_w_star_subcritical_rejected():
    with pytest.raises(ModelError):
        M.find_w_star(M.BranchingMechanism.from_constants(-1.0, 1.0))
    # critical-at-infinity: psi(z) = e^{-z} - 1 < 0 for all z > 0
    with pytest.raises(ModelError):
        M.find_w_star(M.BranchingMechanism.from_constants(1.0, 0.0, jumps=[(1.0, 1.0)]))


# ---------------------------------------------------------------------------
# tilt


def test_tilt_quadratic_closed_form(quad_mech, quad_w):
    tilted = M.tilt(quad_mech, quad_w)
    for z in (0.0, 0.5, 1.0):
        assert M.eval_psi(tilted, X0, z) == pytest.approx(z + z * z, abs=1e-12)
    assert float(np.asarray(tilted.alpha(X0))) == pytest.approx(-1.0, abs=1e-12)


def test_tilt_zero_at_zero(atom_mech, atom_w):
    assert abs(M.eval_psi(M.tilt(atom_mech, atom_w), X0, 0.0)) < 1e-15


def test_tilt_atom_weight_exponential(torus_motion):
    # atom (u=1, c=1) tilted by w = 0.5: c* = e^{-1/2}
    mech = M.BranchingMechanism.from_constants(1.0, 1.0, jumps=[(1.0, 1.0)])
    w = M.MartingaleFunction(w=F.constant(0.5), residual_sup=0.0, lower_bound=0.5,
                             grid=torus_motion.domain.grid)
    tilted = M.tilt(mech, w)
    c_star = float(np.asarray(tilted.jumps[0].intensity(X0)))
    assert c_star == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_tilt_requires_validated_w(quad_mech):
    with pytest.raises(PreconditionError):
        M.tilt(quad_mech, F.constant(1.0))


# ---------------------------------------------------------------------------
# offspring law


def test_dyadic_offspring(quad_law):
    assert float(np.asarray(quad_law.q(X0))) == pytest.approx(1.0, abs=1e-12)
    assert quad_law.p(X0, 2) == pytest.approx(1.0, abs=1e-12)
    values, probs = quad_law.eta(0.0, 2)
    assert values.tolist() == [0.0]
    assert probs.tolist() == [1.0]
    assert quad_law.mean_offspring(0.0) == pytest.approx(2.0, abs=1e-12)


def test_single_atom_offspring_poisson_shape(atom_mech, atom_w, atom_law):
    import math
    w_star = float(np.asarray(atom_w(X0)))
    # p_n proportional to c (w*)^n / n! e^{-w*} for n >= 2, normalised
    ns = np.arange(2, atom_law.n_max + 1)
    raw = 2.0 * w_star**ns / np.array([math.factorial(n) for n in ns]) * np.exp(-w_star)
    expected = raw / raw.sum()
    tab = atom_law.p_table(X0)
    got = tab[2:] / tab[2:].sum()
    np.testing.assert_allclose(got, expected, atol=1e-12)
    # and the truncated p-row itself sums to 1 - tail
    assert tab.sum() + float(atom_law.tail_mass(X0)) == pytest.approx(1.0, abs=1e-10)


def test_branch_mass_law_single_atom(atom_law):
    values, probs = atom_law.eta(0.0, 3)
    # beta = 0, so no zero-mass point has weight; all mass at u = 1
    assert values.tolist() == [0.0, 1.0]
    np.testing.assert_allclose(probs, [0.0, 1.0], atol=1e-15)
    assert atom_law.mean_branch_mass(0.0, 3) == pytest.approx(1.0)


def test_eta_zero_point_only_at_n2():
    mech = M.BranchingMechanism.from_constants(1.0, 1.0, jumps=[(1.0, 1.0)])
    import sksim.motion as Mo
    dom = Mo.DomainSpec(mode="torus", bounds=(0.0, 2 * np.pi), grid_nodes=41)
    mot = Mo.Motion(drift=F.constant(0.0), diffusion=F.constant(1.0), domain=dom)
    w = M.constant_root_w(mech, mot)
    law = M.build_offspring_law(mech, w)
    v2, p2 = law.eta(0.0, 2)
    assert 0.0 in v2 and p2[0] > 0
    v3, p3 = law.eta(0.0, 3)
    assert p3[0] == 0.0
    assert law.mean_branch_mass(0.0, 3) <= max(a.size for a in mech.jumps)


def test_offspring_law_tail_control(atom_mech, atom_w):
    law = M.build_offspring_law(atom_mech, atom_w, n_max=2, tail_tol=1e-12)
    grid = atom_w.grid
    assert float(np.max(law.tail_mass(grid))) <= 1e-12
    assert law.n_max > 2  # auto-extended


def test_build_offspring_law_requires_n_max(quad_mech, quad_w):
    with pytest.raises(PreconditionError):
        M.build_offspring_law(quad_mech, quad_w, n_max=1)


# ---------------------------------------------------------------------------
# validate_w


def test_validate_w_constant_root(quad_mech, torus_motion):
    w = M.constant_root_w(quad_mech, torus_motion)
    assert w.residual_sup <= 1e-10
    assert w.lower_bound == pytest.approx(1.0, abs=1e-12)


def test_validate_w_rejects_scaled_root(quad_mech, torus_motion):
    bad = F.constant(1.5)
    with pytest.raises(InvalidMartingaleFunction) as exc:
        M.validate_w(quad_mech, torus_motion, bad, tol=1e-6)
    # residual equals |psi(1.5)| = |-1.5 + 2.25|
    assert exc.value.residual_sup == pytest.approx(0.75, abs=1e-12)
    assert exc.value.residual.shape == torus_motion.domain.grid.shape


def test_validate_w_zero_mechanism(torus_motion):
    mech = M.BranchingMechanism.from_constants(0.0, 0.0)
    w = M.validate_w(mech, torus_motion, F.constant(2.5), tol=1e-12)
    assert w.residual_sup == 0.0


def test_validate_w_sine_killed(killed_sine_tier):
    w = killed_sine_tier["w"]
    assert w.residual_sup <= 2e-4
    assert w.lower_bound > 0
    # q vanishes identically for a linear mechanism
    law = M.build_offspring_law(killed_sine_tier["mech"], w)
    assert float(np.max(np.abs(law.q(w.grid)))) < 1e-10


def test_validate_w_requires_positive(quad_mech, torus_motion):
    with pytest.raises(PreconditionError):
        M.validate_w(quad_mech, torus_motion, F.affine(0.0, 0.0001))


# ---------------------------------------------------------------------------
# property tests over randomized homogeneous mechanisms

mech_strategy = st.builds(
    lambda alpha, beta, atoms: M.BranchingMechanism.from_constants(
        alpha, beta, jumps=[(u, c) for u, c in atoms]),
    alpha=st.floats(0.3, 2.5),
    beta=st.floats(0.2, 1.5),
    atoms=st.lists(st.tuples(st.floats(0.3, 2.0), st.floats(0.1, 1.5)), max_size=3),
)


@settings(max_examples=40, deadline=None)
@given(mech=mech_strategy, z=st.floats(0.0, 3.0))
def test_tilt_consistency_property(mech, z):
    w_star = M.find_w_star(mech)
    grid = np.linspace(0.0, 1.0, 5)
    w = M.MartingaleFunction(w=F.constant(w_star), residual_sup=0.0,
                             lower_bound=w_star, grid=grid)
    tilted = M.tilt(mech, w)
    lhs = M.eval_psi(tilted, X0, z)
    rhs = M.eval_psi(mech, X0, z + w_star) - M.eval_psi(mech, X0, w_star)
    assert abs(lhs - rhs) < 1e-12
    # alpha* = -psi'(w*)
    assert float(np.asarray(tilted.alpha(X0))) == pytest.approx(
        -M.eval_psi_prime(mech, X0, w_star), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(mech=mech_strategy)
def test_offspring_normalisation_property(mech):
    w_star = M.find_w_star(mech)
    grid = np.linspace(0.0, 1.0, 5)
    w = M.MartingaleFunction(w=F.constant(w_star), residual_sup=0.0,
                             lower_bound=w_star, grid=grid)
    law = M.build_offspring_law(mech, w, tail_tol=1e-13)
    q = float(np.asarray(law.q(X0)))
    assert q >= -1e-12
    total = float(law.p_table(X0).sum()) + float(law.tail_mass(X0))
    assert abs(total - 1.0) < 1e-10
    # untruncated normalisation via the exact identity
    wq = w_star * q
    beta = float(np.asarray(mech.beta(X0)))
    ident = beta * w_star**2
    for atom in mech.jumps:
        c = float(np.asarray(atom.intensity(X0)))
        wu = w_star * atom.size
        ident += c * (1.0 - np.exp(-wu) - wu * np.exp(-wu))
    assert wq == pytest.approx(ident, rel=1e-12, abs=1e-12)
