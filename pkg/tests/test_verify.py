"""Estimators, the randomized PIT, and the statistical controls that keep the
test battery honest (a suite that cannot fail is rejected here)."""

import json

import numpy as np
import pytest
from scipy import stats

from sksim import engine as E
from sksim import families as F
from sksim import verify as V
from sksim.exceptions import PreconditionError


def rng_for(i=0):
    return E.replicate_rng(1234, i)


# ---------------------------------------------------------------------------
# mc_laplace / LaplaceEstimate


def test_mc_laplace_zero_functionals_give_one():
    measures = [E.AtomicMeasure.from_atoms([(0.5, 1.0)]) for _ in range(10)]
    est = V.mc_laplace(measures, f=None, h=None)
    assert est.point_estimate == 1.0
    assert est.std_error == 0.0
    assert est.replicates == 10


def test_mc_laplace_large_f_bounded_by_extinction_proxy():
    measures = [E.AtomicMeasure.from_atoms([(0.5, 1.0)]),
                E.AtomicMeasure.empty()]
    est = V.mc_laplace(measures, f=F.constant(50.0))
    # only the empty measure contributes ~1; the other ~e^{-25}
    assert est.point_estimate == pytest.approx(0.5, abs=1e-8)


def test_mc_laplace_with_skeleton_term():
    pairs = [(E.AtomicMeasure.from_atoms([(1.0, 0.0)]), np.array([0.0, 0.0]))]
    pairs.append((E.AtomicMeasure.from_atoms([(1.0, 0.0)]), np.array([0.0])))
    est = V.mc_laplace(pairs, f=F.constant(0.1), h=F.constant(0.2))
    expected = np.mean([np.exp(-0.1 - 0.4), np.exp(-0.1 - 0.2)])
    assert est.point_estimate == pytest.approx(expected, rel=1e-12)


def test_mc_laplace_empty_rejected():
    with pytest.raises(PreconditionError):
        V.mc_laplace([], f=None)
    with pytest.raises(PreconditionError):
        V.LaplaceEstimate.from_values(np.array([1.0]))


def test_std_error_scaling():
    # doubling the sample shrinks the standard error like 1/sqrt(2) within 20%
    rng = rng_for()
    vals = rng.random(20_000)
    a = V.LaplaceEstimate.from_values(vals[:10_000])
    b = V.LaplaceEstimate.from_values(vals)
    ratio = b.std_error / a.std_error
    assert abs(ratio - 1.0 / np.sqrt(2.0)) < 0.2 * (1.0 / np.sqrt(2.0))


# ---------------------------------------------------------------------------
# randomized PIT and the Poissonization report


def test_randomized_pit_degenerate_lambda_is_uniform():
    rng = rng_for(1)
    lams = np.zeros(4000)
    counts = np.zeros(4000, dtype=int)
    u = V.randomized_pit(lams, counts, rng)
    assert stats.kstest(u, "uniform").pvalue > 0.01
    assert np.all((u >= 0) & (u <= 1))


def test_randomized_pit_exact_poisson_uniform():
    rng = rng_for(2)
    lams = rng.uniform(0.2, 3.0, size=5000)
    counts = rng.poisson(lams)
    u = V.randomized_pit(lams, counts, rng)
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_poissonization_controls():
    """Positive control passes at high rate; 1.5x negative control has power."""
    rng = rng_for(3)
    m, trials = 2000, 40
    passes, rejects = 0, 0
    for _ in range(trials):
        lams = rng.uniform(0.3, 1.5, size=(m, 3))
        good = rng.poisson(lams)
        bad = V.synthetic_poisson_counts(lams, 1.5, rng)
        if V.poissonization_report(lams, good, rng).passed:
            passes += 1
        if not V.poissonization_report(lams, bad, rng).passed:
            rejects += 1
    assert passes >= int(0.9 * trials)
    assert rejects >= int(0.9 * trials)


def test_poissonization_requires_enough_replicates(quad_w):
    snap = E.DressedSnapshot(1.0, np.array([0.01]), np.array([1.0]),
                             np.array([1.0]), 0.01, 0)
    with pytest.raises(PreconditionError):
        V.poissonization_test([snap] * 10, quad_w, [(0.0, 1.0)], rng_for())
    with pytest.raises(PreconditionError):
        V.poissonization_test([snap] * 600, quad_w, [(1.0, 1.0)], rng_for())


def test_poissonization_test_on_direct_samples(quad_w):
    """End-to-end positive control through the snapshot-based interface."""
    rng = rng_for(4)
    w_star = float(np.asarray(quad_w(0.0)))
    snaps = []
    for _ in range(1500):
        n_atoms = 1 + int(rng.integers(0, 4))
        pos = rng.uniform(0.0, 2 * np.pi, size=n_atoms)
        masses = rng.uniform(0.05, 0.5, size=n_atoms)
        lam_tot = w_star * masses
        z = []
        for p, lm in zip(pos, lam_tot):
            z += [p] * int(rng.poisson(lm))
        snaps.append(E.DressedSnapshot(1.0, masses, pos, np.array(z), 0.0, 0))
    regions = [(0.0, 2.0), (2.0, 4.0), (4.0, 2 * np.pi)]
    report = V.poissonization_test(snaps, quad_w, regions, rng)
    assert report.passed


# ---------------------------------------------------------------------------
# martingale and moment reports


def test_martingale_report_pass_and_fail():
    rng = rng_for(5)
    exact = 0.4
    good = {0.5: exact + 0.001 * rng.standard_normal(4000),
            1.0: exact - 0.001 * rng.standard_normal(4000)}
    rep = V.martingale_report(good, exact, tol_disc=0.01)
    assert rep.passed
    drifted = {1.0: exact + 0.08 + 0.001 * rng.standard_normal(4000)}
    rep_bad = V.martingale_report(drifted, exact, tol_disc=0.01)
    assert not rep_bad.passed
    assert abs(rep_bad.z_score) > 3


def test_skeleton_moment_report():
    rng = rng_for(6)
    n0, q, m, T = 100, 1.0, 2.0, 1.0
    target = n0 * np.exp(q * (m - 1) * T)
    counts = rng.poisson(target, size=2000)
    assert V.skeleton_moment_report(counts, n0, q, m, T).passed
    assert not V.skeleton_moment_report(counts + 30, n0, q, m, T).passed


# ---------------------------------------------------------------------------
# identity report plumbing and serialization


def test_identity_report_threshold_logic():
    vals = np.full(100, 0.5)
    vals[::2] += 0.01
    rep = V.identity_report(vals, rhs=0.505, name="t", tol_disc=0.02)
    assert rep.passed
    rep2 = V.identity_report(vals, rhs=0.55, name="t", tol_disc=0.02)
    assert not rep2.passed
    assert rep2.thresholds["bound"] == pytest.approx(3 * rep2.thresholds["std_error"] + 0.02)


def test_report_json_roundtrip(tmp_path):
    rep = V.TestReport(name="x", statistic=0.1, passed=True, p_value=0.5,
                       thresholds={"alpha": 0.01}, config_fingerprint="abcd",
                       details={"k": [1, 2]})
    line = rep.to_json_line()
    back = json.loads(line)
    assert back["name"] == "x" and back["passed"] is True
    path = tmp_path / "reports.jsonl"
    with open(path, "w") as fh:
        V.write_reports_jsonl([rep, rep], fh)
    assert len(path.read_text().splitlines()) == 2
    table = V.summary_table([rep])
    assert "PASS" in table and "x" in table


def test_standard_reducer_names(quad_w):
    f = F.constant(0.1)
    snap = E.SuperSnapshot(1.0, np.array([0.5, 0.5]), np.array([1.0, 2.0]))
    out = V.StandardReducer(laplace=(("lap", f, None),))(snap)
    assert out["total_mass"] == pytest.approx(1.0)
    assert out["lap"] == pytest.approx(np.exp(-0.1))
    dsnap = E.DressedSnapshot(1.0, np.array([0.5]), np.array([1.0]),
                              np.array([1.0, 1.5]), 0.5, 3)
    out2 = V.StandardReducer(laplace=(("lap", f, F.constant(0.2)),),
                             regions=((0.0, 2.0),), w=quad_w)(dsnap)
    assert out2["z_count"] == 2.0
    assert out2["lap"] == pytest.approx(np.exp(-0.05 - 0.4))
    assert out2["z_count_B0"] == 2.0
    ssnap = E.SkeletonSnapshot(1.0, np.array([0.3, 0.4, 0.5]))
    out3 = V.StandardReducer(laplace=(("lap", None, F.constant(0.1)),))(ssnap)
    assert out3["count"] == 3.0
    assert out3["lap"] == pytest.approx(np.exp(-0.3))
