"""Integrator, decrease checks, contraction-rate validation, entrainment."""

import math

import numpy as np
import pytest

import monocert as mc
from conftest import load_family, load_system, linear_system
from monocert.lyap import build_lyapunov
from monocert.sim import (BatchTrajectories, ContractionReport,
                          DecreaseReport, EntrainReport, SimulationError,
                          Trajectory, entrainment_test,
                          estimate_contraction_rate, integrate,
                          integrate_batch, verify_decrease)


def _scalar(body: str, lo="-inf", hi="inf", extra="") -> mc.SystemDef:
    lob = "(" if lo == "-inf" else "["
    hib = ")" if hi == "inf" else "]"
    src = f"""
    system s {{
        states x in {lob}{lo}, {hi}{hib}
        dx = {body}
        {extra}
    }}
    """
    sys = mc.parse_system(src)
    sys.validate()
    return sys


# ---------------------------------------------------------------------------
# integrator accuracy
# ---------------------------------------------------------------------------

def test_rk4_fourth_order():
    """Halving the step must shrink the error by about 2^4."""
    decay = _scalar("-x", extra="equilibrium (0)")
    errs = []
    for dt in (0.1, 0.05):
        tr = integrate(decay, [1.0], 1.0, dt=dt)
        errs.append(abs(tr.final[0] - math.exp(-1.0)))
    ratio = errs[0] / errs[1]
    assert 8.0 < ratio < 32.0


def test_exponential_decay_accuracy():
    decay = _scalar("-x", extra="equilibrium (0)")
    tr = integrate(decay, [1.0], 1.0, dt=1e-3)
    assert abs(tr.final[0] - math.exp(-1.0)) < 1e-12
    assert tr.max_step_error < 1e-9


def test_time_varying_drive():
    # dx = cos(t) from 0 integrates to sin(t)
    drive = _scalar("0*x + cos(t)", extra="period 6.283185307179586")
    assert drive.time_varying
    tr = integrate(drive, [0.0], 2.0, dt=1e-3)
    assert abs(tr.final[0] - math.sin(2.0)) < 1e-12


def test_final_time_hit_exactly():
    decay = _scalar("-x", extra="equilibrium (0)")
    tr = integrate(decay, [1.0], 1.0, dt=0.3)  # 3 full steps + remainder
    np.testing.assert_allclose(tr.t, [0.0, 0.3, 0.6, 0.9, 1.0], atol=1e-12)


def test_save_every_thins_but_keeps_final(ex1):
    tr = integrate(ex1, [1.0, 1.0], 1.0, dt=1e-2, save_every=10)
    assert len(tr.t) == 11
    assert tr.t[-1] == pytest.approx(1.0, abs=1e-12)
    assert tr.x.shape == (11, 2)


def test_batch_matches_single_bitwise(ex1):
    """Lockstep batch integration is the same arithmetic as one-at-a-time."""
    X0 = np.array([[1.0, 2.0], [0.5, 0.25], [3.0, 3.0]])
    batch = integrate_batch(ex1, X0, 1.0, dt=1e-2)
    assert isinstance(batch, BatchTrajectories)
    assert batch.n_trajectories == 3
    for j in range(3):
        single = integrate(ex1, X0[j], 1.0, dt=1e-2)
        assert np.array_equal(batch.trajectory(j).x, single.x)
        assert np.array_equal(batch.t, single.t)


def test_trajectory_to_csv(tmp_path, ex1, ex1_theta):
    V = build_lyapunov(ex1, ex1_theta, "state-sum")
    tr = integrate(ex1, [2.0, 1.0], 0.5, dt=1e-2)
    path = tmp_path / "traj.csv"
    tr.to_csv(path, V=V)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,x1,x2,V"
    assert len(lines) == len(tr.t) + 1
    first = [float(v) for v in lines[1].split(",")]
    assert first[:3] == [0.0, 2.0, 1.0]
    assert first[3] == pytest.approx(V.value([2.0, 1.0]), abs=1e-12)


# ---------------------------------------------------------------------------
# domain and argument guards
# ---------------------------------------------------------------------------

def test_domain_exit_aborts_with_diagnostic():
    runaway = _scalar("0*x + 1", lo="0", hi="1")
    with pytest.raises(SimulationError, match=r"left the domain .*x=.*not clamping"):
        integrate(runaway, [0.5], 2.0, dt=1e-2)


def test_nonfinite_state_aborts():
    blowup = _scalar("x^2")
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(SimulationError, match="non-finite state"):
            integrate(blowup, [1.5], 1.0, dt=1e-3)


def test_bad_timespan_and_step(ex1):
    with pytest.raises(SimulationError, match="t_end must exceed"):
        integrate(ex1, [1.0, 1.0], 0.0)
    with pytest.raises(SimulationError, match="t_end must exceed"):
        integrate(ex1, [1.0, 1.0], 1.0, t0=2.0)
    with pytest.raises(SimulationError, match="dt must be positive"):
        integrate(ex1, [1.0, 1.0], 1.0, dt=0.0)


def test_bad_initial_condition_shape(ex1):
    with pytest.raises(SimulationError, match=r"\(B, 2\)"):
        integrate_batch(ex1, np.zeros((3, 5)), 1.0)


def test_initial_condition_outside_domain(ex1):
    with pytest.raises(SimulationError, match="left the domain"):
        integrate(ex1, [-1.0, 0.5], 1.0)


# ---------------------------------------------------------------------------
# Lyapunov decrease along trajectories
# ---------------------------------------------------------------------------

def test_verify_decrease_certified_system(ex1, ex1_theta):
    V = build_lyapunov(ex1, ex1_theta, "state-sum")
    tr = integrate(ex1, [2.0, 3.0], 20.0, dt=5e-3, save_every=5)
    rep = verify_decrease(V, tr, require_terminal=True)
    assert rep.passed
    assert rep.n_violations == 0
    assert rep.max_violation <= 0.0
    assert rep.first_violation_time is None
    assert rep.terminal_ok is True
    assert rep.terminal <= 1e-6 * rep.initial + 1e-15
    assert rep.initial == pytest.approx(V.value([2.0, 3.0]), abs=1e-12)


def test_verify_decrease_flags_growth():
    grow = linear_system([[1.0]], lo=-5.0, hi=5.0)
    fam = mc.WeightFamily.constant("theta", [1.0])
    V = build_lyapunov(grow, fam, "state-sum")
    tr = integrate(grow, [0.1], 2.0, dt=1e-2)
    rep = verify_decrease(V, tr)
    assert not rep.passed
    assert rep.max_increment > 0.0
    assert rep.n_violations == len(tr.t) - 1
    assert rep.first_violation_time == pytest.approx(tr.t[1], abs=1e-15)
    assert rep.terminal_ok is None
    assert rep.terminal > rep.initial


def test_decrease_report_jsonable(ex1, ex1_theta):
    V = build_lyapunov(ex1, ex1_theta, "state-sum")
    tr = integrate(ex1, [1.0, 1.0], 1.0, dt=1e-2)
    rep = verify_decrease(V, tr)
    obj = rep.to_jsonable()
    assert set(obj) == {"passed", "max_increment", "max_violation",
                        "first_violation_time", "n_violations",
                        "initial", "terminal", "terminal_ok"}
    assert isinstance(rep, DecreaseReport)
    assert len(rep.values) == len(tr.t)


# ---------------------------------------------------------------------------
# contraction-rate validation
# ---------------------------------------------------------------------------

def test_contraction_rate_linear(linear_sym):
    fam = load_family("linear_sym.theta.json")
    rep = estimate_contraction_rate(linear_sym, fam, norm="l1", pairs=4,
                                    t_end=2.0, dt=1e-3, seed=3)
    # identity weights give column sums exactly -1 on both columns
    assert rep.certified_rate == 1.0
    assert rep.passed
    assert rep.ratio_excess <= 1e-6
    assert rep.flow_ratio_excess <= 1e-6
    assert rep.fitted_rate >= 0.99
    assert rep.n_pairs == 4
    assert rep.certificate.passed


def test_contraction_rate_rejects_expansion():
    grow = _scalar("x", lo="-5", hi="5", extra="equilibrium (0)")
    fam = mc.WeightFamily.constant("theta", [1.0])
    rep = estimate_contraction_rate(grow, fam, norm="l1", pairs=3,
                                    t_end=1.0, dt=1e-3,
                                    box=mc.WorkingBox((-1.0,), (1.0,), 11),
                                    seed=5)
    assert not rep.passed
    assert rep.certified_rate == 0.0      # no decay certified, clamped
    # distances grow like e^t, so the unit-ratio bound is exceeded by e - 1
    assert rep.ratio_excess == pytest.approx(math.e - 1.0, rel=1e-6)
    assert rep.fitted_rate == pytest.approx(-1.0, abs=1e-6)


def test_contraction_report_jsonable(linear_sym):
    fam = load_family("linear_sym.theta.json")
    rep = estimate_contraction_rate(linear_sym, fam, norm="l1", pairs=2,
                                    t_end=0.5, dt=1e-2, seed=1)
    assert isinstance(rep, ContractionReport)
    obj = rep.to_jsonable()
    assert obj["certified_rate"] == 1.0
    assert obj["certificate"]["condition"] == "cor3-l1"


# ---------------------------------------------------------------------------
# entrainment
# ---------------------------------------------------------------------------

def test_entrainment_cubic_converges():
    cubic = load_system("entrain_cubic")
    rep = entrainment_test(cubic, [-2.0, 0.0, 2.0], horizon_periods=40,
                           dt=5e-3)
    assert rep.passed
    assert rep.checks == {"pairwise_nonincreasing": True,
                          "geometric_decay": True, "final_mutual": True}
    assert rep.final_spread < 1e-4
    assert rep.spread.shape == (41,)
    assert rep.increments.shape == (40, 3)
    assert rep.period == pytest.approx(2.0 * math.pi, abs=1e-12)


def test_entrainment_zero_field_fails():
    zero = load_system("entrain_zero")
    rep = entrainment_test(zero, [-1.0, 1.0], horizon_periods=6, dt=5e-3)
    assert not rep.passed
    assert rep.checks["pairwise_nonincreasing"] is True
    assert rep.checks["geometric_decay"] is False
    assert rep.checks["final_mutual"] is False
    assert rep.final_spread == 2.0   # nothing ever moves


def test_entrainment_guards(ex1):
    with pytest.raises(SimulationError, match="declared period"):
        entrainment_test(ex1, [[0.0, 0.0], [1.0, 1.0]])
    cubic = load_system("entrain_cubic")
    with pytest.raises(SimulationError, match="at least two"):
        entrainment_test(cubic, [0.5])


def test_entrain_report_jsonable():
    zero = load_system("entrain_zero")
    rep = entrainment_test(zero, [-1.0, 1.0], horizon_periods=4, dt=1e-2)
    assert isinstance(rep, EntrainReport)
    obj = rep.to_jsonable()
    assert set(obj) == {"passed", "checks", "final_spread", "period",
                        "n_periods"}
    assert obj["n_periods"] == 4


# ---------------------------------------------------------------------------
# order preservation: monotone flows keep componentwise order
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name,lo,hi", [
    ("ex1", 0.0, 3.0),
    ("multiagent", -1.5, 1.5),
    ("traffic4", 0.0, 1.0),
])
def test_flow_preserves_partial_order(name, lo, hi):
    """x0 <= y0 componentwise implies x(t) <= y(t) for Kamke-monotone
    fields; checked on 20 sampled ordered pairs per system."""
    sys = load_system(name)
    rng = np.random.default_rng(41)
    X = rng.uniform(lo, hi, size=(20, sys.n))
    Y = np.minimum(X + rng.uniform(0.0, (hi - lo) / 2, size=(20, sys.n)), hi)
    batch = integrate_batch(sys, np.concatenate([X, Y], axis=0), 5.0,
                            dt=5e-3, save_every=10)
    gap = batch.x[:, :20, :] - batch.x[:, 20:, :]
    assert float(np.max(gap)) <= 1e-9


def test_rotation_does_not_preserve_order(rotation):
    """The negative example: a rotation swaps orderings within a quarter
    turn, so the same check must fail."""
    X0 = np.array([[0.0, 0.0], [0.5, 0.5]])
    batch = integrate_batch(rotation, X0, 3.0, dt=1e-2)
    gap = batch.x[:, 0, :] - batch.x[:, 1, :]
    assert float(np.max(gap)) > 0.1
