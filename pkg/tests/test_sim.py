import csv
import io

import numpy as np
import pytest

from gridcert.certify import issue_certificate
from gridcert.equilibrium import solve_equilibrium
from gridcert.network import drop_line, normalize_network, parse_network_native
from gridcert.sim import (
    FaultScenario,
    IntegratorConfig,
    Trajectory,
    fault_on_rhs,
    integrate,
    mechanical_energy,
    post_fault_rhs,
    rhs_fault_on,
    rhs_post_fault,
    run_fault_scenario,
    simulate_post_fault,
    step_halving_error,
    trajectory_to_csv,
    verify_certificate_by_simulation,
    verify_convergence,
)
from gridcert.statespace import build_lure_system

from conftest import (
    PRINTED_P_TOL,
    TWOBUS_MU,
    TWOBUS_RESILIENCY_P,
    random_network,
)


def test_rhs_zero_at_equilibrium(twobus_sys, twobus_eq):
    assert np.array_equal(rhs_post_fault(twobus_sys, twobus_eq, np.zeros(2)),
                          np.zeros(2))


def test_rhs_hand_value(twobus_sys, twobus_eq):
    # at delta = pi/2 with zero velocity: acceleration -a/m (sin pi/2 - sin pi/6)
    x = np.array([np.pi / 3, 0.0])
    assert np.allclose(rhs_post_fault(twobus_sys, twobus_eq, x), [0.0, -1.0])


def test_fault_on_from_equilibrium(twobus_sys, twobus_eq):
    # coupling removed: full injection accelerates the machine, p/m = 1
    xdot = rhs_fault_on(twobus_sys, twobus_eq, (1, 2), np.zeros(2))
    assert np.allclose(xdot, [0.0, 1.0])


def test_load_rows_match_direct_evaluation():
    rng = np.random.default_rng(3)
    net = normalize_network(random_network(3, n_buses=5, n_gen=2))
    sys = build_lure_system(net)
    eq = solve_equilibrium(net)
    idx = {b.id: i for i, b in enumerate(net.buses)}
    for _ in range(10):
        x = rng.normal(0, 0.6, sys.dim)
        xdot = rhs_post_fault(sys, eq, x)
        angles = sys.angle_part(x)
        for b in net.buses:
            if b.kind != "load":
                continue
            i = idx[b.id]
            acc = 0.0
            for e, (k, j) in enumerate(sys.edge_order):
                if b.id not in (k, j):
                    continue
                sign = 1.0 if b.id == k else -1.0
                dkj = sign * (angles[idx[k]] - angles[idx[j]])
                dstar = sign * eq.edge_diffs[e]
                acc += sys.coupling[e] * (np.sin(dkj + dstar) - np.sin(dstar))
            row = 2 * sys.n_gen + (i - sys.n_gen)
            assert xdot[row] == pytest.approx(-acc / b.damping, abs=1e-12)


def test_fault_on_equals_deleted_network_on_zero_diff_states():
    """With the tripped edge's difference at zero (and a zero-difference
    equilibrium) the fault-on dynamics coincides with the line-deleted
    network's post-fault dynamics."""
    text = """
[buses]
1 generator 1.0 1.0 1.0 0
2 generator 1.0 1.5 0.8 0
3 load 1.0 - 0.9 0
[lines]
1 2 1.0
1 3 0.8
2 3 0.6
"""
    net = normalize_network(parse_network_native(text))
    sys = build_lure_system(net)
    eq = solve_equilibrium(net)
    deleted = drop_line(net, (1, 2))
    sys_del = build_lure_system(deleted)
    eq_del = solve_equilibrium(deleted)
    e = sys.edge_order.index((1, 2))
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.normal(0, 0.5, sys.dim)
        x -= sys.C[e] * (sys.C[e] @ x) / (sys.C[e] @ sys.C[e])   # zero the tripped diff
        assert abs(sys.C[e] @ x) < 1e-12
        a = rhs_fault_on(sys, eq, (1, 2), x)
        b = rhs_post_fault(sys_del, eq_del, x)
        assert np.abs(a - b).max() < 1e-12


def test_fault_column_support(ieee118_net):
    from gridcert.network import with_random_dynamics
    net = with_random_dynamics(ieee118_net, seed=7)
    sys = build_lure_system(net)
    eq = solve_equilibrium(net)
    rng = np.random.default_rng(1)
    x = rng.normal(0, 0.05, sys.dim)
    diff = rhs_fault_on(sys, eq, (19, 21), x) - rhs_post_fault(sys, eq, x)
    rows = np.nonzero(diff)[0]
    # both endpoints are generators: only their velocity rows can change
    expected = {sys.n_gen + 18, sys.n_gen + 20}
    assert set(rows) <= expected


# -- integrator --------------------------------------------------------------------


def test_linear_fault_benchmark(twobus_sys, twobus_eq):
    """m x'' = p - d x' has a closed form; RK4 at 1e-3 hits 1e-8 over 1 s."""
    m, d, p = 0.1, 0.15, 0.1
    rhs = lambda x: np.array([x[1], (p - d * x[1]) / m])
    traj = integrate(rhs, np.zeros(2), 1.0)
    lam = d / m
    t = traj.times
    v_exact = (p / d) * (1 - np.exp(-lam * t))
    th_exact = (p / d) * (t - (1 - np.exp(-lam * t)) / lam)
    err = max(np.abs(traj.states[:, 0] - th_exact).max(),
              np.abs(traj.states[:, 1] - v_exact).max())
    assert err <= 1e-8


def test_equilibrium_stationary(threegen_sys, threegen_eq):
    traj = integrate(post_fault_rhs(threegen_sys, threegen_eq),
                     np.zeros(threegen_sys.dim), 1.0)
    assert np.abs(traj.states).max() < 1e-10


def test_fourth_order_step_halving(twobus_sys, twobus_eq):
    rhs = post_fault_rhs(twobus_sys, twobus_eq)
    x0 = np.array([0.3, 0.2])
    e1 = step_halving_error(rhs, x0, 1.0, IntegratorConfig(step=4e-3))
    e2 = step_halving_error(rhs, x0, 1.0, IntegratorConfig(step=2e-3))
    assert 10.0 < e1 / e2 < 25.0


def test_nonfinite_raises(twobus_sys, twobus_eq):
    rhs = lambda x: np.array([x[1], x[1] ** 3 * 1e6 + 1.0])
    with pytest.raises(FloatingPointError, match="after t"):
        integrate(rhs, np.array([0.0, 1.0]), 10.0)


def test_tau_grid_alignment(twobus_sys, twobus_eq):
    scen = FaultScenario(line=(1, 2), clearing_time=0.0505,
                         pre_eq=twobus_eq, post_eq=twobus_eq)
    _, _, tau = run_fault_scenario(twobus_sys, scen, horizon=0.1)
    assert tau == pytest.approx(0.050)


# -- convergence checks ----------------------------------------------------------


def test_convergence_constant_at_equilibrium(twobus_sys, twobus_eq):
    state = twobus_eq.state(1)
    traj = Trajectory(np.linspace(0, 1, 11), np.tile(state, (11, 1)))
    assert verify_convergence(traj, twobus_eq, 1e-3)


def test_twobus_reference_convergences(twobus_sys):
    """From the reference fault-cleared state the flow reaches every admissible
    equilibrium when the injection is set accordingly."""
    for p in (-0.1, 0.0, 0.1):
        text = f"""
[buses]
1 generator 1.0 0.1 0.15 {p}
2 infinite 1.0 - - 0
[lines]
1 2 0.2
"""
        net = normalize_network(parse_network_native(text))
        sys = build_lure_system(net)
        eq = solve_equilibrium(net)
        traj = simulate_post_fault(sys, eq, np.array([0.5, 0.5]), horizon=50.0)
        assert verify_convergence(traj, eq, 1e-3)


def test_long_fault_non_recovery(twobus_sys, twobus_eq):
    """Ten seconds of fault drives the angle far out; the post-fault flow
    settles on a different branch, so convergence to delta* fails."""
    scen = FaultScenario(line=(1, 2), clearing_time=10.0,
                         pre_eq=twobus_eq, post_eq=twobus_eq)
    fault, post, _ = run_fault_scenario(twobus_sys, scen, horizon=40.0)
    # fault-on velocity saturates at p/d and the angle grows without bound
    assert fault.final[1] == pytest.approx(0.1 / 0.15, abs=1e-3)
    assert fault.final[0] > np.pi
    assert not verify_convergence(post, twobus_eq, 1e-3)


def test_energy_conserved_without_damping(threegen_sys, threegen_eq):
    """Zeroing the damping block leaves the first integral flat to RK4 order."""
    sys = threegen_sys
    A = sys.A.copy()
    m = sys.n_gen
    A[m:2 * m, m:2 * m] = 0.0
    d0 = threegen_eq.edge_diffs
    rhs = lambda x: A @ x - sys.B @ (np.sin(sys.C @ x + d0) - np.sin(d0))
    x0 = np.zeros(sys.dim)
    x0[0] = 0.3
    traj = integrate(rhs, x0, 10.0)
    energies = np.array([mechanical_energy(sys, threegen_eq, x) for x in traj.states])
    assert np.abs(energies - energies[0]).max() < 1e-9


# -- oracle -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def twobus_cert(twobus_sys, twobus_eq):
    return issue_certificate(twobus_sys, kind="resiliency-line", eq=twobus_eq,
                             mu=TWOBUS_MU, target=(1, 2), P=TWOBUS_RESILIENCY_P,
                             residual_tol=PRINTED_P_TOL)


def test_oracle_confirms_certified_fault(twobus_cert, twobus_eq):
    scen = FaultScenario(line=(1, 2), clearing_time=0.5,
                         pre_eq=twobus_eq, post_eq=twobus_eq)
    rep = verify_certificate_by_simulation(scen, twobus_cert, horizon=30.0)
    assert rep.confirmed
    assert rep.tau_used == pytest.approx(0.5)


def test_oracle_flags_non_recovery(twobus_cert, twobus_eq):
    scen = FaultScenario(line=(1, 2), clearing_time=10.0,
                         pre_eq=twobus_eq, post_eq=twobus_eq)
    rep = verify_certificate_by_simulation(scen, twobus_cert, horizon=30.0)
    assert not rep.converged
    assert not rep.confirmed


def test_oracle_stability_replay(twobus_sys, twobus_eq):
    cert = issue_certificate(twobus_sys, kind="stability", eq=twobus_eq,
                             P=TWOBUS_RESILIENCY_P, residual_tol=PRINTED_P_TOL)
    state = twobus_eq.state(1) + np.array([0.2, 0.0])
    rep = verify_certificate_by_simulation(state, cert, horizon=30.0)
    assert rep.converged and rep.v_monotone


# -- export -------------------------------------------------------------------------


def test_csv_roundtrip(twobus_sys, twobus_eq):
    traj = simulate_post_fault(twobus_sys, twobus_eq, np.array([0.5, 0.5]),
                               horizon=0.05)
    text = trajectory_to_csv(traj, twobus_sys.state_labels())
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["t", "delta_1", "omega_1"]
    assert len(rows) == len(traj.times) + 1
    back = np.array([[float(v) for v in r] for r in rows[1:]])
    assert np.array_equal(back[:, 0], traj.times)
    assert np.array_equal(back[:, 1:], traj.states)


def test_csv_label_mismatch(twobus_sys, twobus_eq):
    traj = simulate_post_fault(twobus_sys, twobus_eq, np.array([0.5, 0.5]),
                               horizon=0.01)
    with pytest.raises(ValueError, match="label"):
        trajectory_to_csv(traj, ["t1", "t2", "t3"])
