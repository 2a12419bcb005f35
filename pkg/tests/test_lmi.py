import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridcert import lmi
from gridcert.certify import vdot_decomposition
from gridcert.equilibrium import sector_gains
from gridcert.lmi import (
    LmiSpec,
    SolverSettings,
    assemble_resiliency_lmi,
    assemble_stability_lmi,
    search_mu,
    search_p_for_state,
    solve_lmi,
    write_sdpa,
)

from conftest import (
    PRINTED_P_TOL,
    THREEGEN_MU,
    THREEGEN_P,
    TWOBUS_MU,
    TWOBUS_RESILIENCY_P,
    TWOBUS_ROBUST_P,
)


def g_of(eq):
    return sector_gains(eq).global_gain


def test_stability_dimensions(twobus_sys, threegen_sys):
    spec2 = assemble_stability_lmi(twobus_sys, 0.5)
    assert spec2.dim == 2 and spec2.block_dim == 3
    spec3 = assemble_stability_lmi(threegen_sys, 0.5)
    assert spec3.dim == 6 and spec3.block_dim == 9


def test_gain_range_checked(twobus_sys):
    with pytest.raises(ValueError):
        assemble_stability_lmi(twobus_sys, 0.0)
    with pytest.raises(ValueError):
        assemble_stability_lmi(twobus_sys, 1.0)


def test_published_twobus_matrices_validate(twobus_sys, twobus_eq):
    gam = np.pi / 6
    spec = assemble_stability_lmi(twobus_sys, sector_gains(gamma=gam).global_gain)
    assert spec.residual(TWOBUS_ROBUST_P) <= PRINTED_P_TOL
    spec_r = assemble_resiliency_lmi(twobus_sys, g_of(twobus_eq), TWOBUS_MU, (1, 2))
    assert spec_r.residual(TWOBUS_RESILIENCY_P) <= PRINTED_P_TOL


def test_published_threegen_matrix_validates(threegen_sys, threegen_eq):
    spec = assemble_resiliency_lmi(threegen_sys, g_of(threegen_eq), THREEGEN_MU, "all")
    assert spec.residual(THREEGEN_P) <= PRINTED_P_TOL
    assert np.linalg.eigvalsh(THREEGEN_P).min() > 0


@pytest.mark.parametrize("method", ["riccati", "sdp"])
def test_own_solver_twobus(twobus_sys, method):
    gam = np.pi / 6
    spec = assemble_stability_lmi(twobus_sys, sector_gains(gamma=gam).global_gain)
    out = solve_lmi(spec, SolverSettings(method=method))
    assert out.feasible
    assert out.residual <= 1e-8
    assert out.min_eig_p >= spec.eps - 1e-6


def test_own_solver_threegen_deflated(threegen_sys, threegen_eq):
    spec = assemble_resiliency_lmi(threegen_sys, g_of(threegen_eq), THREEGEN_MU, "all")
    out = solve_lmi(spec)
    assert out.feasible and out.residual <= 1e-8
    # the neutral mode constraint holds: P maps uniform angles onto the
    # conserved covector direction
    v = threegen_sys.translation_mode
    y = out.P @ v
    y0 = threegen_sys.conserved_covector
    cosang = y @ y0 / np.linalg.norm(y) / np.linalg.norm(y0)
    assert cosang == pytest.approx(1.0, abs=1e-6)


def test_scalar_toy_spec():
    spec = LmiSpec(abar=np.array([[-1.0]]), bbar=np.zeros((1, 1)),
                   b_quad=np.zeros((1, 1)), q0=np.zeros((1, 1)),
                   g=0.5, mu=None, kind="stability")
    assert spec.residual(np.array([[1.0]])) <= 0.0
    out = solve_lmi(spec)
    assert out.feasible
    assert out.P[0, 0] > 0


def test_resiliency_bbar_twobus(twobus_sys, twobus_eq):
    spec = assemble_resiliency_lmi(twobus_sys, g_of(twobus_eq), 6.0, (1, 2))
    assert np.allclose(spec.bbar, [[0.0, 0.0], [2.0, 2.0 * np.sqrt(6.0)]])
    assert spec.block_dim == 4


def test_resiliency_mu_zero_equals_stability(threegen_sys):
    base = assemble_stability_lmi(threegen_sys, 0.5)
    degenerate = assemble_resiliency_lmi(threegen_sys, 0.5, 0.0, "all")
    P = np.eye(6)
    assert np.array_equal(base.block(P), degenerate.block(P))
    assert degenerate.kind == "resiliency-all"


def test_resiliency_all_lines_dimension(threegen_sys):
    spec = assemble_resiliency_lmi(threegen_sys, 0.5, 0.3, "all")
    assert spec.block_dim == 12


def test_resiliency_unknown_line(threegen_sys):
    with pytest.raises(ValueError, match="unknown line"):
        assemble_resiliency_lmi(threegen_sys, 0.5, 0.3, (1, 9))


def test_huge_mu_never_feasible(twobus_sys, twobus_eq):
    spec = assemble_resiliency_lmi(twobus_sys, g_of(twobus_eq), 1e6, (1, 2))
    out = solve_lmi(spec)
    assert out.status in ("infeasible", "inconclusive")
    assert out.P is None


def test_mu_monotonicity(threegen_sys, threegen_eq):
    """A solution at mu1 stays feasible at every mu2 < mu1 unchanged."""
    g = g_of(threegen_eq)
    big = assemble_resiliency_lmi(threegen_sys, g, THREEGEN_MU, "all")
    assert big.residual(THREEGEN_P) <= PRINTED_P_TOL
    for mu2 in (0.2, 0.1, 0.01):
        small = assemble_resiliency_lmi(threegen_sys, g, mu2, "all")
        assert small.residual(THREEGEN_P) <= big.residual(THREEGEN_P) + 1e-12


def test_search_mu_twobus(twobus_sys, twobus_eq):
    found = search_mu(twobus_sys, twobus_eq, g_of(twobus_eq), (1, 2))
    assert found is not None
    _, mu, bound = found
    assert bound >= 0.43          # at least 80 percent of the reference 0.5406


def test_search_mu_threegen(threegen_sys, threegen_eq):
    found = search_mu(threegen_sys, threegen_eq, g_of(threegen_eq), "all")
    assert found is not None
    P, mu, bound = found
    assert bound >= 0.13          # at least 80 percent of the reference 0.1661
    spec = assemble_resiliency_lmi(threegen_sys, g_of(threegen_eq), mu, "all")
    assert spec.residual(P) <= 1e-6


def _underdamped_sys():
    """Two lightly damped machines: the sector LMI has no solution here."""
    from gridcert.network import normalize_network, parse_network_native
    from gridcert.statespace import build_lure_system
    text = """
[buses]
1 generator 1.0 1.0 0.05 0.0
2 generator 1.0 1.0 0.05 0.0
[lines]
1 2 1.0
"""
    return build_lure_system(normalize_network(parse_network_native(text)))


def test_infeasible_base_lmi_detected():
    sys = _underdamped_sys()
    out = solve_lmi(assemble_stability_lmi(sys, 0.5))
    assert out.status in ("infeasible", "inconclusive")
    assert out.P is None


def test_search_mu_empty_when_base_infeasible():
    sys = _underdamped_sys()
    from gridcert.equilibrium import solve_equilibrium
    eq = solve_equilibrium(sys.network)
    assert search_mu(sys, eq, 0.5, (1, 2)) is None


def test_search_p_certifies_state(twobus_sys):
    g = sector_gains(gamma=np.pi / 6).global_gain
    P = search_p_for_state(twobus_sys, g, np.array([0.5, 0.5]), np.pi / 6)
    assert P is not None
    from gridcert.certify import robust_boundary_min
    value, _ = robust_boundary_min(P, twobus_sys, np.pi / 6, np.array([0.5, 0.5]))
    assert np.array([0.5, 0.5]) @ P @ np.array([0.5, 0.5]) < value


def test_search_p_origin_accepts_first(twobus_sys):
    g = sector_gains(gamma=np.pi / 6).global_gain
    P = search_p_for_state(twobus_sys, g, np.zeros(2), np.pi / 6)
    assert P is not None


def test_search_p_infeasible_base():
    sys = _underdamped_sys()
    assert search_p_for_state(sys, 0.5, np.zeros(4), np.pi / 6) is None


def test_solve_counter(twobus_sys):
    spec = assemble_stability_lmi(twobus_sys, 0.5)
    before = lmi.solve_count()
    solve_lmi(spec)
    solve_lmi(spec)
    assert lmi.solve_count() == before + 2


# -- the decrease identity ------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_vdot_identity(seed, threegen_sys, threegen_eq):
    """vdot equals W - x'Qx - S'S exactly, for the true nonlinear dynamics."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 0.7, threegen_sys.dim)
    g = g_of(threegen_eq)
    parts = vdot_decomposition(threegen_sys, THREEGEN_P, g, threegen_eq, x)
    lhs = parts["vdot"]
    rhs = parts["w"] - parts["quad"] - parts["s_sq"]
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_vdot_nonpositive_inside_polytope(twobus_sys, twobus_eq):
    rng = np.random.default_rng(0)
    g = g_of(twobus_eq)
    for _ in range(200):
        x = rng.normal(0, 0.5, 2)
        if abs(twobus_sys.C @ x + twobus_eq.edge_diffs).max() > np.pi / 2:
            continue
        parts = vdot_decomposition(twobus_sys, TWOBUS_RESILIENCY_P, g, twobus_eq, x)
        # W <= 0 in the polytope and Q from a near-feasible P: decrease up to
        # the printed-matrix slack
        assert parts["vdot"] <= PRINTED_P_TOL * (x @ x) + 1e-12


# -- SDPA export -----------------------------------------------------------------


def _read_sdpa(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    nvar = int(lines[0].split("=")[0])
    nblocks = int(lines[1].split("=")[0])
    sizes = [int(t) for t in lines[2].split("=")[0].split()]
    c = [float(t) for t in lines[3].split()]
    mats = {}
    for ln in lines[4:]:
        mat, blk, i, j, val = ln.split()
        key = (int(mat), int(blk))
        mats.setdefault(key, []).append((int(i) - 1, int(j) - 1, float(val)))
    return nvar, nblocks, sizes, c, mats


def test_sdpa_roundtrip(tmp_path, twobus_sys, twobus_eq):
    spec = assemble_resiliency_lmi(twobus_sys, g_of(twobus_eq), 6.0, (1, 2))
    path = tmp_path / "spec.dat-s"
    write_sdpa(spec, str(path))
    nvar, nblocks, sizes, c, mats = _read_sdpa(path)
    d = spec.dim
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    assert nvar == len(pairs) + 1
    assert nblocks == 2 and sizes == [spec.block_dim, d]
    assert c[-1] == -1.0

    def dense(key, n):
        M = np.zeros((n, n))
        for i, j, v in mats.get(key, []):
            M[i, j] = M[j, i] = v
        return M

    # reconstruct block 1 at a random (P, t) and compare with the spec
    rng = np.random.default_rng(1)
    P = rng.normal(size=(d, d))
    P = P + P.T
    t = 0.37
    total = -dense((0, 1), spec.block_dim)
    for k, (i, j) in enumerate(pairs, start=1):
        total += P[i, j] * dense((k, 1), spec.block_dim)
    total += t * dense((nvar, 1), spec.block_dim)
    expected = -spec.block(P) - t * np.eye(spec.block_dim)
    assert np.abs(total - expected).max() < 1e-12
