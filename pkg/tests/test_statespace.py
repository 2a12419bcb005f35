import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridcert.network import NetworkError, normalize_network, parse_network_native
from gridcert.statespace import build_incidence, build_lure_system

from conftest import random_network


def _net_from_edges(edges, n):
    buses = "\n".join(f"{i} generator 1.0 1.0 1.0 0.0" for i in range(1, n + 1))
    lines = "\n".join(f"{a} {b} 1.0" for a, b in edges)
    return parse_network_native(f"[buses]\n{buses}\n[lines]\n{lines}\n")


def test_incidence_path():
    E = build_incidence(_net_from_edges([(1, 2), (2, 3)], 3))
    assert np.array_equal(E, [[1.0, -1.0, 0.0], [0.0, 1.0, -1.0]])


def test_incidence_single_edge():
    E = build_incidence(_net_from_edges([(1, 2)], 2))
    assert np.array_equal(E, [[1.0, -1.0]])


def test_incidence_triangle():
    E = build_incidence(_net_from_edges([(1, 2), (1, 3), (2, 3)], 3))
    assert E.shape == (3, 3)
    assert np.array_equal(E.sum(axis=1), np.zeros(3))
    assert np.all(np.sort(E, axis=1)[:, 0] == -1) and np.all(np.sort(E, axis=1)[:, -1] == 1)


def test_twobus_matrices(twobus_sys):
    # d/m = 1.5, a/m = 2 for m=0.1, d=0.15, a=0.2
    assert np.allclose(twobus_sys.A, [[0.0, 1.0], [0.0, -1.5]])
    assert np.allclose(twobus_sys.B, [[0.0], [2.0]])
    assert np.allclose(twobus_sys.C, [[1.0, 0.0]])


def test_threegen_dimensions(threegen_sys):
    assert threegen_sys.A.shape == (6, 6)
    assert threegen_sys.B.shape == (6, 3)
    assert threegen_sys.C.shape == (3, 6)


def test_c_matches_selector_identity(threegen_sys):
    m, nd = threegen_sys.n_gen, threegen_sys.n_dynamic
    sel = np.zeros((threegen_sys.network.n_buses, threegen_sys.dim))
    sel[:m, :m] = np.eye(m)
    sel[m:nd, 2 * m:] = np.eye(nd - m)
    expected = threegen_sys.incidence @ sel
    assert np.array_equal(threegen_sys.C, expected)


def test_build_requires_normalized_order():
    text = """
[buses]
1 load 1.0 - 0.2 -0.1
2 generator 1.0 0.1 0.15 0.1
[lines]
1 2 0.5
"""
    net = parse_network_native(text)
    with pytest.raises(NetworkError, match="normalized"):
        build_lure_system(net)


def test_build_requires_dynamics(ieee118_net):
    with pytest.raises(NetworkError, match="inertia/damping"):
        build_lure_system(ieee118_net)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_block_structure_random(seed):
    rng = np.random.default_rng(seed)
    net = normalize_network(random_network(seed, n_buses=int(rng.integers(3, 8)),
                                           n_gen=int(rng.integers(1, 3))))
    sys = build_lure_system(net)
    m, dim = sys.n_gen, sys.dim
    x = rng.normal(size=dim)
    ax = sys.A @ x
    # angle rows reproduce the velocities exactly; load rows of A vanish
    assert np.array_equal(ax[:m], x[m:2 * m])
    assert np.array_equal(sys.A[2 * m:], np.zeros((dim - 2 * m, dim)))
    # damping block is -M1^-1 D1
    assert np.allclose(np.diag(sys.A[m:2 * m, m:2 * m]),
                       -sys.dampings[:m] / sys.masses)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_b_column_support_and_magnitudes(seed):
    net = normalize_network(random_network(seed, n_buses=5, n_gen=2))
    sys = build_lure_system(net)
    m = sys.n_gen
    idx = {b.id: i for i, b in enumerate(net.buses)}
    for e, (k, j) in enumerate(sys.edge_order):
        col = sys.B[:, e]
        expected_rows = set()
        for bus_id in (k, j):
            i = idx[bus_id]
            if i < m:
                row = m + i                      # generator velocity row
                assert abs(col[row]) == pytest.approx(sys.coupling[e] / sys.masses[i])
            else:
                row = 2 * m + (i - m)            # load angle row
                assert abs(col[row]) == pytest.approx(sys.coupling[e] / sys.dampings[i])
            expected_rows.add(row)
        assert set(np.nonzero(col)[0]) == expected_rows


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_cx_equals_direct_edge_diffs(seed):
    rng = np.random.default_rng(seed)
    net = normalize_network(random_network(seed, n_buses=6, n_gen=2))
    sys = build_lure_system(net)
    x = rng.normal(size=sys.dim)
    angles = sys.angle_part(x)
    idx = {b.id: i for i, b in enumerate(net.buses)}
    direct = np.array([angles[idx[k]] - angles[idx[j]] for k, j in sys.edge_order])
    assert np.abs(sys.C @ x - direct).max() <= 1e-12


def test_velocity_rows(twobus_sys, threegen_sys):
    # infinite endpoint contributes zero: row picks the generator velocity
    row = twobus_sys.velocity_row(0)
    assert np.array_equal(row, [0.0, 1.0])
    assert twobus_sys.edge_fixed_endpoint[0]
    # generator-generator edge: velocity difference
    e = threegen_sys.edge_order.index((1, 2))
    assert np.array_equal(threegen_sys.velocity_row(e), [0, 0, 0, 1.0, -1.0, 0])


def test_velocity_row_none_for_load_edges():
    net = normalize_network(random_network(3, n_buses=4, n_gen=1))
    sys = build_lure_system(net)
    for e, (k, j) in enumerate(sys.edge_order):
        kinds = {net.bus(k).kind, net.bus(j).kind}
        if "load" in kinds:
            assert sys.velocity_row(e) is None
