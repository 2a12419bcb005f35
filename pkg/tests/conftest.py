from pathlib import Path

import numpy as np
import pytest

from gridcert.equilibrium import solve_equilibrium
from gridcert.network import (
    Bus,
    Line,
    PowerNetwork,
    normalize_network,
    parse_matpower_case,
    parse_network_native,
)
from gridcert.statespace import build_lure_system

DATA = Path(__file__).parent / "data"

# Published reference certificate matrices for the fixture systems,
# printed to four decimals in the source study.
TWOBUS_ROBUST_P = np.array([[0.8228, 0.1402], [0.1402, 0.5797]])
TWOBUS_RESILIENCY_P = np.array([[0.0822, 0.0370], [0.0370, 0.0603]])
TWOBUS_MU = 6.0
THREEGEN_P = np.array([
    [2.4376, 1.7501, 1.8190, 4.0789, 3.9566, 3.9780],
    [1.7501, 2.3991, 1.8576, 3.9639, 4.0710, 3.9785],
    [1.8190, 1.8576, 2.3302, 3.9707, 3.9859, 4.0569],
    [4.0789, 3.9639, 3.9707, 17.2977, 16.6333, 16.7452],
    [3.9566, 4.0710, 3.9859, 16.6333, 17.2425, 16.8003],
    [3.9780, 3.9785, 4.0569, 16.7452, 16.8003, 17.1306],
])
THREEGEN_MU = 0.3
THREEGEN_ANGLES = np.array([-0.6634, -0.5046, -0.5640])
PRINTED_P_TOL = 5e-3      # residual slack for matrices printed to 4 decimals


def load_native(name: str) -> PowerNetwork:
    return normalize_network(parse_network_native((DATA / name).read_text()))


@pytest.fixture(scope="session")
def twobus_net():
    return load_native("twobus.net")


@pytest.fixture(scope="session")
def twobus_sys(twobus_net):
    return build_lure_system(twobus_net)


@pytest.fixture(scope="session")
def twobus_eq(twobus_net):
    return solve_equilibrium(twobus_net)


@pytest.fixture(scope="session")
def threegen_net():
    return load_native("threegen.net")


@pytest.fixture(scope="session")
def threegen_sys(threegen_net):
    return build_lure_system(threegen_net)


@pytest.fixture(scope="session")
def threegen_eq(threegen_net):
    return solve_equilibrium(threegen_net)


@pytest.fixture(scope="session")
def ieee118_raw():
    return parse_matpower_case((DATA / "ieee118.m").read_text())


@pytest.fixture(scope="session")
def ieee118_net(ieee118_raw):
    return normalize_network(ieee118_raw)


def random_network(seed: int, n_buses: int = 4, n_extra: int = 2,
                   n_gen: int = 1, stress: float = 0.15) -> PowerNetwork:
    """Small random connected test network with balanced injections."""
    rng = np.random.default_rng(seed)
    edges = set()
    order = rng.permutation(n_buses)
    for i in range(1, n_buses):
        a = int(order[i])
        b = int(order[rng.integers(0, i)])
        edges.add((min(a, b) + 1, max(a, b) + 1))
    target = min(n_buses - 1 + n_extra, n_buses * (n_buses - 1) // 2)
    while len(edges) < target:
        a, b = rng.choice(n_buses, 2, replace=False) + 1
        edges.add((min(a, b), max(a, b)))
    p = rng.normal(0.0, stress, n_buses)
    p -= p.mean()
    buses = []
    for i in range(n_buses):
        kind = "generator" if i < n_gen else "load"
        buses.append(Bus(
            id=i + 1, kind=kind, voltage=float(rng.uniform(0.95, 1.05)),
            inertia=float(rng.uniform(0.5, 2.0)) if kind == "generator" else None,
            damping=float(rng.uniform(0.5, 2.0)),
            injection=float(p[i]),
        ))
    bus_by_id = {b.id: b for b in buses}
    lines = []
    for (a, b) in sorted(edges):
        bsus = float(rng.uniform(0.5, 2.0))
        coup = bus_by_id[a].voltage * bus_by_id[b].voltage * bsus
        lines.append(Line(a, b, bsus, coup))
    return PowerNetwork(tuple(buses), tuple(lines))
