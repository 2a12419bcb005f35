"""Lur'e-form state space of the structure-preserving model.

State layout (deviation coordinates around an equilibrium):

    x = [x1; x2; x3]
    x1 = generator angle deviations        (m entries)
    x2 = generator angular velocities       (m entries)
    x3 = load angle deviations              (n_dyn - m entries)

and the dynamics are x' = A x - B F(C x) with F the per-edge nonlinearity
sin(delta_kj) - sin(delta*_kj).  Infinite buses are held at angle zero and
carry no state; their incidence columns drop out of C and B.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import GENERATOR, INFINITE, LOAD, NetworkError, PowerNetwork


def build_incidence(net: PowerNetwork) -> np.ndarray:
    """Oriented incidence matrix over all buses (including infinite ones).

    Row e has +1 at the lower-id endpoint and -1 at the higher-id endpoint,
    following the fixed lexicographic edge order of the network, so that
    E @ angles = [delta_k - delta_j per edge].
    """
    E = np.zeros((net.n_lines, net.n_buses))
    for e, ln in enumerate(net.lines):
        E[e, net.bus_index(ln.from_bus)] = 1.0
        E[e, net.bus_index(ln.to_bus)] = -1.0
    return E


@dataclass(frozen=True)
class LureSystem:
    """Matrices of x' = A x - B F(C x) plus the structural data behind them."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    incidence: np.ndarray          # |E| x n_buses, infinite columns included
    coupling: np.ndarray           # per-edge a_kj, the diagonal of S
    edge_order: tuple[tuple[int, int], ...]
    n_gen: int
    n_dynamic: int
    masses: np.ndarray             # m_k per generator
    dampings: np.ndarray           # d_k per dynamic bus (generators first)
    edge_fixed_endpoint: np.ndarray  # bool: edge touches an infinite bus
    edge_gen_gen: np.ndarray         # bool: both endpoints generate (or are fixed)
    network: PowerNetwork

    @property
    def dim(self) -> int:
        return self.n_dynamic + self.n_gen

    @property
    def n_edges(self) -> int:
        return len(self.edge_order)

    @property
    def translation_mode(self) -> np.ndarray | None:
        """Uniform angle shift direction, a neutral mode when no bus is fixed."""
        if self.network.n_infinite:
            return None
        v = np.zeros(self.dim)
        v[: self.n_gen] = 1.0
        v[2 * self.n_gen:] = 1.0
        return v

    @property
    def conserved_covector(self) -> np.ndarray | None:
        """y0 with y0 @ x constant along trajectories (no infinite bus)."""
        if self.network.n_infinite:
            return None
        m = self.n_gen
        y = np.empty(self.dim)
        y[:m] = self.dampings[:m]
        y[m: 2 * m] = self.masses
        y[2 * m:] = self.dampings[m:]
        return y

    def angle_part(self, x: np.ndarray) -> np.ndarray:
        """Angles per dynamic bus (generators then loads) from a state vector."""
        m = self.n_gen
        return np.concatenate([x[:m], x[2 * m:]])

    def edge_diffs(self, x: np.ndarray) -> np.ndarray:
        """Edge angle differences of a state vector; equals C @ x."""
        return self.C @ x

    def edge_row(self, e: int) -> np.ndarray:
        """Row of C for edge e (angle-difference functional on the state)."""
        return self.C[e]

    def velocity_row(self, e: int) -> np.ndarray | None:
        """d/dt of edge e's angle difference as a linear functional, if linear.

        Linear whenever neither endpoint is a load bus: generator endpoints
        contribute their velocity state, infinite endpoints contribute zero.
        Returns None for edges touching a load bus.
        """
        if not self.edge_gen_gen[e]:
            return None
        m = self.n_gen
        row = np.zeros(self.dim)
        row[m: 2 * m] = self._gen_cols[e]
        return row

    @property
    def _gen_cols(self) -> np.ndarray:
        try:
            return self.__dict__["_gen_cols_cache"]
        except KeyError:
            cols = []
            net = self.network
            gen_pos = {b.id: i for i, b in enumerate(net.buses) if b.kind == GENERATOR}
            for e, (k, j) in enumerate(self.edge_order):
                row = np.zeros(self.n_gen)
                if k in gen_pos:
                    row[gen_pos[k]] = 1.0
                if j in gen_pos:
                    row[gen_pos[j]] = -1.0
                cols.append(row)
            self.__dict__["_gen_cols_cache"] = np.array(cols)
            return self.__dict__["_gen_cols_cache"]

    def state_labels(self) -> list[str]:
        net = self.network
        gens = [b for b in net.buses if b.kind == GENERATOR]
        loads = [b for b in net.buses if b.kind == LOAD]
        return ([f"delta_{b.id}" for b in gens]
                + [f"omega_{b.id}" for b in gens]
                + [f"delta_{b.id}" for b in loads])


def build_lure_system(net: PowerNetwork) -> LureSystem:
    """Assemble A, B, C for a normalized network with dynamics assigned."""
    if not net.generators_first():
        raise NetworkError("network must be normalized (generators first)")
    if any(ln.susceptance == 0.0 for ln in net.lines):
        raise NetworkError("network has zero-susceptance lines; normalize first")
    gens = [b for b in net.buses if b.kind == GENERATOR]
    loads = [b for b in net.buses if b.kind == LOAD]
    for b in gens:
        if b.inertia is None or b.damping is None:
            raise NetworkError(f"bus {b.id}: inertia/damping unset; "
                               "assign dynamics before building the state space")
    for b in loads:
        if b.damping is None:
            raise NetworkError(f"bus {b.id}: damping unset")

    m = len(gens)
    n_dyn = m + len(loads)
    dim = n_dyn + m

    masses = np.array([b.inertia for b in gens])
    dampings = np.array([b.damping for b in gens] + [b.damping for b in loads])

    E_full = build_incidence(net)
    E_dyn = E_full[:, :n_dyn]          # infinite buses are stored last
    a = np.array([ln.coupling for ln in net.lines])

    A = np.zeros((dim, dim))
    A[:m, m: 2 * m] = np.eye(m)
    A[m: 2 * m, m: 2 * m] = -np.diag(dampings[:m] / masses)

    minv = np.concatenate([1.0 / masses, 1.0 / dampings[m:]])
    # rows of M^-1 E^T S split into generator-velocity rows and load rows
    met = minv[:, None] * (E_dyn.T * a)
    B = np.vstack([np.zeros((m, net.n_lines)), met[:m, :], met[m:, :]])

    C = np.zeros((net.n_lines, dim))
    C[:, :m] = E_dyn[:, :m]
    C[:, 2 * m:] = E_dyn[:, m:]

    kind = {b.id: b.kind for b in net.buses}
    fixed = np.array([INFINITE in (kind[k], kind[j]) for k, j in net.edge_keys])
    gen_gen = np.array([kind[k] != LOAD and kind[j] != LOAD for k, j in net.edge_keys])

    return LureSystem(A=A, B=B, C=C, incidence=E_full, coupling=a,
                      edge_order=net.edge_keys, n_gen=m, n_dynamic=n_dyn,
                      masses=masses, dampings=dampings,
                      edge_fixed_endpoint=fixed, edge_gen_gen=gen_gen,
                      network=net)
