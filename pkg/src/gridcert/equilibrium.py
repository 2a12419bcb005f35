"""Equilibrium solving, synchronization condition, and sector gains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .network import INFINITE, PowerNetwork
from .statespace import build_incidence


class ConvergenceError(RuntimeError):
    """Newton iteration failed to reach the requested residual."""


@dataclass(frozen=True)
class EquilibriumPoint:
    """Angles of a stationary point, reference bus pinned to zero.

    ``angles`` covers the dynamic buses in network storage order; infinite
    buses sit at angle zero implicitly.  ``edge_diffs`` are the per-edge
    differences delta*_kj in the network's fixed edge order, and ``margin``
    is lambda(delta*) = max_e |delta*_kj|.  ``gamma`` records the bound the
    point was checked against, when any.
    """

    angles: np.ndarray
    edge_diffs: np.ndarray
    margin: float
    residual: float
    reference_bus: int
    gamma: float | None = None

    @property
    def within_polytope(self) -> bool:
        return self.margin < np.pi / 2

    def state(self, n_gen: int) -> np.ndarray:
        """Zero-velocity state vector [gen angles, zeros, load angles]."""
        return np.concatenate([self.angles[:n_gen],
                               np.zeros(n_gen),
                               self.angles[n_gen:]])


def _full_angles(net: PowerNetwork, dyn_angles: np.ndarray) -> np.ndarray:
    """Angles over all buses, infinite buses padded with zero."""
    full = np.zeros(net.n_buses)
    full[: net.n_dynamic] = dyn_angles
    return full


def solve_equilibrium(net: PowerNetwork, guess: np.ndarray | None = None,
                      tol: float = 1e-10, max_iter: int = 40) -> EquilibriumPoint:
    """Solve sum_j a_kj sin(delta*_kj) = P_k by damped Newton iteration.

    The network must be normalized (generators first).  The reference bus
    is the infinite bus when present, else the first bus; its angle is
    pinned to zero and, without an infinite bus, its power-balance equation
    is redundant by the zero-sum property.  The Jacobian is the graph
    Laplacian weighted by a_kj * cos(delta_kj); steps are halved until the
    residual norm decreases.
    """
    if not net.generators_first():
        raise ValueError("normalize the network before solving the equilibrium")
    n_dyn = net.n_dynamic
    has_inf = net.n_infinite > 0
    if not has_inf:
        total = float(np.sum(net.injections[:n_dyn]))
        if abs(total) > 1e-6:
            raise ValueError(f"injections not balanced (sum {total:.3e}); "
                             "normalize_network projects them")

    E = build_incidence(net)
    a = np.array([ln.coupling for ln in net.lines])
    p = net.injections

    theta = np.zeros(net.n_buses)
    if guess is not None:
        theta[:n_dyn] = np.asarray(guess, dtype=float)

    # unknowns: all dynamic buses if an infinite bus pins the frame,
    # otherwise all but the first (reference) bus
    free = np.arange(n_dyn) if has_inf else np.arange(1, n_dyn)

    def residual(th):
        return E.T @ (a * np.sin(E @ th)) - p

    r = residual(theta)
    for _ in range(max_iter):
        if np.abs(r[:n_dyn]).max() < tol:
            break
        w = a * np.cos(E @ theta)
        L = (E.T * w) @ E
        step = np.zeros(net.n_buses)
        try:
            step[free] = sla.solve(L[np.ix_(free, free)], r[free], assume_a="sym")
        except sla.LinAlgError as exc:
            raise ConvergenceError(f"singular Jacobian: {exc}") from exc
        alpha, rnorm = 1.0, np.linalg.norm(r[:n_dyn])
        while alpha > 1e-6:
            cand = theta - alpha * step
            rc = residual(cand)
            if np.linalg.norm(rc[:n_dyn]) < rnorm:
                theta, r = cand, rc
                break
            alpha /= 2
        else:
            raise ConvergenceError("damped Newton stalled")
    else:
        raise ConvergenceError(
            f"no convergence in {max_iter} iterations (residual {np.abs(r[:n_dyn]).max():.2e})")

    if not has_inf:
        theta -= theta[0]
    diffs = E @ theta
    ref = net.buses[n_dyn].id if has_inf else net.buses[0].id
    return EquilibriumPoint(angles=theta[:n_dyn].copy(), edge_diffs=diffs,
                            margin=float(np.abs(diffs).max()),
                            residual=float(np.abs(r[:n_dyn]).max()),
                            reference_bus=ref)


def sync_condition_margin(net: PowerNetwork, weighted: bool = True,
                          injections: np.ndarray | None = None) -> float:
    """The margin compared against sin(gamma) by the synchronization test.

    Computes max over edges {i,j} of |x_i - x_j| for x = L^+ p, with L the
    coupling-weighted graph Laplacian by default (``weighted=False`` uses
    unit weights instead).  Infinite buses participate as slack nodes that
    absorb the imbalance.  The value is invariant under uniform shifts of p
    and scales linearly with p.
    """
    E = build_incidence(net)
    w = np.array([ln.coupling for ln in net.lines]) if weighted \
        else np.ones(net.n_lines)
    L = (E.T * w) @ E
    p = net.injections.copy() if injections is None else np.asarray(injections, float).copy()
    inf_idx = [i for i, b in enumerate(net.buses) if b.kind == INFINITE]
    if inf_idx:
        imbalance = p.sum()
        p[inf_idx[0]] -= imbalance
    theta = sla.pinvh(L) @ p
    return float(np.abs(E @ theta).max())


@dataclass(frozen=True)
class SectorGains:
    """Per-edge and worst-case slopes bounding the coupling nonlinearity."""

    per_edge: np.ndarray | None
    global_gain: float


def _gain(t: float) -> float:
    return (1.0 - np.sin(t)) / (np.pi / 2 - t)


def sector_gains(eq: EquilibriumPoint | None = None, *,
                 gamma: float | None = None) -> SectorGains:
    """Sector slopes g_kj = (1 - sin|delta*_kj|)/(pi/2 - |delta*_kj|).

    Given an equilibrium, returns per-edge gains plus the worst-case gain
    at lambda(delta*); given only ``gamma``, returns the uniform gain
    g = (1 - sin gamma)/(pi/2 - gamma) valid for every equilibrium whose
    edge differences stay within gamma.
    """
    if (eq is None) == (gamma is None):
        raise ValueError("pass exactly one of eq or gamma")
    if eq is not None:
        if not eq.within_polytope:
            raise ValueError(f"lambda(delta*) = {eq.margin:.4f} >= pi/2")
        per_edge = np.array([_gain(abs(d)) for d in eq.edge_diffs])
        return SectorGains(per_edge=per_edge, global_gain=float(_gain(eq.margin)))
    if not 0 <= gamma < np.pi / 2:
        raise ValueError("gamma must lie in [0, pi/2)")
    return SectorGains(per_edge=None, global_gain=float(_gain(gamma)))
