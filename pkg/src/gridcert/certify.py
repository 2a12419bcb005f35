"""Certificates: boundary minimization and the four verdict kinds.

The invariant region of a certified system is R = {x in P : V(x) < V_min}
where P is the polytope |delta_kj| <= pi/2 and V_min is the smallest value
of V on the part of P's boundary through which trajectories can leave.
Every boundary minimization here is a tiny equality-constrained quadratic
program solved in closed form, with at most one active inequality (the
flow-out half-face restriction).

Flow-out scope.  On a face |delta_kj| = pi/2 the outflow condition
delta_kj * d/dt(delta_kj) >= 0 is a linear half-space exactly when the
edge's difference velocity is a linear function of the state.  The toolkit
restricts the minimization to that half-face only on edges with a
fixed-angle (infinite) endpoint, where the restriction is hand-validated
against the reference clearing-time bound; on dynamic-dynamic edges it
conservatively keeps the full face (matching the reference V_min there).
The sharper all-velocity-linear variant remains available as
``flow_out="strict"`` and is recorded in certificate provenance.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import scipy.linalg as sla

from .equilibrium import EquilibriumPoint, sector_gains
from .lmi import (
    FeasibilityResult,
    SolverSettings,
    assemble_resiliency_lmi,
    assemble_stability_lmi,
    solve_lmi,
)
from .network import PowerNetwork
from .statespace import LureSystem

_STRICTNESS = 1e-9     # relative slack on strict inequalities

FLOW_OUT_MODES = ("auto", "strict", "none")


class EnumerationCap(RuntimeError):
    """Vertex enumeration would exceed the configured cap."""


# -- closed-form face programs -------------------------------------------------


def _solve_eq_qp(Pinv: np.ndarray, rows: np.ndarray, rhs: np.ndarray,
                 a: np.ndarray | None):
    """minimize x'Px - 2a'x subject to rows @ x = rhs (closed-form KKT)."""
    Pa = np.zeros(Pinv.shape[0]) if a is None else Pinv @ a
    G = rows @ Pinv @ rows.T
    xi = sla.solve(G, rhs - rows @ Pa, assume_a="sym")
    x = Pa + Pinv @ (rows.T @ xi)
    return x


def _face_min(Pinv: np.ndarray, P: np.ndarray, c: np.ndarray, b: float,
              v: np.ndarray | None, s: float, a: np.ndarray | None = None):
    """Minimize x'Px - 2a'x on the face c'x = b, optionally within s*v'x >= 0.

    Two-case active-set rule: the unconstrained-on-face KKT point is exact
    unless it violates the half-space, in which case the inequality must be
    active at the optimum of this convex program and the problem is
    re-solved with v'x = 0 appended.
    """
    x = _solve_eq_qp(Pinv, c[None, :], np.array([b]), a)
    if v is not None and s * (v @ x) < -1e-14:
        x = _solve_eq_qp(Pinv, np.stack([c, v]), np.array([b, 0.0]), a)
    value = float(x @ P @ x) if a is None else float(x @ P @ x - 2.0 * (a @ x))
    return value, x


def _flow_out_row(sys: LureSystem, e: int, mode: str) -> np.ndarray | None:
    if mode == "none":
        return None
    if mode == "strict":
        return sys.velocity_row(e)
    if mode == "auto":
        return sys.velocity_row(e) if sys.edge_fixed_endpoint[e] else None
    raise ValueError(f"flow_out must be one of {FLOW_OUT_MODES}")


def compute_vmin(P: np.ndarray, eq: EquilibriumPoint, sys: LureSystem,
                 flow_out: str = "auto", details: bool = False):
    """Minimum of V(x) = x'Px over the outflow part of the polytope boundary.

    Minimizes over every face delta_kj = +-pi/2, written in deviation
    coordinates as c_e' x = s pi/2 - delta*_e.  Positively homogeneous of
    degree one in P.  With ``details`` the per-face minimizers are returned
    alongside the value.
    """
    if not eq.within_polytope:
        raise ValueError("equilibrium margin must stay below pi/2")
    Pinv = sla.inv(P)
    best = np.inf
    per_face = []
    for e in range(sys.n_edges):
        c = sys.edge_row(e)
        v = _flow_out_row(sys, e, flow_out)
        for s in (1.0, -1.0):
            b = s * np.pi / 2 - eq.edge_diffs[e]
            value, x = _face_min(Pinv, P, c, b, v, s)
            per_face.append((value, x))
            best = min(best, value)
    return (best, per_face) if details else best


# -- equilibrium-set vertices ----------------------------------------------------


def _reference_node(sys: LureSystem):
    net = sys.network
    if net.n_infinite:
        return net.buses[net.n_dynamic].id
    return net.buses[0].id


def count_vertex_bound(sys: LureSystem) -> float:
    """Upper bound (spanning trees x sign patterns) on the vertex count."""
    net = sys.network
    g = nx.Graph()
    g.add_nodes_from(b.id for b in net.buses)
    g.add_edges_from(net.edge_keys)
    L = nx.laplacian_matrix(g).toarray().astype(float)
    sign, logdet = np.linalg.slogdet(L[1:, 1:])
    trees = float(np.exp(logdet)) if sign > 0 else 0.0
    return trees * 2.0 ** (net.n_buses - 1)


def delta_gamma_vertices(sys: LureSystem, gamma: float,
                         cap: int = 2 ** 20) -> list[np.ndarray]:
    """Vertices of the consistent equilibrium set, as dynamic-bus angle vectors.

    A vertex pins the edge differences of a spanning tree to +-gamma; the
    remaining angles follow from the reference (the infinite bus when
    present, else the first bus, at angle zero), and assignments whose
    non-tree differences leave [-gamma, gamma] are discarded.  Raises
    :class:`EnumerationCap` when trees x sign patterns exceeds ``cap``.
    """
    if count_vertex_bound(sys) > cap:
        raise EnumerationCap(f"vertex bound exceeds cap {cap}")
    net = sys.network
    g = nx.Graph()
    g.add_nodes_from(b.id for b in net.buses)
    g.add_edges_from(net.edge_keys)
    ref = _reference_node(sys)
    idx = {b.id: i for i, b in enumerate(net.buses)}
    out: list[np.ndarray] = []
    seen: set[tuple] = set()
    for tree in nx.SpanningTreeIterator(g):
        tree_edges = list(tree.edges())
        for signs in itertools.product((gamma, -gamma), repeat=len(tree_edges)):
            theta = {ref: 0.0}
            stack = [ref]
            adj: dict[int, list[tuple[int, float]]] = {}
            for (u, w), sg in zip(tree_edges, signs):
                k, j = (u, w) if u < w else (w, u)
                # difference theta_k - theta_j = sg for the canonical order
                adj.setdefault(k, []).append((j, -sg))
                adj.setdefault(j, []).append((k, +sg))
            while stack:
                node = stack.pop()
                for other, delta in adj.get(node, []):
                    if other not in theta:
                        theta[other] = theta[node] + delta
                        stack.append(other)
            angles = np.array([theta[b.id] for b in net.buses])
            diffs = sys.incidence @ angles
            if np.max(np.abs(diffs)) > gamma + 1e-12:
                continue
            dyn = angles[: net.n_dynamic]
            key = tuple(np.round(dyn, 9))
            if key not in seen:
                seen.add(key)
                out.append(dyn)
    return out


def _lift(sys: LureSystem, dyn_angles: np.ndarray) -> np.ndarray:
    m = sys.n_gen
    return np.concatenate([dyn_angles[:m], np.zeros(m), dyn_angles[m:]])


def robust_boundary_min(P: np.ndarray, sys: LureSystem, gamma: float,
                        state: np.ndarray, state_frame: str = "deviation",
                        flow_out: str = "auto", cap: int = 2 ** 20):
    """Right-hand side of the robust stability comparison.

    ``state_frame="deviation"`` treats ``state`` as the offset from whatever
    equilibrium materializes and returns the worst-case boundary minimum
    min over equilibria in the set of V_min; per face, the worst edge
    difference is the nearest admissible one, shrinking the face offset to
    s (pi/2 - gamma).  ``state_frame="absolute"`` evaluates the exact
    joint minimum over boundary faces and equilibrium-set vertices of
    V(delta) - 2 delta*' P (delta - delta0), whose inner minimum is
    attained at a vertex because the objective is linear in delta*.

    Returns (value, cut_points) where cut_points are (x_hat, dstar_or_None)
    pairs usable as linear constraints on P by the heuristic searches.
    """
    Pinv = sla.inv(P)
    points: list[tuple[np.ndarray, np.ndarray | None]] = []
    best = np.inf
    if state_frame == "deviation":
        for e in range(sys.n_edges):
            c = sys.edge_row(e)
            v = _flow_out_row(sys, e, flow_out)
            for s in (1.0, -1.0):
                b = s * (np.pi / 2 - gamma)
                value, x = _face_min(Pinv, P, c, b, v, s)
                points.append((x, None))
                best = min(best, value)
        return best, points
    if state_frame != "absolute":
        raise ValueError("state_frame must be 'deviation' or 'absolute'")
    delta0 = np.asarray(state, dtype=float)
    for dyn in delta_gamma_vertices(sys, gamma, cap):
        dstar = _lift(sys, dyn)
        a = P @ dstar
        offset = 2.0 * float(a @ delta0)
        for e in range(sys.n_edges):
            c = sys.edge_row(e)
            v = _flow_out_row(sys, e, flow_out)
            for s in (1.0, -1.0):
                value, x = _face_min(Pinv, P, c, s * np.pi / 2, v, s, a=a)
                points.append((x, dstar))
                best = min(best, value + offset)
    return best, points


# -- certificates ----------------------------------------------------------------


def network_hash(net: PowerNetwork) -> str:
    payload = {
        "buses": [[b.id, b.kind, b.voltage, b.inertia, b.damping, b.injection]
                  for b in net.buses],
        "lines": [[ln.from_bus, ln.to_bus, ln.susceptance] for ln in net.lines],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


CERT_KINDS = ("stability", "robust-stability", "resiliency-line", "resiliency-all")


@dataclass(frozen=True)
class Certificate:
    kind: str
    P: np.ndarray
    g: float
    gamma: float | None
    mu: float | None
    v_min: float
    tau_max: float | None
    system: LureSystem | None = None
    eq: EquilibriumPoint | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CERT_KINDS:
            raise ValueError(f"unknown certificate kind {self.kind!r}")
        if self.v_min <= 0:
            raise ValueError("v_min must be positive")
        if self.kind.startswith("resiliency"):
            if self.mu is None or self.tau_max is None or self.tau_max <= 0:
                raise ValueError("resiliency certificates need mu and tau_max > 0")


@dataclass(frozen=True)
class CertResult:
    verdict: str                 # certified | not-certified
    margin: float
    detail: str = ""

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"


def lyapunov_value(P: np.ndarray, delta: np.ndarray, eq: EquilibriumPoint) -> float:
    """V = (delta - delta*)' P (delta - delta*), delta* zero-padded in velocity."""
    delta = np.asarray(delta, dtype=float)
    n_gen = len(delta) - len(eq.angles)
    if n_gen < 0 or P.shape[0] != len(delta):
        raise ValueError("state/equilibrium dimension mismatch")
    x = delta - eq.state(n_gen)
    return float(x @ P @ x)


def _strictly_below(lhs: float, rhs: float) -> bool:
    return lhs < rhs * (1.0 - _STRICTNESS) if rhs > 0 else lhs < rhs


def certify_stability(cert: Certificate, delta0: np.ndarray,
                      eq: EquilibriumPoint | None = None) -> CertResult:
    """Invariant-region membership test for a known equilibrium."""
    eq = eq or cert.eq
    if eq is None:
        raise ValueError("stability verdicts need the equilibrium point")
    sys = cert.system
    delta0 = np.asarray(delta0, dtype=float)
    diffs = sys.edge_diffs(delta0)
    if np.max(np.abs(diffs)) > np.pi / 2 + 1e-12:
        return CertResult("not-certified", float(np.pi / 2 - np.abs(diffs).max()),
                          "outside-polytope")
    v0 = lyapunov_value(cert.P, delta0, eq)
    margin = cert.v_min - v0
    if _strictly_below(v0, cert.v_min):
        return CertResult("certified", margin)
    return CertResult("not-certified", margin, "level-above-vmin")


def certify_robust_stability(cert: Certificate, delta0: np.ndarray,
                             gamma: float | None = None,
                             state_frame: str = "deviation",
                             flow_out: str = "auto",
                             cap: int = 2 ** 20) -> CertResult:
    """Membership test robust to every equilibrium in the admissible set.

    In the default deviation frame ``delta0`` is the offset from whichever
    equilibrium materializes and must keep every edge difference within
    pi/2 - gamma so the configuration stays inside the polytope for all of
    them.  The absolute frame evaluates the exact vertex/face enumeration
    of the frame-paired comparison instead.
    """
    gamma = cert.gamma if gamma is None else gamma
    if gamma is None:
        raise ValueError("robust verdicts need gamma")
    sys = cert.system
    delta0 = np.asarray(delta0, dtype=float)
    diffs = sys.edge_diffs(delta0)
    limit = np.pi / 2 - (gamma if state_frame == "deviation" else 0.0)
    if np.max(np.abs(diffs)) > limit + 1e-12:
        return CertResult("not-certified", float(limit - np.abs(diffs).max()),
                          "outside-polytope")
    try:
        value, _ = robust_boundary_min(cert.P, sys, gamma, delta0,
                                       state_frame=state_frame, flow_out=flow_out,
                                       cap=cap)
    except EnumerationCap:
        return CertResult("not-certified", -np.inf, "enumeration-cap")
    v0 = float(delta0 @ cert.P @ delta0)
    margin = value - v0
    if _strictly_below(v0, value):
        return CertResult("certified", margin)
    return CertResult("not-certified", margin, "level-above-boundary-min")


def certify_resiliency(cert: Certificate, tau: float,
                       pre_eq: EquilibriumPoint | None = None) -> CertResult:
    """Clearing-time test tau < mu V_min, or mu (V_min - V(x_pre)) when the
    pre-fault equilibrium differs from the post-fault one."""
    if not cert.kind.startswith("resiliency"):
        raise ValueError("certificate is not a resiliency certificate")
    bound = cert.tau_max
    if pre_eq is not None and cert.eq is not None:
        n_gen = cert.system.n_gen
        v_pre = lyapunov_value(cert.P, pre_eq.state(n_gen), cert.eq)
        if v_pre >= cert.v_min:
            return CertResult("not-certified", cert.v_min - v_pre, "prefault-outside-R")
        bound = cert.mu * (cert.v_min - v_pre)
    margin = bound - tau
    if _strictly_below(tau, bound):
        return CertResult("certified", margin)
    return CertResult("not-certified", margin, "clearing-time-exceeds-bound")


def certify_robust_resiliency(cert: Certificate, tau: float) -> CertResult:
    """Single verdict covering every one-line trip-and-reclose fault."""
    if cert.kind != "resiliency-all":
        raise ValueError("robust resiliency needs an all-lines certificate")
    return certify_resiliency(cert, tau)


# -- construction ------------------------------------------------------------------


def issue_certificate(sys: LureSystem, kind: str = "stability",
                      eq: EquilibriumPoint | None = None,
                      gamma: float | None = None,
                      mu: float | None = None,
                      target="all",
                      P: np.ndarray | None = None,
                      residual_tol: float | None = None,
                      settings: SolverSettings | None = None,
                      flow_out: str = "auto") -> Certificate:
    """Build and validate a certificate of the requested kind.

    The sector gain comes from the equilibrium margin when the equilibrium
    is pinned, else from gamma.  A caller-supplied P (for example a
    published reference matrix) is accepted after passing the independent
    residual check at ``residual_tol``; otherwise the solver runs.
    """
    settings = settings or SolverSettings.from_env()
    if kind not in CERT_KINDS:
        raise ValueError(f"unknown certificate kind {kind!r}")
    if kind == "robust-stability" or eq is None:
        if gamma is None:
            raise ValueError("need gamma (or an equilibrium) to fix the sector gain")
        g = sector_gains(gamma=gamma).global_gain
    else:
        g = sector_gains(eq).global_gain

    if kind == "stability" or kind == "robust-stability":
        spec = assemble_stability_lmi(sys, g, settings.eps)
    else:
        if mu is None:
            raise ValueError("resiliency certificates need mu (or use search_mu)")
        spec = assemble_resiliency_lmi(sys, g, mu,
                                       "all" if kind == "resiliency-all" else target,
                                       settings.eps)

    if P is not None:
        tol = settings.tol if residual_tol is None else residual_tol
        res = spec.residual(np.asarray(P, dtype=float))
        min_eig = float(np.linalg.eigvalsh(P).min())
        if res > tol or min_eig <= 0:
            raise ValueError(f"supplied P fails validation (residual {res:.3e}, "
                             f"min eig {min_eig:.3e})")
        result = FeasibilityResult("feasible", np.asarray(P, dtype=float),
                                   res, min_eig, "supplied")
    else:
        result = solve_lmi(spec, settings)
        if not result.feasible:
            raise ValueError(f"no feasible P found ({result.status}, {result.method})")
        if kind.startswith("resiliency") and eq is not None and sys.dim <= 40:
            # the minimal Riccati solution certifies, but its invariant region
            # is small; a couple of cut re-solves buys a much better bound
            from .lmi import improve_vmin
            P_better, _ = improve_vmin(sys, eq, spec, result.P, settings)
            res2 = spec.residual(P_better)
            if res2 <= settings.tol:
                result = FeasibilityResult("feasible", P_better, res2,
                                           float(np.linalg.eigvalsh(P_better).min()),
                                           result.method + "+boost")

    if kind == "robust-stability":
        v_min, _ = robust_boundary_min(result.P, sys, gamma, np.zeros(sys.dim),
                                       state_frame="deviation", flow_out=flow_out)
        v_strict, _ = robust_boundary_min(result.P, sys, gamma, np.zeros(sys.dim),
                                          state_frame="deviation", flow_out="strict")
    else:
        if eq is None:
            raise ValueError(f"{kind} certificates need the equilibrium point")
        v_min = compute_vmin(result.P, eq, sys, flow_out=flow_out)
        v_strict = compute_vmin(result.P, eq, sys, flow_out="strict")

    tau_max = mu * v_min if kind.startswith("resiliency") else None
    prov = {
        "residual": result.residual,
        "min_eig_p": result.min_eig_p,
        "solver": result.method,
        "network_sha256": network_hash(sys.network),
        "flow_out": flow_out,
        "v_min_strict": v_strict,
        "v_min_full": (compute_vmin(result.P, eq, sys, flow_out="none")
                       if eq is not None else None),
        "sector_gain": g,
    }
    return Certificate(kind=kind, P=result.P, g=g, gamma=gamma, mu=mu,
                       v_min=float(v_min), tau_max=tau_max, system=sys, eq=eq,
                       provenance=prov)


# -- serialization -----------------------------------------------------------------


def certificate_to_json(cert: Certificate) -> dict:
    """JSON-ready document mirroring the certificate (matrices row-major)."""
    doc = {
        "kind": cert.kind,
        "g": cert.g,
        "gamma": cert.gamma,
        "mu": cert.mu,
        "v_min": cert.v_min,
        "tau_max": cert.tau_max,
        "P": {"rows": cert.P.shape[0], "cols": cert.P.shape[1],
              "data": [float(v) for v in cert.P.ravel()]},
        "equilibrium": None if cert.eq is None else {
            "angles": [float(v) for v in cert.eq.angles],
            "reference_bus": cert.eq.reference_bus,
            "margin": cert.eq.margin,
        },
        "provenance": {k: v for k, v in cert.provenance.items()},
    }
    return doc


def certificate_from_json(doc: dict, sys: LureSystem | None = None) -> Certificate:
    """Rebuild a certificate from its JSON document.

    When the system is supplied, the stored network hash must match and the
    equilibrium is reconstructed in the system's edge order.
    """
    if sys is not None:
        stored = doc.get("provenance", {}).get("network_sha256")
        if stored and stored != network_hash(sys.network):
            raise ValueError("certificate was issued for a different network")
    p = doc["P"]
    P = np.array(p["data"], dtype=float).reshape(p["rows"], p["cols"])
    eq = None
    if doc.get("equilibrium") is not None and sys is not None:
        angles = np.array(doc["equilibrium"]["angles"], dtype=float)
        full = np.zeros(sys.network.n_buses)
        full[: sys.n_dynamic] = angles
        diffs = sys.incidence @ full
        eq = EquilibriumPoint(angles=angles, edge_diffs=diffs,
                              margin=float(np.abs(diffs).max()), residual=np.nan,
                              reference_bus=doc["equilibrium"]["reference_bus"])
    return Certificate(kind=doc["kind"], P=P, g=doc["g"], gamma=doc["gamma"],
                       mu=doc["mu"], v_min=doc["v_min"], tau_max=doc["tau_max"],
                       system=sys, eq=eq, provenance=doc.get("provenance", {}))


# -- diagnostics --------------------------------------------------------------------


def vdot_decomposition(sys: LureSystem, P: np.ndarray, g: float,
                       eq: EquilibriumPoint, x: np.ndarray) -> dict:
    """Pieces of the algebraic identity behind the Lyapunov decrease proof.

    Returns vdot (along the true nonlinear dynamics), the sector form W,
    the quadratic remainder x'Qx and the completed square S'S, satisfying
    vdot = W - x'Qx - S'S identically.
    """
    F = np.sin(sys.C @ x + eq.edge_diffs) - np.sin(eq.edge_diffs)
    xdot = sys.A @ x - sys.B @ F
    vdot = float(2.0 * x @ P @ xdot)
    Cx = sys.C @ x
    w = float((F - g * Cx) @ (F - Cx))
    R = sys.B.T @ P - 0.5 * (g + 1.0) * sys.C
    Q = -(sys.A.T @ P + P @ sys.A - g * sys.C.T @ sys.C + R.T @ R)
    quad = float(x @ Q @ x)
    Svec = F + R @ x
    return {"vdot": vdot, "w": w, "quad": quad, "s_sq": float(Svec @ Svec)}
