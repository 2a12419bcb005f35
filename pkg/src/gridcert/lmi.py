"""Feasibility problems behind the certificates.

All certificate constructions reduce to one matrix inequality family

    [ Abar' P + P Abar + (1-g)^2/4 C'C    P Bbar ]
    [ Bbar' P                             -I     ]  <= 0,     P >= eps I

with Abar = A - (1+g)/2 B C and Bbar = B for plain stability, or B with
fault columns appended for the clearing-time variants.  Since Bbar Bbar'
is always B Lambda B' for a diagonal Lambda, each spec also carries the
equivalent algebraic-Riccati data, giving a fast direct solution path next
to the generic semidefinite one.  Every matrix returned by a solver is
re-validated by plain eigenvalue checks before anyone may use it.

Networks without an infinite bus have a neutral uniform-angle mode that
makes strict feasibility impossible; the margin in the solve is measured
on the complement of that direction (and the Riccati path works on the
quotient) so solvers still see an interior.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .statespace import LureSystem

_COUNT_LOCK = threading.Lock()
_SOLVE_COUNT = 0


def _bump_count():
    global _SOLVE_COUNT
    with _COUNT_LOCK:
        _SOLVE_COUNT += 1


def solve_count() -> int:
    """Total solve_lmi invocations in this process (for cache auditing)."""
    return _SOLVE_COUNT


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-6            # acceptance bound on the block residual
    eps: float = 1e-6            # strictness floor on P
    method: str = "auto"         # auto | riccati | sdp
    sdp_solver: str | None = None
    p_cap: float = 1e3
    riccati_etas: tuple[float, ...] = (1e-4, 1e-3, 1e-5, 1e-2, 1e-6)
    verbose: bool = False

    @staticmethod
    def from_env() -> "SolverSettings":
        """Settings overridden by the JSON file named in GRIDCERT_SOLVER_SETTINGS."""
        path = os.environ.get("GRIDCERT_SOLVER_SETTINGS")
        if not path:
            return SolverSettings()
        with open(path) as fh:
            data = json.load(fh)
        known = {k: data[k] for k in
                 ("tol", "eps", "method", "sdp_solver", "p_cap", "verbose") if k in data}
        return SolverSettings(**known)


@dataclass(frozen=True)
class LmiSpec:
    """One feasibility instance, fully determined by its matrices."""

    abar: np.ndarray
    bbar: np.ndarray             # block columns of the Schur form
    b_quad: np.ndarray           # B sqrt(Lambda): bbar @ bbar.T == b_quad @ b_quad.T
    q0: np.ndarray
    g: float
    mu: float | None
    kind: str                    # stability | resiliency-line | resiliency-all
    eps: float = 1e-6
    translation: np.ndarray | None = None   # neutral mode (uniform angles), or None
    conserved: np.ndarray | None = None     # P @ translation must align with this
    target_edge: int | None = None

    @property
    def dim(self) -> int:
        return self.abar.shape[0]

    @property
    def block_dim(self) -> int:
        return self.dim + self.bbar.shape[1]

    def block(self, P: np.ndarray) -> np.ndarray:
        """Constraint block evaluated at P, assembled in exact arithmetic."""
        m11 = self.abar.T @ P + P @ self.abar + self.q0
        pb = P @ self.bbar
        return np.block([[m11, pb], [pb.T, -np.eye(self.bbar.shape[1])]])

    def residual(self, P: np.ndarray) -> float:
        """Most-positive eigenvalue of the block at P (should be <= 0)."""
        return float(np.linalg.eigvalsh(self.block(P)).max())


@dataclass(frozen=True)
class FeasibilityResult:
    status: str                  # feasible | infeasible | inconclusive
    P: np.ndarray | None
    residual: float | None
    min_eig_p: float | None
    method: str = ""
    margin: float | None = None

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


def _sector_matrices(sys: LureSystem, g: float):
    abar = sys.A - 0.5 * (1.0 + g) * sys.B @ sys.C
    q0 = ((1.0 - g) ** 2 / 4.0) * sys.C.T @ sys.C
    return abar, q0


def assemble_stability_lmi(sys: LureSystem, g: float, eps: float = 1e-6) -> LmiSpec:
    """Lyapunov-decrease feasibility for the sector gain g in (0, 1)."""
    if not 0.0 < g < 1.0:
        raise ValueError(f"sector gain must lie in (0, 1), got {g}")
    abar, q0 = _sector_matrices(sys, g)
    return LmiSpec(abar=abar, bbar=sys.B.copy(), b_quad=sys.B.copy(), q0=q0,
                   g=g, mu=None, kind="stability", eps=eps,
                   translation=sys.translation_mode,
                   conserved=sys.conserved_covector)


def assemble_resiliency_lmi(sys: LureSystem, g: float, mu: float,
                            target="all", eps: float = 1e-6) -> LmiSpec:
    """Clearing-time feasibility: one tripped line or the all-lines form.

    ``target`` is ``"all"`` or a line, given as an edge index or a bus-id
    pair.  The single-line form appends the scaled fault column
    sqrt(mu) * B D_uv; the all-lines form appends sqrt(mu) * B, equivalent
    to the (1+mu) P B B' P strengthening.  mu = 0 degenerates to the plain
    stability block.
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    abar, q0 = _sector_matrices(sys, g)
    if mu == 0.0:
        base = assemble_stability_lmi(sys, g, eps)
        kind = "resiliency-all" if target == "all" else "resiliency-line"
        return replace(base, mu=0.0, kind=kind)
    lam = np.ones(sys.n_edges)
    if target == "all":
        bbar = np.hstack([sys.B, np.sqrt(mu) * sys.B])
        lam[:] = 1.0 + mu
        kind, edge = "resiliency-all", None
    else:
        edge = target if isinstance(target, (int, np.integer)) else None
        if edge is None:
            key = (min(target), max(target))
            try:
                edge = sys.edge_order.index(key)
            except ValueError:
                raise ValueError(f"unknown line {key[0]}-{key[1]}") from None
        if not 0 <= edge < sys.n_edges:
            raise ValueError(f"edge index {edge} out of range")
        bbar = np.hstack([sys.B, np.sqrt(mu) * sys.B[:, edge:edge + 1]])
        lam[edge] = 1.0 + mu
        kind = "resiliency-line"
    b_quad = sys.B * np.sqrt(lam)
    return LmiSpec(abar=abar, bbar=bbar, b_quad=b_quad, q0=q0, g=g, mu=mu,
                   kind=kind, eps=eps, translation=sys.translation_mode,
                   conserved=sys.conserved_covector, target_edge=edge)


# -- validation ---------------------------------------------------------------


def _validate(spec: LmiSpec, P: np.ndarray | None, settings: SolverSettings,
              method: str, margin=None) -> FeasibilityResult:
    if P is None:
        return FeasibilityResult("inconclusive", None, None, None, method)
    P = 0.5 * (P + P.T)
    res = spec.residual(P)
    min_eig = float(np.linalg.eigvalsh(P).min())
    ok = res <= settings.tol and min_eig >= spec.eps - settings.tol
    return FeasibilityResult("feasible" if ok else "inconclusive",
                             P if ok else None, res, min_eig, method, margin)


# -- direct Riccati path ------------------------------------------------------


def _riccati_path(spec: LmiSpec, settings: SolverSettings) -> FeasibilityResult:
    """Solve Abar'P + P Abar + P Bq Bq' P + Q0 + eta I = 0 on the quotient.

    For translation-invariant systems the neutral uniform-angle mode is
    deflated first and the solution lifted back with a rank-one term along
    the conserved covector, which leaves the block unchanged.  Solvable iff
    the quotient system's weighted transfer norm stays below one, so a
    failure here is not an infeasibility proof.
    """
    if spec.translation is not None:
        z = spec.translation / np.linalg.norm(spec.translation)
        W = sla.null_space(z[None, :])
        y0 = spec.conserved
    else:
        W = np.eye(spec.dim)
        y0 = None
    Ar = W.T @ spec.abar @ W
    Br = W.T @ spec.b_quad
    Qr = W.T @ spec.q0 @ W
    last_exc = None
    for eta in settings.riccati_etas:
        try:
            Pt = sla.solve_continuous_are(Ar, Br, Qr + eta * np.eye(Ar.shape[0]),
                                          -np.eye(Br.shape[1]))
        except Exception as exc:        # scipy raises LinAlgError or ValueError
            last_exc = exc
            continue
        P = W @ Pt @ W.T
        if y0 is not None:
            rho = max(np.trace(Pt) / Pt.shape[0], spec.eps) / (y0 @ y0)
            P = P + rho * np.outer(y0, y0)
        out = _validate(spec, P, settings, "riccati", margin=eta)
        if out.feasible:
            return out
    return FeasibilityResult("inconclusive", None, None, None,
                             f"riccati ({type(last_exc).__name__ if last_exc else 'validation'})")


# -- semidefinite path --------------------------------------------------------


def _deflated_identity(spec: LmiSpec) -> np.ndarray:
    nblk = spec.block_dim
    J = np.eye(nblk)
    if spec.translation is not None:
        nu = np.zeros(nblk)
        z = spec.translation / np.linalg.norm(spec.translation)
        nu[: spec.dim] = z
        J -= np.outer(nu, nu)
    return J


def _pick_solver(spec: LmiSpec, settings: SolverSettings) -> str:
    if settings.sdp_solver:
        return settings.sdp_solver
    return "CLARABEL" if spec.block_dim <= 120 else "SCS"


def _sdp_solve(spec: LmiSpec, settings: SolverSettings,
               normalization=None, cuts=None) -> FeasibilityResult:
    """maximize t s.t. block(P) <= -t I, eps I <= P <= cap I (margin form).

    With ``cuts`` the objective switches to maximizing the smallest cut
    value <M, P> subject to block(P) <= 0, used by the heuristic searches;
    ``normalization`` (matrix N, value v) adds <N, P> == v.  Translation-
    invariant systems have no strictly feasible block, so the semidefinite
    constraint is imposed on the quotient (which has an interior) together
    with the exact equality block @ nu == 0 on the neutral direction.
    """
    import cvxpy as cp

    d = spec.dim
    P = cp.Variable((d, d), symmetric=True)
    block = cp.bmat([[spec.abar.T @ P + P @ spec.abar + spec.q0, P @ spec.bbar],
                     [spec.bbar.T @ P, -np.eye(spec.bbar.shape[1])]])
    cons = [P >> spec.eps * np.eye(d), P << settings.p_cap * np.eye(d)]
    if spec.translation is not None:
        nu = np.zeros(spec.block_dim)
        nu[:d] = spec.translation / np.linalg.norm(spec.translation)
        Wb = sla.null_space(nu[None, :])
        raw = Wb.T @ block @ Wb
        reduced = 0.5 * (raw + raw.T)
        cons.append(block @ nu == 0)
    else:
        reduced = block
    red_dim = spec.block_dim - (0 if spec.translation is None else 1)
    t = cp.Variable()
    if cuts is None:
        cons.append(reduced << -t * np.eye(red_dim))
        objective = cp.Maximize(t)
    else:
        cons.append(reduced << 0)
        for M in cuts:
            cons.append(cp.sum(cp.multiply(M, P)) >= t)
        objective = cp.Maximize(t)
    if normalization is not None:
        N, v = normalization
        cons.append(cp.sum(cp.multiply(N, P)) == v)
    problem = cp.Problem(objective, cons)
    solver = _pick_solver(spec, settings)
    kwargs = {"verbose": settings.verbose}
    if solver == "SCS":
        kwargs.update(eps=1e-8, max_iters=200_000)
    try:
        problem.solve(solver=solver, **kwargs)
    except cp.SolverError:
        return FeasibilityResult("inconclusive", None, None, None, f"sdp ({solver} error)")
    if problem.status in ("infeasible", "infeasible_inaccurate"):
        return FeasibilityResult("infeasible", None, None, None, f"sdp ({solver})")
    if P.value is None:
        return FeasibilityResult("inconclusive", None, None, None, f"sdp ({solver})")
    margin = float(t.value) if t.value is not None else None
    if (cuts is None and normalization is None and problem.status == "optimal"
            and margin is not None and margin < -settings.tol):
        # the optimal margin is negative: no P in the box satisfies the block
        return FeasibilityResult("infeasible", None, None, None,
                                 f"sdp ({solver})", margin)
    return _validate(spec, P.value, settings, f"sdp ({solver})", margin)


def solve_lmi(spec: LmiSpec, settings: SolverSettings | None = None) -> FeasibilityResult:
    """Find P >= eps I making the constraint block negative semidefinite.

    ``method="auto"`` tries the direct Riccati construction and falls back
    to the semidefinite program.  Whatever the backend reports, the
    returned P has passed the independent eigenvalue validation; numerical
    failures surface as ``inconclusive``, never silently as feasible.
    """
    settings = settings or SolverSettings.from_env()
    _bump_count()
    if settings.method == "riccati":
        return _riccati_path(spec, settings)
    if settings.method == "sdp":
        return _sdp_solve(spec, settings)
    out = _riccati_path(spec, settings)
    if out.feasible:
        return out
    return _sdp_solve(spec, settings)


# -- searches -----------------------------------------------------------------


MU_GRID = np.geomspace(1e-3, 1e3, 24)


def _vmin_of(sys: LureSystem, eq, P: np.ndarray) -> float:
    from .certify import compute_vmin
    return compute_vmin(P, eq, sys)


def improve_vmin(sys: LureSystem, eq, spec: LmiSpec, P0: np.ndarray,
                 settings: SolverSettings | None = None, rounds: int = 2):
    """Push V_min up by re-solving with the active boundary minimizers as cuts.

    Each round collects the face minimizers of the current solution and
    re-solves maximizing the smallest value of P on those points, a linear
    objective.  Returns (P, v_min) for the best iterate seen.
    """
    from .certify import compute_vmin

    settings = settings or SolverSettings.from_env()
    best_p, best_v = P0, compute_vmin(P0, eq, sys)
    cuts: list[np.ndarray] = []
    P = P0
    for _ in range(rounds):
        _, detail = compute_vmin(P, eq, sys, details=True)
        cuts.extend(np.outer(pt, pt) for _, pt in detail)
        out = _sdp_solve(spec, settings, cuts=cuts)
        if not out.feasible:
            break
        P = out.P
        v = compute_vmin(P, eq, sys)
        if v > best_v:
            best_p, best_v = P, v
        else:
            break
    return best_p, best_v


def search_mu(sys: LureSystem, eq, g: float, target="all",
              settings: SolverSettings | None = None,
              refine_iters: int = 10, boost: bool = True):
    """Heuristic search for (P, mu) maximizing the clearing-time bound.

    Walks a 24-point log grid over mu (feasibility is monotone, so the walk
    stops at the first infeasible point), then golden-section refines the
    product mu * V_min on the log scale around the best grid point, and
    finally tries to improve V_min at the chosen mu by cut re-solves.
    Returns (P, mu, mu * V_min) or None when no mu is feasible.  No global
    optimality is claimed.
    """
    settings = settings or SolverSettings.from_env()

    def attempt(mu: float):
        spec = assemble_resiliency_lmi(sys, g, mu, target, settings.eps)
        out = solve_lmi(spec, settings)
        if not out.feasible:
            return None
        return spec, out.P, _vmin_of(sys, eq, out.P)

    evaluations: dict[float, tuple] = {}

    def score(mu: float) -> float:
        if mu not in evaluations:
            evaluations[mu] = attempt(mu)
        got = evaluations[mu]
        return -np.inf if got is None else mu * got[2]

    best_mu, best_score = None, 0.0
    prev = None
    for mu in MU_GRID:
        s = score(mu)
        if s == -np.inf:
            break
        if s > best_score:
            best_mu, best_score = mu, s
        prev = mu
    if best_mu is None:
        return None

    # golden-section refinement on log(mu) around the best grid point
    idx = int(np.argmin(np.abs(MU_GRID - best_mu)))
    lo = np.log(MU_GRID[max(idx - 1, 0)])
    hi_idx = min(idx + 1, len(MU_GRID) - 1)
    hi = np.log(MU_GRID[hi_idx]) if score(MU_GRID[hi_idx]) > -np.inf else np.log(best_mu)
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = score(np.exp(c)), score(np.exp(d))
    for _ in range(refine_iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = score(np.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = score(np.exp(d))
    for mu in (np.exp(c), np.exp(d)):
        if score(mu) > best_score:
            best_mu, best_score = mu, score(mu)

    spec, P, vmin = evaluations[best_mu]
    if boost and sys.dim <= 40:
        P2, v2 = improve_vmin(sys, eq, spec, P, settings)
        if best_mu * v2 > best_mu * vmin:
            P, vmin = P2, v2
    return P, float(best_mu), float(best_mu * vmin)


def search_p_for_state(sys: LureSystem, g: float, x0: np.ndarray, gamma: float,
                       settings: SolverSettings | None = None,
                       max_iter: int = 6, state_frame: str = "deviation"):
    """Look for a stability-LMI solution that certifies the given state.

    Candidate sequence: the centered max-margin solution, a solve that
    minimizes x0' P x0 under a trace normalization, then cut iterations
    that maximize the worst boundary value subject to x0' P x0 == 1.  The
    first candidate passing the robust-stability check wins.  Failure means
    nothing was found, not that the state is unstable.
    """
    import cvxpy as cp

    from .certify import robust_boundary_min

    settings = settings or SolverSettings.from_env()
    x0 = np.asarray(x0, dtype=float)
    spec = assemble_stability_lmi(sys, g, settings.eps)

    def passes(P):
        value, _ = robust_boundary_min(P, sys, gamma, x0, state_frame=state_frame)
        return float(x0 @ P @ x0) < value * (1.0 - 1e-9)

    out = solve_lmi(spec, settings)
    if out.status == "infeasible":
        return None
    candidates = [out.P] if out.feasible else []

    # linear-objective candidate: smallest V(x0) under a trace normalization
    d = spec.dim
    P = cp.Variable((d, d), symmetric=True)
    block = cp.bmat([[spec.abar.T @ P + P @ spec.abar + spec.q0, P @ spec.bbar],
                     [spec.bbar.T @ P, -np.eye(spec.bbar.shape[1])]])
    for trace_value in (float(d), None):
        cons = [block << 0, P >> spec.eps * np.eye(d)]
        if trace_value is not None:
            cons.append(cp.trace(P) == trace_value)
        else:
            cons.append(cp.trace(P) <= float(d))
        prob = cp.Problem(cp.Minimize(cp.quad_form(x0, P, assume_PSD=True)), cons)
        try:
            prob.solve(solver=_pick_solver(spec, settings))
        except cp.SolverError:
            continue
        if P.value is not None and prob.status in ("optimal", "optimal_inaccurate"):
            got = _validate(spec, P.value, settings, "sdp objective")
            if got.feasible:
                candidates.append(got.P)
            break

    for cand in candidates:
        if passes(cand):
            return cand

    # cut iterations: maximize the worst boundary value at fixed V(x0)
    Pcur = candidates[0] if candidates else None
    if Pcur is None:
        return None
    norm = (np.outer(x0, x0), 1.0)

    def cut_matrix(xh, dstar):
        if dstar is None:
            return np.outer(xh, xh)
        M = np.outer(xh, xh) - np.outer(dstar, xh - x0) - np.outer(xh - x0, dstar)
        return 0.5 * (M + M.T)

    cuts: list[np.ndarray] = []
    for _ in range(max_iter):
        _, points = robust_boundary_min(Pcur, sys, gamma, x0, state_frame=state_frame)
        cuts.extend(cut_matrix(xh, ds) for xh, ds in points)
        got = _sdp_solve(spec, settings, normalization=norm, cuts=cuts)
        if not got.feasible:
            return None
        Pcur = got.P
        if passes(Pcur):
            return Pcur
    return None


# -- SDPA export --------------------------------------------------------------


def write_sdpa(spec: LmiSpec, path: str) -> None:
    """Dump the margin formulation as a sparse SDPA (.dat-s) problem.

    Variables are the upper-triangular entries of P followed by the margin
    t; block 1 is -block(P) - t J >= 0, block 2 is P - eps I >= 0.  Useful
    for cross-checking with external semidefinite solvers.
    """
    d = spec.dim
    nblk = spec.block_dim
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    nvar = len(pairs) + 1
    J = _deflated_identity(spec)

    def basis(i, j):
        M = np.zeros((d, d))
        M[i, j] = M[j, i] = 1.0
        return M

    lines = [f"{nvar} = mDIM", "2 = nBLOCK", f"{nblk} {d} = bLOCKsTRUCT"]
    c = ["0.0"] * (nvar - 1) + ["-1.0"]          # SDPA minimizes c'x; we want max t
    lines.append(" ".join(c))

    def emit(matno, blkno, M, out):
        n = M.shape[0]
        for i in range(n):
            for j in range(i, n):
                if M[i, j] != 0.0:
                    out.append(f"{matno} {blkno} {i + 1} {j + 1} {float(M[i, j])!r}")

    entries: list[str] = []
    # F0: constant sides.  Block 1: K = [[q0,0],[0,-I]] moved to the rhs.
    F0_1 = np.zeros((nblk, nblk))
    F0_1[:d, :d] = spec.q0
    F0_1[d:, d:] = -np.eye(nblk - d)
    emit(0, 1, F0_1, entries)
    emit(0, 2, spec.eps * np.eye(d), entries)
    for k, (i, j) in enumerate(pairs, start=1):
        Eij = basis(i, j)
        M1 = np.zeros((nblk, nblk))
        M1[:d, :d] = -(spec.abar.T @ Eij + Eij @ spec.abar)
        M1[:d, d:] = -(Eij @ spec.bbar)
        M1[d:, :d] = M1[:d, d:].T
        emit(k, 1, M1, entries)
        emit(k, 2, Eij, entries)
    emit(nvar, 1, -J, entries)
    with open(path, "w") as fh:
        fh.write("\n".join(lines + entries) + "\n")
