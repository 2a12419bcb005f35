"""Command-line surface: certification, screening, simulation, validation.

Exit codes: 0 certified/success, 1 not-certified or inconclusive, 2 input
or numerical error.  Reports are JSON with schema version 1, a stable field
order, floats printed with 17 significant digits, and no volatile content
unless ``--timings`` is passed, so identical configurations produce
byte-identical reports.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys as _sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__, certify, lmi, network, sim
from .equilibrium import ConvergenceError, sector_gains, solve_equilibrium, sync_condition_margin
from .network import NetworkError
from .statespace import build_lure_system

SCHEMA = 1


class CliError(ValueError):
    pass


# -- report plumbing -----------------------------------------------------------


def _json_escape(s: str) -> str:
    out = []
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return "".join(out)


def _dump_json(obj, indent: int = 0) -> str:
    """Deterministic JSON: insertion-ordered keys, floats at 17 significant digits."""
    pad = "  " * indent
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, str):
        return f'"{_json_escape(obj)}"'
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if np.isnan(v):
            return '"nan"'
        if np.isinf(v):
            return '"inf"' if v > 0 else '"-inf"'
        return format(v, ".17g")
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        inner = ", ".join(_dump_json(v, indent + 1) for v in obj)
        return f"[{inner}]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        rows = [f'{pad}  "{_json_escape(str(k))}": {_dump_json(v, indent + 1)}'
                for k, v in obj.items()]
        return "{\n" + ",\n".join(rows) + f"\n{pad}}}"
    raise TypeError(f"cannot serialize {type(obj)!r}")


def write_report(report: dict, path: str | None) -> None:
    text = _dump_json(report) + "\n"
    if path is None or path == "-":
        _sys.stdout.write(text)
        return
    with open(path, "w") as fh:
        fh.write(text)


# -- config ---------------------------------------------------------------------


@dataclass
class RunConfig:
    net_path: str
    fmt: str = "auto"
    gamma: float | None = None
    mu: float | None = None
    mu_search: bool = False
    seed: int = 7
    tol: float = 1e-3
    output: str | None = None
    workers: int | None = None
    timings: bool = False


def _parse_angle(text: str) -> float:
    """Accept plain floats and pi fractions like ``pi/6`` or ``2pi/3``."""
    t = text.strip().lower().replace(" ", "")
    if "pi" in t:
        head, _, tail = t.partition("pi")
        num = float(head) if head not in ("", "+", "-") else (-1.0 if head == "-" else 1.0)
        den = float(tail[1:]) if tail.startswith("/") else 1.0
        return num * np.pi / den
    return float(t)


def _parse_state(text: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",") if t.strip() != ""])
    except ValueError:
        raise CliError(f"bad state vector {text!r}") from None


def _parse_line_key(text: str) -> tuple[int, int]:
    try:
        a, b = text.replace(",", "-").split("-")
        return (int(a), int(b))
    except ValueError:
        raise CliError(f"bad line {text!r}; expected u-v") from None


def _load_network(cfg: RunConfig, need_dynamics: bool):
    try:
        with open(cfg.net_path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read network file: {exc}") from exc
    digest = hashlib.sha256(text.encode()).hexdigest()
    fmt = cfg.fmt
    if fmt == "auto":
        fmt = "matpower" if cfg.net_path.endswith(".m") or "mpc." in text else "native"
    if fmt == "matpower":
        net = network.parse_matpower_case(text)
    elif fmt == "native":
        net = network.parse_network_native(text)
    else:
        raise CliError(f"unknown format {fmt!r}")
    net = network.normalize_network(net)
    randomized = False
    if need_dynamics:
        missing = any(b.kind == network.GENERATOR and b.inertia is None for b in net.buses)
        if missing:
            net = network.with_random_dynamics(net, cfg.seed)
            randomized = True
    return net, {"network": cfg.net_path, "sha256": digest, "format": fmt,
                 "dynamics_randomized": randomized}


def _base_report(command: str, cfg: RunConfig, inputs: dict) -> dict:
    return {
        "schema": SCHEMA,
        "toolkit_version": __version__,
        "command": command,
        "config": {
            "gamma": cfg.gamma,
            "mu": cfg.mu,
            "seed": cfg.seed,
            "tolerance": cfg.tol,
        },
        "inputs": inputs,
    }


def _cert_summary(cert: certify.Certificate) -> dict:
    return certify.certificate_to_json(cert)


# -- subcommands ------------------------------------------------------------------


def _cmd_solve_eq(args, cfg: RunConfig):
    net, inputs = _load_network(cfg, need_dynamics=False)
    eq = solve_equilibrium(net)
    report = _base_report("solve-eq", cfg, inputs)
    report["equilibrium"] = {
        "angles": list(eq.angles),
        "edge_diffs": list(eq.edge_diffs),
        "margin": eq.margin,
        "residual": eq.residual,
        "reference_bus": eq.reference_bus,
        "within_polytope": eq.within_polytope,
    }
    return (0 if eq.within_polytope else 1), report


def _cmd_check_sync(args, cfg: RunConfig):
    net, inputs = _load_network(cfg, need_dynamics=False)
    if args.scale_gen:
        spec, factor = args.scale_gen.split(":")
        ids = _expand_ids(spec)
        net = network.scale_generation(net, ids, float(factor))
    if args.drop_line:
        net = network.drop_line(net, _parse_line_key(args.drop_line))
    weighted = args.weighting == "coupling"
    margin = sync_condition_margin(net, weighted=weighted)
    gamma = cfg.gamma if cfg.gamma is not None else np.pi / 2
    ok = margin <= np.sin(gamma)
    report = _base_report("check-sync", cfg, inputs)
    report["sync"] = {
        "margin": margin,
        "sin_gamma": float(np.sin(gamma)),
        "satisfied": ok,
        "weighting": args.weighting,
        "scale_gen": args.scale_gen,
        "drop_line": args.drop_line,
    }
    return (0 if ok else 1), report


def _expand_ids(spec: str) -> list[int]:
    out: list[int] = []
    for part in spec.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _load_certificate(path: str, sysm) -> certify.Certificate:
    import json as _json
    try:
        with open(path) as fh:
            doc = _json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read certificate: {exc}") from exc
    return certify.certificate_from_json(doc, sysm)


def _cmd_certify(args, cfg: RunConfig):
    net, inputs = _load_network(cfg, need_dynamics=True)
    sysm = build_lure_system(net)
    report = _base_report(f"certify {args.mode}", cfg, inputs)

    if args.cert:
        cert = _load_certificate(args.cert, sysm)
        state = _parse_state(args.state) if args.state else None
        if args.mode == "stability":
            res = certify.certify_stability(cert, state)
        elif args.mode == "robust":
            res = certify.certify_robust_stability(cert, state, state_frame=args.frame)
        else:
            if args.tau is None:
                raise CliError("certify resiliency needs --tau")
            res = certify.certify_resiliency(cert, args.tau)
            report["tau"] = args.tau
        report["certificate"] = _cert_summary(cert)
        report["verdict"] = res.verdict
        report["margin"] = res.margin
        report["detail"] = res.detail
        return (0 if res.certified else 1), report

    if args.mode == "stability":
        eq = solve_equilibrium(net)
        cert = certify.issue_certificate(sysm, kind="stability", eq=eq,
                                         gamma=cfg.gamma)
        state = _parse_state(args.state)
        res = certify.certify_stability(cert, state)
    elif args.mode == "robust":
        if cfg.gamma is None:
            raise CliError("certify robust needs --gamma")
        margin = sync_condition_margin(net)
        sync_ok = margin <= np.sin(cfg.gamma)
        state = _parse_state(args.state)
        g = sector_gains(gamma=cfg.gamma).global_gain
        P = lmi.search_p_for_state(sysm, g, state, cfg.gamma,
                                   state_frame=args.frame)
        if P is None:
            report["verdict"] = "not-certified"
            report["detail"] = "no-feasible-p"
            return 1, report
        cert = certify.issue_certificate(sysm, kind="robust-stability",
                                         gamma=cfg.gamma, P=P)
        res = certify.certify_robust_stability(cert, state, state_frame=args.frame)
        if not sync_ok:
            res = certify.CertResult("not-certified", float(np.sin(cfg.gamma) - margin),
                                     "sync-condition-violated")
        report["sync_margin"] = margin
    else:  # resiliency
        eq = solve_equilibrium(net)
        target = "all" if args.all_lines else _parse_line_key(args.line)
        kind = "resiliency-all" if args.all_lines else "resiliency-line"
        if cfg.mu_search:
            g = sector_gains(eq).global_gain
            found = lmi.search_mu(sysm, eq, g, "all" if args.all_lines else target)
            if found is None:
                report["verdict"] = "not-certified"
                report["detail"] = "no-feasible-mu"
                return 1, report
            P, mu, _ = found
            cert = certify.issue_certificate(sysm, kind=kind, eq=eq, mu=mu,
                                             target=target, P=P)
        else:
            if cfg.mu is None:
                raise CliError("certify resiliency needs --mu or --search-mu")
            cert = certify.issue_certificate(sysm, kind=kind, eq=eq, mu=cfg.mu,
                                             target=target)
        if args.tau is None:
            raise CliError("certify resiliency needs --tau")
        pre_eq = None
        if args.pre_net:
            pre_cfg = RunConfig(net_path=args.pre_net, fmt=cfg.fmt, seed=cfg.seed)
            pre_net, _ = _load_network(pre_cfg, need_dynamics=False)
            pre_eq = solve_equilibrium(pre_net)
        res = certify.certify_resiliency(cert, args.tau, pre_eq=pre_eq)
        report["tau"] = args.tau

    report["certificate"] = _cert_summary(cert)
    report["verdict"] = res.verdict
    report["margin"] = res.margin
    report["detail"] = res.detail
    if args.save_cert:
        with open(args.save_cert, "w") as fh:
            fh.write(_dump_json(certify.certificate_to_json(cert)) + "\n")
        report["saved_certificate"] = args.save_cert
    return (0 if res.certified else 1), report


def _cmd_screen(args, cfg: RunConfig):
    net, inputs = _load_network(cfg, need_dynamics=True)
    sysm = build_lure_system(net)
    try:
        with open(args.list) as fh:
            rows = [ln.split("#", 1)[0].strip() for ln in fh]
    except OSError as exc:
        raise CliError(f"cannot read contingency list: {exc}") from exc
    rows = [r for r in rows if r]
    solves_before = lmi.solve_count()
    report = _base_report("screen", cfg, inputs)
    report["mode"] = args.mode

    if args.mode == "resiliency":
        if cfg.mu is None:
            raise CliError("screen --mode resiliency needs --mu")
        eq = solve_equilibrium(net)
        cert = certify.issue_certificate(sysm, kind="resiliency-all", eq=eq, mu=cfg.mu)

        def judge(row: str) -> dict:
            key_txt, tau_txt = row.split()
            key = _parse_line_key(key_txt)
            if key not in sysm.edge_order:
                return {"line": f"{key[0]}-{key[1]}", "verdict": "error",
                        "detail": "unknown-line"}
            res = certify.certify_resiliency(cert, float(tau_txt))
            return {"line": f"{key[0]}-{key[1]}", "tau": float(tau_txt),
                    "verdict": res.verdict, "margin": res.margin,
                    "detail": res.detail}
    else:
        if cfg.gamma is None:
            raise CliError("screen --mode robust needs --gamma")
        cert = certify.issue_certificate(sysm, kind="robust-stability", gamma=cfg.gamma)
        sin_gamma = float(np.sin(cfg.gamma))

        def judge(row: str) -> dict:
            if "@" in row:
                state_txt, scale_txt = row.split("@")
                scale = float(scale_txt)
            else:
                state_txt, scale = row, 1.0
            x0 = _parse_state(state_txt)
            gens = [b.id for b in net.buses if b.kind == network.GENERATOR]
            scen_net = net if scale == 1.0 else network.scale_generation(net, gens, scale)
            margin = sync_condition_margin(scen_net)
            if margin > sin_gamma:
                return {"state": state_txt.strip(), "scale": scale,
                        "verdict": "not-certified", "margin": sin_gamma - margin,
                        "detail": "sync-condition-violated"}
            v0 = float(x0 @ cert.P @ x0)
            res = certify.CertResult(
                "certified" if v0 < cert.v_min * (1 - 1e-9) else "not-certified",
                cert.v_min - v0,
                "" if v0 < cert.v_min * (1 - 1e-9) else "level-above-boundary-min")
            diffs = sysm.edge_diffs(x0)
            if np.max(np.abs(diffs)) > np.pi / 2 - cfg.gamma + 1e-12:
                res = certify.CertResult("not-certified", res.margin, "outside-polytope")
            return {"state": state_txt.strip(), "scale": scale,
                    "verdict": res.verdict, "margin": res.margin,
                    "detail": res.detail}

    workers = cfg.workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        scenarios = list(pool.map(judge, rows))
    report["certificate"] = _cert_summary(cert)
    report["scenarios"] = scenarios
    report["lmi_solves"] = lmi.solve_count() - solves_before
    ok = all(s["verdict"] == "certified" for s in scenarios) if scenarios else True
    return (0 if ok else 1), report


def _cmd_simulate(args, cfg: RunConfig):
    net, inputs = _load_network(cfg, need_dynamics=True)
    sysm = build_lure_system(net)
    eq = solve_equilibrium(net)
    icfg = sim.IntegratorConfig(step=args.step)
    report = _base_report("simulate", cfg, inputs)
    if args.fault:
        scenario = sim.FaultScenario(line=_parse_line_key(args.fault),
                                     clearing_time=args.tau, pre_eq=eq, post_eq=eq)
        fault_traj, post_traj, tau_used = sim.run_fault_scenario(
            sysm, scenario, args.horizon, icfg)
        traj = sim.Trajectory(np.concatenate([fault_traj.times, post_traj.times[1:]]),
                              np.vstack([fault_traj.states, post_traj.states[1:]]))
        report["tau_used"] = tau_used
    else:
        state = _parse_state(args.state)
        traj = sim.simulate_post_fault(sysm, eq, state, args.horizon, icfg)
    converged = sim.verify_convergence(traj, eq, cfg.tol)
    if args.out_csv:
        sim.trajectory_to_csv(traj, sysm.state_labels(), args.out_csv)
        report["csv"] = args.out_csv
    report["converged"] = converged
    report["final_state"] = list(traj.final)
    return (0 if converged else 1), report


def _cmd_validate(args, cfg: RunConfig):
    net, inputs = _load_network(cfg, need_dynamics=True)
    sysm = build_lure_system(net)
    eq = solve_equilibrium(net)
    if cfg.mu is None:
        raise CliError("validate needs --mu")
    kind = "resiliency-all" if args.all_lines else "resiliency-line"
    target = "all" if args.all_lines else _parse_line_key(args.line)
    cert = certify.issue_certificate(sysm, kind=kind, eq=eq, mu=cfg.mu, target=target)
    res = certify.certify_resiliency(cert, args.tau)
    lines = list(sysm.edge_order) if args.all_lines else [_parse_line_key(args.line)]
    oracle_rows = []
    all_ok = True
    for key in lines:
        scen = sim.FaultScenario(line=key, clearing_time=args.tau,
                                 pre_eq=eq, post_eq=eq)
        rep = sim.verify_certificate_by_simulation(
            scen, cert, horizon=args.horizon,
            tol=cfg.tol, cfg=sim.IntegratorConfig(step=args.step))
        oracle_rows.append({
            "line": f"{key[0]}-{key[1]}",
            "converged": rep.converged,
            "r_invariant": rep.r_invariant,
            "v_monotone": rep.v_monotone,
            "growth_ok": rep.growth_ok,
            "confirmed": rep.confirmed,
        })
        all_ok = all_ok and rep.confirmed
    report = _base_report("validate", cfg, inputs)
    report["certificate"] = _cert_summary(cert)
    report["tau"] = args.tau
    report["verdict"] = res.verdict
    report["oracle"] = oracle_rows
    ok = res.certified and all_ok
    report["confirmed"] = ok
    return (0 if ok else 1), report


# -- entry point --------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridcert",
                                 description="transient stability and resiliency certificates")
    ap.add_argument("--report", default=None, help="write the JSON report here instead of stdout")
    ap.add_argument("--timings", action="store_true",
                    help="embed wall-clock timings (breaks byte-for-byte determinism)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, dynamics=False):
        p.add_argument("--net", required=True, dest="net_path")
        p.add_argument("--format", default="auto", choices=("auto", "native", "matpower"))
        p.add_argument("--gamma", type=_parse_angle, default=None)
        p.add_argument("--seed", type=int, default=7,
                       help="seed for inertia/damping randomization when the format lacks them")
        p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("solve-eq", help="solve the equilibrium equations")
    common(p)

    p = sub.add_parser("check-sync", help="evaluate the synchronization condition")
    common(p)
    p.add_argument("--scale-gen", default=None, metavar="IDS:FACTOR",
                   help="scale generation at buses, e.g. 1-16:1.5")
    p.add_argument("--drop-line", default=None, metavar="U-V")
    p.add_argument("--weighting", default="coupling", choices=("coupling", "unit"))

    p = sub.add_parser("certify", help="issue and apply a certificate")
    p.add_argument("mode", choices=("stability", "robust", "resiliency"))
    common(p)
    p.add_argument("--state", default=None, help="comma-separated state vector")
    p.add_argument("--frame", default="deviation", choices=("deviation", "absolute"))
    p.add_argument("--line", default=None, metavar="U-V")
    p.add_argument("--all-lines", action="store_true")
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--search-mu", action="store_true")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--pre-net", default=None,
                   help="network file for a differing pre-fault equilibrium")
    p.add_argument("--cert", default=None,
                   help="reuse a saved certificate instead of solving")
    p.add_argument("--save-cert", default=None,
                   help="write the issued certificate as JSON for later reuse")

    p = sub.add_parser("screen", help="batch-assess a contingency list with one cached certificate")
    common(p)
    p.add_argument("--list", required=True)
    p.add_argument("--mode", default="resiliency", choices=("resiliency", "robust"))
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("simulate", help="time-domain run with CSV export")
    common(p)
    p.add_argument("--fault", default=None, metavar="U-V")
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--state", default=None)
    p.add_argument("--horizon", type=float, default=50.0)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--out-csv", default=None)

    p = sub.add_parser("validate", help="oracle-check a resiliency certificate by simulation")
    common(p)
    p.add_argument("--line", default=None, metavar="U-V")
    p.add_argument("--all-lines", action="store_true")
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--horizon", type=float, default=40.0)
    p.add_argument("--step", type=float, default=1e-3)

    return ap


_HANDLERS = {
    "solve-eq": _cmd_solve_eq,
    "check-sync": _cmd_check_sync,
    "certify": _cmd_certify,
    "screen": _cmd_screen,
    "simulate": _cmd_simulate,
    "validate": _cmd_validate,
}


def run_command(argv: list[str]) -> tuple[int, dict | None]:
    """Parse and run one command; returns (exit code, report)."""
    ap = _build_parser()
    args = ap.parse_args(argv)
    cfg = RunConfig(
        net_path=args.net_path,
        fmt=args.format,
        gamma=getattr(args, "gamma", None),
        mu=getattr(args, "mu", None),
        mu_search=getattr(args, "search_mu", False),
        seed=args.seed,
        tol=args.tol,
        output=args.report,
        workers=getattr(args, "workers", None),
        timings=args.timings,
    )
    t0 = time.perf_counter()
    try:
        code, report = _HANDLERS[args.command](args, cfg)
    except (CliError, NetworkError, ConvergenceError, ValueError) as exc:
        report = {"schema": SCHEMA, "toolkit_version": __version__,
                  "command": args.command, "error": str(exc)}
        write_report(report, cfg.output)
        return 2, report
    except FloatingPointError as exc:
        report = {"schema": SCHEMA, "toolkit_version": __version__,
                  "command": args.command, "error": f"numerical failure: {exc}"}
        write_report(report, cfg.output)
        return 2, report
    if cfg.timings:
        report["timings"] = {"wall_seconds": time.perf_counter() - t0}
    write_report(report, cfg.output)
    return code, report


def main(argv: list[str] | None = None) -> int:
    code, _ = run_command(_sys.argv[1:] if argv is None else argv)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
