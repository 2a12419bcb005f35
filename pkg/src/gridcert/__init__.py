"""Transient stability and resiliency certificates for lossless power grids.

The toolkit models a grid as a structure-preserving network of second-order
generator buses and first-order load buses coupled by sinusoidal AC flows,
rewrites it as a Lur'e system, and constructs quadratic Lyapunov certificates
by semidefinite feasibility.  Every certificate can be cross-checked against
an independent time-domain simulation oracle.
"""

__version__ = "0.1.0"

from .network import (
    Bus,
    Line,
    PowerNetwork,
    NetworkError,
    parse_network_native,
    parse_matpower_case,
    normalize_network,
    with_random_dynamics,
    scale_generation,
)
from .statespace import LureSystem, build_incidence, build_lure_system
from .equilibrium import (
    EquilibriumPoint,
    SectorGains,
    ConvergenceError,
    solve_equilibrium,
    sync_condition_margin,
    sector_gains,
)
from .lmi import (
    LmiSpec,
    FeasibilityResult,
    SolverSettings,
    assemble_stability_lmi,
    assemble_resiliency_lmi,
    solve_lmi,
    search_mu,
    search_p_for_state,
    write_sdpa,
    solve_count,
)
from .certify import (
    Certificate,
    CertResult,
    lyapunov_value,
    compute_vmin,
    certify_stability,
    certify_robust_stability,
    certify_resiliency,
    certify_robust_resiliency,
    issue_certificate,
    certificate_to_json,
    certificate_from_json,
)
from .sim import (
    IntegratorConfig,
    Trajectory,
    FaultScenario,
    OracleReport,
    rhs_post_fault,
    rhs_fault_on,
    integrate,
    simulate_post_fault,
    run_fault_scenario,
    verify_convergence,
    verify_certificate_by_simulation,
    trajectory_to_csv,
)
