"""Stochastic MPC for linear systems under Gaussian-mixture disturbances.

The pipeline: split the mixture noise into a discrete atom plus a shared
Gaussian residual, bound the residual's effect with probabilistic reachable
sets, tighten the chance constraints into deterministic sets on the nominal
state, optimize over an L-ary scenario tree of atom sequences, and refine
the tree input back to the real system through ``u = v + K e`` with a
posterior redraw of the atom. See README.md for the file formats and CLI.
"""

from .bmpc import (
    BmpcConfig,
    BmpcSolution,
    BmpcSolver,
    BmpcStatus,
    BranchTree,
    assemble,
    child_index,
    evaluate_cost,
    max_violation,
    shift_candidate,
    solve_bmpc,
)
from .closedloop import Controller, ControllerState, LoopSetup, Trajectory, run_episode
from .errors import (
    BothInfeasibleError,
    DimensionMismatchError,
    DomainError,
    EmptySetError,
    EmptyTighteningError,
    NoConvergenceError,
    NotSPDError,
    NotStableError,
    ParseError,
    SmpcError,
    SolverFaultError,
    ValidationError,
)
from .experiment import (
    ExperimentConfig,
    McStats,
    build_setup,
    load_config,
    lqr_gain,
    report,
    run_monte_carlo,
)
from .mixture import DiscreteDisturbance, GaussianMixture, ZeroMeanGaussian
from .qp import AdmmBackend, QpProblem, QpSolution, QpStatus, solve
from .rng import RandomStream, master_stream, substream
from .setops import (
    Ellipsoid,
    PolytopeH,
    chi2_inv,
    contains,
    dlyap,
    intersect,
    is_empty,
    is_subset,
    max_rpi,
    mink_diff_ellipsoid,
    pre_set,
    prune_rows,
    support,
)
from .tightening import (
    ChanceSpec,
    ErrorModel,
    StateConstraint,
    prs_ellipsoid,
    terminal_set,
    tighten,
)

__version__ = "0.1.0"
