"""Closed-loop execution: true-system simulation, error bookkeeping, input
refinement, and the conditional redraw of the nominal disturbance.

The controller only ever sees measurements: after applying ``u(k)`` and
observing ``x(k+1)`` it reconstructs ``w(k) = x(k+1) - A x(k) - B u(k)``,
draws an atom index from the posterior split of ``w(k)``, and re-roots its
tree prediction at the corresponding depth-1 node. The simulator injects
disturbances itself but never hands them to the controller, so the loop
runs exactly as it would against a real plant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ._mat import as_matrix, as_vector
from .bmpc import BmpcConfig, BmpcSolution, BmpcSolver, shift_candidate
from .errors import BothInfeasibleError, SolverFaultError
from .mixture import GaussianMixture
from .rng import RandomStream
from .setops import PolytopeH, contains

_RELATION_TOL = 1e-9  # error-recursion bookkeeping agreement


@dataclass(frozen=True)
class LoopSetup:
    """Precomputed problem: tightened sets live inside ``bmpc_cfg``."""

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    mixture: GaussianMixture
    bmpc_cfg: BmpcConfig
    x0: np.ndarray
    state_constraints: tuple  # ((name, PolytopeH), ...) original sets
    input_constraint: PolytopeH
    solver: BmpcSolver | None = None  # warmed master; episodes clone it

    def __post_init__(self):
        object.__setattr__(self, "A", as_matrix(self.A, "A"))
        object.__setattr__(self, "B", as_matrix(self.B, "B"))
        object.__setattr__(self, "K", as_matrix(self.K, "K"))
        object.__setattr__(self, "x0", as_vector(self.x0, "x0"))

    def master_solver(self) -> BmpcSolver:
        if self.solver is not None:
            return self.solver
        object.__setattr__(self, "solver", BmpcSolver(self.bmpc_cfg).warmup())
        return self.solver


@dataclass
class ControllerState:
    z_prev: np.ndarray  # previously predicted depth-1 node, x(0) initially
    e: np.ndarray
    k: int = 0


@dataclass
class Trajectory:
    """One episode of closed-loop data, one row per step."""

    x: np.ndarray  # (T+1, n)
    u: np.ndarray  # (T, m)
    z0: np.ndarray  # (T, n)
    e: np.ndarray  # (T, n)
    v0: np.ndarray  # (T, m)
    xi: np.ndarray  # (T,)
    w: np.ndarray  # (T, n) injected disturbance
    w_recon: np.ndarray  # (T, n) controller's reconstruction
    atom_idx: np.ndarray  # (T,) drawn indices, 0-based
    solve_time: np.ndarray  # (T,) seconds
    iterations: np.ndarray  # (T,)
    state_ok: dict = field(default_factory=dict)  # name -> (T,) bools, k=1..T
    input_ok: np.ndarray = None  # (T,) bools, k=0..T-1

    @property
    def steps(self) -> int:
        return self.u.shape[0]


class Controller:
    """Receding-horizon controller; one instance per episode.

    ``act`` solves the tree problem and returns the refined input
    ``u = v0 + K e`` with ``e = x - z0`` recomputed from the measurement
    (never integrated, so ``x = z0 + e`` holds exactly by construction).
    ``observe`` closes the step: reconstruct the disturbance, redraw the
    atom, re-root the prediction, and stash the shifted tree as the next
    warm start.
    """

    def __init__(self, setup: LoopSetup, solver: BmpcSolver | None = None):
        self.setup = setup
        self.solver = solver if solver is not None else setup.master_solver().fresh()
        self.state = ControllerState(
            z_prev=np.array(setup.x0, dtype=float), e=np.zeros(setup.x0.shape[0])
        )
        self._a_k = setup.A + setup.B @ setup.K
        self._warm: BmpcSolution | None = None
        self._last: BmpcSolution | None = None
        self._e_pred: np.ndarray | None = None  # A_K e + w_e from last step

    def act(self, x_meas) -> tuple[np.ndarray, BmpcSolution]:
        x_meas = as_vector(x_meas, "x_meas")
        try:
            sol = self.solver.solve(x_meas, self.state.z_prev, warm=self._warm)
        except BothInfeasibleError as exc:
            raise SolverFaultError(
                f"step {self.state.k}: no feasible reset variant ({exc})"
            ) from exc
        e = x_meas - sol.z0
        if sol.xi == 1 and self._e_pred is not None:
            drift = float(np.abs(e - self._e_pred).max())
            if drift > _RELATION_TOL:
                raise SolverFaultError(
                    f"step {self.state.k}: error recursion drifted by {drift:g}"
                )
        u = sol.v0 + self.setup.K @ e
        self.state.e = e
        self._last = sol
        return u, sol

    def observe(self, x_meas, u, x_next, rng: RandomStream) -> dict:
        x_meas = as_vector(x_meas)
        x_next = as_vector(x_next)
        u = as_vector(u)
        w = x_next - self.setup.A @ x_meas - self.setup.B @ u
        j, _, w_e = self.setup.mixture.sample_conditional(w, rng)
        self.state.z_prev = self._last.z_depth1(j + 1)
        self._warm = shift_candidate(self._last, j + 1, self.setup.bmpc_cfg)
        self._e_pred = self._a_k @ self.state.e + w_e
        self.state.k += 1
        return {"w": w, "j": j, "w_e": w_e}


def run_episode(setup: LoopSetup, T: int, rng: RandomStream,
                solver: BmpcSolver | None = None) -> Trajectory:
    """Simulate ``T`` steps of the true system under the refined controller.

    The injected disturbance and the controller's reconstruction are both
    recorded; they agree to rounding, which is asserted here because any
    mismatch means the simulator leaked information.
    """
    n, m = setup.A.shape[0], setup.B.shape[1]
    ctrl = Controller(setup, solver=solver)
    x = np.zeros((T + 1, n))
    x[0] = setup.x0
    u = np.zeros((T, m))
    z0 = np.zeros((T, n))
    e = np.zeros((T, n))
    v0 = np.zeros((T, m))
    xi = np.zeros(T, dtype=int)
    w_inj = np.zeros((T, n))
    w_rec = np.zeros((T, n))
    atom = np.zeros(T, dtype=int)
    stime = np.zeros(T)
    iters = np.zeros(T, dtype=int)

    for k in range(T):
        t0 = time.perf_counter()
        uk, sol = ctrl.act(x[k])
        stime[k] = time.perf_counter() - t0
        w = setup.mixture.sample(rng)
        x[k + 1] = setup.A @ x[k] + setup.B @ uk + w
        obs = ctrl.observe(x[k], uk, x[k + 1], rng)
        if float(np.abs(obs["w"] - w).max()) > 1e-12:
            raise SolverFaultError(f"step {k}: disturbance reconstruction mismatch")
        u[k], z0[k], e[k], v0[k] = uk, sol.z0, ctrl.state.e, sol.v0
        xi[k], w_inj[k], w_rec[k], atom[k] = sol.xi, w, obs["w"], obs["j"]
        iters[k] = sol.iterations

    state_ok = {
        name: np.array([contains(poly, x[k]) for k in range(1, T + 1)])
        for name, poly in setup.state_constraints
    }
    input_ok = np.array([contains(setup.input_constraint, u[k]) for k in range(T)])
    return Trajectory(x, u, z0, e, v0, xi, w_inj, w_rec, atom, stime, iters,
                      state_ok, input_ok)
