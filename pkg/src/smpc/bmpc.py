"""Scenario-tree MPC over the nominal dynamics.

Every depth-``N`` path of an L-ary tree fixes one realization of the atom
sequence; tree nodes carry their own state/input decision variables tied
together by the dynamics ``z_child = A z + B v + mu_d``. The root is pinned
either to the measured state (``xi = 0``) or to the previously predicted
depth-1 node (``xi = 1``); the binary choice is handled by enumerating the
two convex QPs rather than by mixed-integer programming.

Node indexing follows the convention that the children of branch ``j`` at
depth ``i`` are branches ``(j-1)L + d`` at depth ``i+1`` for
``d = 1, ..., L`` (1-based, as in :func:`child_index`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ._mat import as_matrix, as_vector, check_psd
from .errors import BothInfeasibleError, DimensionMismatchError, NoConvergenceError
from .qp import AdmmBackend, QpProblem, QpStatus
from .setops import PolytopeH


def child_index(i: int, j: int, d: int, L: int) -> int:
    """Branch index at depth ``i+1`` of child ``d`` of node ``(i, j)``; 1-based."""
    if not 1 <= j <= L**i:
        raise IndexError(f"branch {j} out of range at depth {i}")
    if not 1 <= d <= L:
        raise IndexError(f"disturbance index {d} out of range")
    return (j - 1) * L + d


class BranchTree:
    """Index bookkeeping for the L-ary tree of horizon N."""

    def __init__(self, L: int, N: int, weights):
        if L < 1 or N < 1:
            raise DimensionMismatchError("tree needs L >= 1 and N >= 1")
        weights = as_vector(weights, "weights")
        if weights.shape[0] != L:
            raise DimensionMismatchError("one weight per atom required")
        self.L, self.N = L, N
        self.weights = weights
        # state nodes exist at depths 0..N, input nodes at depths 0..N-1
        self.state_offset = np.concatenate([[0], np.cumsum([L**i for i in range(N + 1)])])
        self.state_count = int(self.state_offset[-1])
        self.input_count = int(self.state_offset[-2])
        depth = np.concatenate([np.full(L**i, i, dtype=int) for i in range(N + 1)])
        self.state_depth = depth
        prob = np.ones(self.state_count)
        for i in range(N):
            for j in range(L**i):
                p = prob[self.state_node(i, j + 1)]
                for d in range(L):
                    prob[self.state_node(i + 1, (j * L) + d + 1)] = p * weights[d]
        self.state_prob = prob
        self.input_prob = prob[: self.input_count].copy()
        # edges ordered by (depth, branch, disturbance)
        parents, inputs, children, atoms = [], [], [], []
        for i in range(N):
            for j in range(1, L**i + 1):
                for d in range(1, L + 1):
                    parents.append(self.state_node(i, j))
                    inputs.append(self.input_node(i, j))
                    children.append(self.state_node(i + 1, child_index(i, j, d, L)))
                    atoms.append(d - 1)
        self.edge_parent = np.array(parents, dtype=int)
        self.edge_input = np.array(inputs, dtype=int)
        self.edge_child = np.array(children, dtype=int)
        self.edge_atom = np.array(atoms, dtype=int)

    def state_node(self, i: int, j: int) -> int:
        """Flat state-node index of branch ``j`` (1-based) at depth ``i``."""
        if not 0 <= i <= self.N or not 1 <= j <= self.L**i:
            raise IndexError(f"no state node ({i}, {j})")
        return int(self.state_offset[i]) + j - 1

    def input_node(self, i: int, j: int) -> int:
        if not 0 <= i <= self.N - 1 or not 1 <= j <= self.L**i:
            raise IndexError(f"no input node ({i}, {j})")
        return int(self.state_offset[i]) + j - 1

    def leaves(self) -> np.ndarray:
        return np.arange(self.state_offset[self.N], self.state_count)


class BmpcStatus(enum.Enum):
    OPTIMAL = "optimal"
    CANDIDATE = "candidate"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class BmpcConfig:
    """Everything the tree optimization needs, with tightened sets fixed.

    ``K`` is the feedback gain the terminal set was built for; candidate
    shifts use it to extend the tail with ``v = K z``.
    """

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    Z: PolytopeH
    V: PolytopeH
    Z_F: PolytopeH
    atoms: np.ndarray  # (L, n)
    weights: np.ndarray  # (L,)
    N: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    epsilon: float = 1e3
    tree: BranchTree = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        a = as_matrix(self.A, "A")
        b = as_matrix(self.B, "B")
        n, m = a.shape[0], b.shape[1]
        if a.shape != (n, n) or b.shape != (n, m):
            raise DimensionMismatchError("A must be n x n and B n x m")
        k = as_matrix(self.K, "K")
        if k.shape != (m, n):
            raise DimensionMismatchError("K must be m x n")
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if atoms.shape[1] != n:
            raise DimensionMismatchError("atoms must live in state space")
        weights = as_vector(self.weights, "weights")
        q = check_psd(as_matrix(self.Q, "Q"), name="Q")
        r = check_psd(as_matrix(self.R, "R"), name="R")
        p = check_psd(as_matrix(self.P, "P"), name="P")
        if q.shape != (n, n) or p.shape != (n, n) or r.shape != (m, m):
            raise DimensionMismatchError("cost weight shapes inconsistent with system")
        if self.Z.dim != n or self.Z_F.dim != n or self.V.dim != m:
            raise DimensionMismatchError("constraint set dimensions inconsistent")
        if self.epsilon < 0:
            raise DimensionMismatchError("epsilon must be nonnegative")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "K", k)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "R", r)
        object.__setattr__(self, "P", p)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "tree", BranchTree(atoms.shape[0], int(self.N), weights))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass
class BmpcSolution:
    xi: int
    z_nodes: np.ndarray  # (S, n)
    v_nodes: np.ndarray  # (I, m)
    cost: float
    status: BmpcStatus
    iterations: int = 0

    @property
    def z0(self) -> np.ndarray:
        return self.z_nodes[0]

    @property
    def v0(self) -> np.ndarray:
        return self.v_nodes[0]

    def z_depth1(self, d: int) -> np.ndarray:
        """Depth-1 state node for atom index ``d`` (1-based)."""
        return self.z_nodes[d]


# ---------------------------------------------------------------------------
# matrix assembly
# ---------------------------------------------------------------------------


def _build_matrices(cfg: BmpcConfig):
    """Constraint and cost matrices; only b_eq[:n] changes between solves."""
    tree = cfg.tree
    n, m = cfg.n, cfg.m
    S, I = tree.state_count, tree.input_count
    nvar = S * n + I * m

    def zslice(s):
        return slice(s * n, (s + 1) * n)

    def vslice(t):
        return slice(S * n + t * m, S * n + (t + 1) * m)

    E = tree.edge_parent.shape[0]
    a_eq = np.zeros((n + E * n, nvar))
    b_eq_fixed = np.zeros(n + E * n)
    a_eq[0:n, zslice(0)] = np.eye(n)  # root pin; rhs set per solve
    for e in range(E):
        rows = slice(n + e * n, n + (e + 1) * n)
        a_eq[rows, zslice(tree.edge_child[e])] = np.eye(n)
        a_eq[rows, zslice(tree.edge_parent[e])] = -cfg.A
        a_eq[rows, vslice(tree.edge_input[e])] = -cfg.B
        b_eq_fixed[rows] = cfg.atoms[tree.edge_atom[e]]

    blocks_a = []
    blocks_b = []
    for s in range(S):
        if tree.state_depth[s] < cfg.N:
            rows = np.zeros((cfg.Z.nrows, nvar))
            rows[:, zslice(s)] = cfg.Z.A
            blocks_a.append(rows)
            blocks_b.append(cfg.Z.b)
    for s in tree.leaves():
        rows = np.zeros((cfg.Z_F.nrows, nvar))
        rows[:, zslice(s)] = cfg.Z_F.A
        blocks_a.append(rows)
        blocks_b.append(cfg.Z_F.b)
    for t in range(I):
        rows = np.zeros((cfg.V.nrows, nvar))
        rows[:, vslice(t)] = cfg.V.A
        blocks_a.append(rows)
        blocks_b.append(cfg.V.b)
    a_in = np.vstack(blocks_a)
    b_in = np.concatenate(blocks_b)

    h = np.zeros((nvar, nvar))
    for s in range(S):
        w = 2.0 * tree.state_prob[s]
        h[zslice(s), zslice(s)] = w * (cfg.P if tree.state_depth[s] == cfg.N else cfg.Q)
    for t in range(I):
        h[vslice(t), vslice(t)] = 2.0 * tree.input_prob[t] * cfg.R
    return h, a_eq, b_eq_fixed, a_in, b_in


def _pack(cfg: BmpcConfig, z_nodes, v_nodes) -> np.ndarray:
    return np.concatenate([np.asarray(z_nodes).reshape(-1), np.asarray(v_nodes).reshape(-1)])


def _unpack(cfg: BmpcConfig, x: np.ndarray):
    S, I = cfg.tree.state_count, cfg.tree.input_count
    n, m = cfg.n, cfg.m
    z = x[: S * n].reshape(S, n)
    v = x[S * n:].reshape(I, m)
    return z, v


def _root_rhs(cfg: BmpcConfig, x_meas, z_prev, xi: int) -> np.ndarray:
    x_meas = as_vector(x_meas, "x_meas")
    z_prev = as_vector(z_prev, "z_prev")
    if x_meas.shape[0] != cfg.n or z_prev.shape[0] != cfg.n:
        raise DimensionMismatchError("state dimension mismatch")
    if xi not in (0, 1):
        raise DimensionMismatchError("xi must be 0 or 1")
    return z_prev if xi else x_meas


def assemble(cfg: BmpcConfig, x_meas, z_prev, xi: int) -> QpProblem:
    """Full QP for one fixed value of the reset variable.

    Decision vector stacks all state nodes then all input nodes. Equality
    rows are the root pin followed by one dynamics block per tree edge in
    (depth, branch, disturbance) order; inequality rows are Z membership for
    depths 0..N-1, terminal membership for the leaves, then V membership for
    the input nodes. The quadratic cost is path-probability weighted.
    """
    h, a_eq, b_eq_fixed, a_in, b_in = _build_matrices(cfg)
    b_eq = b_eq_fixed.copy()
    b_eq[: cfg.n] = _root_rhs(cfg, x_meas, z_prev, xi)
    return QpProblem(H=h, f=np.zeros(h.shape[0]), A_eq=a_eq, b_eq=b_eq,
                     A_in=a_in, b_in=b_in)


def evaluate_cost(cfg: BmpcConfig, z_nodes, v_nodes) -> float:
    """Path-probability weighted quadratic cost J(z, v), without the xi term."""
    tree = cfg.tree
    z = np.asarray(z_nodes, dtype=float).reshape(tree.state_count, cfg.n)
    v = np.asarray(v_nodes, dtype=float).reshape(tree.input_count, cfg.m)
    leaf = tree.state_depth == cfg.N
    cost = np.einsum("s,si,ij,sj->", tree.state_prob[~leaf], z[~leaf], cfg.Q, z[~leaf])
    cost += np.einsum("s,si,ij,sj->", tree.state_prob[leaf], z[leaf], cfg.P, z[leaf])
    cost += np.einsum("t,ti,ij,tj->", tree.input_prob, v, cfg.R, v)
    return float(cost)


def max_violation(cfg: BmpcConfig, z_nodes, v_nodes, xi: int, x_meas=None, z_prev=None) -> float:
    """Worst constraint violation of a (z, v) point for the given xi problem."""
    h, a_eq, b_eq_fixed, a_in, b_in = _build_matrices(cfg)
    x_meas = x_meas if x_meas is not None else np.zeros(cfg.n)
    z_prev = z_prev if z_prev is not None else np.zeros(cfg.n)
    b_eq = b_eq_fixed.copy()
    b_eq[: cfg.n] = _root_rhs(cfg, x_meas, z_prev, xi)
    x = _pack(cfg, z_nodes, v_nodes)
    eq = float(np.abs(a_eq @ x - b_eq).max())
    ineq = float((a_in @ x - b_in).max(initial=0.0))
    return max(eq, ineq)


# ---------------------------------------------------------------------------
# solving
# ---------------------------------------------------------------------------


class BmpcSolver:
    """Reusable solver: matrices are assembled and factored once, every call
    swaps only the root right-hand side. Warm dual/primal state is kept per
    xi variant across calls, so a solver instance is single-owner (one per
    episode); :meth:`fresh` clones one cheaply on top of the shared,
    read-only factorization."""

    def __init__(self, cfg: BmpcConfig, tol: float = 1e-8, max_iter: int = 50_000,
                 _shared=None):
        self.cfg = cfg
        self.tol = tol
        self.max_iter = max_iter
        if _shared is None:
            h, a_eq, b_eq_fixed, a_in, b_in = _build_matrices(cfg)
            _shared = (AdmmBackend(h, a_eq, a_in), b_eq_fixed, b_in)
        self.backend, self._b_eq_fixed, self._b_in = _shared
        self._warm_state = {0: None, 1: None}
        self._hints = {0: [], 1: []}  # recently optimal active sets, MTF order

    def fresh(self) -> "BmpcSolver":
        """Clone sharing the factorized backend; warm state starts from the
        current hint snapshot, so clones taken after :meth:`warmup` behave
        identically no matter how episodes are batched across workers."""
        clone = BmpcSolver(self.cfg, self.tol, self.max_iter,
                           _shared=(self.backend, self._b_eq_fixed, self._b_in))
        clone._hints = {0: list(self._hints[0]), 1: list(self._hints[1])}
        return clone

    def warmup(self, steps: int = 12) -> "BmpcSolver":
        """Populate the active-set hint list from a deterministic dry run.

        Rolls the nominal dynamics forward cycling through the atoms, solving
        along the way; the visited active sets seed every :meth:`fresh` clone.
        """
        tree = self.cfg.tree
        x = np.zeros(self.cfg.n)
        z_prev = np.zeros(self.cfg.n)
        for k in range(steps):
            try:
                sol = self.solve(x, z_prev)
                self._solve_variant(1, x, z_prev, None)  # seed xi=1 hints too
            except (BothInfeasibleError, NoConvergenceError):
                break
            d = (k % tree.L) + 1
            z_prev = sol.z_depth1(d)
            x = self.cfg.A @ x + self.cfg.B @ sol.v0 + self.cfg.atoms[d - 1]
        self._warm_state = {0: None, 1: None}
        return self

    @property
    def size_report(self) -> dict:
        rep = dict(self.backend.size_report)
        rep["state_nodes"] = self.cfg.tree.state_count
        rep["input_nodes"] = self.cfg.tree.input_count
        return rep

    def _solve_variant(self, xi, x_meas, z_prev, warm):
        b_eq = self._b_eq_fixed.copy()
        rhs = _root_rhs(self.cfg, x_meas, z_prev, xi)
        b_eq[: self.cfg.n] = rhs
        x0 = None
        if self._warm_state[xi] is None and warm is not None:
            x0 = _pack(self.cfg, warm.z_nodes, warm.v_nodes)
        sol = self.backend.solve(
            np.zeros(self.backend.n), b_eq, self._b_in,
            x0=x0, warm_state=self._warm_state[xi],
            active_hints=self._hints[xi],
            tol=self.tol, max_iter=self.max_iter,
        )
        if sol.status is QpStatus.OPTIMAL:
            self._warm_state[xi] = sol.admm_state
            if sol.active_set is not None:
                hints = self._hints[xi]
                if sol.active_set in hints:
                    hints.remove(sol.active_set)
                hints.insert(0, sol.active_set)
                del hints[16:]
            z, v = _unpack(self.cfg, sol.x)
            z[0] = rhs  # pin the root exactly; within solver tolerance anyway
            return BmpcSolution(xi, z, v, evaluate_cost(self.cfg, z, v),
                                BmpcStatus.OPTIMAL, sol.iterations), sol.status
        return None, sol.status

    def solve(self, x_meas, z_prev, warm: BmpcSolution | None = None) -> BmpcSolution:
        """Best of the two xi variants by total cost J + epsilon * xi^2.

        The xi=1 solve is skipped when the xi=0 optimum already costs no more
        than epsilon: the cost has no linear term, so every variant's J is
        nonnegative and xi=1 totals at least epsilon. Ties prefer xi=0.
        """
        sol0, status0 = self._solve_variant(0, x_meas, z_prev, warm)
        if sol0 is not None and sol0.cost <= self.cfg.epsilon:
            return sol0
        sol1, status1 = self._solve_variant(1, x_meas, z_prev, warm)
        if sol0 is None and sol1 is None:
            if status0 is QpStatus.INFEASIBLE and status1 is QpStatus.INFEASIBLE:
                raise BothInfeasibleError(
                    f"both reset variants infeasible (xi0={status0.value}, xi1={status1.value})"
                )
            raise NoConvergenceError(
                f"tree QP did not converge (xi0={status0.value}, xi1={status1.value})"
            )
        if sol1 is None:
            return sol0
        if sol0 is None:
            sol1.cost += self.cfg.epsilon
            return sol1
        total1 = sol1.cost + self.cfg.epsilon
        if sol0.cost <= total1:
            return sol0
        sol1.cost = total1
        return sol1


def solve_bmpc(cfg: BmpcConfig, x_meas, z_prev, warm: BmpcSolution | None = None,
               tol: float = 1e-8) -> BmpcSolution:
    """One-shot variant of :class:`BmpcSolver` for single solves."""
    return BmpcSolver(cfg, tol=tol).solve(x_meas, z_prev, warm=warm)


def shift_candidate(prev: BmpcSolution, realized_d: int, cfg: BmpcConfig) -> BmpcSolution:
    """Feasible point for the k+1 problem after atom ``realized_d`` occurred.

    Re-roots the tree at the realized depth-1 node: surviving nodes keep
    their values, and the fresh depth-N layer extends each old leaf with the
    terminal feedback ``v = K z``, ``z+ = (A + BK) z + mu``. The candidate
    carries ``xi = 1``; terminal-set invariance makes it satisfy every
    constraint of the next problem whenever ``prev`` was feasible, which is
    what keeps the receding horizon feasible for all time. Also the natural
    warm start.
    """
    tree = cfg.tree
    L, N = tree.L, tree.N
    if not 1 <= realized_d <= L:
        raise IndexError(f"realized disturbance index {realized_d} out of range")
    if prev.z_nodes.shape[0] != tree.state_count:
        raise DimensionMismatchError("previous solution does not match the tree")
    j = realized_d
    z_new = np.zeros_like(prev.z_nodes)
    v_new = np.zeros_like(prev.v_nodes)
    # surviving subtree: depths 0..N-1 copy from old depths 1..N
    for i in range(0, N):
        base_old = (j - 1) * (L**i)
        for mnew in range(1, L**i + 1):
            z_new[tree.state_node(i, mnew)] = prev.z_nodes[
                tree.state_node(i + 1, base_old + mnew)
            ]
    for i in range(0, N - 1):
        base_old = (j - 1) * (L**i)
        for mnew in range(1, L**i + 1):
            v_new[tree.input_node(i, mnew)] = prev.v_nodes[
                tree.input_node(i + 1, base_old + mnew)
            ]
    # terminal tail: v = K z on the old leaves, new leaves via the dynamics
    a_k = cfg.A + cfg.B @ cfg.K
    for l in range(1, L ** (N - 1) + 1):
        z_tail = z_new[tree.state_node(N - 1, l)]
        v_new[tree.input_node(N - 1, l)] = cfg.K @ z_tail
        for d in range(1, L + 1):
            z_new[tree.state_node(N, child_index(N - 1, l, d, L))] = (
                a_k @ z_tail + cfg.atoms[d - 1]
            )
    return BmpcSolution(1, z_new, v_new, evaluate_cost(cfg, z_new, v_new) + cfg.epsilon,
                        BmpcStatus.CANDIDATE)
