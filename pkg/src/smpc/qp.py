"""Convex quadratic programming behind a backend-agnostic contract.

The shipped backend is an operator-splitting (ADMM) method: equality
constraints are eliminated exactly through an orthonormal null-space basis,
the remaining inequality-constrained problem is iterated with the kernel in
``_kernels``, and active-set "polish" solves sharpen iterates to near
machine precision. Guessed active sets (from warm state or caller hints)
are tried as exact KKT solves before any iteration, which makes repeated
solves of one problem family cost a couple of triangular solves each.
Infeasibility is certified by an equality-pinned row violation, by the ADMM
divergence certificate confirmed with a phase-1 LP, or by the phase-1 LP
alone.

Problems are  min 1/2 x'Hx + f'x  s.t.  A_eq x = b_eq, A_in x <= b_in.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import linprog

from . import _kernels
from ._mat import as_matrix, as_vector, check_psd
from .errors import DimensionMismatchError

_STAT_TOL = 1e-6  # stationarity contract: <= _STAT_TOL * (1 + ||f||)


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"
    UNBOUNDED = "unbounded"


def _empty_rows(n):
    return np.zeros((0, n)), np.zeros(0)


@dataclass(frozen=True)
class QpProblem:
    """Immutable problem data; H must be symmetric PSD."""

    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None

    def __post_init__(self):
        h = check_psd(as_matrix(self.H, "H"), name="H")
        f = as_vector(self.f, "f")
        n = h.shape[0]
        if f.shape[0] != n:
            raise DimensionMismatchError("f length does not match H")
        a_eq, b_eq = self.A_eq, self.b_eq
        if a_eq is None:
            a_eq, b_eq = _empty_rows(n)
        a_in, b_in = self.A_in, self.b_in
        if a_in is None:
            a_in, b_in = _empty_rows(n)
        a_eq = np.asarray(a_eq, dtype=float).reshape(-1, n)
        a_in = np.asarray(a_in, dtype=float).reshape(-1, n)
        b_eq = as_vector(b_eq, "b_eq")
        b_in = as_vector(b_in, "b_in")
        if a_eq.shape[0] != b_eq.shape[0] or a_in.shape[0] != b_in.shape[0]:
            raise DimensionMismatchError("constraint rows and offsets disagree")
        for name, val in (("H", h), ("f", f), ("A_eq", a_eq), ("b_eq", b_eq),
                          ("A_in", a_in), ("b_in", b_in)):
            if not np.all(np.isfinite(np.asarray(val))):
                raise DimensionMismatchError(f"{name} contains non-finite entries")
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "A_eq", a_eq)
        object.__setattr__(self, "b_eq", b_eq)
        object.__setattr__(self, "A_in", a_in)
        object.__setattr__(self, "b_in", b_in)

    @property
    def nvars(self) -> int:
        return self.H.shape[0]


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: QpStatus
    iterations: int = 0
    r_prim: float = np.nan
    r_dual: float = np.nan
    admm_state: tuple | None = field(default=None, repr=False)
    active_set: tuple | None = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def _phase1_feasible(a, b, tol=1e-9) -> bool:
    """Is {y : a y <= b} nonempty? Phase-1 LP: min t s.t. a y - t <= b, t >= -1."""
    m, k = a.shape
    if m == 0:
        return True
    c = np.zeros(k + 1)
    c[-1] = 1.0
    a_ub = np.hstack([a, -np.ones((m, 1))])
    bounds = [(None, None)] * k + [(-1.0, None)]
    res = linprog(c, A_ub=a_ub, b_ub=b, bounds=bounds, method="highs")
    if res.status == 2:
        return False
    if res.status in (0, 3):
        return bool(res.fun <= tol)
    raise RuntimeError(f"phase-1 LP returned status {res.status}")


@dataclass
class _SolveCtx:
    """Per-right-hand-side data shared by the solve subroutines."""

    x_p: np.ndarray
    eq_resid: float
    b_red: np.ndarray
    b_s: np.ndarray
    f_r: np.ndarray
    b_eq: np.ndarray
    b_in: np.ndarray
    f: np.ndarray


class AdmmBackend:
    """Reusable solver bound to fixed (H, A_eq, A_in) structure.

    Repeated solves with new right-hand sides reuse the null-space basis,
    the splitting-matrix factorization, and LU factors of previously seen
    active-set KKT systems. ``solve`` never mutates shared numeric state
    beyond these pure caches, so one instance may back many sequential or
    process-parallel episodes.
    """

    def __init__(self, H, A_eq=None, A_in=None, *, sigma=1e-6, alpha=1.6, rho=1.0):
        H = check_psd(as_matrix(H, "H"), name="H")
        n = H.shape[0]
        if A_eq is None or np.size(A_eq) == 0:
            A_eq = np.zeros((0, n))
        if A_in is None or np.size(A_in) == 0:
            A_in = np.zeros((0, n))
        A_eq = np.asarray(A_eq, dtype=float).reshape(-1, n)
        A_in = np.asarray(A_in, dtype=float).reshape(-1, n)
        self.H, self.A_eq, self.A_in = H, A_eq, A_in
        self.n = n
        self.sigma, self.alpha = float(sigma), float(alpha)

        p = A_eq.shape[0]
        if p:
            u, s, vt = np.linalg.svd(A_eq, full_matrices=True)
            cutoff = max(A_eq.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
            rank = int((s > cutoff).sum())
            self._pinv_eq = vt[:rank].T @ (u[:, :rank] / s[:rank]).T
            self.Z = vt[rank:].T
        else:
            self._pinv_eq = np.zeros((n, 0))
            self.Z = np.eye(n)
        self.k = self.Z.shape[1]

        self.H_r = self.Z.T @ H @ self.Z
        A_r = A_in @ self.Z
        row_scale = np.maximum(np.abs(A_in).max(axis=1, initial=0.0), 1.0)
        reduced_norm = np.abs(A_r).max(axis=1, initial=0.0)
        pinned = reduced_norm <= 1e-12 * row_scale
        self._pinned = np.flatnonzero(pinned)
        self._kept = np.flatnonzero(~pinned)
        A_r = A_r[self._kept]
        d = np.linalg.norm(A_r, axis=1)
        d[d == 0] = 1.0
        self._row_d = 1.0 / d
        self.A_s = A_r * self._row_d[:, None]
        self._A_sT = np.ascontiguousarray(self.A_s.T)
        self._AtA = self.A_s.T @ self.A_s
        self.rho = float(rho)
        self._default_factor = self._make_factor(self.rho)
        self._kkt_cache: dict[tuple, tuple] = {}

        # parametric right-hand-side maps: worthwhile once the dense
        # per-solve matvecs against A_eq/A_in start to dominate a solve
        self._parametric = n >= 200 and p > 0
        if self._parametric:
            self._eq_pinv = A_eq @ self._pinv_eq  # (p, p)
            self._ain_pinv = A_in @ self._pinv_eq  # (m, p)
            self._zth_pinv = self.Z.T @ (H @ self._pinv_eq)  # (k, p)
            self._eqz = A_eq @ self.Z  # (p, k)

    # -- setup helpers -----------------------------------------------------

    def _make_factor(self, rho):
        """Inverse Cholesky factor of the splitting matrix for this rho."""
        m_mat = self.H_r + self.sigma * np.eye(self.k) + rho * self._AtA
        l_fac = np.linalg.cholesky(m_mat)
        linv = np.linalg.inv(l_fac)
        return np.ascontiguousarray(linv), np.ascontiguousarray(linv.T), float(rho)

    def _prepare(self, f, b_eq, b_in) -> _SolveCtx:
        if self.A_eq.shape[0]:
            x_p = self._pinv_eq @ b_eq
            if self._parametric:
                eq_resid = float(np.abs(self._eq_pinv @ b_eq - b_eq).max())
                b_red = b_in - self._ain_pinv @ b_eq
                f_r = self._zth_pinv @ b_eq + self.Z.T @ f
            else:
                eq_resid = float(np.abs(self.A_eq @ x_p - b_eq).max())
                b_red = b_in - self.A_in @ x_p
                f_r = self.Z.T @ (self.H @ x_p + f)
        else:
            x_p = np.zeros(self.n)
            eq_resid = 0.0
            b_red = b_in.copy()
            f_r = self.Z.T @ f
        b_s = b_red[self._kept] * self._row_d
        return _SolveCtx(x_p, eq_resid, b_red, b_s, f_r, b_eq, b_in, f)

    # -- main entry ---------------------------------------------------------

    def solve(self, f, b_eq=None, b_in=None, *, x0=None, warm_state=None,
              active_hints=None, tol=1e-8, max_iter=50_000) -> QpSolution:
        if tol <= 0:
            raise ValueError("tol must be positive")
        f = as_vector(f, "f")
        if f.shape[0] != self.n:
            raise DimensionMismatchError("f length does not match variable count")
        b_eq = as_vector(b_eq if b_eq is not None else np.zeros(0), "b_eq")
        b_in = as_vector(b_in if b_in is not None else np.zeros(0), "b_in")
        if b_eq.shape[0] != self.A_eq.shape[0]:
            raise DimensionMismatchError("b_eq length does not match equality rows")
        if b_in.shape[0] != self.A_in.shape[0]:
            raise DimensionMismatchError("b_in length does not match inequality rows")

        ctx = self._prepare(f, b_eq, b_in)
        if ctx.eq_resid > max(tol, 1e-9) * (1.0 + float(np.abs(b_eq).max(initial=0.0))):
            return self._fail(QpStatus.INFEASIBLE)  # inconsistent equalities
        if self._pinned.size and np.any(ctx.b_red[self._pinned] < -tol):
            # row fully determined by the equalities and violated
            return self._fail(QpStatus.INFEASIBLE)

        if self.k == 0:
            return self._finish(np.zeros(0), ctx, 0, 0.0, 0.0)
        if ctx.b_s.shape[0] == 0:
            y, ok = _solve_psd(self.H_r, -ctx.f_r)
            if not ok:
                return self._fail(QpStatus.UNBOUNDED)
            return self._finish(y, ctx, 0, 0.0, 0.0)

        # exact solves for guessed active sets; problem families revisit a
        # small collection of them, so hits cost two triangular solves
        for hint in (active_hints or ())[:8]:
            sol = self._try_polish(np.asarray(hint, dtype=int), ctx, 0, tol)
            if sol is not None:
                return sol

        if warm_state is not None:
            y, z, lam = (np.array(v, dtype=float) for v in warm_state)
            guess = self._select_active(y, lam, ctx.b_s)
            sol = self._try_polish(guess, ctx, 0, tol)
            if sol is not None:
                return sol
        else:
            y = (self.Z.T @ (as_vector(x0, "x0") - ctx.x_p)
                 if x0 is not None else np.zeros(self.k))
            z = self.A_s @ y
            lam = np.zeros(ctx.b_s.shape[0])
            guess = None

        # working-set repair: walk from the best guess by swapping rows in
        # and out; each round is one (usually cached) KKT solve
        starts = []
        if active_hints:
            starts.append(np.asarray(active_hints[0], dtype=int))
        if guess is not None:
            starts.append(guess)
        for start in starts:
            sol = self._repair(start, ctx, tol)
            if sol is not None:
                return sol

        return self._iterate(y, z, lam, ctx, tol, max_iter)

    # -- pieces ------------------------------------------------------------

    def _fail(self, status):
        return QpSolution(np.full(self.n, np.nan), np.nan, status)

    def _finish(self, y, ctx, iters, rp, rd, state=None, active=None):
        x = ctx.x_p + self.Z @ y
        obj = float(0.5 * x @ (self.H @ x) + ctx.f @ x)
        return QpSolution(x, obj, QpStatus.OPTIMAL, iters, rp, rd,
                          admm_state=state,
                          active_set=None if active is None else tuple(active))

    def _constraints_ok(self, y, ctx, tol) -> bool:
        """Contract check in reduced quantities (algebraically the original)."""
        if self.A_eq.shape[0]:
            if self._parametric:
                # particular-solution residual plus null-space drift bounds
                # the true equality residual from above
                drift = ctx.eq_resid + float(np.abs(self._eqz @ y).max())
            else:
                drift = float(np.abs(self.A_eq @ (ctx.x_p + self.Z @ y) - ctx.b_eq).max())
            if drift > tol:
                return False
        if ctx.b_s.shape[0]:
            viol_kept = float((((self.A_s @ y) - ctx.b_s) / self._row_d).max())
            if viol_kept > tol:
                return False
        if self._pinned.size and float((-ctx.b_red[self._pinned]).max()) > tol:
            return False
        return True

    def _select_active(self, y, lam, b_s):
        margins = b_s - self.A_s @ y
        lam_scale = 1.0 + float(np.abs(lam).max(initial=0.0))
        return np.flatnonzero(
            (margins <= 1e-5 * (1.0 + np.abs(b_s))) | (lam >= 1e-7 * lam_scale)
        )

    def _try_polish(self, active, ctx, iters, tol):
        polished = self._kkt_polish(active, ctx.f_r, ctx.b_s, tol)
        if polished is None:
            return None
        y_pol, lam_pol, rp_pol, rd_pol, act = polished
        if not self._constraints_ok(y_pol, ctx, tol):
            return None
        new_state = (y_pol, self.A_s @ y_pol, lam_pol)
        return self._finish(y_pol, ctx, iters, rp_pol, rd_pol,
                            state=new_state, active=act)

    def _repair(self, active, ctx, tol, rounds=6):
        """Bounded working-set iteration from a guessed active set.

        Not guaranteed to converge (degenerate sets can cycle), so it gives
        up after a few rounds and the caller falls back to the splitting
        iteration; any returned solution passed the full verification.
        """
        f_r, b_s = ctx.f_r, ctx.b_s
        active = np.unique(active)
        seen = set()
        for _ in range(rounds):
            key = tuple(active.tolist())
            if key in seen:
                return None
            seen.add(key)
            factors, g = self._active_factor(key)
            if factors is None:
                return None
            rhs = np.concatenate([-f_r, b_s[active]])
            sol = lu_solve(factors, rhs, check_finite=False)
            if not np.all(np.isfinite(sol)):
                return None
            y_try, nu = sol[: self.k], sol[self.k:]
            viol = self.A_s @ y_try - b_s
            worst = float(viol.max(initial=0.0))
            neg = active[nu < -1e-9] if active.size else np.zeros(0, dtype=int)
            if worst <= 1e-9 and neg.size == 0:
                return self._try_polish(active, ctx, 0, tol)
            keep = active[nu >= -1e-9] if active.size else active
            add = np.flatnonzero(viol > max(1e-9, 0.5 * worst))
            active = np.unique(np.concatenate([keep, add]))
        return None

    def _iterate(self, y, z, lam, ctx, tol, max_iter) -> QpSolution:
        feas_known = None  # cache the phase-1 answer
        total_it = 0
        rp = rd = np.inf
        chunk = 150  # polish attempts are cheap; try one after every chunk
        linv, linv_t, rho = self._default_factor
        f_r, b_s = ctx.f_r, ctx.b_s
        eps_schedule = [max(1e-6, tol), max(1e-8, 0.1 * tol), max(1e-10, 0.01 * tol)]
        for eps in eps_schedule:
            converged = False
            while total_it < max_iter and not converged:
                budget = min(chunk, max_iter - total_it)
                y, z, lam, it, rp, rd, flag = _kernels.admm_loop(
                    linv, linv_t, self.H_r, f_r, self.A_s, self._A_sT,
                    b_s, y, z, lam, rho, self.sigma, self.alpha,
                    eps, eps, budget, 25,
                )
                total_it += it
                converged = flag == 0
                if flag == 2:
                    if feas_known is None:
                        feas_known = _phase1_feasible(self.A_s, b_s)
                    if not feas_known:
                        return self._fail(QpStatus.INFEASIBLE)
                if not np.isfinite(y).all() or np.abs(y).max() > 1e12:
                    if feas_known is None:
                        feas_known = _phase1_feasible(self.A_s, b_s)
                    return self._fail(
                        QpStatus.INFEASIBLE if not feas_known else QpStatus.UNBOUNDED
                    )
                sol = self._try_polish(self._select_active(y, lam, b_s), ctx,
                                       total_it, tol)
                if sol is not None:
                    return sol
                # rebalance the penalty when residuals drift apart
                if not converged and rd > 0 and rp > 0:
                    ratio = rp / rd
                    if ratio > 25.0 or ratio < 0.04:
                        new_rho = float(np.clip(rho * np.sqrt(ratio), 1e-6, 1e6))
                        if new_rho != rho:
                            linv, linv_t, rho = self._make_factor(new_rho)
            if total_it >= max_iter:
                break

        # no polished point: accept the raw iterate if it meets the contract
        if rp <= tol and rd <= _STAT_TOL * (1.0 + float(np.abs(ctx.f).max(initial=0.0))):
            if self._constraints_ok(y, ctx, tol):
                return self._finish(y, ctx, total_it, rp, rd,
                                    state=(y.copy(), z.copy(), lam.copy()))
        if feas_known is None:
            feas_known = _phase1_feasible(self.A_s, b_s)
        if not feas_known:
            return self._fail(QpStatus.INFEASIBLE)
        sol = self._finish(y, ctx, total_it, rp, rd,
                           state=(y.copy(), z.copy(), lam.copy()))
        sol.status = QpStatus.MAX_ITER
        return sol

    # -- active-set machinery ------------------------------------------------

    def _active_factor(self, key):
        """LU factors of the regularized KKT for one active set, cached.

        The KKT matrix depends only on the active rows, never on right-hand
        sides, so factors are pure derived data and the bounded cache cannot
        change any solve's result.
        """
        hit = self._kkt_cache.get(key)
        if hit is not None:
            return hit
        active = np.asarray(key, dtype=int)
        g = self.A_s[active]
        na = active.size
        kkt = np.zeros((self.k + na, self.k + na))
        kkt[: self.k, : self.k] = self.H_r + 1e-10 * np.eye(self.k)
        kkt[: self.k, self.k:] = g.T
        kkt[self.k:, : self.k] = g
        kkt[self.k:, self.k:] = -1e-10 * np.eye(na)
        try:
            factors = lu_factor(kkt, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            factors = None
        entry = (factors, g)
        if len(self._kkt_cache) >= 64:
            self._kkt_cache.pop(next(iter(self._kkt_cache)))
        self._kkt_cache[key] = entry
        return entry

    def _kkt_polish(self, active, f_r, b_s, tol):
        """Equality-solve the rows in ``active``, verify KKT on everything.

        Returns (y, lam_full, r_prim, r_dual, active) or None when the guess
        is not optimal (wrong active set, negative multiplier, infeasible).
        """
        active = np.asarray(active, dtype=int)
        factors, g = self._active_factor(tuple(active.tolist()))
        if factors is None:
            return None
        rhs = np.concatenate([-f_r, b_s[active]])
        sol = lu_solve(factors, rhs, check_finite=False)
        # one step of iterative refinement against the unregularized system
        resid = rhs - _kkt_apply(self.H_r, g, sol, self.k)
        sol = sol + lu_solve(factors, resid, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        y_pol, nu = sol[: self.k], sol[self.k:]
        na = active.size
        if na and nu.min() < -1e-7 * (1.0 + float(np.abs(nu).max())):
            return None
        viol = self.A_s @ y_pol - b_s
        r_prim = float(viol.max(initial=0.0))
        if r_prim > min(tol, 1e-9):
            return None
        stat = self.H_r @ y_pol + f_r + g.T @ nu
        r_dual = float(np.abs(stat).max())
        if r_dual > 1e-7 * (1.0 + float(np.abs(f_r).max(initial=0.0))):
            return None
        lam_full = np.zeros(b_s.shape[0])
        lam_full[active] = np.maximum(nu, 0.0)
        return y_pol, lam_full, max(r_prim, 0.0), r_dual, active

    @property
    def size_report(self) -> dict:
        return {
            "variables": self.n,
            "equality_rows": self.A_eq.shape[0],
            "inequality_rows": self.A_in.shape[0],
        }


def _kkt_apply(h, g, sol, k):
    y, nu = sol[:k], sol[k:]
    top = h @ y + g.T @ nu
    bot = g @ y
    return np.concatenate([top, bot])


def _solve_psd(h, rhs):
    """Solve h y = rhs for PSD h; ok=False when inconsistent (unbounded QP)."""
    try:
        y = np.linalg.solve(h + 1e-12 * np.eye(h.shape[0]), rhs)
    except np.linalg.LinAlgError:
        return None, False
    if np.abs(h @ y - rhs).max(initial=0.0) > 1e-7 * (1.0 + np.abs(rhs).max(initial=0.0)):
        y2, *_ = np.linalg.lstsq(h, rhs, rcond=None)
        if np.abs(h @ y2 - rhs).max(initial=0.0) > 1e-7 * (1.0 + np.abs(rhs).max(initial=0.0)):
            return None, False
        y = y2
    return y, True


def solve(problem: QpProblem, tol: float = 1e-8, x0=None, max_iter: int = 50_000) -> QpSolution:
    """One-shot solve; builds a backend and discards it."""
    backend = AdmmBackend(problem.H, problem.A_eq, problem.A_in)
    return backend.solve(problem.f, problem.b_eq, problem.b_in,
                         x0=x0, tol=tol, max_iter=max_iter)
