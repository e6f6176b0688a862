"""Convex-set algebra on H-polytopes and ellipsoids, plus the two scalar
and matrix primitives the reachable-set construction needs.

Polytopes are stored in halfspace form ``{x : A x <= b}``. Ellipsoids are
centered at the origin and stored by the inverse of their shape matrix,
``{x : x' S x <= level}``. All objects are immutable after construction;
every operation returns a new object.

Linear programs (emptiness, redundancy pruning, containment) are delegated
to ``scipy.optimize.linprog`` (HiGHS).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import gammainc, gammaincinv

from ._mat import as_matrix, as_vector, check_spd, spectral_radius
from .errors import (
    DimensionMismatchError,
    DomainError,
    EmptySetError,
    NoConvergenceError,
    NotSPDError,
    NotStableError,
)

_CONTAIN_TOL = 1e-9
_LP_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PolytopeH:
    """Halfspace polytope ``{x : A x <= b}`` with at least one row."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "polytope A")
        b = as_vector(self.b, "polytope b")
        if A.shape[0] != b.shape[0]:
            raise DimensionMismatchError(
                f"polytope has {A.shape[0]} rows but {b.shape[0]} offsets"
            )
        if A.shape[0] < 1:
            raise DimensionMismatchError("polytope needs at least one halfspace row")
        if not np.all(np.isfinite(A)):
            raise DimensionMismatchError("polytope rows must be finite")
        if not np.all(np.isfinite(b)):
            raise DimensionMismatchError("polytope offsets must be finite")
        object.__setattr__(self, "A", _readonly(A))
        object.__setattr__(self, "b", _readonly(b))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def nrows(self) -> int:
        return self.A.shape[0]

    @staticmethod
    def box(lo, hi) -> "PolytopeH":
        """Axis-aligned box ``lo <= x <= hi`` (scalars or vectors)."""
        lo = as_vector(lo)
        hi = as_vector(hi)
        n = lo.shape[0]
        eye = np.eye(n)
        return PolytopeH(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))


@dataclass(frozen=True)
class Ellipsoid:
    """Origin-centered ellipsoid ``{x : x' shape_inv x <= level}``.

    ``level == 0`` degenerates to the single point at the origin.
    """

    shape_inv: np.ndarray
    level: float
    shape: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = as_matrix(self.shape_inv, "ellipsoid shape_inv")
        s = check_spd(s, name="ellipsoid shape_inv")
        lvl = float(self.level)
        if lvl < 0:
            raise DomainError("ellipsoid level must be nonnegative")
        object.__setattr__(self, "shape_inv", _readonly(s))
        object.__setattr__(self, "level", lvl)
        object.__setattr__(self, "shape", _readonly(np.linalg.inv(s)))

    @property
    def dim(self) -> int:
        return self.shape_inv.shape[0]

    def support(self, a: np.ndarray) -> float:
        """Support function ``max {a'x : x in E}``."""
        a = as_vector(a)
        return float(np.sqrt(max(0.0, self.level * float(a @ self.shape @ a))))

    def boundary_point(self, direction: np.ndarray) -> np.ndarray:
        """Point on the boundary along ``shape @ direction`` (support point)."""
        a = as_vector(direction)
        g = self.shape @ a
        denom = float(a @ g)
        if denom <= 0.0 or self.level == 0.0:
            return np.zeros(self.dim)
        return np.sqrt(self.level / denom) * g


def _solve_lp(c, A, b):
    """min c'x s.t. A x <= b with free variables. Returns scipy result."""
    return linprog(c, A_ub=A, b_ub=b, bounds=(None, None), method="highs")


def is_empty(p: PolytopeH) -> bool:
    """Feasibility of ``{x : A x <= b}`` via a phase-1 LP."""
    res = _solve_lp(np.zeros(p.dim), p.A, p.b)
    if res.status == 2:
        return True
    if res.status in (0, 3):
        return False
    raise NoConvergenceError(f"feasibility LP returned status {res.status}")


def contains(p: PolytopeH, x) -> bool:
    """Row check ``A x <= b`` with absolute tolerance 1e-9."""
    x = as_vector(x)
    return bool(np.all(p.A @ x - p.b <= _CONTAIN_TOL))


def support(p: PolytopeH, a) -> float:
    """``max {a'x : x in P}``; +inf when unbounded, -inf when P is empty."""
    a = as_vector(a)
    res = _solve_lp(-a, p.A, p.b)
    if res.status == 0:
        return float(-res.fun)
    if res.status == 3:
        return np.inf
    if res.status == 2:
        return -np.inf
    raise NoConvergenceError(f"support LP returned status {res.status}")


def is_subset(p: PolytopeH, q: PolytopeH, tol: float = _LP_TOL) -> bool:
    """``P <= Q`` by maximizing each row of Q over P."""
    if is_empty(p):
        return True
    for a, b in zip(q.A, q.b):
        if support(p, a) > b + tol:
            return False
    return True


def prune_rows(p: PolytopeH, tol: float = _LP_TOL) -> PolytopeH:
    """Drop redundant halfspace rows (one LP per row).

    Rows are processed sequentially, so duplicate rows collapse to one.
    Trivial rows (zero normal, nonnegative offset) are dropped unless they
    are all that is left; a contradictory zero row (negative offset) marks
    an empty set and is returned as-is for the caller to detect.
    """
    A, b = np.array(p.A), np.array(p.b)
    norms = np.linalg.norm(A, axis=1)
    zero = norms <= 1e-14
    if np.any(zero & (b < -tol)):
        return p  # empty set; keep the evidence
    keep = [i for i in range(p.nrows) if not zero[i]]
    if not keep:
        j = int(np.argmin(b))
        return PolytopeH(A[j : j + 1], b[j : j + 1])
    alive = list(keep)
    for i in keep:
        others = [j for j in alive if j != i]
        if not others:
            continue
        res = _solve_lp(-A[i], A[others], b[others])
        if res.status == 0 and -res.fun <= b[i] + tol:
            alive.remove(i)
        # unbounded or infeasible: row stays
    if not alive:
        j = keep[0]
        return PolytopeH(A[j : j + 1], b[j : j + 1])
    return PolytopeH(A[alive], b[alive])


def intersect(p: PolytopeH, q: PolytopeH, prune: bool = True) -> PolytopeH:
    if p.dim != q.dim:
        raise DimensionMismatchError("intersection of polytopes of unequal dimension")
    stacked = PolytopeH(np.vstack([p.A, q.A]), np.concatenate([p.b, q.b]))
    return prune_rows(stacked) if prune else stacked


def mink_diff_ellipsoid(p: PolytopeH, e: Ellipsoid) -> PolytopeH:
    """Minkowski difference ``P (-) E`` by exact support-function tightening.

    Each halfspace ``a'x <= b`` becomes ``a'x <= b - h_E(a)`` where
    ``h_E(a) = sqrt(level * a' shape_inv^{-1} a)``. Row count is preserved.
    The result may be empty; callers decide whether that is an error.
    """
    if p.dim != e.dim:
        raise DimensionMismatchError("polytope and ellipsoid dimensions differ")
    shrink = np.array([e.support(a) for a in p.A])
    return PolytopeH(p.A, p.b - shrink)


def pre_set(p: PolytopeH, a_k: np.ndarray, w_atoms) -> PolytopeH:
    """Robust one-step backward set ``{z : A_K z + mu in P for all mu in W}``.

    Realized by stacking one tightened row per (halfspace, atom) pair and
    pruning the redundant ones.
    """
    a_k = as_matrix(a_k, "A_K")
    atoms = [as_vector(w) for w in w_atoms]
    if not atoms:
        raise DimensionMismatchError("pre_set needs a nonempty atom set")
    rows = []
    offs = []
    for a, b in zip(p.A, p.b):
        an = a @ a_k
        for mu in atoms:
            rows.append(an)
            offs.append(b - float(a @ mu))
    return prune_rows(PolytopeH(np.asarray(rows), np.asarray(offs)))


def max_rpi(
    z_set: PolytopeH,
    input_box: PolytopeH,
    k_gain: np.ndarray,
    a_k: np.ndarray,
    w_atoms,
    max_iter: int = 500,
) -> PolytopeH:
    """Maximal robust positively invariant subset of ``Z`` under ``v = K z``.

    Iterates ``O_0 = Z  intersect {z : K z in V}``,
    ``O_{j+1} = O_j intersect pre_set(O_j)`` until the iteration reaches a
    fixed point (mutual containment within 1e-9). The result ``O`` satisfies
    ``A_K O (+) W <= O <= Z`` and ``K O <= V``.

    Raises EmptySetError when the iteration empties out (no invariant set
    exists inside Z for this gain) and NoConvergenceError past ``max_iter``.
    """
    k_gain = as_matrix(k_gain, "K")
    a_k = as_matrix(a_k, "A_K")
    if spectral_radius(a_k) >= 1.0:
        raise NotStableError(f"A_K spectral radius {spectral_radius(a_k):g} >= 1")

    gain_rows = PolytopeH(input_box.A @ k_gain, input_box.b)
    omega = intersect(z_set, gain_rows)
    if is_empty(omega):
        raise EmptySetError("Z intersect {Kz in V} is empty")

    for _ in range(max_iter):
        candidate = intersect(omega, pre_set(omega, a_k, w_atoms))
        if is_empty(candidate):
            raise EmptySetError("RPI iteration reached the empty set")
        # candidate <= omega holds by construction; equality needs the reverse
        if is_subset(omega, candidate, tol=_LP_TOL):
            return candidate
        omega = candidate
    raise NoConvergenceError(f"RPI iteration did not converge in {max_iter} steps")


def dlyap(a_k: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Solve the discrete Lyapunov equation ``A X A' + Q = X``.

    Uses a Kronecker linear solve for n <= 20 and a doubling fixed-point
    iteration beyond that. The result satisfies the residual bound
    ``||A X A' + Q - X||_F <= 1e-10 ||X||_F`` and is SPD.
    """
    a_k = as_matrix(a_k, "A_K")
    q = as_matrix(q, "Q")
    if a_k.shape[0] != a_k.shape[1]:
        raise DimensionMismatchError("A_K must be square")
    if a_k.shape != q.shape:
        raise DimensionMismatchError("A_K and Q must share shape")
    try:
        q = check_spd(q, name="Q")
    except NotSPDError:
        raise
    rho = spectral_radius(a_k)
    if rho >= 1.0 - 1e-9:
        raise NotStableError(f"spectral radius {rho:g} too close to 1")

    n = a_k.shape[0]
    if n <= 20:
        lhs = np.eye(n * n) - np.kron(a_k, a_k)
        x = np.linalg.solve(lhs, q.reshape(-1)).reshape(n, n)
    else:
        x = q.copy()
        m = a_k.copy()
        for _ in range(200):
            delta = m @ x @ m.T
            x = x + delta
            m = m @ m
            if np.linalg.norm(delta, "fro") <= 1e-16 * np.linalg.norm(x, "fro"):
                break
    x = 0.5 * (x + x.T)
    resid = np.linalg.norm(a_k @ x @ a_k.T + q - x, "fro")
    if resid > 1e-10 * np.linalg.norm(x, "fro"):
        raise NoConvergenceError(f"Lyapunov residual {resid:g} above tolerance")
    return check_spd(x, name="Lyapunov solution")


def chi2_inv(p: float, n: int) -> float:
    """Quantile of the chi-squared distribution with ``n`` degrees of freedom.

    Returns the value whose regularized lower incomplete gamma at (n/2, x/2)
    equals ``p`` to within 1e-9.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must be in (0, 1), got {p}")
    if int(n) != n or n < 1:
        raise DomainError(f"degrees of freedom must be a positive integer, got {n}")
    x = 2.0 * float(gammaincinv(n / 2.0, p))
    if abs(float(gammainc(n / 2.0, x / 2.0)) - p) > 1e-9:
        raise NoConvergenceError("chi-squared quantile did not meet tolerance")
    return x
