"""Probabilistic reachable sets for the error dynamics and the constraint
tightening that turns chance constraints into deterministic nominal sets.

The error state evolves as ``e(k+1) = A_K e(k) + w_e(k)`` with
``w_e ~ N(0, noise_cov)`` and ``e(0) = 0``, so its stationary covariance
``sigma_inf`` solves the discrete Lyapunov equation. The level-p reachable
set is the ellipsoid ``{e : e' sigma_inf^{-1} e <= chi2_inv(p, n)}``; each
original constraint is shrunk by the support function of its reachable set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mat import as_matrix, check_spd, spectral_radius
from .errors import EmptySetError, EmptyTighteningError, NoConvergenceError, NotStableError, ValidationError
from .setops import (
    Ellipsoid,
    PolytopeH,
    chi2_inv,
    dlyap,
    intersect,
    is_empty,
    is_subset,
    max_rpi,
    mink_diff_ellipsoid,
    support,
)


@dataclass(frozen=True)
class ErrorModel:
    """Closed error dynamics ``e(k+1) = (A + B K) e(k) + w_e(k)``."""

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    A_K: np.ndarray
    noise_cov: np.ndarray
    sigma_inf: np.ndarray

    def __post_init__(self):
        a_k = as_matrix(self.A) + as_matrix(self.B) @ as_matrix(self.K)
        if np.abs(a_k - self.A_K).max() > 1e-12:
            raise ValidationError("A_K does not equal A + B K")
        rho = spectral_radius(self.A_K)
        if rho >= 1.0:
            raise NotStableError(f"A + B K has spectral radius {rho:g}")
        resid = np.linalg.norm(
            self.A_K @ self.sigma_inf @ self.A_K.T + self.noise_cov - self.sigma_inf, "fro"
        )
        if resid > 1e-10 * np.linalg.norm(self.sigma_inf, "fro"):
            raise ValidationError("sigma_inf does not solve the Lyapunov equation")

    @classmethod
    def build(cls, A, B, K, noise_cov) -> "ErrorModel":
        A = as_matrix(A, "A")
        B = as_matrix(B, "B")
        K = as_matrix(K, "K")
        noise_cov = check_spd(as_matrix(noise_cov, "noise_cov"), name="noise_cov")
        a_k = A + B @ K
        sigma_inf = dlyap(a_k, noise_cov)
        return cls(A, B, K, a_k, noise_cov, sigma_inf)

    @property
    def dim(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class StateConstraint:
    name: str
    polytope: PolytopeH
    prob: float

    def __post_init__(self):
        _check_chance(self.polytope, self.prob, self.name)


def _check_chance(poly: PolytopeH, prob: float, name: str):
    if not 0.0 < prob < 1.0:
        raise ValidationError(f"constraint {name!r}: probability must be in (0, 1)")
    norms = np.linalg.norm(poly.A, axis=1)
    if np.any(norms <= 1e-14):
        raise ValidationError(f"constraint {name!r}: zero halfspace row")
    if np.any(poly.b / norms <= 0.0):
        raise ValidationError(f"constraint {name!r}: origin not in the interior")


@dataclass(frozen=True)
class ChanceSpec:
    """Target lower bounds for the state sets and the input set."""

    state_constraints: tuple[StateConstraint, ...]
    input_constraint: PolytopeH
    input_prob: float

    def __post_init__(self):
        if not self.state_constraints:
            raise ValidationError("at least one state chance constraint required")
        object.__setattr__(self, "state_constraints", tuple(self.state_constraints))
        _check_chance(self.input_constraint, self.input_prob, "input")


def prs_ellipsoid(em: ErrorModel, p: float) -> Ellipsoid:
    """Reachable set of probability level ``p`` for the error state.

    ``{e : e' sigma_inf^{-1} e <= chi2_inv(p, n)}`` contains ``e(k)`` with
    probability at least ``p`` at every step when ``e(0) = 0``, because the
    error covariance is monotone increasing toward ``sigma_inf``.
    """
    level = chi2_inv(p, em.dim)
    return Ellipsoid(shape_inv=np.linalg.inv(em.sigma_inf), level=level)


def tighten(em: ErrorModel, spec: ChanceSpec) -> tuple[PolytopeH, PolytopeH]:
    """Deterministic nominal sets ``(Z, V)``.

    ``Z`` intersects the per-constraint tightenings ``X_j (-) R^{p_j}``;
    ``V`` shrinks each input halfspace by the support of the image of the
    error reachable set under the feedback gain, ``sqrt(chi2(p_u) a'K S K'a)``.
    Raises EmptyTighteningError naming the constraint that emptied.
    """
    z_set = None
    for sc in spec.state_constraints:
        shrunk = mink_diff_ellipsoid(sc.polytope, prs_ellipsoid(em, sc.prob))
        if is_empty(shrunk):
            raise EmptyTighteningError(sc.name)
        if z_set is None:
            z_set = shrunk
        else:
            z_set = intersect(z_set, shrunk)
    if is_empty(z_set):
        raise EmptyTighteningError("state (intersection)")

    level_u = chi2_inv(spec.input_prob, em.dim)
    image_cov = em.K @ em.sigma_inf @ em.K.T
    u_poly = spec.input_constraint
    shrink = np.sqrt(np.maximum(0.0, level_u * np.einsum("qi,ij,qj->q", u_poly.A, image_cov, u_poly.A)))
    v_set = PolytopeH(u_poly.A, u_poly.b - shrink)
    if is_empty(v_set):
        raise EmptyTighteningError("input")
    return z_set, v_set


def terminal_set(em: ErrorModel, z_set: PolytopeH, v_set: PolytopeH, atoms,
                 max_iter: int = 500) -> PolytopeH:
    """Terminal set inside ``Z`` that is robust invariant under ``v = K z``.

    Delegates to the maximal-RPI iteration, then independently verifies the
    three conditions (invariance under every atom, containment in Z, gain
    image in V) and names the violated one in the error if any fails.
    """
    if is_empty(z_set) or is_empty(v_set):
        raise EmptySetError("tightened sets must be nonempty")
    try:
        omega = max_rpi(z_set, v_set, em.K, em.A_K, atoms, max_iter=max_iter)
    except EmptySetError as exc:
        raise EmptySetError(f"no terminal set exists: {exc}") from exc
    except NoConvergenceError as exc:
        raise NoConvergenceError(f"terminal set iteration stalled: {exc}") from exc

    tol = 1e-8
    for mu in np.atleast_2d(np.asarray(atoms, dtype=float)):
        for a, b in zip(omega.A, omega.b):
            if support(omega, a @ em.A_K) + float(a @ mu) > b + tol:
                raise ValidationError("terminal set violates invariance under the atom set")
    if not is_subset(omega, z_set, tol=tol):
        raise ValidationError("terminal set is not contained in Z")
    gain_image = PolytopeH(v_set.A @ em.K, v_set.b)
    if not is_subset(omega, gain_image, tol=tol):
        raise ValidationError("terminal set gain image is not contained in V")
    return omega
