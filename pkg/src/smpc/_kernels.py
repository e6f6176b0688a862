"""Hot numeric kernels: numba-compiled with a pure-numpy fallback.

Two loops dominate runtime: the operator-splitting iteration inside the QP
backend (called tens of thousands of times during a Monte Carlo campaign)
and the error-dynamics membership counting used for reachable-set coverage
checks. Both exist in two flavors:

* ``*_numba``: ``@njit``-compiled (only when numba imports cleanly),
* ``*_numpy``: vectorized numpy, no compilation step.

The active flavor is picked at import time from the ``SMPC_NUMBA`` env var:
``"0"`` forces numpy, ``"1"`` requires numba (ImportError if missing),
unset/auto uses numba when available. ``benchmarks/bench_kernels.py`` times
the two flavors against each other.
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("SMPC_NUMBA", "").strip()
if _env == "0":
    _HAVE_NUMBA = False
else:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:
        if _env == "1":
            raise
        _HAVE_NUMBA = False

USING_NUMBA = _HAVE_NUMBA


def backend_name() -> str:
    return "numba" if USING_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Operator-splitting (ADMM) iteration for  min 1/2 y'Py + q'y  s.t.  Ay <= b.
#
# The linear solve uses a precomputed inverse Cholesky factor of
# M = P + sigma*I + rho*A'A, so one iteration is a handful of matvecs. The
# body is written so the same source runs compiled (numba) or plain (numpy);
# per-iteration work is identical in both flavors.
# ---------------------------------------------------------------------------


def _admm_loop(
    linv,  # (k,k) inverse of lower Cholesky factor of M
    linv_t,  # (k,k) its transpose, contiguous
    p_mat,  # (k,k) reduced cost Hessian
    q,  # (k,)
    a_mat,  # (m,k)
    a_t,  # (k,m)
    b,  # (m,)
    y,  # (k,) iterate, modified copy returned
    z,  # (m,)
    lam,  # (m,) nonnegative multipliers
    rho,
    sigma,
    alpha,
    eps_abs,
    eps_rel,
    max_iter,
    check_every,
):
    it = 0
    status = 1  # 0 converged, 1 iteration budget, 2 infeasibility certificate
    r_prim = np.inf
    r_dual = np.inf
    lam_ref = lam.copy()
    for it in range(1, max_iter + 1):
        rhs = sigma * y - q + a_t @ (rho * z - lam)
        y_hat = linv_t @ (linv @ rhs)
        z_hat = a_mat @ y_hat
        y = alpha * y_hat + (1.0 - alpha) * y
        v = alpha * z_hat + (1.0 - alpha) * z + lam / rho
        z = np.minimum(v, b)
        lam = rho * (v - z)
        if it % check_every == 0 or it == max_iter:
            ay = a_mat @ y
            py = p_mat @ y
            atl = a_t @ lam
            r_prim = np.abs(ay - z).max()
            r_dual = np.abs(py + q + atl).max()
            scale_p = max(np.abs(ay).max(), np.abs(z).max())
            scale_d = max(max(np.abs(py).max(), np.abs(atl).max()), np.abs(q).max())
            if r_prim <= eps_abs + eps_rel * scale_p and r_dual <= eps_abs + eps_rel * scale_d:
                status = 0
                break
            dlam = lam - lam_ref
            ndl = np.abs(dlam).max()
            if ndl > 1e-10:
                # primal infeasibility certificate: A'd ~ 0 and b'd < 0
                if np.abs(a_t @ dlam).max() <= 1e-8 * ndl and b @ dlam <= -1e-8 * ndl:
                    status = 2
                    break
            lam_ref = lam.copy()
    return y, z, lam, it, r_prim, r_dual, status


admm_loop_numpy = _admm_loop
if _HAVE_NUMBA:
    admm_loop_numba = njit(cache=True)(_admm_loop)
    admm_loop = admm_loop_numba
else:
    admm_loop = admm_loop_numpy


# ---------------------------------------------------------------------------
# Error-path coverage: simulate e(t+1) = A_K e(t) + w(t) from e(0)=0 and
# count, per step and per quadratic level, how many paths satisfy
# e' S e <= level. noise has shape (paths, steps, n).
# ---------------------------------------------------------------------------


def _error_coverage_scalar(a_k, noise, shape_inv, levels):
    paths, steps, n = noise.shape
    nlev = levels.shape[0]
    counts = np.zeros((steps, nlev), dtype=np.int64)
    e = np.zeros(n)
    e_next = np.zeros(n)
    for p in range(paths):
        for i in range(n):
            e[i] = 0.0
        for t in range(steps):
            for i in range(n):
                acc = noise[p, t, i]
                for j in range(n):
                    acc += a_k[i, j] * e[j]
                e_next[i] = acc
            for i in range(n):
                e[i] = e_next[i]
            quad = 0.0
            for i in range(n):
                row = 0.0
                for j in range(n):
                    row += shape_inv[i, j] * e[j]
                quad += e[i] * row
            for j in range(nlev):
                if quad <= levels[j]:
                    counts[t, j] += 1
    return counts


def error_coverage_numpy(a_k, noise, shape_inv, levels):
    paths, steps, _ = noise.shape
    nlev = levels.shape[0]
    counts = np.zeros((steps, nlev), dtype=np.int64)
    e = np.zeros((paths, a_k.shape[0]))
    for t in range(steps):
        e = e @ a_k.T + noise[:, t]
        quad = np.einsum("pi,ij,pj->p", e, shape_inv, e)
        for j in range(nlev):
            counts[t, j] = int((quad <= levels[j]).sum())
    return counts


if _HAVE_NUMBA:
    error_coverage_numba = njit(cache=True)(_error_coverage_scalar)
    error_coverage = error_coverage_numba
else:
    error_coverage = error_coverage_numpy
