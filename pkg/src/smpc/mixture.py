"""Shared-covariance Gaussian mixtures and their discrete/continuous split.

The mixture ``sum_i pi_i N(mu_i, Sigma)`` decouples into a discrete draw of
an atom ``w_x in {mu_1, ..., mu_L}`` plus an independent zero-mean Gaussian
``w_e ~ N(0, Sigma)``. Given a realized disturbance ``w``, the conditional
sampler draws the atom index from the posterior responsibilities and returns
``(j, w_x, w_e)`` with ``w_x + w_e = w``; this is the constructive refinement
step that lets a controller designed for the split dynamics drive the
original system.

Only one covariance is shared by all components. A mixture whose components
carry distinct covariances ``Sigma_i`` must be preprocessed by the caller:
replace every ``Sigma_i`` with one ``Sigma`` that dominates each of them in
the positive-semidefinite order (for instance the smallest common diagonal
upper bound). The resulting controller is conservative in proportion to the
over-approximation; no such preprocessing is performed here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._mat import as_matrix, as_vector, check_spd
from .errors import DimensionMismatchError, ValidationError
from .rng import RandomStream

_WEIGHT_TOL = 1e-12


def _check_weights(weights: np.ndarray) -> np.ndarray:
    w = as_vector(weights, "weights")
    if w.shape[0] < 1:
        raise ValidationError("at least one component required")
    if np.any(w < -_WEIGHT_TOL) or np.any(w > 1 + _WEIGHT_TOL):
        raise ValidationError("weights must lie in [0, 1]")
    if abs(w.sum() - 1.0) > _WEIGHT_TOL:
        raise ValidationError(f"weights must sum to 1, got {w.sum()!r}")
    return np.clip(w, 0.0, 1.0)


@dataclass(frozen=True)
class DiscreteDisturbance:
    """Finite-support disturbance: atom i occurs with probability weights[i]."""

    atoms: np.ndarray  # (L, n)
    weights: np.ndarray  # (L,)

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = _check_weights(self.weights)
        if atoms.shape[0] != weights.shape[0]:
            raise DimensionMismatchError("atom count does not match weight count")
        if not np.all(np.isfinite(atoms)):
            raise ValidationError("atoms must be finite")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)
        self.atoms.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def count(self) -> int:
        return self.atoms.shape[0]


@dataclass(frozen=True)
class ZeroMeanGaussian:
    """N(0, cov) noise; the continuous half of the decoupled mixture."""

    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cov = check_spd(as_matrix(self.cov, "cov"), name="cov")
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", np.linalg.cholesky(cov))
        self.cov.setflags(write=False)
        self.chol.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def sample(self, rng: RandomStream, size: int | None = None) -> np.ndarray:
        if size is None:
            return self.chol @ rng.standard_normal(self.dim)
        return rng.standard_normal((size, self.dim)) @ self.chol.T


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of L Gaussians with distinct means and one shared covariance."""

    means: np.ndarray  # (L, n)
    weights: np.ndarray  # (L,)
    cov: np.ndarray  # (n, n)
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _chol_inv: np.ndarray = field(init=False, repr=False, compare=False)
    _log_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        weights = _check_weights(self.weights)
        cov = check_spd(as_matrix(self.cov, "cov"), name="cov")
        if means.shape[0] != weights.shape[0]:
            raise DimensionMismatchError("mean count does not match weight count")
        if means.shape[1] != cov.shape[0]:
            raise DimensionMismatchError("mean dimension does not match covariance")
        if not np.all(np.isfinite(means)):
            raise ValidationError("means must be finite")
        chol = np.linalg.cholesky(cov)
        with np.errstate(divide="ignore"):
            logw = np.log(weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)
        # n is small; an explicit triangular inverse keeps batch evaluation
        # a single matmul
        object.__setattr__(self, "_chol_inv", np.linalg.inv(chol))
        object.__setattr__(self, "_log_weights", logw)
        for arr in (self.means, self.weights, self.cov):
            arr.setflags(write=False)

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the mixture as a whole.

        mean = sum_i pi_i mu_i, var = Sigma + sum_i pi_i mu_i mu_i' - mean mean'.
        """
        mean = self.weights @ self.means
        spread = (self.means.T * self.weights) @ self.means
        var = self.cov + spread - np.outer(mean, mean)
        return mean, 0.5 * (var + var.T)

    def sample(self, rng: RandomStream) -> np.ndarray:
        """One draw: component index ~ weights, then N(mu_i, Sigma)."""
        i = int(rng.choice(self.count, p=self.weights))
        return self.means[i] + self._chol @ rng.standard_normal(self.dim)

    def sample_batch(self, size: int, rng: RandomStream) -> np.ndarray:
        idx = rng.choice(self.count, size=size, p=self.weights)
        noise = rng.standard_normal((size, self.dim)) @ self._chol.T
        return self.means[idx] + noise

    def decouple(self) -> tuple[DiscreteDisturbance, ZeroMeanGaussian]:
        """Split into the atom distribution and the shared Gaussian residual."""
        return (
            DiscreteDisturbance(self.means, self.weights),
            ZeroMeanGaussian(self.cov),
        )

    def _log_resp(self, w_batch: np.ndarray) -> np.ndarray:
        """Unnormalized log responsibilities, shape (k, L)."""
        diff = w_batch[:, None, :] - self.means[None, :, :]  # (k, L, n)
        y = diff @ self._chol_inv.T
        sq = np.einsum("kln,kln->kl", y, y)
        return self._log_weights[None, :] - 0.5 * sq

    def posterior_weights(self, w) -> np.ndarray:
        """Responsibilities ``rho_i = pi_i N(w; mu_i, S) / sum_j ...``.

        Evaluated in log space (log-sum-exp) so that components many standard
        deviations from ``w`` underflow to 0 instead of poisoning the
        normalizer. The result sums to 1 within 1e-12.
        """
        w = as_vector(w)
        if not np.all(np.isfinite(w)):
            raise ValidationError("disturbance value must be finite")
        return self.posterior_weights_batch(w[None, :])[0]

    def posterior_weights_batch(self, w_batch: np.ndarray) -> np.ndarray:
        w_batch = np.atleast_2d(np.asarray(w_batch, dtype=float))
        logits = self._log_resp(w_batch)
        logits -= logits.max(axis=1, keepdims=True)
        rho = np.exp(logits)
        rho /= rho.sum(axis=1, keepdims=True)
        return rho

    def sample_conditional(
        self, w, rng: RandomStream
    ) -> tuple[int, np.ndarray, np.ndarray]:
        """Draw ``(j, w_x, w_e)`` from the conditional split of realized ``w``.

        ``j`` follows the posterior responsibilities at ``w``; ``w_x`` is the
        atom ``mu_j`` and ``w_e = w - w_x``, so ``w_x + w_e = w``.
        """
        w = as_vector(w)
        rho = self.posterior_weights(w)
        j = int(rng.choice(self.count, p=rho))
        w_x = self.means[j].copy()
        return j, w_x, w - w_x

    def sample_conditional_batch(
        self, w_batch: np.ndarray, rng: RandomStream
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized conditional split; returns (indices, w_x, w_e)."""
        w_batch = np.atleast_2d(np.asarray(w_batch, dtype=float))
        rho = self.posterior_weights_batch(w_batch)
        u = rng.random(w_batch.shape[0])
        cdf = np.cumsum(rho, axis=1)
        idx = (u[:, None] > cdf).sum(axis=1)
        idx = np.minimum(idx, self.count - 1)
        w_x = self.means[idx]
        return idx, w_x, w_batch - w_x
