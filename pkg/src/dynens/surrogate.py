"""Exact Gaussian-process regression for the online surrogate.

Anisotropic squared-exponential kernel, fixed observation noise, Cholesky
factorization with a jitter ladder, and likelihood-based hyperparameter
training in log space. Small and dense on purpose: ensembles at the scales
this targets retrain on hundreds of points, not tens of thousands.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.stats import norm

log = logging.getLogger(__name__)

JITTER_LADDER = tuple(10.0 ** e for e in range(-10, -5))  # 1e-10 .. 1e-6
LOCAL_MAX_STEPS = 50


class SurrogateError(Exception):
    pass


@dataclass(frozen=True)
class TrainMethod:
    """A training request: 'global' with a restart budget, or 'local'."""

    name: str
    max_iter: int = LOCAL_MAX_STEPS

    def __post_init__(self):
        if self.name not in ("global", "local"):
            raise SurrogateError(f"unknown train method {self.name!r}")
        if self.max_iter < 1:
            raise SurrogateError("max_iter must be >= 1")


class Posterior(NamedTuple):
    mean: np.ndarray
    variance: np.ndarray


@dataclass
class TrainResult:
    method: str
    lml_start: float
    lml_end: float
    evaluations: int


def squared_exponential(A: np.ndarray, B: np.ndarray,
                        signal_variance: float,
                        lengthscales: np.ndarray) -> np.ndarray:
    """k(a, b) = signal_variance * exp(-1/2 sum_d ((a_d - b_d) / l_d)^2)."""
    diff = (A[:, None, :] - B[None, :, :]) / lengthscales
    return signal_variance * np.exp(-0.5 * np.einsum("ijd,ijd->ij", diff, diff))


def crps_gaussian(y, mean, sigma):
    """Closed-form CRPS of a Gaussian predictive distribution.

    sigma * (z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)) with z = (y - mean)/sigma;
    a zero-sigma prediction degenerates to the absolute error.
    """
    y, mean, sigma = np.broadcast_arrays(
        np.asarray(y, dtype=float),
        np.asarray(mean, dtype=float),
        np.asarray(sigma, dtype=float),
    )
    err = np.abs(y - mean)
    pos = sigma > 0
    z = np.divide(y - mean, sigma, out=np.zeros_like(err), where=pos)
    term = z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / math.sqrt(math.pi)
    out = np.where(pos, sigma * term, err)
    return out if out.ndim else float(out)


class GaussianProcess:
    """GP regressor with trained signal variance and per-dimension
    lengthscales; the observation noise is fixed at construction."""

    def __init__(self, input_dim: int, noise_variance: float = 0.0,
                 signal_variance: float = 1.0,
                 lengthscales: np.ndarray | None = None):
        if input_dim < 1:
            raise SurrogateError("input_dim must be >= 1")
        if noise_variance < 0:
            raise SurrogateError("noise_variance must be >= 0")
        self.input_dim = input_dim
        self.noise_variance = float(noise_variance)
        self.signal_variance = float(signal_variance)
        if lengthscales is None:
            lengthscales = np.ones(input_dim)
        self.lengthscales = np.asarray(lengthscales, dtype=float).copy()
        if self.lengthscales.shape != (input_dim,) or np.any(self.lengthscales <= 0):
            raise SurrogateError("lengthscales must be positive, one per dimension")
        self.X = np.empty((0, input_dim))
        self.y = np.empty(0)
        self._cache: tuple | None = None

    # -- data ------------------------------------------------------------

    @property
    def n_train(self) -> int:
        return len(self.y)

    def set_noise_variance(self, value: float) -> None:
        if value < 0:
            raise SurrogateError("noise_variance must be >= 0")
        self.noise_variance = float(value)
        self._cache = None

    def tell(self, X: np.ndarray, y: np.ndarray) -> None:
        """Replace the training set (full refresh, not incremental)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[1] != self.input_dim:
            raise SurrogateError(
                f"X has {X.shape[1]} columns, model expects {self.input_dim}"
            )
        if X.shape[0] != y.shape[0]:
            raise SurrogateError(f"{X.shape[0]} inputs vs {y.shape[0]} outputs")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise SurrogateError("training data must be finite (filter NaN first)")
        self.X = X.copy()
        self.y = y.copy()
        self._cache = None

    # -- parameters ------------------------------------------------------

    def get_log_params(self) -> np.ndarray:
        return np.log(np.concatenate(([self.signal_variance], self.lengthscales)))

    def set_log_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.input_dim + 1,):
            raise SurrogateError(
                f"expected {self.input_dim + 1} log parameters, got {theta.shape}"
            )
        self.signal_variance = float(np.exp(theta[0]))
        self.lengthscales = np.exp(theta[1:]).copy()
        self._cache = None

    # -- inference -------------------------------------------------------

    def _factorization(self):
        """Cholesky of K + noise*I, adding the first jitter level that works."""
        if self._cache is not None:
            return self._cache
        m = self.n_train
        K = squared_exponential(self.X, self.X, self.signal_variance,
                                self.lengthscales)
        K[np.diag_indices(m)] += self.noise_variance
        last = None
        for jitter in (0.0,) + JITTER_LADDER:
            try:
                L = cholesky(K + jitter * np.eye(m), lower=True)
            except LinAlgError as exc:
                last = exc
                continue
            alpha = cho_solve((L, True), self.y)
            self._cache = (L, alpha, jitter)
            return self._cache
        raise SurrogateError(
            f"covariance not factorizable even at jitter {JITTER_LADDER[-1]}"
        ) from last

    def posterior(self, Xq: np.ndarray) -> Posterior:
        """Predictive mean and latent-function variance at query points.

        With no data this is the prior: zero mean, signal_variance.
        """
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if Xq.shape[1] != self.input_dim:
            raise SurrogateError(
                f"query has {Xq.shape[1]} columns, model expects {self.input_dim}"
            )
        if self.n_train == 0:
            return Posterior(np.zeros(len(Xq)),
                             np.full(len(Xq), self.signal_variance))
        L, alpha, _ = self._factorization()
        Ks = squared_exponential(self.X, Xq, self.signal_variance,
                                 self.lengthscales)
        mean = Ks.T @ alpha
        v = cho_solve((L, True), Ks)
        var = self.signal_variance - np.einsum("ij,ij->j", Ks, v)
        return Posterior(mean, np.maximum(var, 0.0))

    def log_marginal_likelihood(self, theta: np.ndarray | None = None) -> float:
        if theta is not None:
            self.set_log_params(theta)
        if self.n_train == 0:
            raise SurrogateError("no training data")
        L, alpha, _ = self._factorization()
        return float(
            -0.5 * self.y @ alpha
            - np.sum(np.log(np.diag(L)))
            - 0.5 * self.n_train * math.log(2.0 * math.pi)
        )

    def lml_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        """Likelihood and its gradient w.r.t. log parameters
        (log signal_variance, log lengthscale_1..d). Noise is fixed and has
        no gradient entry."""
        lml = self.log_marginal_likelihood(theta)
        L, alpha, _ = self._factorization()
        m = self.n_train
        Kf = squared_exponential(self.X, self.X, self.signal_variance,
                                 self.lengthscales)
        Kinv = cho_solve((L, True), np.eye(m))
        inner = np.outer(alpha, alpha) - Kinv
        grad = np.empty(self.input_dim + 1)
        grad[0] = 0.5 * np.sum(inner * Kf)
        for d in range(self.input_dim):
            D = ((self.X[:, d, None] - self.X[None, :, d]) / self.lengthscales[d]) ** 2
            grad[1 + d] = 0.5 * np.sum(inner * (Kf * D))
        return lml, grad

    # -- training --------------------------------------------------------

    def default_bounds(self) -> np.ndarray:
        """Log-space box: signal variance within 1e-4..1e4 of var(y),
        lengthscales within 1e-2..10 of each input range."""
        var_y = float(np.var(self.y)) if self.n_train else 1.0
        var_y = max(var_y, 1e-8)
        bounds = [(math.log(1e-4 * var_y), math.log(1e4 * var_y))]
        for d in range(self.input_dim):
            if self.n_train >= 2:
                rng_d = float(np.ptp(self.X[:, d]))
            else:
                rng_d = 0.0
            rng_d = max(rng_d, 1e-8)
            bounds.append((math.log(1e-2 * rng_d), math.log(10.0 * rng_d)))
        return np.array(bounds)

    def train(self, method: str = "global", max_iter: int = 120,
              bounds: np.ndarray | None = None,
              rng: np.random.Generator | None = None) -> TrainResult:
        """Improve hyperparameters by marginal likelihood.

        'global': max_iter seeded uniform draws in the log-space bounds box
        (plus the current parameters), then gradient-ascent refinement of the
        best. 'local': gradient-ascent refinement from the current values.
        Never finishes worse than it started (up to 1e-9).
        """
        if self.n_train == 0:
            raise SurrogateError("no training data")
        if bounds is None:
            bounds = self.default_bounds()
        bounds = np.asarray(bounds, dtype=float)
        if bounds.shape != (self.input_dim + 1, 2):
            raise SurrogateError(f"bounds must be ({self.input_dim + 1}, 2)")
        theta_entry = self.get_log_params()
        lml_entry = self.log_marginal_likelihood(theta_entry)
        evals = 1
        # Search inside the box even when the entry point sits outside it.
        theta0 = np.clip(theta_entry, bounds[:, 0], bounds[:, 1])
        if np.array_equal(theta0, theta_entry):
            lml0 = lml_entry
        else:
            lml0 = self.log_marginal_likelihood(theta0)
            evals += 1

        if method == "global":
            if rng is None:
                rng = np.random.default_rng()
            best_theta, best_lml = theta0, lml0
            for _ in range(max_iter):
                cand = rng.uniform(bounds[:, 0], bounds[:, 1])
                lml = self.log_marginal_likelihood(cand)
                evals += 1
                if lml > best_lml:
                    best_theta, best_lml = cand, lml
            theta, lml, n = self._ascend(best_theta, best_lml, bounds,
                                         LOCAL_MAX_STEPS)
            evals += n
        elif method == "local":
            theta, lml, n = self._ascend(theta0, lml0, bounds,
                                         min(max_iter, LOCAL_MAX_STEPS))
            evals += n
        else:
            raise SurrogateError(f"unknown train method {method!r}")

        if lml >= lml_entry:
            self.set_log_params(theta)
        else:
            # Clipping into the box cost more than the search recovered;
            # keep what we walked in with.
            self.set_log_params(theta_entry)
            lml = lml_entry
        self._warn_on_tiny_lengthscales()
        return TrainResult(method, lml_entry, lml, evals)

    def _ascend(self, theta, lml, bounds, max_steps):
        """Projected gradient ascent with backtracking line search."""
        evals = 0
        step = 0.1
        for _ in range(max_steps):
            cur, grad = self.lml_and_grad(theta)
            evals += 1
            gmax = np.max(np.abs(grad))
            if gmax < 1e-8:
                break
            direction = grad / gmax  # bounded log-space move
            improved = False
            s = step
            while s > 1e-8:
                cand = np.clip(theta + s * direction, bounds[:, 0], bounds[:, 1])
                cand_lml = self.log_marginal_likelihood(cand)
                evals += 1
                if cand_lml > cur:
                    theta, lml = cand, cand_lml
                    step = min(s * 2.0, 1.0)
                    improved = True
                    break
                s *= 0.5
            if not improved:
                break
            if lml - cur < 1e-10:
                break
        # Leave the model on the best parameters seen.
        self.set_log_params(theta)
        return theta, lml, evals

    def _warn_on_tiny_lengthscales(self):
        if self.n_train < 2:
            return
        ranges = np.ptp(self.X, axis=0)
        for d in range(self.input_dim):
            if ranges[d] > 0 and self.lengthscales[d] < ranges[d] / 10.0:
                log.warning(
                    "lengthscale %d = %.3g is under a tenth of the input "
                    "range %.3g; the fit may be chasing noise",
                    d, self.lengthscales[d], ranges[d],
                )

    # -- metrics ---------------------------------------------------------

    def rmse(self, X: np.ndarray, y: np.ndarray) -> float:
        """Root-mean-square error of the posterior mean on (X, y)."""
        y = np.asarray(y, dtype=float).ravel()
        mean, _ = self.posterior(X)
        if len(y) != len(mean):
            raise SurrogateError(f"{len(mean)} predictions vs {len(y)} targets")
        if len(y) == 0:
            raise SurrogateError("rmse of an empty set")
        return float(np.sqrt(np.mean((mean - y) ** 2)))
