"""Target distributions and closed-form Gaussian references.

All log-densities are unnormalized. Densities and gradients accept a single
point of shape (d,) or a stack of points of shape (..., d).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import (
    ApproximationFailedError,
    InvalidInputError,
    StepSizeTooLargeError,
)


@dataclass(frozen=True)
class GaussianAnalytic:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise InvalidInputError("covariance shape does not match mean")
        if np.abs(cov - cov.T).max() > 1e-12 * max(1.0, np.abs(cov).max()):
            raise InvalidInputError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov)[0] <= 0:
            raise InvalidInputError("covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dimension(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        z = rng.standard_normal(shape + (self.dimension,))
        return self.mean + z @ np.linalg.cholesky(self.cov).T


@dataclass(frozen=True)
class GaussianApprox:
    mean: np.ndarray
    cov: np.ndarray | None
    converged: bool
    iterations: int


@dataclass(frozen=True, eq=False)
class TargetModel:
    dimension: int
    log_density: Callable
    grad_log_density: Callable
    analytic: GaussianAnalytic | None = None
    hessian: Callable | None = None
    observations: "LogisticData | None" = None
    name: str = ""


def _rows(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise InvalidInputError(f"expected points of dimension {d}, got shape {x.shape}")
    return x.reshape(-1, d), x.shape[:-1]


# -- Gaussians ------------------------------------------------------------


def gaussian(mean, cov, name: str = "gaussian") -> TargetModel:
    """Gaussian target with gradient computed through the precision matrix."""
    g = GaussianAnalytic(mean, cov)
    d = g.dimension
    factor = linalg.cho_factor(g.cov, lower=True)
    precision = linalg.cho_solve(factor, np.eye(d))
    m = g.mean

    def solve(x):
        r, lead = _rows(x, d)
        c = r - m
        # einsum rather than a BLAS solve, so each row rounds the same way at any stack height
        return c, np.einsum("kj,ij->ki", c, precision), lead

    def log_density(x):
        c, z, lead = solve(x)
        return (-0.5 * np.einsum("ij,ij->i", c, z)).reshape(lead)

    def grad_log_density(x):
        _, z, lead = solve(x)
        return (-z).reshape(lead + (d,))

    def hessian(x):
        return -precision

    return TargetModel(d, log_density, grad_log_density, g, hessian, name=name)


def ar1_covariance(d: int, r: float) -> np.ndarray:
    idx = np.arange(d)
    return r ** np.abs(idx[:, None] - idx[None, :])


def ar1_gaussian(d: int, r: float = 0.5) -> TargetModel:
    """Zero-mean Gaussian with covariance r^|i-j|."""
    if d < 1:
        raise InvalidInputError("dimension must be positive")
    if not 0 < r < 1:
        raise InvalidInputError("correlation r must lie in (0, 1)")
    return gaussian(np.zeros(d), ar1_covariance(d, r), name=f"ar1(d={d},r={r:g})")


def isotropic_gaussian(d: int, mean=0.0, variance: float = 1.0) -> TargetModel:
    if not variance > 0:
        raise InvalidInputError("variance must be positive")
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (d,)).copy()

    def log_density(x):
        r, lead = _rows(x, d)
        return (-0.5 * np.sum((r - mean) ** 2, axis=1) / variance).reshape(lead)

    def grad_log_density(x):
        r, lead = _rows(x, d)
        return (-(r - mean) / variance).reshape(lead + (d,))

    def hessian(x):
        return -np.eye(d) / variance

    return TargetModel(
        d, log_density, grad_log_density,
        GaussianAnalytic(mean, variance * np.eye(d)), hessian,
        name=f"isotropic(d={d})",
    )


def gaussian_mixture(weights, means, variance: float = 1.0) -> TargetModel:
    """Mixture of isotropic Gaussians sharing one variance."""
    weights = np.asarray(weights, dtype=float).ravel()
    means = np.atleast_2d(np.asarray(means, dtype=float))
    if weights.size == 0:
        raise InvalidInputError("mixture needs at least one component")
    if means.shape[0] != weights.size:
        raise InvalidInputError("one mean per weight required")
    if np.any(weights <= 0) or not math.isclose(weights.sum(), 1.0, abs_tol=1e-12):
        raise InvalidInputError("weights must be positive and sum to 1")
    if not variance > 0:
        raise InvalidInputError("variance must be positive")
    d = means.shape[1]
    logw = np.log(weights)

    def lse(a):
        # scipy's logsumexp carries ~100us of overhead per call, too much per MCMC step
        m = a.max(axis=1, keepdims=True)
        return m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))

    def component_terms(x):
        r, lead = _rows(x, d)
        diff = r[:, None, :] - means[None, :, :]
        return diff, logw - 0.5 * np.sum(diff**2, axis=2) / variance, lead

    def log_density(x):
        _, a, lead = component_terms(x)
        return lse(a)[:, 0].reshape(lead)

    def grad_log_density(x):
        diff, a, lead = component_terms(x)
        resp = np.exp(a - lse(a))
        g = np.einsum("nk,nkd->nd", resp, -diff / variance)
        return g.reshape(lead + (d,))

    analytic = None
    if weights.size == 1:
        analytic = GaussianAnalytic(means[0], variance * np.eye(d))
    return TargetModel(d, log_density, grad_log_density, analytic, name=f"mixture(k={weights.size},d={d})")


# -- Bayesian logistic regression -----------------------------------------


@dataclass(frozen=True, eq=False)
class LogisticData:
    """Design matrix, +/-1 labels and Gaussian prior variance."""

    X: np.ndarray
    y: np.ndarray
    prior_variance: float

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def loglik_grad(self, beta, idx=None):
        """Likelihood gradient for a stack of coefficient vectors (k, d).

        With `idx` of shape (k, b), observation subsets are used per row and
        the sum is rescaled by n / b.
        """
        beta = np.atleast_2d(beta)
        if idx is None:
            # einsum keeps each row's arithmetic independent of the stack height
            s = self.y * expit(-self.y * np.einsum("kd,nd->kn", beta, self.X))
            return np.einsum("kn,nd->kd", s, self.X)
        Xb = self.X[idx]
        yb = self.y[idx]
        s = yb * expit(-yb * np.einsum("kbd,kd->kb", Xb, beta))
        return np.einsum("kb,kbd->kd", s, Xb) * (self.n / idx.shape[1])

    def prior_grad(self, beta):
        return -np.asarray(beta) / self.prior_variance


def logistic_posterior(X, y, prior_variance: float = 10.0) -> TargetModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 1 or X.shape[0] != y.size:
        raise InvalidInputError("need n >= 1 observations with one label each")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise InvalidInputError("labels must be -1 or +1")
    if not prior_variance > 0:
        raise InvalidInputError("prior variance must be positive")
    data = LogisticData(X, y, float(prior_variance))
    d = X.shape[1]

    def log_density(b):
        r, lead = _rows(b, d)
        ll = -np.logaddexp(0.0, -y * np.einsum("kd,nd->kn", r, X)).sum(axis=1)
        return (ll - 0.5 * np.sum(r**2, axis=1) / prior_variance).reshape(lead)

    def grad_log_density(b):
        r, lead = _rows(b, d)
        return (data.loglik_grad(r) + data.prior_grad(r)).reshape(lead + (d,))

    def hessian(b):
        b = np.asarray(b, dtype=float)
        m = X @ b
        w = expit(m) * expit(-m)
        return -(X.T * w) @ X - np.eye(d) / prior_variance

    return TargetModel(d, log_density, grad_log_density, None, hessian, data,
                       name=f"logistic(n={X.shape[0]},d={d})")


def load_logistic_csv(path, standardize: bool = True):
    """Read `label,feature_1,...`; labels 0/1 are mapped to -1/+1."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                if rows:
                    raise InvalidInputError(f"non-numeric row in {path}: {rec}")
                # header row
    if not rows:
        raise InvalidInputError(f"no data rows in {path}")
    data = np.array(rows)
    y, X = data[:, 0], data[:, 1:]
    labels = set(np.unique(y))
    if labels <= {0.0, 1.0}:
        y = 2.0 * y - 1.0
    elif not labels <= {-1.0, 1.0}:
        raise InvalidInputError(f"labels must be in {{-1,+1}} or {{0,1}}, got {sorted(labels)}")
    if standardize:
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        X = (X - X.mean(axis=0)) / sd
    return X, y


def synthetic_logistic(n: int, d: int, rng: np.random.Generator, scale: float = 1.0):
    """Standard normal covariates and labels drawn from a logistic model.

    Returns (X, y, beta_true).
    """
    X = rng.standard_normal((n, d))
    beta = scale * rng.standard_normal(d) / math.sqrt(d)
    y = np.where(rng.random(n) < expit(X @ beta), 1.0, -1.0)
    return X, y, beta


# -- Gaussian references --------------------------------------------------


def matrix_sqrt_sym(S) -> np.ndarray:
    """Symmetric positive square root via eigendecomposition."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w[0] < -1e-10:
        raise InvalidInputError(f"matrix has negative eigenvalue {w[0]:.3g}")
    w = np.clip(w, 0.0, None)
    R = (V * np.sqrt(w)) @ V.T
    return 0.5 * (R + R.T)


def _check_spd(S, what):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1] or np.abs(S - S.T).max() > 1e-8 * max(1.0, np.abs(S).max()):
        raise InvalidInputError(f"{what} is not a symmetric matrix")
    if np.linalg.eigvalsh(0.5 * (S + S.T))[0] <= 0:
        raise InvalidInputError(f"{what} is not positive definite")
    return 0.5 * (S + S.T)


def gaussian_w2(m1, S1, m2, S2) -> float:
    """2-Wasserstein distance between N(m1, S1) and N(m2, S2)."""
    S1 = _check_spd(S1, "S1")
    S2 = _check_spd(S2, "S2")
    m1 = np.atleast_1d(np.asarray(m1, dtype=float))
    m2 = np.atleast_1d(np.asarray(m2, dtype=float))
    if S1.shape != S2.shape or m1.shape != m2.shape or m1.size != S1.shape[0]:
        raise InvalidInputError("dimension mismatch")
    R1 = matrix_sqrt_sym(S1)
    cross = matrix_sqrt_sym(R1 @ S2 @ R1)
    bures = np.trace(S1) + np.trace(S2) - 2.0 * np.trace(cross)
    return math.sqrt(max(float(np.sum((m1 - m2) ** 2) + bures), 0.0))


def ula_recursion_matrix(Sigma, sigma: float) -> np.ndarray:
    Sigma = _check_spd(Sigma, "Sigma")
    return np.eye(Sigma.shape[0]) - 0.5 * sigma**2 * np.linalg.inv(Sigma)


def ula_gaussian_limit(Sigma, sigma: float) -> GaussianAnalytic:
    """Stationary law of ULA with step `sigma` on N(0, Sigma): N(0, sigma^2 (I - B^2)^-1)."""
    if not sigma > 0:
        raise InvalidInputError("step size must be positive")
    Sigma = _check_spd(Sigma, "Sigma")
    lam, V = np.linalg.eigh(Sigma)
    b = 1.0 - 0.5 * sigma**2 / lam
    if np.abs(b).max() >= 1.0:
        raise StepSizeTooLargeError(
            f"step {sigma:g} gives recursion operator norm {np.abs(b).max():.4g} >= 1"
        )
    cov = (V * (sigma**2 / (1.0 - b**2))) @ V.T
    return GaussianAnalytic(np.zeros(lam.size), 0.5 * (cov + cov.T))


def dm_ula_bias_bound(m: float, L: float, Ltilde: float, sigma: float, d: int) -> float:
    """Square root of the Durmus-Moulines asymptotic W2 bias bound for ULA.

    `m` strong convexity, `L` gradient Lipschitz constant, `Ltilde` Hessian
    Lipschitz constant of the negative log-density; gamma = sigma^2 / 2.
    """
    if not 0 < m <= L:
        raise InvalidInputError("need 0 < m <= L")
    gamma = 0.5 * sigma**2
    if gamma >= 1.0 / (m + L):
        raise InvalidInputError(f"gamma={gamma:.4g} must be below 1/(m+L)={1 / (m + L):.4g}")
    kappa = 2.0 * m * L / (m + L)
    inner = (
        2.0 * L**2
        + gamma * L**4 * (gamma / 6.0 + 1.0 / m)
        + (4.0 * d * Ltilde**2 / 3.0 + gamma * L**4 + 4.0 * L**4 / (3.0 * m)) / kappa
    )
    return math.sqrt(2.0 / kappa * gamma**2 * d * inner)


# -- Laplace approximation --------------------------------------------------


def fd_hessian(grad, x, h=None) -> np.ndarray:
    """Central finite differences of the gradient, symmetrized."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = 1e-5 * (1.0 + np.linalg.norm(x)) if h is None else h
    H = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        H[:, j] = (grad(x + e) - grad(x - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def laplace_approximation(target: TargetModel, init, tol: float = 1e-8, max_iter: int = 100) -> GaussianApprox:
    """Mode by damped Newton ascent; covariance from the inverse negative Hessian."""
    x = np.array(init, dtype=float)
    hess = target.hessian or (lambda z: fd_hessian(target.grad_log_density, z))
    f = float(target.log_density(x))
    g = target.grad_log_density(x)
    it = 0
    while np.linalg.norm(g) > tol and it < max_iter:
        it += 1
        H = hess(x)
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = g
        if not g @ step > 0:
            # not an ascent direction away from the mode; fall back to the gradient
            step = g
        t = 1.0
        while True:
            cand = x + t * step
            fc = float(target.log_density(cand))
            if fc >= f or t < 1e-12:
                break
            t *= 0.5
        if fc < f:
            break
        x, f = cand, fc
        g = target.grad_log_density(x)
    converged = bool(np.linalg.norm(g) <= tol)
    neg_h = -hess(x)
    neg_h = 0.5 * (neg_h + neg_h.T)
    try:
        c = linalg.cho_factor(neg_h, lower=True)
    except linalg.LinAlgError:
        if converged:
            raise ApproximationFailedError("negative Hessian at the mode is not positive definite")
        return GaussianApprox(x, None, False, it)
    cov = linalg.cho_solve(c, np.eye(x.size))
    return GaussianApprox(x, 0.5 * (cov + cov.T), converged, it)
