"""Upper and lower bound estimators built on coupled trajectories.

Upper bounds average p-th powers of coupled-chain distances. Lower bounds come
from post-burn-in marginal samples: a coordinatewise quantile-coupling term and
a Gelbrich (moment-matched Gaussian) term.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import couplings as C
from .errors import ContractionNotDetectedError, InvalidInputError, StepSizeTooLargeError
from .kernels import KernelConfig, default_step_size
from .metrics import CAPPED, EstimatorConfig, Metric, TrajectoryBatch, distance
from .streams import derive_seed
from .targets import (
    ar1_covariance,
    dm_ula_bias_bound,
    gaussian_w2,
    ula_gaussian_limit,
)

GELBRICH_RIDGE = 1e-9
SINGLE_CHAIN_BATCHES = 20


def _power_root(mean: float, se_mean: float, p: float):
    """Estimate mean^(1/p) and its delta-method standard error."""
    if mean <= 0:
        return 0.0, 0.0
    return mean ** (1.0 / p), se_mean * mean ** (1.0 / p - 1.0) / p


def _mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def cub(batch: TrajectoryBatch, p: float = 2.0, S: int = 0, T: int | None = None):
    """Coupling upper bound over steps S < t <= T and all chains.

    Returns (estimate, standard error). The error uses the spread of per-chain
    means; with a single chain, batch means along the trajectory stand in.
    """
    T = batch.horizon if T is None else T
    if not p >= 1:
        raise InvalidInputError("p must be >= 1")
    if S < 0 or S >= T:
        raise InvalidInputError(f"need 0 <= S < T, got S={S}, T={T}")
    if T > batch.horizon:
        raise InvalidInputError(f"T={T} exceeds batch horizon {batch.horizon}")
    powers = batch.distances[:, S + 1 : T + 1] ** p
    if batch.num_chains > 1:
        mean, se = _mean_se(powers.mean(axis=1))
    else:
        nb = min(SINGLE_CHAIN_BATCHES, powers.shape[1])
        mean = float(powers.mean())
        _, se = _mean_se([b.mean() for b in np.array_split(powers[0], nb)])
    return _power_root(mean, se, p)


def cub_instant(batch: TrajectoryBatch, p: float = 2.0, t: int = 0):
    """Chain-averaged bound at a single time t; SE is NaN for one chain."""
    if not 0 <= t <= batch.horizon:
        raise InvalidInputError(f"t={t} outside [0, {batch.horizon}]")
    if not p >= 1:
        raise InvalidInputError("p must be >= 1")
    mean, se = _mean_se(batch.distances[:, t] ** p)
    return _power_root(mean, se, p)


def cub_instant_trace(batch: TrajectoryBatch, p: float = 2.0):
    """cub_instant at every t; arrays (estimates, standard errors) of length T+1."""
    powers = batch.distances**p
    mean = powers.mean(axis=0)
    if batch.num_chains > 1:
        se = powers.std(axis=0, ddof=1) / math.sqrt(batch.num_chains)
    else:
        se = np.full_like(mean, np.nan)
    est = mean ** (1.0 / p)
    with np.errstate(divide="ignore", invalid="ignore"):
        se_est = np.where(mean > 0, se * mean ** (1.0 / p - 1.0) / p, 0.0)
    return est, se_est


# -- lower bounds ---------------------------------------------------------------


def _pair(Xs, Ys):
    Xs = np.asarray(Xs, dtype=float)
    Ys = np.asarray(Ys, dtype=float)
    if Xs.ndim == 1:
        Xs = Xs[:, None]
    if Ys.ndim == 1:
        Ys = Ys[:, None]
    if Xs.shape != Ys.shape:
        raise InvalidInputError(f"sample sets differ in shape: {Xs.shape} vs {Ys.shape}")
    if Xs.shape[0] < 2:
        raise InvalidInputError("need at least two samples per side")
    return Xs, Ys


def lower_bound_marginal(Xs, Ys, p: float = 2.0) -> float:
    """(sum_j W_p(mu_j, nu_j)^p)^(1/p) from coordinatewise sorted samples."""
    Xs, Ys = _pair(Xs, Ys)
    if not p >= 1:
        raise InvalidInputError("p must be >= 1")
    diff = np.abs(np.sort(Xs, axis=0) - np.sort(Ys, axis=0))
    return float(np.sum(np.mean(diff**p, axis=0)) ** (1.0 / p))


def _moments(S):
    m = S.mean(axis=0)
    # moments of the empirical measure itself (divide by N), plus a small ridge
    c = np.atleast_2d(np.cov(S, rowvar=False, bias=True))
    return m, c + GELBRICH_RIDGE * np.eye(S.shape[1])


def lower_bound_gelbrich(Xs, Ys) -> float:
    """W2 between Gaussians matching the sample means and covariances."""
    Xs, Ys = _pair(Xs, Ys)
    N, d = Xs.shape
    if N < d + 1:
        raise InvalidInputError(f"need N >= d + 1 samples, got N={N}, d={d}")
    mx, cx = _moments(Xs)
    my, cy = _moments(Ys)
    return gaussian_w2(mx, cx, my, cy)


def combined_lower_bound(Xs, Ys, p: float = 2.0) -> float:
    if p != 2:
        raise InvalidInputError("the combined lower bound is defined for p = 2")
    return max(lower_bound_marginal(Xs, Ys, 2.0), lower_bound_gelbrich(Xs, Ys))


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    upper_cub: float
    upper_se: float
    lower_marginal: float
    lower_gelbrich: float
    lower_combined: float
    config: dict = field(default_factory=dict)
    truth: float | None = None
    independent_bound: float | None = None

    def __post_init__(self):
        vals = (self.upper_cub, self.lower_marginal, self.lower_gelbrich, self.lower_combined)
        if any(v < 0 for v in vals):
            raise InvalidInputError("bound values must be nonnegative")
        if self.lower_combined != max(self.lower_marginal, self.lower_gelbrich):
            raise InvalidInputError("combined lower bound must be the larger of its two terms")

    def rows(self, experiment: str, d: int):
        """Flat rows (experiment, d, coupling, estimator, value, se)."""
        cp = self.config.get("coupling", "")
        out = [
            (experiment, d, cp, f"cub{self.config.get('p', 2):g}", self.upper_cub, self.upper_se),
            (experiment, d, cp, "lower_marginal", self.lower_marginal, None),
            (experiment, d, cp, "lower_gelbrich", self.lower_gelbrich, None),
            (experiment, d, cp, "lower_combined", self.lower_combined, None),
        ]
        if self.truth is not None:
            out.append((experiment, d, "", "truth", self.truth, None))
        if self.independent_bound is not None:
            out.append((experiment, d, "", "independent_bound", self.independent_bound, None))
        return out

    def to_csv(self, experiment: str, d: int, header: bool = True) -> str:
        buf = io.StringIO()
        if header:
            buf.write("experiment,d,coupling,estimator,value,se\n")
        for e, dd, cp, name, v, se in self.rows(experiment, d):
            buf.write(f"{e},{dd},{cp},{name},{v:.17g},{'' if se is None else format(se, '.17g')}\n")
        return buf.getvalue()


def bound_report(batch: TrajectoryBatch, p: float, S: int, T: int | None = None,
                 truth=None, independent_bound=None) -> BoundReport:
    """Upper bound from the coupled distances, lower bounds from the pooled marginals."""
    T = batch.horizon if T is None else T
    est, se = cub(batch, p, S, T)
    Xs, Ys = batch.marginal_samples(S, T)
    lm = lower_bound_marginal(Xs, Ys, 2.0)
    lg = lower_bound_gelbrich(Xs, Ys)
    cfg = {"p": p, "I": batch.num_chains, "S": S, "T": T,
           "coupling": batch.metadata.get("coupling", ""), "seed": batch.metadata.get("seed")}
    return BoundReport(est, se, lm, lg, max(lm, lg), cfg, truth, independent_bound)


# -- comparison with a contraction-based bound --------------------------------


@dataclass(frozen=True)
class DobsonReport:
    alpha_estimate: float
    delta_estimate: float
    mass_outside: float
    bound_value: float | None
    cub1: float
    cub1_se: float
    radius: float = float("nan")
    num_pairs: int = 0


def dobson_bound(
    left: KernelConfig,
    right: KernelConfig,
    init: C.InitCoupling,
    cfg: EstimatorConfig,
    gamma1: str = C.CRN,
    gamma_delta: str = C.CRN,
    q_omega: float = 0.99,
    metric: Metric = Metric.capped(),
    workers: int | None = None,
) -> DobsonReport:
    """Contraction-based W1 bound (delta + 2 eps) / (1 - alpha) next to CUB_1.

    `left` is the exact kernel K1 and `right` the approximate kernel K2. One
    glued run supplies CUB_1, the stationary Q samples Y*, and the points
    used to build the region Omega. alpha is the mean one-step distance ratio
    under gamma1 for pairs of distinct points inside Omega; delta is the mean
    distance after one gamma_delta step from each Y*.
    """
    if metric.kind != CAPPED or metric.cap != 1:
        raise InvalidInputError("the comparison is defined for the metric min(1, |x - y|)")
    if not 0 < q_omega < 1:
        raise InvalidInputError("q_omega must lie in (0, 1)")
    glued = C.composed(left, right, gamma1, gamma_delta)
    batch = C.run_coupled_chains(glued, init, cfg, metric, workers=workers)
    cub1, cub1_se = cub(batch, 1.0, cfg.burn_in, cfg.horizon)
    Xs, Ys = batch.marginal_samples(cfg.burn_in, cfg.horizon)

    # Omega: ball around the pooled mean holding a q_omega fraction of the samples
    pooled = np.concatenate([Xs, Ys])
    centre = pooled.mean(axis=0)
    radius = float(np.quantile(np.linalg.norm(pooled - centre, axis=1), q_omega))
    eps = 1.0 - q_omega

    rng = np.random.default_rng(derive_seed(cfg.master_seed, "dobson"))
    inside = Xs[np.linalg.norm(Xs - centre, axis=1) <= radius]
    partner = inside[rng.permutation(len(inside))]
    c0 = distance(metric, inside, partner)
    keep = c0 > 0
    a, b, c0 = inside[keep], partner[keep], c0[keep]
    if len(c0) == 0:
        raise InvalidInputError("no distinct pairs inside Omega")
    self_coupled = C.CoupledKernel(left, left, gamma1)
    a1, b1 = C.step_pairs(self_coupled, a, b, rng)
    alpha = float(np.mean(distance(metric, a1, b1) / c0))

    delta_kernel = C.crn(left, right) if gamma_delta == C.CRN else C.independent(left, right)
    x1, y1 = C.step_pairs(delta_kernel, Ys, Ys, rng)
    delta = float(np.mean(distance(metric, x1, y1)))

    report = DobsonReport(alpha, delta, eps, None, cub1, cub1_se, radius, len(c0))
    if not alpha < 1:
        raise ContractionNotDetectedError(f"estimated alpha={alpha:.4g} is not below 1", report)
    bound = (delta + 2.0 * eps) / (1.0 - alpha)
    return DobsonReport(alpha, delta, eps, bound, cub1, cub1_se, radius, len(c0))


# -- analytic references --------------------------------------------------------

AR1_VS_ISOTROPIC, ULA_BIAS = "ar1-vs-isotropic", "ula-bias"


@dataclass(frozen=True)
class AnalyticPanel:
    problem: str
    d: int
    sigma: float
    true_w2: float
    independent_bound: float
    ula_limit_cov: np.ndarray | None = None
    dm_bound: float | None = None


def independent_bound(mean_p, cov_p, mean_q, cov_q) -> float:
    """sqrt(E|X - Y|^2) for independent X ~ N(mean_p, cov_p), Y ~ N(mean_q, cov_q)."""
    gap = np.asarray(mean_p, float) - np.asarray(mean_q, float)
    return float(math.sqrt(gap @ gap + np.trace(cov_p) + np.trace(cov_q)))


def analytic_panel(problem: str, d: int, sigma: float | None = None, r: float = 0.5) -> AnalyticPanel:
    """Closed-form reference values for the two Gaussian problems.

    ar1-vs-isotropic: P = N(0, AR(1)), Q = N(0, I).
    ula-bias: P = N(0, AR(1)), Q the limiting law of ULA on P with step sigma.
    """
    if d < 1:
        raise InvalidInputError("d must be positive")
    sigma = default_step_size(d) if sigma is None else float(sigma)
    S = ar1_covariance(d, r)
    zero = np.zeros(d)
    if problem == AR1_VS_ISOTROPIC:
        eye = np.eye(d)
        return AnalyticPanel(problem, d, sigma, gaussian_w2(zero, S, zero, eye),
                             independent_bound(zero, S, zero, eye))
    if problem == ULA_BIAS:
        lim = ula_gaussian_limit(S, sigma)
        w = np.linalg.eigvalsh(S)
        try:
            dm = dm_ula_bias_bound(1.0 / w.max(), 1.0 / w.min(), 0.0, sigma, d)
        except StepSizeTooLargeError:
            raise
        except InvalidInputError:
            dm = None
        return AnalyticPanel(problem, d, sigma, gaussian_w2(zero, S, lim.mean, lim.cov),
                             independent_bound(zero, S, lim.mean, lim.cov), lim.cov, dm)
    raise InvalidInputError(f"unknown problem {problem!r}")
