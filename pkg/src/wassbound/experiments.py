"""Desk-scale experiment runners producing flat result rows.

Every runner is a generator of ResultRow so callers can keep whatever was
produced before a failure. Output is a pure function of the config.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import couplings as C
from . import estimators as E
from . import kernels as K
from . import targets as T
from .errors import ApproximationFailedError, InvalidInputError, StepSizeTooLargeError
from .metrics import EstimatorConfig, Metric
from .ot import SinkhornConfig, empirical_wp_mean, exact_empirical_wp, median_cost, sinkhorn
from .streams import derive_seed

EXPERIMENTS = ("gaussian-ar1", "ula-bias", "bimodal", "coupling-compare", "ot-compare", "logistic")
COLUMNS = ("experiment", "d", "t", "estimator", "value", "se", "reference", "runtime_ms")

DEFAULTS = {
    "gaussian-ar1": dict(dims=(5, 20, 50, 100), chains=5, burn_in=100, horizon=1000),
    "coupling-compare": dict(dims=(5, 20, 50, 100), chains=5, burn_in=100, horizon=1000),
    "ula-bias": dict(dims=(2, 5, 10, 20), chains=10, burn_in=1000, horizon=3000),
    "bimodal": dict(dims=(4,), chains=100, burn_in=0, horizon=1000),
    "ot-compare": dict(dims=(10,), chains=10, burn_in=100, horizon=500),
    "logistic": dict(dims=(5,), chains=20, burn_in=500, horizon=2000),
}
DEFAULT_LAMBDAS = (1.0, 0.3, 0.1, 0.03, 0.01)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    dims: tuple = ()
    chains: int | None = None
    burn_in: int | None = None
    horizon: int | None = None
    coupling: str = C.CRN
    step: float | None = None
    p: float = 2.0
    seed: int = 0
    dataset: str | None = None
    prior_var: float = 10.0
    lambda_grid: tuple = DEFAULT_LAMBDAS
    workers: int | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise InvalidInputError(f"unknown experiment {self.experiment!r}")
        if self.coupling not in (C.CRN, C.REFLECTION, C.INDEPENDENT):
            raise InvalidInputError(f"unknown coupling {self.coupling!r}")
        if self.step is not None and not self.step > 0:
            raise InvalidInputError("step size must be positive")
        if any(not lam > 0 for lam in self.lambda_grid):
            raise InvalidInputError("lambda grid entries must be positive")
        if not self.prior_var > 0:
            raise InvalidInputError("prior variance must be positive")

    def resolved(self) -> "ExperimentConfig":
        """Fill unset fields from the per-experiment defaults and validate."""
        base = DEFAULTS[self.experiment]
        cfg = replace(
            self,
            dims=tuple(int(d) for d in (self.dims or base["dims"])),
            chains=self.chains if self.chains is not None else base["chains"],
            burn_in=self.burn_in if self.burn_in is not None else base["burn_in"],
            horizon=self.horizon if self.horizon is not None else base["horizon"],
            lambda_grid=tuple(float(x) for x in self.lambda_grid),
        )
        if not cfg.dims or any(d < 1 for d in cfg.dims):
            raise InvalidInputError("dimension list must be nonempty and positive")
        cfg.estimator_config(cfg.dims[0])
        return cfg

    def estimator_config(self, d: int) -> EstimatorConfig:
        return EstimatorConfig(self.p, self.chains, self.burn_in, self.horizon,
                               derive_seed(self.seed, self.experiment, d))

    def step_for(self, d: int) -> float:
        return self.step if self.step is not None else K.default_step_size(d)

    def echo(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        out["lambda_grid"] = list(self.lambda_grid)
        out.pop("workers")
        return out


@dataclass
class ResultRow:
    experiment: str
    d: int
    t: int | None
    estimator: str
    value: float | None
    se: float | None = None
    reference: float | None = None
    runtime_ms: float | None = None

    def __post_init__(self):
        if self.value is not None and self.value < 0:
            raise InvalidInputError(f"negative value for {self.estimator}")
        if self.se is not None and self.se < 0:
            raise InvalidInputError(f"negative se for {self.estimator}")

    def cells(self, timings: bool = False):
        def num(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return format(v, ".17g") if isinstance(v, float) else str(v)

        rt = num(self.runtime_ms) if timings else ""
        return [self.experiment, str(self.d), num(self.t), self.estimator, num(self.value),
                num(self.se), num(self.reference), rt]

    def summary(self) -> str:
        s = f"{self.experiment} d={self.d}"
        if self.t is not None:
            s += f" t={self.t}"
        s += f" {self.estimator}="
        s += "NA" if self.value is None else f"{self.value:.6g}"
        if self.se is not None and not math.isnan(self.se):
            s += f" (se {self.se:.3g})"
        if self.reference is not None:
            s += f" ref={self.reference:.6g}"
        return s


def write_rows(rows, cfg: ExperimentConfig, version: str, timings: bool = False) -> str:
    buf = io.StringIO()
    buf.write(f"# wassbound {version}\n")
    buf.write(f"# seed {cfg.seed}\n")
    buf.write("# config " + json.dumps(cfg.echo(), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(r.cells(timings))
    return buf.getvalue()


class _Clock:
    def __init__(self):
        self.t0 = time.perf_counter()

    def ms(self) -> float:
        return 1000.0 * (time.perf_counter() - self.t0)


def _gaussian_init(P: T.TargetModel, Q: T.TargetModel) -> C.InitCoupling:
    return C.InitCoupling(C.gaussian_sampler(P.analytic), C.gaussian_sampler(Q.analytic))


def _analytic_sampler(a: T.GaussianAnalytic):
    return lambda rng, n: a.sample(rng, n)


def _bound_rows(name, est_name, batch, cfg, d, truth, clock):
    """CUB and lower-bound rows for one coupled batch."""
    S, Tn = cfg.burn_in, cfg.horizon
    est, se = E.cub(batch, cfg.p, S, Tn)
    yield ResultRow(name, d, Tn, est_name, est, se, truth, clock.ms())
    if cfg.p == 2:
        tag = est_name.split("_", 1)[1]
        Xs, Ys = batch.marginal_samples(S, Tn)
        lm = E.lower_bound_marginal(Xs, Ys, 2.0)
        lg = E.lower_bound_gelbrich(Xs, Ys)
        yield ResultRow(name, d, Tn, f"lower_marginal_{tag}", lm, None, truth)
        yield ResultRow(name, d, Tn, f"lower_gelbrich_{tag}", lg, None, truth)
        yield ResultRow(name, d, Tn, f"lower_combined_{tag}", max(lm, lg), None, truth)


# -- Gaussian AR(1) versus isotropic --------------------------------------------


def _ar1_pair(d):
    return T.ar1_gaussian(d), T.isotropic_gaussian(d)


def run_gaussian_ar1(cfg: ExperimentConfig, trace_points: int = 10):
    """CRN (or chosen) MALA-MALA bounds across d with stationary initialization."""
    cfg = cfg.resolved()
    name = cfg.experiment
    for d in cfg.dims:
        clock = _Clock()
        ec = cfg.estimator_config(d)
        P, Q = _ar1_pair(d)
        h = cfg.step_for(d)
        ck = C.CoupledKernel(K.mala(P, h), K.mala(Q, h), cfg.coupling)
        panel = E.analytic_panel(E.AR1_VS_ISOTROPIC, d, h)
        truth = panel.true_w2
        yield ResultRow(name, d, None, "truth", truth)
        yield ResultRow(name, d, None, "independent_bound", panel.independent_bound, None, truth)
        batch = C.run_coupled_chains(ck, _gaussian_init(P, Q), ec, workers=cfg.workers)
        # CUB as the horizon grows, for a fixed burn-in
        grid = np.unique(np.linspace(ec.burn_in, ec.horizon, trace_points + 1).astype(int)[1:])
        for Tk in grid[:-1]:
            est, se = E.cub(batch, cfg.p, ec.burn_in, int(Tk))
            yield ResultRow(name, d, int(Tk), f"cub{cfg.p:g}_{cfg.coupling}", est, se, truth)
        yield from _bound_rows(name, f"cub{cfg.p:g}_{cfg.coupling}", batch, cfg, d, truth, clock)
        N = min(1000, ec.horizon - ec.burn_in)
        emp, emp_se = empirical_wp_mean(_analytic_sampler(P.analytic), _analytic_sampler(Q.analytic),
                                        N, cfg.p, replicates=cfg.chains,
                                        seed=derive_seed(ec.master_seed, "empirical"))
        yield ResultRow(name, d, N, f"empirical_w{cfg.p:g}", emp, emp_se, truth, clock.ms())


def run_coupling_compare(cfg: ExperimentConfig):
    """The Gaussian AR(1) problem under CRN, reflection and independent couplings."""
    cfg = cfg.resolved()
    for cp in (C.CRN, C.REFLECTION, C.INDEPENDENT):
        sub = replace(cfg, coupling=cp)
        for row in run_gaussian_ar1(sub, trace_points=1):
            if cp != C.CRN and row.estimator in ("truth", "independent_bound"):
                continue
            if row.estimator.startswith("empirical") and cp != C.CRN:
                continue
            yield row


# -- ULA bias -------------------------------------------------------------------


def run_ula_bias(cfg: ExperimentConfig):
    """CRN MALA-ULA on the AR(1) target against analytic bias references."""
    cfg = cfg.resolved()
    name = cfg.experiment
    for d in cfg.dims:
        clock = _Clock()
        ec = cfg.estimator_config(d)
        P = T.ar1_gaussian(d)
        h = cfg.step_for(d)
        try:
            panel = E.analytic_panel(E.ULA_BIAS, d, h)
        except StepSizeTooLargeError:
            yield ResultRow(name, d, None, "skipped_step_size_too_large", None)
            continue
        truth = panel.true_w2
        yield ResultRow(name, d, None, "truth", truth)
        yield ResultRow(name, d, None, "independent_bound", panel.independent_bound, None, truth)
        if panel.dm_bound is not None:
            yield ResultRow(name, d, None, "dm_bound", panel.dm_bound, None, truth)
        std = T.isotropic_gaussian(d)
        ck = C.CoupledKernel(K.mala(P, h), K.ula(P, h), cfg.coupling)
        batch = C.run_coupled_chains(ck, _gaussian_init(std, std), ec, workers=cfg.workers)
        yield from _bound_rows(name, f"cub{cfg.p:g}_{cfg.coupling}", batch, cfg, d, truth, clock)


# -- bimodal targets ------------------------------------------------------------


def mixture_sample(rng, n, weights, means, variance=1.0):
    means = np.atleast_2d(np.asarray(means, dtype=float))
    comp = rng.choice(len(weights), size=n, p=weights)
    return means[comp] + math.sqrt(variance) * rng.standard_normal((n, means.shape[1]))


def bimodal_a(d: int = 4):
    one = np.ones(d)
    P = T.gaussian_mixture([0.5, 0.5], [one, -one])
    Q = T.isotropic_gaussian(d, mean=one)
    return P, Q


def bimodal_b():
    P = T.gaussian_mixture([0.5, 0.5], [[2.0], [-2.0]])
    Q = T.gaussian_mixture([0.5, 0.5], [[1.0], [-1.0]])
    return P, Q


PRERUN_STEPS = 10_000
SCENARIO_B_CHAINS = 1000
SCENARIO_B_HORIZON = 10_000
SCENARIO_B_STEP = 2.0
LONG_CHAIN_HORIZON = 100_000


def scenario_b_batches(seed: int, chains=SCENARIO_B_CHAINS, horizon=SCENARIO_B_HORIZON,
                       prerun=PRERUN_STEPS, workers=None, store_states=False):
    """CRN and reflection runs for the 1-D bimodal pair; returns {coupling: batch}."""
    P, Q = bimodal_b()
    kp, kq = K.mala(P, SCENARIO_B_STEP), K.mala(Q, SCENARIO_B_STEP)
    zero = C.point_sampler([0.0])
    init = C.InitCoupling(C.prerun_sampler(kp, zero, prerun), C.prerun_sampler(kq, zero, prerun))
    rc = C.RunConfig(chains, horizon, seed)
    return {cp: C.run_coupled_chains(C.CoupledKernel(kp, kq, cp), init, rc, workers=workers,
                                     store_states=store_states)
            for cp in (C.CRN, C.REFLECTION)}


def run_bimodal(cfg: ExperimentConfig, long_horizon: int = LONG_CHAIN_HORIZON,
                b_chains: int = SCENARIO_B_CHAINS, b_horizon: int = SCENARIO_B_HORIZON):
    """Scenario A: multiple trajectories and ergodic averaging. Scenario B: coupling choice."""
    cfg = cfg.resolved()
    name = cfg.experiment
    d = cfg.dims[0]
    clock = _Clock()
    P, Q = bimodal_a(d)
    h = cfg.step if cfg.step is not None else d ** (-1.0 / 6.0)
    ck = C.crn(K.mala(P, h), K.mala(Q, h))
    init = C.InitCoupling.points(np.ones(d), np.ones(d))
    seed = derive_seed(cfg.seed, name, "A")

    # reference W1 from a large exact assignment on direct draws
    rng = np.random.default_rng(derive_seed(cfg.seed, name, "reference"))
    xs = mixture_sample(rng, 2000, [0.5, 0.5], [np.ones(d), -np.ones(d)])
    ys = np.ones(d) + rng.standard_normal((2000, d))
    ref = exact_empirical_wp(xs, ys, 1.0)
    yield ResultRow(name, d, None, "A_empirical_w1_n2000", ref)

    batch = C.run_coupled_chains(ck, init, C.RunConfig(cfg.chains, cfg.horizon, seed),
                                 store_states=False, workers=cfg.workers)
    single = batch.distances[0]
    avg, avg_se = E.cub_instant_trace(batch, 1.0)
    for t in range(1, cfg.horizon + 1):
        yield ResultRow(name, d, t, "A_single_chain", float(single[t]), None, ref)
        yield ResultRow(name, d, t, f"A_mean_of_{cfg.chains}", float(avg[t]), float(avg_se[t]), ref)

    long = C.run_coupled_chains(ck, init, C.RunConfig(1, long_horizon, derive_seed(seed, "long")),
                                store_states=False)
    S = cfg.burn_in
    for Tk in np.unique(np.geomspace(max(S + 10, 10), long_horizon, 12).astype(int)):
        est, se = E.cub(long, 1.0, S, int(Tk))
        yield ResultRow(name, d, int(Tk), "A_cub1_single_chain", est, se, ref)
    yield ResultRow(name, d, None, "A_runtime", None, None, None, clock.ms())

    clock = _Clock()
    runs = scenario_b_batches(derive_seed(cfg.seed, name, "B"), b_chains, b_horizon,
                              workers=cfg.workers)
    for cp, b in runs.items():
        tr, tr_se = E.cub_instant_trace(b, 1.0)
        for t in np.unique(np.linspace(0, b_horizon, 21).astype(int)):
            yield ResultRow(name, 1, int(t), f"B_mean_{cp}", float(tr[t]), float(tr_se[t]))
        est, se = E.cub(b, 1.0, 0, b_horizon)
        yield ResultRow(name, 1, b_horizon, f"B_cub1_{cp}", est, se, None, clock.ms())


# -- Sinkhorn comparison --------------------------------------------------------


def run_ot_compare(cfg: ExperimentConfig):
    """Entropic OT over a lambda grid next to exact OT and CUB on the AR(1) problem."""
    cfg = cfg.resolved()
    name = cfg.experiment
    for d in cfg.dims:
        ec = cfg.estimator_config(d)
        P, Q = _ar1_pair(d)
        panel = E.analytic_panel(E.AR1_VS_ISOTROPIC, d)
        truth = panel.true_w2
        yield ResultRow(name, d, None, "truth", truth)
        yield ResultRow(name, d, None, "independent_bound", panel.independent_bound, None, truth)

        clock = _Clock()
        h = cfg.step_for(d)
        ck = C.CoupledKernel(K.mala(P, h), K.mala(Q, h), cfg.coupling)
        batch = C.run_coupled_chains(ck, _gaussian_init(P, Q), ec, workers=cfg.workers)
        yield from _bound_rows(name, f"cub{cfg.p:g}_{cfg.coupling}", batch, cfg, d, truth, clock)

        # OT on the post-burn-in samples of the first chain
        Xs = batch.xs[0, ec.burn_in + 1 :]
        Ys = batch.ys[0, ec.burn_in + 1 :]
        clock = _Clock()
        exact = exact_empirical_wp(Xs, Ys, cfg.p)
        yield ResultRow(name, d, len(Xs), f"exact_w{cfg.p:g}", exact, None, truth, clock.ms())
        med = median_cost(Xs, Ys, cfg.p)
        for lam in sorted(cfg.lambda_grid, reverse=True):
            clock = _Clock()
            res = sinkhorn(Xs, Ys, cfg.p, cfg=SinkhornConfig(lam * med))
            tag = f"lambda={lam:g}"
            yield ResultRow(name, d, len(Xs), f"sinkhorn_w{cfg.p:g}[{tag}]", res.cost, None, exact, clock.ms())
            yield ResultRow(name, d, len(Xs), f"sinkhorn_iterations[{tag}]", float(res.iterations))
            yield ResultRow(name, d, len(Xs), f"sinkhorn_converged[{tag}]", float(res.converged))


# -- Bayesian logistic regression -----------------------------------------------

SYNTHETIC_N = 500
LOGISTIC_STEP = 0.05


def logistic_data(cfg: ExperimentConfig):
    if cfg.dataset:
        return T.load_logistic_csv(cfg.dataset)
    rng = np.random.default_rng(derive_seed(cfg.seed, "synthetic-logistic"))
    X, y, _ = T.synthetic_logistic(SYNTHETIC_N, cfg.dims[0], rng)
    return X, y


def run_logistic(cfg: ExperimentConfig):
    """MALA reference against ULA, SGLD and MALA-on-Laplace under CRN couplings."""
    cfg = cfg.resolved()
    name = cfg.experiment
    X, y = logistic_data(cfg)
    d = X.shape[1]
    target = T.logistic_posterior(X, y, cfg.prior_var)
    h = cfg.step if cfg.step is not None else LOGISTIC_STEP
    ec = replace(cfg, dims=(d,)).estimator_config(d)
    ref = K.mala(target, h)
    lap = T.laplace_approximation(target, np.zeros(d))

    comparisons = [("ula", K.ula(target, h)), ("sgld10", K.sgld(target, h, 0.1)),
                   ("sgld50", K.sgld(target, h, 0.5))]
    if lap.cov is None or not lap.converged:
        yield ResultRow(name, d, None, "laplace_failed", None)
    else:
        comparisons.append(("laplace_mala", K.mala(T.gaussian(lap.mean, lap.cov, "laplace"), h)))
    if lap.cov is not None:
        # both sides start from independent draws of the Laplace approximation
        start = C.gaussian_sampler(T.GaussianAnalytic(lap.mean, lap.cov))
    else:
        start = C.point_sampler(lap.mean)
    init = C.InitCoupling(start, start)
    for label, other in comparisons:
        clock = _Clock()
        ck = C.CoupledKernel(ref, other, cfg.coupling)
        batch = C.run_coupled_chains(ck, init, ec, workers=cfg.workers)
        yield from _bound_rows(name, f"cub{cfg.p:g}_{label}", batch, cfg, d, None, clock)


RUNNERS = {
    "gaussian-ar1": run_gaussian_ar1,
    "coupling-compare": run_coupling_compare,
    "ula-bias": run_ula_bias,
    "bimodal": run_bimodal,
    "ot-compare": run_ot_compare,
    "logistic": run_logistic,
}


def run_experiment(cfg: ExperimentConfig):
    return RUNNERS[cfg.experiment](cfg)
