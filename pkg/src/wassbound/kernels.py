"""Langevin kernels: MALA, ULA and SGLD.

The public `*_step` functions advance a single chain and draw their own
randomness: d standard normals, then (MALA) one uniform, then (SGLD) one
minibatch. The vectorized `gradient`/`finish` pair does the actual work on
stacks of states with pre-drawn randomness and is shared with the couplings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalFailureError
from .streams import rank_batch
from .targets import TargetModel

MALA, ULA, SGLD = "mala", "ula", "sgld"


@dataclass(frozen=True, eq=False)
class KernelConfig:
    kind: str
    step_size: float
    target: TargetModel
    minibatch_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in (MALA, ULA, SGLD):
            raise InvalidInputError(f"unknown kernel kind {self.kind!r}")
        if not self.step_size > 0:
            raise InvalidInputError("step size must be positive")
        if not 0 < self.minibatch_fraction <= 1:
            raise InvalidInputError("minibatch fraction must lie in (0, 1]")
        if self.kind == SGLD and self.target.observations is None:
            raise InvalidInputError("SGLD needs a target with per-observation gradients")

    @property
    def dimension(self) -> int:
        return self.target.dimension

    @property
    def is_mh(self) -> bool:
        return self.kind == MALA

    @property
    def batch_size(self) -> int | None:
        if self.kind != SGLD:
            return None
        return sgld_batch_size(self.minibatch_fraction, self.target.observations.n)

    @property
    def label(self) -> str:
        if self.kind == SGLD:
            return f"sgld{round(100 * self.minibatch_fraction):d}"
        return self.kind


@dataclass(frozen=True)
class StepOutcome:
    next_state: np.ndarray
    proposal: np.ndarray
    accepted: np.ndarray | bool
    log_accept_ratio: np.ndarray | float


def sgld_batch_size(fraction: float, n: int) -> int:
    # round first so that e.g. 0.3 * 10 does not ceil to 4
    return max(1, math.ceil(round(fraction * n, 9)))


def mala(target, step_size) -> KernelConfig:
    return KernelConfig(MALA, step_size, target)


def ula(target, step_size) -> KernelConfig:
    return KernelConfig(ULA, step_size, target)


def sgld(target, step_size, fraction) -> KernelConfig:
    return KernelConfig(SGLD, step_size, target, fraction)


def default_step_size(d: int, scale: float = 0.5) -> float:
    """Step size scale * d^(-1/6)."""
    return scale * d ** (-1.0 / 6.0)


# -- vectorized core ------------------------------------------------------


def _finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NumericalFailureError(f"non-finite {what}")
    return a


def gradient(cfg: KernelConfig, x, batch=None):
    """Drift gradient at stacked states; stochastic for SGLD when `batch` is a strict subset."""
    if cfg.kind == SGLD and batch is not None and batch.shape[-1] < cfg.target.observations.n:
        obs = cfg.target.observations
        g = obs.loglik_grad(x, batch) + obs.prior_grad(x)
    else:
        g = cfg.target.grad_log_density(x)
    return _finite(g, "gradient")


def proposal_mean(cfg: KernelConfig, x, grad):
    return x + 0.5 * cfg.step_size**2 * grad


def _log_q(cfg, to, frm, grad_frm):
    """Log Langevin proposal density of `to` given `frm`, up to a constant."""
    r = to - proposal_mean(cfg, frm, grad_frm)
    return -0.5 * np.sum(r * r, axis=-1) / cfg.step_size**2


def finish(cfg: KernelConfig, x, grad, noise, u=None, logp=None):
    """Complete a step from states `x` with drift gradient `grad`.

    Returns the outcome and, for MALA, (log p, grad) at the new states so the
    next step can skip re-evaluating them.
    """
    prop = proposal_mean(cfg, x, grad) + cfg.step_size * noise
    if cfg.kind != MALA:
        n = x.shape[:-1]
        return StepOutcome(prop, prop, np.ones(n, bool), np.zeros(n)), None
    target = cfg.target
    if logp is None:
        logp = _finite(target.log_density(x), "log-density")
    logp_prop = _finite(target.log_density(prop), "log-density")
    grad_prop = _finite(target.grad_log_density(prop), "gradient")
    ratio = logp_prop - logp + _log_q(cfg, x, prop, grad_prop) - _log_q(cfg, prop, x, grad)
    with np.errstate(divide="ignore"):
        acc = np.log(u) <= ratio
    nxt = np.where(acc[..., None], prop, x)
    cache = (np.where(acc, logp_prop, logp), np.where(acc[..., None], grad_prop, grad))
    return StepOutcome(nxt, prop, acc, ratio), cache


# -- single-chain API -------------------------------------------------------


def langevin_proposal(target: TargetModel, sigma: float, state, noise):
    """state + (sigma^2 / 2) grad log p(state) + sigma * noise."""
    state = np.asarray(state, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != state.shape:
        raise InvalidInputError("noise must match the state dimension")
    g = _finite(target.grad_log_density(state), "gradient")
    return state + 0.5 * sigma**2 * g + sigma * noise


def mala_log_accept(target: TargetModel, sigma: float, current, proposal):
    """Log Metropolis-Hastings ratio for a Langevin proposal, computed in log space."""
    current = np.asarray(current, dtype=float)
    proposal = np.asarray(proposal, dtype=float)
    if current.shape != proposal.shape:
        raise InvalidInputError("points must share a dimension")
    cfg = KernelConfig(MALA, sigma, target)
    lp_c = _finite(target.log_density(current), "log-density")
    lp_p = _finite(target.log_density(proposal), "log-density")
    g_c = _finite(target.grad_log_density(current), "gradient")
    g_p = _finite(target.grad_log_density(proposal), "gradient")
    return lp_p - lp_c + _log_q(cfg, current, proposal, g_p) - _log_q(cfg, proposal, current, g_c)


def _draw(cfg, rng, d):
    noise = rng.standard_normal(d)
    u = rng.random() if cfg.kind == MALA else None
    batch = None
    if cfg.kind == SGLD:
        n = cfg.target.observations.n
        b = cfg.batch_size
        # a full batch involves no randomness, so nothing is drawn
        if b < n:
            batch = rank_batch(rng.random(n), b)[None, :]
    return noise, u, batch


def _single(cfg, kind, state, rng):
    if cfg.kind != kind:
        raise InvalidInputError(f"{kind}_step called with a {cfg.kind} kernel")
    x = np.asarray(state, dtype=float)[None, :]
    noise, u, batch = _draw(cfg, rng, cfg.dimension)
    g = gradient(cfg, x, batch)
    out, _ = finish(cfg, x, g, noise[None, :], None if u is None else np.array([u]))
    return StepOutcome(out.next_state[0], out.proposal[0], bool(out.accepted[0]),
                       float(out.log_accept_ratio[0]))


def mala_step(cfg: KernelConfig, state, rng: np.random.Generator) -> StepOutcome:
    return _single(cfg, MALA, state, rng)


def ula_step(cfg: KernelConfig, state, rng: np.random.Generator) -> StepOutcome:
    return _single(cfg, ULA, state, rng)


def sgld_step(cfg: KernelConfig, state, rng: np.random.Generator) -> StepOutcome:
    return _single(cfg, SGLD, state, rng)


def step(cfg: KernelConfig, state, rng: np.random.Generator) -> StepOutcome:
    return _single(cfg, cfg.kind, state, rng)
