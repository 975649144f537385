"""Coupled kernels on state pairs and the coupled-chain runner.

A coupling is expressed by which random draws each side reads. Draws come in
three groups (a, b, c), each holding a noise vector, an acceptance uniform and
minibatch ranking keys per step:

    crn          X reads a, Y reads a
    reflection   X reads a, Y reads a with its noise reflected
    independent  X reads a, Y reads b
    composed     X reads a; the glue chain Z (K1 from y) reads a, reflected a,
                 or b per gamma1; Y reads whatever Z read (gamma_delta = crn)
                 or c (gamma_delta = independent)

Because X always reads group a exactly as a solo chain would, every coupling
leaves the left marginal untouched by construction; the right marginal holds
because each group is an independent draw of the kernel's randomness.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels as K
from .errors import ChainStepError, InvalidInputError, NumericalFailureError
from .kernels import KernelConfig
from .metrics import Metric, TrajectoryBatch, distance
from .streams import ChainStreams, rank_batch

CRN, REFLECTION, INDEPENDENT, COMPOSED = "crn", "reflection", "independent", "composed"
COUPLINGS = (CRN, REFLECTION, INDEPENDENT, COMPOSED)
REFLECTION_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class CoupledKernel:
    left: KernelConfig
    right: KernelConfig
    coupling: str = CRN
    gamma1: str | None = None
    gamma_delta: str | None = None
    switch_threshold: float | None = None

    def __post_init__(self):
        if self.coupling not in COUPLINGS:
            raise InvalidInputError(f"unknown coupling {self.coupling!r}")
        if self.left.dimension != self.right.dimension:
            raise InvalidInputError("kernels act on spaces of different dimension")
        if self.coupling == REFLECTION and self.left.step_size != self.right.step_size:
            raise InvalidInputError("reflection coupling needs a shared step size")
        if self.coupling == COMPOSED:
            g1 = self.gamma1 or CRN
            gd = self.gamma_delta or CRN
            if gd == "identical":
                gd = CRN
            if g1 not in (CRN, REFLECTION, INDEPENDENT) or gd not in (CRN, INDEPENDENT):
                raise InvalidInputError(f"unsupported composition gamma1={g1}, gamma_delta={gd}")
            object.__setattr__(self, "gamma1", g1)
            object.__setattr__(self, "gamma_delta", gd)
        elif self.gamma1 is not None or self.gamma_delta is not None:
            raise InvalidInputError("gamma1/gamma_delta apply only to the composed coupling")

    @property
    def dimension(self) -> int:
        return self.left.dimension

    @property
    def name(self) -> str:
        if self.coupling == COMPOSED:
            return f"composed({self.gamma1},{self.gamma_delta})"
        return self.coupling

    def describe(self) -> dict:
        return {
            "coupling": self.name,
            "left": f"{self.left.label}:{self.left.target.name}:step={self.left.step_size:.6g}",
            "right": f"{self.right.label}:{self.right.target.name}:step={self.right.step_size:.6g}",
        }


def crn(left, right) -> CoupledKernel:
    return CoupledKernel(left, right, CRN)


def reflection(left, right, switch_threshold=None) -> CoupledKernel:
    return CoupledKernel(left, right, REFLECTION, switch_threshold=switch_threshold)


def independent(left, right) -> CoupledKernel:
    return CoupledKernel(left, right, INDEPENDENT)


def composed(left, right, gamma1=CRN, gamma_delta=CRN) -> CoupledKernel:
    return CoupledKernel(left, right, COMPOSED, gamma1, gamma_delta)


# -- one vectorized step ----------------------------------------------------


@dataclass
class Draws:
    """Randomness for one step of k chains: per group, noise (k,d), uniforms (k,), keys (k,n)."""

    noise: dict
    unif: dict = field(default_factory=dict)
    keys: dict = field(default_factory=dict)


def _groups(ck: CoupledKernel):
    """Draw groups read by each role (x, z, y); z is None unless composed."""
    if ck.coupling in (CRN, REFLECTION):
        return "a", None, "a"
    if ck.coupling == INDEPENDENT:
        return "a", None, "b"
    gz = "b" if ck.gamma1 == INDEPENDENT else "a"
    gy = gz if ck.gamma_delta == CRN else "c"
    return "a", gz, gy


def _needs(ck: CoupledKernel):
    """Which draws each group must supply: {group: (mh?, batch size n or 0)}."""
    gx, gz, gy = _groups(ck)
    roles = [(gx, ck.left), (gy, ck.right)]
    if gz is not None:
        roles.append((gz, ck.left))
    need = {}
    for g, cfg in roles:
        mh, n = need.get(g, (False, 0))
        if cfg.kind == K.SGLD:
            n = cfg.target.observations.n
        need[g] = (mh or cfg.is_mh, n)
    return need


def _prep(cfg: KernelConfig, x, keys, cache):
    if cache is not None:
        return cache[1], cache[0]
    batch = None
    if cfg.kind == K.SGLD and keys is not None:
        batch = rank_batch(keys, cfg.batch_size)
    return K.gradient(cfg, x, batch), None


def _reflect(noise, mu_x, mu_y, mask=None):
    diff = mu_x - mu_y
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    ok = norm > REFLECTION_EPS
    if mask is not None:
        ok &= mask[..., None]
    e = np.where(ok, diff / np.where(ok, norm, 1.0), 0.0)
    return noise - 2.0 * np.sum(e * noise, axis=-1, keepdims=True) * e


def advance_pair(ck: CoupledKernel, x, y, draws: Draws, caches=(None, None)):
    """One coupled step for stacked pairs (k, d).

    Returns (x_next, y_next, accepted_x, accepted_y, z_next, caches), where
    z_next is the glue state for the composed coupling and None otherwise.
    """
    gx, gz, gy = _groups(ck)
    L, R = ck.left, ck.right
    gradx, logpx = _prep(L, x, draws.keys.get(gx), caches[0])
    grady, logpy = _prep(R, y, draws.keys.get(gy), caches[1])
    eps_x = draws.noise[gx]
    z_next = None

    if ck.coupling == REFLECTION:
        mask = None
        if ck.switch_threshold is not None:
            mask = np.linalg.norm(x - y, axis=-1) >= ck.switch_threshold
        eps_y = _reflect(eps_x, K.proposal_mean(L, x, gradx), K.proposal_mean(R, y, grady), mask)
    elif ck.coupling == COMPOSED:
        eps_z = draws.noise[gz]
        gradz, _ = _prep(L, y, draws.keys.get(gz), None)
        if ck.gamma1 == REFLECTION:
            eps_z = _reflect(eps_x, K.proposal_mean(L, x, gradx), K.proposal_mean(L, y, gradz))
        zout, _ = K.finish(L, y, gradz, eps_z, draws.unif.get(gz))
        z_next = zout.next_state
        eps_y = eps_z if ck.gamma_delta == CRN else draws.noise[gy]
    else:
        eps_y = draws.noise[gy]

    xout, cx = K.finish(L, x, gradx, eps_x, draws.unif.get(gx), logpx)
    yout, cy = K.finish(R, y, grady, eps_y, draws.unif.get(gy), logpy)
    return xout.next_state, yout.next_state, xout.accepted, yout.accepted, z_next, (cx, cy)


# -- single-pair API ----------------------------------------------------------


def _single_draws(ck: CoupledKernel, rng: np.random.Generator, k: int = 1) -> Draws:
    d = ck.dimension
    children = dict(zip("abc", rng.spawn(3)))
    draws = Draws({})
    for g, (mh, n) in sorted(_needs(ck).items()):
        c = children[g]
        draws.noise[g] = c.standard_normal((k, d))
        if mh:
            draws.unif[g] = c.random(k)
        if n:
            draws.keys[g] = c.random((k, n))
    return draws


def step_pairs(ck: CoupledKernel, x, y, rng: np.random.Generator):
    """One coupled step for many independent pairs (k, d); returns (x', y')."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape != y.shape or x.shape[1] != ck.dimension:
        raise InvalidInputError("pair states must both be (k, d) with the kernel dimension")
    xn, yn, *_ = advance_pair(ck, x, y, _single_draws(ck, rng, x.shape[0]))
    return xn, yn


def coupled_step(ck: CoupledKernel, pair, rng: np.random.Generator):
    """Advance one pair (x, y) of shape-(d,) states.

    Returns ((x', y'), (accepted_x, accepted_y)) and, for the composed
    coupling, the glue state z' as a third element.
    """
    x, y = (np.asarray(s, dtype=float)[None, :] for s in pair)
    if x.shape != y.shape or x.shape[1] != ck.dimension:
        raise InvalidInputError("pair states must both have the kernel dimension")
    xn, yn, ax, ay, zn, _ = advance_pair(ck, x, y, _single_draws(ck, rng))
    out = ((xn[0], yn[0]), (bool(ax[0]), bool(ay[0])))
    if zn is not None:
        return out + (zn[0],)
    return out


def crn_mala_mala_step(P, Q, sigma_p, sigma_q, pair, rng):
    return coupled_step(crn(K.mala(P, sigma_p), K.mala(Q, sigma_q)), pair, rng)


def crn_mala_ula_step(P, Q, sigma_p, sigma_q, pair, rng):
    return coupled_step(crn(K.mala(P, sigma_p), K.ula(Q, sigma_q)), pair, rng)


def reflection_coupling_step(P, Q, sigma, pair, rng, switch_threshold=None):
    return coupled_step(reflection(K.mala(P, sigma), K.mala(Q, sigma), switch_threshold), pair, rng)


def independent_coupling_step(left: KernelConfig, right: KernelConfig, pair, rng):
    return coupled_step(independent(left, right), pair, rng)


def composed_step(left: KernelConfig, right: KernelConfig, pair, rng, gamma1=CRN, gamma_delta=CRN):
    """Glued step: (X', Z') from gamma1 at (x, y), (Z', Y') from gamma_delta at y."""
    return coupled_step(composed(left, right, gamma1, gamma_delta), pair, rng)


# -- initial laws -------------------------------------------------------------

Sampler = Callable[[list], np.ndarray]


def gaussian_sampler(analytic) -> Sampler:
    """Draws from a GaussianAnalytic, one row per generator."""
    chol = np.linalg.cholesky(analytic.cov)

    def sample(gens):
        # row by row: a stacked matmul may round differently from a single row
        return np.stack([analytic.mean + chol @ g.standard_normal(analytic.dimension) for g in gens])

    return sample


def point_sampler(x0) -> Sampler:
    x0 = np.asarray(x0, dtype=float)
    return lambda gens: np.tile(x0, (len(gens), 1))


def prerun_sampler(cfg: KernelConfig, start: Sampler, steps: int, chunk: int = 1024) -> Sampler:
    """Final states of marginal chains run `steps` times from `start`.

    Results are memoized on the generators' seed identity, so several runs
    sharing one InitCoupling pay for the pre-run once.
    """
    memo = {}

    def ident(g):
        ss = g.bit_generator.seed_seq
        return ss.entropy, ss.spawn_key, ss.n_children_spawned, str(g.bit_generator.state)

    def sample(gens):
        key = tuple(ident(g) for g in gens)
        if key not in memo:
            memo[key] = _prerun(gens)
        return memo[key].copy()

    def _prerun(gens):
        x = start(gens)
        subs = [g.spawn(2) for g in gens]
        cache = None
        done = 0
        while done < steps:
            m = min(chunk, steps - done)
            noise = np.stack([s[0].standard_normal((m, cfg.dimension)) for s in subs], axis=1)
            unif = np.stack([s[1].random(m) for s in subs], axis=1) if cfg.is_mh else None
            for t in range(m):
                g, lp = _prep(cfg, x, None, cache)
                out, cache = K.finish(cfg, x, g, noise[t], None if unif is None else unif[t], lp)
                x = out.next_state
            done += m
        return x

    return sample


INIT_MODES = ("independent", "crn", "deterministic-point")


@dataclass(frozen=True, eq=False)
class InitCoupling:
    left: Sampler | None = None
    right: Sampler | None = None
    mode: str = "independent"
    x0: np.ndarray | None = None
    y0: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in INIT_MODES:
            raise InvalidInputError(f"unknown init mode {self.mode!r}")
        if self.mode == "deterministic-point":
            if self.x0 is None or self.y0 is None:
                raise InvalidInputError("deterministic-point init stores explicit x0 and y0")
            object.__setattr__(self, "left", point_sampler(self.x0))
            object.__setattr__(self, "right", point_sampler(self.y0))
        elif self.left is None or self.right is None:
            raise InvalidInputError("initial samplers required")

    @classmethod
    def points(cls, x0, y0):
        return cls(mode="deterministic-point", x0=np.asarray(x0, float), y0=np.asarray(y0, float))

    def sample(self, master_seed: int, chains) -> tuple[np.ndarray, np.ndarray]:
        a = ChainStreams(master_seed, chains)
        x = self.left(a.gens("init_a"))
        if self.mode == "crn":
            y = self.right(ChainStreams(master_seed, chains).gens("init_a"))
        else:
            y = self.right(a.gens("init_b"))
        return np.asarray(x, float), np.asarray(y, float)


# -- runner -------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Chain count, horizon and seed; unlike EstimatorConfig allows horizon 0."""

    num_chains: int
    horizon: int
    master_seed: int = 0

    def __post_init__(self):
        if self.num_chains < 1 or self.horizon < 0:
            raise InvalidInputError("need num_chains >= 1 and horizon >= 0")


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("WASSER_THREADS", "1")))
    except ValueError:
        return 1


def _run_group(ck, init, cfg, chains, metric, store_states, chunk):
    k, T, d = len(chains), cfg.horizon, ck.dimension
    streams = ChainStreams(cfg.master_seed, chains)
    x, y = init.sample(cfg.master_seed, chains)
    if x.shape != (k, d) or y.shape != (k, d):
        raise InvalidInputError(f"initial samplers must return ({k}, {d}) arrays")
    dist = np.empty((k, T + 1))
    dist[:, 0] = distance(metric, x, y)
    xs = ys = None
    if store_states:
        xs = np.empty((k, T + 1, d))
        ys = np.empty((k, T + 1, d))
        xs[:, 0], ys[:, 0] = x, y
    need = _needs(ck)
    nmax = max([n for _, n in need.values()] + [1])
    chunk = max(1, min(chunk, int(4e6 // (k * max(d, nmax)))))
    caches = (None, None)
    t = 0
    while t < T:
        m = min(chunk, T - t)
        noise = {g: streams.normals(f"noise_{g}", m, d) for g in need}
        unif = {g: streams.uniforms(f"unif_{g}", m) for g, (mh, _) in need.items() if mh}
        keys = {g: streams.batch_uniforms(f"batch_{g}", m, n) for g, (_, n) in need.items() if n}
        for j in range(m):
            draws = Draws({g: v[j] for g, v in noise.items()},
                          {g: v[j] for g, v in unif.items()},
                          {g: v[j] for g, v in keys.items()})
            try:
                x, y, _, _, _, caches = advance_pair(ck, x, y, draws, caches)
            except NumericalFailureError as exc:
                bad = ~(np.isfinite(x).all(axis=1) & np.isfinite(y).all(axis=1))
                raise ChainStepError(chains[int(np.argmax(bad))], t + j + 1, exc) from exc
            dist[:, t + j + 1] = distance(metric, x, y)
            if store_states:
                xs[:, t + j + 1], ys[:, t + j + 1] = x, y
        t += m
    return dist, xs, ys


def run_coupled_chains(
    coupled: CoupledKernel,
    init: InitCoupling,
    cfg,
    metric: Metric = Metric(),
    store_states: bool = True,
    workers: int | None = None,
    chunk: int = 256,
) -> TrajectoryBatch:
    """Simulate `cfg.num_chains` independent coupled chains for `cfg.horizon` steps.

    `cfg` is an EstimatorConfig or RunConfig. Chain i draws only from streams
    keyed on (master_seed, i), so the batch is identical for any worker count.
    """
    I = cfg.num_chains
    workers = min(workers or default_workers(), I)
    groups = [list(g) for g in np.array_split(np.arange(I), workers)]
    run = lambda g: _run_group(coupled, init, cfg, g, metric, store_states, chunk)
    if workers == 1:
        parts = [run(groups[0])]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, groups))
    dist = np.concatenate([p[0] for p in parts])
    xs = ys = None
    if store_states:
        xs = np.concatenate([p[1] for p in parts])
        ys = np.concatenate([p[2] for p in parts])
    meta = {**coupled.describe(), "init": init.mode, "seed": int(cfg.master_seed),
            "num_chains": I, "horizon": int(cfg.horizon)}
    return TrajectoryBatch(coupled.dimension, dist, xs, ys, metric, meta)


def run_marginal_chain(cfg: KernelConfig, x0, steps: int, master_seed: int = 0, chains=(0,)):
    """Solo chains from x0 reading the draws the left side of any coupling reads.

    Returns states of shape (len(chains), steps + 1, d).
    """
    chains = list(chains)
    streams = ChainStreams(master_seed, chains)
    x = np.tile(np.asarray(x0, dtype=float), (len(chains), 1))
    out = np.empty((len(chains), steps + 1, cfg.dimension))
    out[:, 0] = x
    n = cfg.target.observations.n if cfg.kind == K.SGLD else 0
    cache = None
    t = 0
    while t < steps:
        m = min(256, steps - t)
        noise = streams.normals("noise_a", m, cfg.dimension)
        unif = streams.uniforms("unif_a", m) if cfg.is_mh else None
        keys = streams.batch_uniforms("batch_a", m, n) if n else None
        for j in range(m):
            g, lp = _prep(cfg, x, None if keys is None else keys[j], cache)
            res, cache = K.finish(cfg, x, g, noise[j], None if unif is None else unif[j], lp)
            x = res.next_state
            out[:, t + j + 1] = x
        t += m
    return out
