"""Natural evolution strategies over the generator's latent space.

The search distribution is N(mu, A A^T) with A lower triangular. Updates use
the exponential natural-coordinate form (xNES) with rank-based utilities;
:func:`score_gradient` gives the plain Monte-Carlo search gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import cholesky, expm

from . import flowsim
from .flowsim import FlowScenario, ProductionRecord
from .gan import Generator, generate_from
from .geodata import rescale_unit, threshold, to_permeability

logger = logging.getLogger(__name__)

# fitness functions take a batch of latent vectors (N, d) and return (N,) values
BatchFitness = Callable[[np.ndarray], np.ndarray]


def default_population(d: int) -> int:
    return 4 + int(math.floor(3 * math.log(d)))


def default_eta_a(d: int) -> float:
    return (9 + 3 * math.log(d)) / (5 * d * math.sqrt(d))


@dataclass
class SearchDistribution:
    mean: np.ndarray
    A: np.ndarray
    eta_mu: float = 1.0
    eta_a: float | None = None
    population: int | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).copy()
        self.A = np.asarray(self.A, dtype=np.float64).copy()
        d = self.mean.size
        if self.A.shape != (d, d):
            raise ValueError(f"covariance factor must be {d}x{d}")
        if not np.allclose(self.A, np.tril(self.A)) or np.any(np.diag(self.A) <= 0):
            raise ValueError("A must be lower triangular with positive diagonal")
        if self.eta_a is None:
            self.eta_a = default_eta_a(d)
        if self.population is None:
            self.population = default_population(d)

    @classmethod
    def isotropic(cls, mean, sigma: float = 1.0, **kw) -> "SearchDistribution":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, sigma * np.eye(mean.size), **kw)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def covariance(self) -> np.ndarray:
        return self.A @ self.A.T

    def sample(self, rng: np.random.Generator, n: int | None = None):
        xi = rng.standard_normal((n or self.population, self.dim))
        return xi, self.mean + xi @ self.A.T

    def copy(self) -> "SearchDistribution":
        return SearchDistribution(self.mean, self.A, self.eta_mu, self.eta_a, self.population)


def rank_utilities(f: np.ndarray) -> np.ndarray:
    """xNES fitness shaping: log-rank weights, zero-sum, best sample first."""
    f = np.asarray(f, dtype=np.float64)
    n = f.size
    ranks = np.empty(n, dtype=int)
    # stable sort on -f so ties keep sample order
    ranks[np.argsort(-f, kind="stable")] = np.arange(1, n + 1)
    raw = np.maximum(0.0, math.log(n / 2 + 1) - np.log(ranks))
    return raw / raw.sum() - 1.0 / n


def score_gradient(z: np.ndarray, f: np.ndarray, dist: SearchDistribution,
                   utilities: bool = True, baseline: bool = False):
    """Monte-Carlo search gradient (1/N) sum f_k grad log pi(z_k).

    Returns the gradients with respect to the mean and the covariance.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    f = np.asarray(f, dtype=np.float64)
    n = f.size
    if n < 2:
        raise ValueError("need at least two samples")
    w = rank_utilities(f) if utilities else f.copy()
    if baseline:
        w = w - w.mean()
    cov = dist.covariance
    inv = np.linalg.inv(cov)
    dz = (z - dist.mean) @ inv                  # rows: Sigma^-1 (z - mu)
    g_mu = (w[:, None] * dz).sum(axis=0) / n
    outer = np.einsum("k,ki,kj->ij", w, dz, dz) / n
    g_sigma = 0.5 * (outer - w.sum() / n * inv)
    return g_mu, g_sigma


@dataclass
class Generation:
    z: np.ndarray
    fitness: np.ndarray
    utilities: np.ndarray

    @property
    def best(self) -> int:
        return int(np.argmax(self.fitness))


def natural_update(dist: SearchDistribution, xi: np.ndarray, u: np.ndarray) -> SearchDistribution:
    """Exponential natural-gradient update of (mean, A) for utilities ``u``."""
    d = dist.dim
    g_delta = u @ xi
    g_m = np.einsum("k,ki,kj->ij", u, xi, xi) - u.sum() * np.eye(d)
    mean = dist.mean + dist.eta_mu * dist.A @ g_delta
    # A expm(eta/2 G) expm(eta/2 G)^T A^T, re-factored to lower-triangular form
    cov = dist.A @ expm(dist.eta_a * g_m) @ dist.A.T
    cov = 0.5 * (cov + cov.T)
    A = cholesky(cov, lower=True)
    return SearchDistribution(mean, A, dist.eta_mu, dist.eta_a, dist.population)


def nes_step(dist: SearchDistribution, fitness: BatchFitness, rng: np.random.Generator,
             shaping: Callable[[np.ndarray], np.ndarray] | None = rank_utilities):
    """Sample one generation, evaluate it and return (updated distribution, Generation)."""
    xi, z = dist.sample(rng)
    f = np.asarray(fitness(z), dtype=np.float64)
    u = shaping(f) if shaping is not None else f.copy()
    gen = Generation(z, f, u)
    new = dist
    for attempt in range(2):
        try:
            with np.errstate(over="raise", invalid="raise"):
                new = natural_update(dist if attempt == 0 else _halved(dist), xi, u)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            logger.warning("NES update failed (%s); halving step sizes", exc)
            new = None
            continue
        if np.all(np.isfinite(new.mean)) and np.all(np.isfinite(new.A)):
            break
        new = None
    if new is None:
        raise FloatingPointError("NES update non-finite after step-size halving")
    return new, gen


def _halved(dist: SearchDistribution) -> SearchDistribution:
    return SearchDistribution(dist.mean, dist.A, dist.eta_mu / 2, dist.eta_a / 2, dist.population)


@dataclass
class NesResult:
    best_z: np.ndarray
    best_fitness: float
    trace: list[float] = field(default_factory=list)        # best-so-far per generation
    generation_best: list[float] = field(default_factory=list)
    mean_trace: list[np.ndarray] = field(default_factory=list)
    trace_cov: list[float] = field(default_factory=list)
    initial_best_z: np.ndarray | None = None
    distribution: SearchDistribution | None = None


def optimize(fitness: BatchFitness, dist: SearchDistribution, generations: int, seed=None,
             plateau: tuple[int, float] | None = (50, 1e-4),
             shaping=rank_utilities, target: float | None = None) -> NesResult:
    """Run NES for up to ``generations``, tracking the best sample seen.

    Stops early when the best-so-far fitness improved by a relative amount
    below ``plateau[1]`` over the last ``plateau[0]`` generations, or when
    ``target`` is reached.
    """
    rng = np.random.default_rng(seed)
    res = NesResult(dist.mean.copy(), -math.inf)
    for g in range(generations):
        dist, gen = nes_step(dist, fitness, rng, shaping)
        k = gen.best
        if gen.fitness[k] > res.best_fitness:
            res.best_fitness = float(gen.fitness[k])
            res.best_z = gen.z[k].copy()
        if g == 0:
            res.initial_best_z = res.best_z.copy()
        res.trace.append(res.best_fitness)
        res.generation_best.append(float(gen.fitness[k]))
        res.mean_trace.append(dist.mean.copy())
        res.trace_cov.append(float(np.sum(dist.A ** 2)))
        if target is not None and res.best_fitness >= target:
            break
        if plateau and g >= plateau[0]:
            old = res.trace[g - plateau[0]]
            if math.isfinite(old) and abs(res.best_fitness - old) <= plateau[1] * abs(old):
                break
    res.distribution = dist
    return res


# ---------------------------------------------------------------- inverse problems

@dataclass
class InverseProblem:
    """Latent-space history matching: fitness = -|d - d_obs|^2 / sigma^2 - z.z."""

    generator: Generator
    scenario: FlowScenario
    d_obs: np.ndarray | None = None
    sigma: float = 0.01
    observed_pvi: float = 0.5
    log_perm: tuple[float, float] = (0.0, 5.0)
    use_threshold: bool = True

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        t_obs = self.observed_time
        if t_obs > self.scenario.t_end + 1e-12:
            raise ValueError("observed window extends beyond the simulated window")

    @property
    def observed_time(self) -> float:
        return self.observed_pvi * self.scenario.porosity / self.scenario.injection_rate()

    @property
    def observation_scenario(self) -> FlowScenario:
        sc = self.scenario
        n = max(1, int(round(sc.n_report * self.observed_time / sc.t_end)))
        return replace(sc, t_end=self.observed_time, snapshots=(), n_report=n)

    def permeability(self, raster: np.ndarray) -> np.ndarray:
        facies = rescale_unit(raster)
        if self.use_threshold:
            facies = threshold(facies)
        return to_permeability(facies, *self.log_perm)

    def simulate(self, z: np.ndarray, full: bool = False) -> ProductionRecord:
        raster = generate_from(self.generator, z)
        sc = self.scenario if full else self.observation_scenario
        return flowsim.simulate(self.permeability(raster), sc)

    def observe(self, record: ProductionRecord) -> np.ndarray:
        return record.window(self.observed_time).watercut.ravel()

    def forward(self, z: np.ndarray) -> np.ndarray:
        return self.observe(self.simulate(z))

    def misfit(self, z: np.ndarray) -> float:
        d = self.forward(z)
        return float(np.sum((d - self.d_obs) ** 2))

    def fitness(self, z: np.ndarray) -> float:
        return fitness(z, self)

    def batch_fitness(self, zs: np.ndarray) -> np.ndarray:
        rasters = generate_from(self.generator, zs)
        out = np.empty(len(zs))
        sc = self.observation_scenario
        for k, (z, raster) in enumerate(zip(zs, rasters)):
            try:
                d = self.observe(flowsim.simulate(self.permeability(raster), sc))
            except (flowsim.ConvergenceError, flowsim.SaturationBreach, ValueError) as exc:
                logger.warning("forward simulation failed: %s", exc)
                out[k] = -math.inf
                continue
            out[k] = -np.sum((d - self.d_obs) ** 2) / self.sigma ** 2 - z @ z
        return out


def fitness(z: np.ndarray, problem: InverseProblem) -> float:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent vector must be finite")
    return float(problem.batch_fitness(z[None])[0])


@dataclass
class MatchResult:
    seed: object
    z: np.ndarray
    fitness: float
    trace: list[float]
    misfit_initial: float
    misfit_final: float
    record: ProductionRecord | None = None
    raster: np.ndarray | None = None

    @property
    def reduction(self) -> float:
        if self.misfit_initial == 0:
            return 1.0 if self.misfit_final == 0 else 0.0
        return 1.0 - self.misfit_final / self.misfit_initial


def _initial_distribution(d: int, seed, population: int | None = None) -> SearchDistribution:
    rng = np.random.default_rng(seed)
    return SearchDistribution.isotropic(rng.standard_normal(d), 1.0, population=population)


def history_match(problem: InverseProblem, n_restarts: int = 3, seeds=None, generations: int = 300,
                  plateau=(50, 1e-4), population: int | None = None) -> list[MatchResult]:
    """Independent NES runs, one per seed; each starts from a prior draw of the mean."""
    if problem.d_obs is None:
        raise ValueError("problem has no observed data")
    seeds = list(seeds) if seeds is not None else list(range(n_restarts))
    out = []
    for seed in seeds[:n_restarts]:
        dist = _initial_distribution(problem.generator.n_z, seed, population)
        res = optimize(problem.batch_fitness, dist, generations, seed=(seed, 1), plateau=plateau)
        rec = problem.simulate(res.best_z, full=True)
        out.append(MatchResult(seed, res.best_z, res.best_fitness, res.trace,
                               problem.misfit(res.initial_best_z), problem.misfit(res.best_z),
                               rec, generate_from(problem.generator, res.best_z)))
    return out


def image_fitness(generator: Generator, target: np.ndarray) -> BatchFitness:
    target = np.asarray(target, dtype=np.float64)

    def f(zs: np.ndarray) -> np.ndarray:
        imgs = generate_from(generator, zs)
        return -((imgs - target) ** 2).sum(axis=(1, 2)) - (zs ** 2).sum(axis=1)

    return f


def image_match(target: np.ndarray, generator: Generator, n_restarts: int = 3, seeds=None,
                generations: int = 500, plateau=(50, 1e-4), population: int | None = None) -> list[MatchResult]:
    """Fit latent vectors whose generated image matches ``target`` pixelwise."""
    f = image_fitness(generator, target)
    seeds = list(seeds) if seeds is not None else list(range(n_restarts))
    out = []
    for seed in seeds[:n_restarts]:
        dist = _initial_distribution(generator.n_z, seed, population)
        res = optimize(f, dist, generations, seed=(seed, 1), plateau=plateau)
        img = generate_from(generator, res.best_z)
        err0 = float(((generate_from(generator, res.initial_best_z) - target) ** 2).sum())
        err = float(((img - target) ** 2).sum())
        out.append(MatchResult(seed, res.best_z, res.best_fitness, res.trace, err0, err, None, img))
    return out
