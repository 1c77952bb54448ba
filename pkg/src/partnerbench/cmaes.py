"""Covariance matrix adaptation evolution strategy, maximization convention.

Hand-rolled ask/tell optimizer with rank-weighted recombination, the two
evolution paths, cumulative step-size adaptation, and rank-one plus rank-mu
covariance updates, using the standard strategy-parameter settings.

Genomes double as flat policy vectors for the partner-choice environment:
coordinate 0 decodes to a deterministic investment, the next 17 form a
softmax choice network, and the final 16 are deliberately inert padding
that enlarges the search space without affecting behavior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import EnvConfig, EpisodeState, sample_partner, step
from .nets import PRESETS

__all__ = [
    "CmaesConfig",
    "CmaesState",
    "CovarianceFactorizationError",
    "default_population_size",
    "init_state",
    "ask",
    "tell",
    "decode_investment",
    "choice_accept_probability",
    "evaluate_genome",
    "evaluate_genome_with_steps",
    "generation_best_reeval",
]

_INVEST_LOW = 0.0
_INVEST_HIGH = 15.0


class CovarianceFactorizationError(RuntimeError):
    """Covariance eigendecomposition produced a non-usable factor."""


def default_population_size(dimension: int) -> int:
    """Canonical default population size 4 + floor(3 ln N)."""
    return 4 + int(3.0 * math.log(dimension))


@dataclass(frozen=True)
class CmaesConfig:
    dimension: int = 34
    population_size: int | None = None
    sigma_init: float = 1.0
    episodes_per_eval: int = 1

    def __post_init__(self) -> None:
        if self.dimension < 2:
            raise ValueError(f"dimension must be >= 2, got {self.dimension}")
        if self.population_size is None:
            object.__setattr__(
                self, "population_size", default_population_size(self.dimension)
            )
        if self.population_size < 4:
            raise ValueError(
                f"population_size must be >= 4, got {self.population_size}"
            )
        if not self.sigma_init > 0.0:
            raise ValueError(f"sigma_init must be positive, got {self.sigma_init}")
        if self.episodes_per_eval < 1:
            raise ValueError("episodes_per_eval must be >= 1")


@dataclass
class CmaesState:
    """Search distribution plus adaptation constants for one strategy run.

    The eigendecomposition of the covariance is refreshed after every
    ``tell`` and cached here so ``ask`` only does matrix multiplies.
    """

    dim: int
    lam: int
    mu: int
    weights: np.ndarray
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0
    eig_vectors: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    eig_sqrt: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    inv_sqrt_cov: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]


def init_state(cfg: CmaesConfig) -> CmaesState:
    """Fresh strategy state: zero mean, identity covariance, zero paths."""
    n = cfg.dimension
    lam = cfg.population_size
    mu = lam // 2
    raw = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1, dtype=np.float64))
    weights = raw / raw.sum()
    mu_eff = 1.0 / float((weights * weights).sum())

    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = (
        1.0
        + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0)
        + c_sigma
    )
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(
        1.0 - c_1,
        2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff),
    )
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))

    state = CmaesState(
        dim=n,
        lam=lam,
        mu=mu,
        weights=weights,
        mu_eff=mu_eff,
        c_sigma=c_sigma,
        d_sigma=d_sigma,
        c_c=c_c,
        c_1=c_1,
        c_mu=c_mu,
        chi_n=chi_n,
        mean=np.zeros(n),
        sigma=cfg.sigma_init,
        cov=np.eye(n),
        p_sigma=np.zeros(n),
        p_c=np.zeros(n),
    )
    _refresh_eigen(state)
    return state


# Eigenvalues are floored at largest/_COND_LIMIT: after thousands of
# multiplicative shrinks the smallest one can land within rounding noise
# of zero, and the sampling factor must stay full rank.
_COND_LIMIT = 1e12
_NEGATIVITY_TOL = 1e-10


def _refresh_eigen(state: CmaesState) -> None:
    """Recompute B, sqrt(D) and C^(-1/2) from the current covariance.

    Tiny negative eigenvalues (rounding noise) are repaired by flooring;
    structurally indefinite matrices raise.
    """
    state.cov = (state.cov + state.cov.T) / 2.0
    eig_values, eig_vectors = np.linalg.eigh(state.cov)
    low, high = float(eig_values[0]), float(eig_values[-1])
    if not np.all(np.isfinite(eig_values)) or high <= 0.0 or (
        low <= -_NEGATIVITY_TOL * high
    ):
        cond = high / low if low > 0.0 else math.inf
        raise CovarianceFactorizationError(
            f"covariance not positive definite: eigenvalue range "
            f"[{low:.3e}, {high:.3e}], condition number {cond:.3e}"
        )
    floor = high / _COND_LIMIT
    if low < floor:
        eig_values = np.maximum(eig_values, floor)
        repaired = (eig_vectors * eig_values) @ eig_vectors.T
        state.cov = (repaired + repaired.T) / 2.0
    state.eig_vectors = eig_vectors
    state.eig_sqrt = np.sqrt(eig_values)
    state.inv_sqrt_cov = (eig_vectors / state.eig_sqrt) @ eig_vectors.T


def ask(state: CmaesState, rng: np.random.Generator) -> np.ndarray:
    """Sample lambda genomes, one per row, from the current distribution."""
    z = rng.standard_normal((state.lam, state.dim))
    return state.mean + state.sigma * (z * state.eig_sqrt) @ state.eig_vectors.T


def tell(
    state: CmaesState, genomes: np.ndarray, fitnesses: np.ndarray
) -> CmaesState:
    """Rank the generation and update mean, paths, covariance and step size.

    Fitnesses are maximized. Ties rank by sample index so the update is
    deterministic. The state is modified in place and returned.
    """
    genomes = np.asarray(genomes, dtype=np.float64)
    fitnesses = np.asarray(fitnesses, dtype=np.float64)
    if genomes.shape != (state.lam, state.dim):
        raise ValueError(
            f"expected genomes of shape {(state.lam, state.dim)}, "
            f"got {genomes.shape}"
        )
    if fitnesses.shape != (state.lam,):
        raise ValueError(f"expected {state.lam} fitnesses, got {fitnesses.shape}")
    if not np.all(np.isfinite(fitnesses)):
        raise ValueError("non-finite fitness in generation")

    order = np.argsort(-fitnesses, kind="stable")
    selected = genomes[order[: state.mu]]
    y = (selected - state.mean) / state.sigma
    y_w = state.weights @ y
    state.mean = state.mean + state.sigma * y_w

    cs, cc = state.c_sigma, state.c_c
    state.p_sigma = (1.0 - cs) * state.p_sigma + math.sqrt(
        cs * (2.0 - cs) * state.mu_eff
    ) * (state.inv_sqrt_cov @ y_w)
    p_sigma_norm = float(np.linalg.norm(state.p_sigma))

    iterations = state.generation + 1
    h_sigma = p_sigma_norm / math.sqrt(
        1.0 - (1.0 - cs) ** (2 * iterations)
    ) < (1.4 + 2.0 / (state.dim + 1.0)) * state.chi_n
    state.p_c = (1.0 - cc) * state.p_c + (
        math.sqrt(cc * (2.0 - cc) * state.mu_eff) * y_w if h_sigma else 0.0
    )

    delta_h = (0.0 if h_sigma else 1.0) * cc * (2.0 - cc)
    rank_mu = (y * state.weights[:, None]).T @ y
    state.cov = (
        (1.0 - state.c_1 - state.c_mu) * state.cov
        + state.c_1 * (np.outer(state.p_c, state.p_c) + delta_h * state.cov)
        + state.c_mu * rank_mu
    )
    state.sigma *= math.exp(
        (cs / state.d_sigma) * (p_sigma_norm / state.chi_n - 1.0)
    )
    state.generation += 1
    _refresh_eigen(state)
    return state


def decode_investment(genome: np.ndarray) -> float:
    """Deterministic investment: coordinate 0 clamped into [0, 15]."""
    return float(min(max(float(genome[0]), _INVEST_LOW), _INVEST_HIGH))


def _scalar_choice_prob(genome: np.ndarray):
    """Closure computing the accept probability of the decoded choice net.

    Scalar Python arithmetic on unpacked weights; the 2-3-2 network is far
    too small for numpy calls to pay off inside the episode loop.
    """
    off, _ = PRESETS["CMAES"].offset("choice")
    w = [float(v) for v in genome[off : off + 17]]
    (w00, w01, w10, w11, w20, w21, b0, b1, b2,
     v00, v01, v02, v10, v11, v12, c0, c1) = w

    def prob_accept(x: float, y: float) -> float:
        h0 = math.tanh(w00 * x + w01 * y + b0)
        h1 = math.tanh(w10 * x + w11 * y + b1)
        h2 = math.tanh(w20 * x + w21 * y + b2)
        a0 = v00 * h0 + v01 * h1 + v02 * h2 + c0
        a1 = v10 * h0 + v11 * h1 + v12 * h2 + c1
        d = a0 - a1
        if d >= 0.0:
            return 1.0 / (1.0 + math.exp(-d))
        e = math.exp(d)
        return e / (1.0 + e)

    return prob_accept


def choice_accept_probability(genome: np.ndarray, x: float, y: float) -> float:
    """Probability that the decoded policy accepts a partner investing y."""
    return _scalar_choice_prob(genome)(x, y)


def evaluate_genome_with_steps(
    genome: np.ndarray, env_cfg: EnvConfig, rng: np.random.Generator
) -> tuple[float, int]:
    """One fitness episode, returning (return, env steps consumed).

    Accept probabilities are cached per partner grid value; an episode
    presents at most 31 distinct observations.
    """
    investment = decode_investment(genome)
    prob_accept = _scalar_choice_prob(genome)
    cache: list[float] = [math.nan] * 31
    episode = EpisodeState(investment, env_cfg)
    outcome = None
    while not episode.done:
        partner = sample_partner(env_cfg, rng)
        idx = int(partner.investment * 2.0)
        p_acc = cache[idx]
        if p_acc != p_acc:
            p_acc = prob_accept(investment, partner.investment)
            cache[idx] = p_acc
        outcome = step(episode, env_cfg, rng.random() < p_acc, partner)
    assert outcome is not None
    return outcome.reward, episode.t


def evaluate_genome(
    genome: np.ndarray, env_cfg: EnvConfig, rng: np.random.Generator
) -> float:
    """Fitness of one genome: the return of a single episode."""
    return evaluate_genome_with_steps(genome, env_cfg, rng)[0]


def generation_best_reeval(
    genomes: np.ndarray,
    fitnesses: np.ndarray,
    env_cfg: EnvConfig,
    rng: np.random.Generator,
    episodes: int = 10,
) -> tuple[int, float]:
    """Replay the generation's best genome and average its return.

    The best genome is the highest single-episode fitness, first index on
    ties. Returns (best index, mean return over the replay episodes).
    """
    fitnesses = np.asarray(fitnesses, dtype=np.float64)
    best = int(np.argmax(fitnesses))
    total = 0.0
    for _ in range(episodes):
        total += evaluate_genome(genomes[best], env_cfg, rng)
    return best, total / episodes
