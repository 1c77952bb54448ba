"""Partner-choice investment game with a tunable rate of significant events.

A focal agent commits to an investment level for the whole episode. Each
time step it is presented with a partner: with probability ``p`` a
cooperative partner drawn uniformly from a fixed grid of investment
levels, otherwise a non-cooperative partner who invests nothing and never
accepts. Both sides then accept or refuse the pairing. The episode ends
on the first mutual acceptance, paying the focal agent the game payoff as
its only reward, or at the horizon with reward zero. The horizon scales
as 1/p so the expected number of cooperative meetings per episode stays
constant as p varies.

The deadline is strict: a mutual acceptance on the very last step of the
horizon does not pay. ``expected_return_oracle`` gives the closed-form
expected return of a fixed threshold policy and is the reference every
Monte-Carlo result is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "EnvConfig",
    "Partner",
    "EpisodeState",
    "StepOutcome",
    "payoff",
    "partner_investment",
    "partner_accepts",
    "sample_partner",
    "step",
    "expected_return_oracle",
]


@dataclass(frozen=True)
class Partner:
    """One partner offer: an investment level and whether it can accept."""

    investment: float
    cooperative: bool


@dataclass(frozen=True)
class EnvConfig:
    """Static parameters of the game.

    ``p`` is the per-step probability of meeting a cooperative partner.
    ``base_meetings`` fixes the expected number of cooperative meetings
    per episode, so the horizon is ``base_meetings / p`` steps.
    """

    p: float = 1.0
    a: float = 5.0
    b: float = 5.0
    invest_min: float = 0.0
    invest_max: float = 15.0
    n_partners: int = 31
    base_meetings: int = 100
    # Cached partner instances so per-step sampling allocates nothing.
    _partners: tuple[Partner, ...] = field(
        init=False, repr=False, compare=False, default=()
    )
    _noncoop: Partner = field(
        init=False, repr=False, compare=False, default=Partner(0.0, False)
    )

    def __post_init__(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if self.invest_min >= self.invest_max:
            raise ValueError("invest_min must be below invest_max")
        if self.n_partners < 2:
            raise ValueError("need at least two partner levels")
        if self.base_meetings < 2:
            raise ValueError("base_meetings must be at least 2")
        spacing = (self.invest_max - self.invest_min) / (self.n_partners - 1)
        table = tuple(
            Partner(self.invest_min + i * spacing, True)
            for i in range(self.n_partners)
        )
        object.__setattr__(self, "_partners", table)

    @property
    def max_steps(self) -> int:
        """Episode horizon in steps; exact for p in {1.0, 0.5, 0.2, 0.1}."""
        return round(self.base_meetings / self.p)

    @property
    def partner_grid(self) -> tuple[float, ...]:
        return tuple(q.investment for q in self._partners)


class EpisodeState:
    """Mutable per-episode state: step counter, commitment, outcome."""

    __slots__ = ("t", "focal_investment", "done", "final_reward")

    def __init__(self, focal_investment: float, cfg: EnvConfig) -> None:
        if not cfg.invest_min <= focal_investment <= cfg.invest_max:
            raise ValueError(
                f"focal investment {focal_investment} outside "
                f"[{cfg.invest_min}, {cfg.invest_max}]"
            )
        self.t = 0
        self.focal_investment = focal_investment
        self.done = False
        self.final_reward = 0.0


class StepOutcome(NamedTuple):
    observation: tuple[float, float]
    reward: float
    done: bool
    partner_was_cooperative: bool


def payoff(x_focal: float, x_partner: float, cfg: EnvConfig) -> float:
    """Game payoff to the focal agent: a*x + b*x_partner - x^2/2.

    Maximised over x at x = a for any fixed partner; the mutual-best
    outcome on the default grid is payoff(a+b, a+b) = 50.
    """
    if not cfg.invest_min <= x_focal <= cfg.invest_max:
        raise ValueError(f"focal investment {x_focal} out of range")
    if not cfg.invest_min <= x_partner <= cfg.invest_max:
        raise ValueError(f"partner investment {x_partner} out of range")
    return cfg.a * x_focal + cfg.b * x_partner - 0.5 * x_focal * x_focal


def partner_investment(i: int, cfg: EnvConfig) -> float:
    """Investment of cooperative partner ``i`` (1-based): (i-1) * spacing."""
    if not 1 <= i <= cfg.n_partners:
        raise ValueError(f"partner index {i} outside 1..{cfg.n_partners}")
    return cfg._partners[i - 1].investment


def partner_accepts(partner: Partner, x_focal: float) -> bool:
    """Cooperative partners accept anyone investing at least their own level."""
    return partner.cooperative and x_focal >= partner.investment


def sample_partner(cfg: EnvConfig, rng: np.random.Generator) -> Partner:
    """Draw the partner for one step: cooperative with probability p."""
    if rng.random() < cfg.p:
        return cfg._partners[int(rng.integers(cfg.n_partners))]
    return cfg._noncoop


def step(
    state: EpisodeState,
    cfg: EnvConfig,
    focal_accepts: bool,
    partner: Partner,
) -> StepOutcome:
    """Advance one step. Mutual acceptance ends the episode and pays the
    game payoff, except on the final step of the horizon, where the
    deadline takes precedence and the episode times out with reward zero.
    """
    if state.done:
        raise RuntimeError("Episode ended. Start a new episode before step().")
    reward = 0.0
    if focal_accepts and partner_accepts(partner, state.focal_investment):
        state.done = True
        reward = payoff(state.focal_investment, partner.investment, cfg)
    if state.t + 1 == cfg.max_steps:
        state.done = True
        reward = 0.0
    state.t += 1
    if state.done:
        state.final_reward = reward
    return StepOutcome(
        (state.focal_investment, partner.investment),
        reward,
        state.done,
        partner.cooperative,
    )


def expected_return_oracle(
    x_invest: float, accept_threshold: float, cfg: EnvConfig
) -> float:
    """Exact expected return of "invest x, accept iff partner >= threshold".

    A step matches when the drawn partner is cooperative, demands no more
    than x, and offers at least the threshold, so the per-step match
    probability is p * |match set| / n. Matches are bankable on the first
    max_steps - 1 steps only; summing the geometric first-success law over
    them gives the expected return in closed form.
    """
    if not cfg.invest_min <= x_invest <= cfg.invest_max:
        raise ValueError(f"investment {x_invest} out of range")
    matchable = [
        q.investment
        for q in cfg._partners
        if accept_threshold <= q.investment <= x_invest
    ]
    if not matchable:
        return 0.0
    q_match = cfg.p * len(matchable) / cfg.n_partners
    mean_payoff = sum(payoff(x_invest, v, cfg) for v in matchable) / len(matchable)
    p_match = 1.0 - (1.0 - q_match) ** (cfg.max_steps - 1)
    return mean_payoff * p_match
