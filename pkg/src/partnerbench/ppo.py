"""Gradient policy search: clipped surrogate with an adaptive KL penalty.

The policy is split into two sub-policies sharing one parameter vector: a
Gaussian investment head queried once per episode, and a categorical
choice head queried at every meeting. Rollouts collect whole episodes
until the step quota is reached, each sub-policy's transitions are
shuffled into minibatches, and plain SGD ascends the objective

    mean[ min(r * A, clip(r, 1-eps, 1+eps) * A) - beta * KL(old || new) ]
    - value_loss_coeff * mean[(V - G)^2]

for ten epochs per batch. beta adapts by halving / growing 1.5x when
the measured KL leaves a dead zone around the target. All gradients come
from the hand-written backward pass in :mod:`partnerbench.nets`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .env import EnvConfig, EpisodeState, sample_partner, step
from .nets import (
    PRESETS,
    GaussianHead,
    ParamVector,
    net_backward,
    net_forward,
)

__all__ = [
    "PpoConfig",
    "Transition",
    "RolloutBatch",
    "MiniBatch",
    "KlPenaltyState",
    "UpdateDiagnostics",
    "NonFiniteParameterError",
    "collect_rollout",
    "compute_gae",
    "ppo_loss",
    "kl_beta_update",
    "ppo_update",
]

# exp() guard for importance ratios; never binding in a healthy run.
_MAX_LOG_RATIO = 60.0


class NonFiniteParameterError(RuntimeError):
    """Raised when an update produces a non-finite parameter."""


@dataclass(frozen=True)
class PpoConfig:
    learning_rate: float = 0.005
    n_epochs: int = 10
    minibatch_size: int = 128
    batch_env_steps: int = 4000
    gamma: float = 1.0
    gae_lambda: float = 1.0
    clip_epsilon: float = 0.3
    kl_beta_init: float = 0.2
    kl_target: float = 0.01
    value_loss_coeff: float = 1.0
    standardize_advantages: bool = True
    use_critic: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.minibatch_size < 1 or self.batch_env_steps < 1:
            raise ValueError("batch sizes must be positive")


class Transition(NamedTuple):
    """One recorded decision of either sub-policy."""

    sub_policy: str
    observation: tuple
    action: float
    log_prob: float
    value: float
    reward: float
    terminal: bool


class ChoiceStream(NamedTuple):
    obs: np.ndarray          # (n, 2) observations (own investment, partner's)
    actions: np.ndarray      # (n,) 0 = accept, 1 = refuse
    old_logp_pair: np.ndarray  # (n, 2) log-probs of both actions at collection
    values: np.ndarray       # (n,) critic at collection
    rewards: np.ndarray      # (n,) zero except terminal steps
    terminals: np.ndarray    # (n,) bool episode ends


class InvestStream(NamedTuple):
    raw: np.ndarray          # (m,) unclipped Gaussian draws
    old_mean: np.ndarray     # (m,)
    old_log_std: np.ndarray  # (m,)
    values: np.ndarray       # (m,) critic at collection
    episode_return: np.ndarray  # (m,) discounted episode return from t=0


@dataclass
class RolloutBatch:
    choice: ChoiceStream
    invest: InvestStream
    episode_returns: np.ndarray
    episode_lengths: np.ndarray
    env_steps: int
    episodes: int

    @property
    def mean_return(self) -> float:
        return float(self.episode_returns.mean()) if self.episodes else 0.0


@dataclass
class MiniBatch:
    """Pure data slice handed to ppo_loss; either stream may be empty."""

    choice: ChoiceStream | None = None
    choice_adv: np.ndarray | None = None
    choice_ret: np.ndarray | None = None
    invest: InvestStream | None = None
    invest_adv: np.ndarray | None = None
    invest_ret: np.ndarray | None = None

    @property
    def size(self) -> int:
        n = 0 if self.choice is None else self.choice.obs.shape[0]
        m = 0 if self.invest is None else self.invest.raw.shape[0]
        return n + m


@dataclass
class KlPenaltyState:
    beta: float = 0.2


@dataclass(frozen=True)
class UpdateDiagnostics:
    observed_kl: float
    beta: float
    objective: float
    value_loss: float


def _scalar_choice_fns(pv: ParamVector):
    """Pure-Python evaluators for the small choice networks.

    The collection policy is frozen for a whole batch, so the weights are
    pulled out into plain floats once and each distinct observation costs
    a handful of scalar ops. Only valid for the 2-3-2 / 2-3-1 layout;
    larger presets fall back to the batched numpy path.
    """
    a = pv.segment("choice_actor").tolist()
    c = pv.segment("choice_critic").tolist()
    aw = a[:6]
    ab = a[6:9]
    av = a[9:15]
    ao = a[15:17]
    cw = c[:6]
    cb = c[6:9]
    cv = c[9:12]
    co = c[12]

    def evaluate(x: float, v: float):
        h0 = math.tanh(aw[0] * x + aw[1] * v + ab[0])
        h1 = math.tanh(aw[2] * x + aw[3] * v + ab[1])
        h2 = math.tanh(aw[4] * x + aw[5] * v + ab[2])
        l0 = av[0] * h0 + av[1] * h1 + av[2] * h2 + ao[0]
        l1 = av[3] * h0 + av[4] * h1 + av[5] * h2 + ao[1]
        m = l0 if l0 > l1 else l1
        lse = m + math.log(math.exp(l0 - m) + math.exp(l1 - m))
        g0 = math.tanh(cw[0] * x + cw[1] * v + cb[0])
        g1 = math.tanh(cw[2] * x + cw[3] * v + cb[1])
        g2 = math.tanh(cw[4] * x + cw[5] * v + cb[2])
        value = cv[0] * g0 + cv[1] * g1 + cv[2] * g2 + co
        return l0 - lse, l1 - lse, value

    return evaluate


def _batched_choice_table(pv: ParamVector, x: float, grid) -> tuple:
    """(log_p_accept, log_p_refuse, value) per partner grid value."""
    obs = np.column_stack([np.full(len(grid), x), np.asarray(grid)])
    logits, _ = net_forward(pv.network("choice_actor"), pv.segment("choice_actor"), obs)
    values, _ = net_forward(pv.network("choice_critic"), pv.segment("choice_critic"), obs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    lp0 = (shifted[:, 0] - lse).tolist()
    lp1 = (shifted[:, 1] - lse).tolist()
    return lp0, lp1, values[:, 0].tolist()


def collect_rollout(
    pv: ParamVector,
    env_cfg: EnvConfig,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> RolloutBatch:
    """Play whole episodes until at least ``batch_env_steps`` choice
    transitions are banked; the episode in progress always completes."""
    invest_w = pv.segment("invest_actor")
    head = GaussianHead(float(invest_w[0]), float(invest_w[1]))
    invest_value = float(pv.segment("invest_critic")[0])
    log_std = min(max(head.log_std, -20.0), 10.0)
    std = math.exp(log_std)

    grid = [0.5 * i for i in range(31)]
    scalar_eval = None
    if pv.preset == "PPO-MLP":
        scalar_eval = _scalar_choice_fns(pv)

    p = env_cfg.p
    lo, hi = env_cfg.invest_min, env_cfg.invest_max

    c_idx: list[int] = []
    c_actions: list[int] = []
    c_logp0: list[float] = []
    c_logp1: list[float] = []
    c_values: list[float] = []
    c_last: list[int] = []       # index of each episode's final transition
    ep_x: list[float] = []
    inv_raw: list[float] = []
    ep_rewards: list[float] = []
    ep_lengths: list[int] = []

    while len(c_idx) < cfg.batch_env_steps:
        # Normalized action convention: the Gaussian lives in [-1, 1] and
        # the clipped draw is mapped affinely onto the investment range.
        z = rng.standard_normal()
        raw = head.mean + std * z
        x = lo + (min(max(raw, -1.0), 1.0) + 1.0) * 0.5 * (hi - lo)
        inv_raw.append(raw)
        ep_x.append(x)

        if scalar_eval is not None:
            cache: dict[int, tuple] = {}
        else:
            lp0s, lp1s, vals = _batched_choice_table(pv, x, grid)

        state = EpisodeState(x, env_cfg)
        while not state.done:
            partner = sample_partner(env_cfg, rng)
            idx = round(partner.investment * 2.0)
            if scalar_eval is not None:
                entry = cache.get(idx)
                if entry is None:
                    entry = scalar_eval(x, partner.investment)
                    cache[idx] = entry
                lp0, lp1, val = entry
            else:
                lp0, lp1, val = lp0s[idx], lp1s[idx], vals[idx]
            accept = rng.random() < math.exp(lp0)
            step(state, env_cfg, accept, partner)
            c_idx.append(idx)
            c_actions.append(0 if accept else 1)
            c_logp0.append(lp0)
            c_logp1.append(lp1)
            c_values.append(val)
        c_last.append(len(c_idx) - 1)
        ep_rewards.append(state.final_reward)
        ep_lengths.append(state.t)

    episodes = len(ep_rewards)
    lengths = np.asarray(ep_lengths, dtype=np.int64)
    returns = np.asarray(ep_rewards)
    n = len(c_idx)

    obs = np.empty((n, 2))
    obs[:, 0] = np.repeat(ep_x, lengths)
    obs[:, 1] = np.asarray(c_idx, dtype=np.float64) * 0.5
    rewards = np.zeros(n)
    terminals = np.zeros(n, dtype=bool)
    last = np.asarray(c_last, dtype=np.int64)
    rewards[last] = returns
    terminals[last] = True

    choice = ChoiceStream(
        obs=obs,
        actions=np.asarray(c_actions, dtype=np.int64),
        old_logp_pair=np.column_stack([c_logp0, c_logp1]),
        values=np.asarray(c_values),
        rewards=rewards,
        terminals=terminals,
    )
    raw_arr = np.asarray(inv_raw)
    invest = InvestStream(
        raw=raw_arr,
        old_mean=np.full(episodes, head.mean),
        old_log_std=np.full(episodes, log_std),
        values=np.full(episodes, invest_value),
        episode_return=returns * cfg.gamma ** (lengths - 1),
    )
    return RolloutBatch(
        choice=choice,
        invest=invest,
        episode_returns=returns,
        episode_lengths=lengths,
        env_steps=n,
        episodes=episodes,
    )


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    terminals: np.ndarray,
    cfg: PpoConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over concatenated full episodes.

    Episodes are delimited by terminal flags and never bootstrap past
    their end. Returns (advantages, returns) where returns are the
    discounted rewards-to-go used as critic targets. Standardization, if
    enabled, is applied to the advantages of this stream as one batch.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    n = rewards.shape[0]
    values_used = (
        np.asarray(values, dtype=np.float64) if cfg.use_critic else np.zeros(n)
    )
    terminals = np.asarray(terminals, dtype=bool)
    if n and not terminals[-1]:
        raise ValueError("rollout must end on an episode boundary")

    returns = np.empty(n)
    advantages = np.empty(n)
    if cfg.gamma == 1.0 and cfg.gae_lambda == 1.0:
        # With no discounting the recursion collapses: the return is the
        # undiscounted reward-to-go and the advantage is return - value.
        running = 0.0
        for t in range(n - 1, -1, -1):
            if terminals[t]:
                running = 0.0
            running = rewards[t] + running
            returns[t] = running
        advantages = returns - values_used
    else:
        gamma, lam = cfg.gamma, cfg.gae_lambda
        next_value = 0.0
        next_adv = 0.0
        for t in range(n - 1, -1, -1):
            if terminals[t]:
                next_value = 0.0
                next_adv = 0.0
            delta = rewards[t] + gamma * next_value - values_used[t]
            next_adv = delta + gamma * lam * next_adv
            advantages[t] = next_adv
            next_value = values_used[t]
            if terminals[t]:
                returns[t] = rewards[t]
            else:
                returns[t] = rewards[t] + gamma * returns[t + 1]
    if cfg.standardize_advantages and n:
        std = advantages.std()
        advantages = (advantages - advantages.mean()) / max(std, 1e-8)
    return advantages, returns


def _invest_targets(batch: RolloutBatch, cfg: PpoConfig) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and critic targets for the per-episode investment head."""
    ret = batch.invest.episode_return
    values = batch.invest.values if cfg.use_critic else np.zeros_like(ret)
    adv = ret - values
    if cfg.standardize_advantages and adv.size:
        adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    return adv, ret


def ppo_loss(
    pv: ParamVector,
    mini: MiniBatch,
    beta: float,
    cfg: PpoConfig,
) -> tuple[float, np.ndarray]:
    """Objective and its exact gradient for one minibatch.

    The objective is the mean per-transition clipped surrogate minus the
    beta-weighted KL to the collection policy, minus the value loss; it
    is maximized, so callers ascend the returned gradient.
    """
    grad = np.zeros_like(pv.values)
    total = mini.size
    if total == 0:
        return 0.0, grad
    objective = 0.0
    value_sq = 0.0
    eps = cfg.clip_epsilon
    vc = cfg.value_loss_coeff if cfg.use_critic else 0.0

    if mini.choice is not None and mini.choice.obs.shape[0]:
        cs = mini.choice
        adv = mini.choice_adv
        spec = pv.network("choice_actor")
        seg_off, seg_len = PRESETS[pv.preset].offset("choice_actor")
        logits, tape = net_forward(spec, pv.segment("choice_actor"), cs.obs)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        lp_new = shifted - log_z
        p_new = np.exp(lp_new)
        rows = np.arange(cs.obs.shape[0])
        lp_chosen = lp_new[rows, cs.actions]
        lp_old_chosen = cs.old_logp_pair[rows, cs.actions]
        ratio = np.exp(np.minimum(lp_chosen - lp_old_chosen, _MAX_LOG_RATIO))
        s1 = ratio * adv
        s2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        surr = np.minimum(s1, s2)
        p_old = np.exp(cs.old_logp_pair)
        kl = (p_old * (cs.old_logp_pair - lp_new)).sum(axis=1)
        objective += float((surr - beta * kl).sum())

        flow = (s1 <= s2).astype(np.float64) * adv * ratio
        onehot = np.zeros_like(p_new)
        onehot[rows, cs.actions] = 1.0
        # exact for the implemented KL sum even if the stored pair is not
        # perfectly normalized: d/dl_j = p_new_j * sum(p_old) - p_old_j
        p_old_sum = p_old.sum(axis=1, keepdims=True)
        dlogits = flow[:, None] * (onehot - p_new) - beta * (
            p_new * p_old_sum - p_old
        )
        dparams, _ = net_backward(tape, dlogits / total)
        grad[seg_off : seg_off + seg_len] += dparams

        if vc:
            cspec = pv.network("choice_critic")
            coff, clen = PRESETS[pv.preset].offset("choice_critic")
            v_new, vtape = net_forward(cspec, pv.segment("choice_critic"), cs.obs)
            err = v_new[:, 0] - mini.choice_ret
            value_sq += float((err * err).sum())
            dv = (-2.0 * vc * err / total)[:, None]
            dvparams, _ = net_backward(vtape, dv)
            grad[coff : coff + clen] += dvparams

    if mini.invest is not None and mini.invest.raw.shape[0]:
        iv = mini.invest
        adv = mini.invest_adv
        w = pv.segment("invest_actor")
        mean_new, log_std_new = float(w[0]), float(w[1])
        std_new = math.exp(log_std_new)
        var_new = std_new * std_new
        z = (iv.raw - mean_new) / std_new
        lp_new = -0.5 * z * z - log_std_new - 0.5 * math.log(2.0 * math.pi)
        lp_old = (
            -0.5 * ((iv.raw - iv.old_mean) / np.exp(iv.old_log_std)) ** 2
            - iv.old_log_std
            - 0.5 * math.log(2.0 * math.pi)
        )
        ratio = np.exp(np.minimum(lp_new - lp_old, _MAX_LOG_RATIO))
        s1 = ratio * adv
        s2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        surr = np.minimum(s1, s2)
        var_old = np.exp(2.0 * iv.old_log_std)
        kl = (
            log_std_new
            - iv.old_log_std
            + (var_old + (iv.old_mean - mean_new) ** 2) / (2.0 * var_new)
            - 0.5
        )
        objective += float((surr - beta * kl).sum())

        flow = (s1 <= s2).astype(np.float64) * adv * ratio
        dlp_dmean = (iv.raw - mean_new) / var_new
        dlp_dlogstd = z * z - 1.0
        dkl_dmean = (mean_new - iv.old_mean) / var_new
        dkl_dlogstd = 1.0 - (var_old + (iv.old_mean - mean_new) ** 2) / var_new
        off, _ = PRESETS[pv.preset].offset("invest_actor")
        grad[off] += float((flow * dlp_dmean - beta * dkl_dmean).sum()) / total
        grad[off + 1] += float((flow * dlp_dlogstd - beta * dkl_dlogstd).sum()) / total

        if vc:
            voff, _ = PRESETS[pv.preset].offset("invest_critic")
            v_new = pv.values[voff]
            err = v_new - mini.invest_ret
            value_sq += float((err * err).sum())
            grad[voff] += float((-2.0 * vc * err).sum()) / total

    objective = objective / total - vc * value_sq / total
    return float(objective), grad


def kl_beta_update(beta: float, observed_kl: float, cfg: PpoConfig) -> float:
    """Dead-zone multiplicative adaptation of the KL penalty weight."""
    if observed_kl > 2.0 * cfg.kl_target:
        return beta * 1.5
    if observed_kl < cfg.kl_target / 2.0:
        return beta / 2.0
    return beta


def _observed_kl(pv: ParamVector, batch: RolloutBatch) -> float:
    """Mean closed-form KL(collection || current) over every transition
    of the batch, both heads pooled by transition count."""
    cs = batch.choice
    n = cs.obs.shape[0]
    m = batch.invest.raw.shape[0]
    logits, _ = net_forward(
        pv.network("choice_actor"), pv.segment("choice_actor"), cs.obs
    )
    shifted = logits - logits.max(axis=1, keepdims=True)
    lp_new = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p_old = np.exp(cs.old_logp_pair)
    kl_choice = float((p_old * (cs.old_logp_pair - lp_new)).sum())

    w = pv.segment("invest_actor")
    mean_new, log_std_new = float(w[0]), float(w[1])
    var_new = math.exp(2.0 * log_std_new)
    iv = batch.invest
    kl_invest = float(
        (
            log_std_new
            - iv.old_log_std
            + (np.exp(2.0 * iv.old_log_std) + (iv.old_mean - mean_new) ** 2)
            / (2.0 * var_new)
            - 0.5
        ).sum()
    )
    return (kl_choice + kl_invest) / max(n + m, 1)


def ppo_update(
    pv: ParamVector,
    batch: RolloutBatch,
    state: KlPenaltyState,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> UpdateDiagnostics:
    """One full PPO cycle over a collected batch, in place on ``pv``.

    Each epoch reshuffles both sub-policies' transitions into minibatches
    and takes one SGD ascent step per minibatch. The KL penalty weight
    adapts once afterwards from the KL measured over the whole batch.
    """
    choice_adv, choice_ret = compute_gae(
        batch.choice.rewards, batch.choice.values, batch.choice.terminals, cfg
    )
    invest_adv, invest_ret = _invest_targets(batch, cfg)
    n = batch.choice.obs.shape[0]
    m = batch.invest.raw.shape[0]
    mb = cfg.minibatch_size
    last_objective = 0.0
    last_value_loss = 0.0

    for _ in range(cfg.n_epochs):
        order_c = rng.permutation(n)
        order_i = rng.permutation(m)
        for at in range(0, n, mb):
            sel = order_c[at : at + mb]
            mini = MiniBatch(
                choice=ChoiceStream(
                    obs=batch.choice.obs[sel],
                    actions=batch.choice.actions[sel],
                    old_logp_pair=batch.choice.old_logp_pair[sel],
                    values=batch.choice.values[sel],
                    rewards=batch.choice.rewards[sel],
                    terminals=batch.choice.terminals[sel],
                ),
                choice_adv=choice_adv[sel],
                choice_ret=choice_ret[sel],
            )
            objective, grad = ppo_loss(pv, mini, state.beta, cfg)
            pv.values += cfg.learning_rate * grad
            last_objective = objective
        for at in range(0, m, mb):
            sel = order_i[at : at + mb]
            mini = MiniBatch(
                invest=InvestStream(
                    raw=batch.invest.raw[sel],
                    old_mean=batch.invest.old_mean[sel],
                    old_log_std=batch.invest.old_log_std[sel],
                    values=batch.invest.values[sel],
                    episode_return=batch.invest.episode_return[sel],
                ),
                invest_adv=invest_adv[sel],
                invest_ret=invest_ret[sel],
            )
            objective, grad = ppo_loss(pv, mini, state.beta, cfg)
            pv.values += cfg.learning_rate * grad

    if not np.all(np.isfinite(pv.values)):
        raise NonFiniteParameterError("policy parameters diverged")

    observed = _observed_kl(pv, batch)
    state.beta = kl_beta_update(state.beta, observed, cfg)
    if cfg.use_critic:
        v_new, _ = net_forward(
            pv.network("choice_critic"), pv.segment("choice_critic"), batch.choice.obs
        )
        last_value_loss = float(((v_new[:, 0] - choice_ret) ** 2).mean())
    return UpdateDiagnostics(
        observed_kl=observed,
        beta=state.beta,
        objective=last_objective,
        value_loss=last_value_loss,
    )
