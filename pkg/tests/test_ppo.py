"""PPO tests: GAE against a direct discounted-sum oracle, loss values on
hand-built minibatches, finite-difference gradient agreement, the KL
penalty schedule, and rollout collection structure."""

import math

import numpy as np
import pytest

from partnerbench.env import EnvConfig
from partnerbench.nets import (
    ParamVector,
    init_params,
    log_softmax,
    net_forward,
    param_count,
)
from partnerbench.ppo import (
    ChoiceStream,
    InvestStream,
    KlPenaltyState,
    MiniBatch,
    NonFiniteParameterError,
    PpoConfig,
    RolloutBatch,
    collect_rollout,
    compute_gae,
    kl_beta_update,
    ppo_loss,
    ppo_update,
)
from partnerbench.ppo import _scalar_choice_fns


def gae_direct(rewards, values, terminals, gamma, lam, use_critic=True):
    """Independent double-sum GAE: advantage at t is the discounted sum
    of one-step TD errors to the episode end."""
    n = len(rewards)
    vals = values if use_critic else np.zeros(n)
    adv = np.zeros(n)
    rets = np.zeros(n)
    start = 0
    for i in range(n):
        if not terminals[i]:
            continue
        length = i - start + 1
        for t in range(length):
            acc = 0.0
            for l in range(length - t):
                j = start + t + l
                nxt = vals[j + 1] if t + l + 1 < length else 0.0
                delta = rewards[j] + gamma * nxt - vals[j]
                acc += (gamma * lam) ** l * delta
            adv[start + t] = acc
            ret = 0.0
            for l in range(length - t):
                ret += gamma**l * rewards[start + t + l]
            rets[start + t] = ret
        start = i + 1
    return adv, rets


def random_episode_batch(rng, n_episodes=5, max_len=8):
    lengths = rng.integers(1, max_len + 1, size=n_episodes)
    n = int(lengths.sum())
    rewards = np.zeros(n)
    terminals = np.zeros(n, dtype=bool)
    at = 0
    for length in lengths:
        at += int(length)
        terminals[at - 1] = True
        rewards[at - 1] = rng.uniform(-1, 1)
    values = rng.uniform(-1, 1, size=n)
    return rewards, values, terminals


class TestComputeGae:
    def test_undiscounted_advantage_is_terminal_reward_minus_value(self):
        cfg = PpoConfig(standardize_advantages=False)
        rewards = np.array([0.0, 0.0, 50.0, 0.0, 30.0])
        values = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        terminals = np.array([False, False, True, False, True])
        adv, rets = compute_gae(rewards, values, terminals, cfg)
        assert np.allclose(rets, [50, 50, 50, 30, 30])
        assert np.allclose(adv, [49, 48, 47, 26, 25])

    def test_single_transition(self):
        cfg = PpoConfig(standardize_advantages=False)
        adv, rets = compute_gae(
            np.array([7.0]), np.array([2.0]), np.array([True]), cfg
        )
        assert adv[0] == 5.0 and rets[0] == 7.0

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            gamma = float(rng.uniform(0.5, 1.0))
            lam = float(rng.uniform(0.0, 1.0))
            cfg = PpoConfig(
                gamma=gamma, gae_lambda=lam, standardize_advantages=False
            )
            rewards, values, terminals = random_episode_batch(rng)
            adv, rets = compute_gae(rewards, values, terminals, cfg)
            adv2, rets2 = gae_direct(rewards, values, terminals, gamma, lam)
            assert np.allclose(adv, adv2, atol=1e-12)
            assert np.allclose(rets, rets2, atol=1e-12)

    def test_no_critic_advantages_are_returns(self):
        cfg = PpoConfig(standardize_advantages=False, use_critic=False)
        rewards, values, terminals = random_episode_batch(np.random.default_rng(1))
        adv, rets = compute_gae(rewards, values, terminals, cfg)
        assert np.allclose(adv, rets)

    def test_standardization(self):
        cfg = PpoConfig(standardize_advantages=True)
        rewards, values, terminals = random_episode_batch(np.random.default_rng(2))
        adv, _ = compute_gae(rewards, values, terminals, cfg)
        assert abs(adv.mean()) < 1e-12
        assert adv.std() == pytest.approx(1.0)

    def test_incomplete_rollout_rejected(self):
        cfg = PpoConfig()
        with pytest.raises(ValueError):
            compute_gae(
                np.array([0.0, 0.0]),
                np.array([0.0, 0.0]),
                np.array([True, False]),
                cfg,
            )


class TestKlBetaUpdate:
    def test_grows_when_kl_high(self):
        cfg = PpoConfig()
        assert kl_beta_update(0.2, 0.05, cfg) == pytest.approx(0.3)

    def test_halves_when_kl_low(self):
        cfg = PpoConfig()
        assert kl_beta_update(0.2, 0.004, cfg) == pytest.approx(0.1)

    def test_dead_zone(self):
        cfg = PpoConfig()
        assert kl_beta_update(0.2, 0.01, cfg) == 0.2
        assert kl_beta_update(0.2, 0.0199, cfg) == 0.2
        assert kl_beta_update(0.2, 0.0051, cfg) == 0.2


def make_accept_all_policy(invest_mean=16.0):
    # Mean above the clip bound so every drawn investment clips to exactly
    # 15.0 and even the most demanding partner accepts.
    pv = ParamVector("PPO-MLP", np.zeros(param_count("PPO-MLP")))
    pv.segment("invest_actor")[:] = [invest_mean, -20.0]
    pv.segment("choice_actor")[15:17] = [50.0, -50.0]
    return pv


class TestCollectRollout:
    def test_degenerate_fast_episodes(self):
        # Invest 15 with accept-everything: every cooperative partner
        # accepts, so every episode ends on its first step.
        pv = make_accept_all_policy()
        batch = collect_rollout(
            pv, EnvConfig(p=1.0), PpoConfig(), np.random.default_rng(0)
        )
        assert batch.episodes == 4000
        assert batch.env_steps == 4000
        assert np.all(batch.episode_lengths == 1)
        # payoff(15, v) averages to zero over the uniform partner grid
        assert abs(batch.mean_return) < 1.5

    def test_reward_structure(self):
        pv = init_params("PPO-MLP", np.random.default_rng(3))
        batch = collect_rollout(
            pv, EnvConfig(p=0.5), PpoConfig(), np.random.default_rng(4)
        )
        assert batch.env_steps >= 4000
        assert batch.choice.terminals.sum() == batch.episodes
        nonzero = batch.choice.rewards != 0.0
        assert np.all(batch.choice.terminals[nonzero])
        assert batch.invest.raw.shape[0] == batch.episodes
        # observations carry the episode investment and grid values
        assert np.all(batch.choice.obs[:, 1] % 0.5 == 0.0)
        assert np.all((batch.choice.obs[:, 0] >= 0) & (batch.choice.obs[:, 0] <= 15))

    def test_budget_overshoot_bounded_by_one_episode(self):
        pv = init_params("PPO-MLP", np.random.default_rng(5))
        cfg = PpoConfig()
        batch = collect_rollout(pv, EnvConfig(p=1.0), cfg, np.random.default_rng(6))
        assert batch.env_steps >= cfg.batch_env_steps
        assert batch.env_steps - batch.choice.terminals[:-1].argmax() < (
            cfg.batch_env_steps + 100
        )
        assert batch.env_steps < cfg.batch_env_steps + 100

    def test_deterministic(self):
        pv = init_params("PPO-MLP", np.random.default_rng(7))
        a = collect_rollout(pv, EnvConfig(p=0.5), PpoConfig(), np.random.default_rng(8))
        b = collect_rollout(pv, EnvConfig(p=0.5), PpoConfig(), np.random.default_rng(8))
        assert np.array_equal(a.choice.obs, b.choice.obs)
        assert np.array_equal(a.choice.actions, b.choice.actions)
        assert np.array_equal(a.invest.raw, b.invest.raw)
        assert np.array_equal(a.episode_returns, b.episode_returns)

    def test_scalar_path_matches_batched_forward(self):
        rng = np.random.default_rng(9)
        pv = init_params("PPO-MLP", rng)
        evaluate = _scalar_choice_fns(pv)
        for _ in range(50):
            x = float(rng.uniform(0, 15))
            v = float(rng.uniform(0, 15))
            lp0, lp1, val = evaluate(x, v)
            obs = np.array([[x, v]])
            logits, _ = net_forward(
                pv.network("choice_actor"), pv.segment("choice_actor"), obs
            )
            lsm = log_softmax(logits[0])
            vref, _ = net_forward(
                pv.network("choice_critic"), pv.segment("choice_critic"), obs
            )
            assert lp0 == pytest.approx(lsm[0], abs=1e-12)
            assert lp1 == pytest.approx(lsm[1], abs=1e-12)
            assert val == pytest.approx(vref[0, 0], abs=1e-12)


def make_choice_minibatch(pv, obs, actions, adv, ret, logp_shift=0.0):
    """Minibatch whose stored collection log-probs equal the current
    policy's (plus an optional shift on the chosen action)."""
    logits, _ = net_forward(
        pv.network("choice_actor"), pv.segment("choice_actor"), obs
    )
    shifted = logits - logits.max(axis=1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    pair = lp.copy()
    rows = np.arange(obs.shape[0])
    pair[rows, actions] += logp_shift
    stream = ChoiceStream(
        obs=obs,
        actions=actions,
        old_logp_pair=pair,
        values=np.zeros(obs.shape[0]),
        rewards=np.zeros(obs.shape[0]),
        terminals=np.ones(obs.shape[0], dtype=bool),
    )
    return MiniBatch(choice=stream, choice_adv=adv, choice_ret=ret)


class TestPpoLoss:
    def test_identity_ratio_no_kl(self):
        pv = init_params("PPO-MLP", np.random.default_rng(10))
        obs = np.array([[10.0, 10.0], [10.0, 5.0]])
        adv = np.array([1.0, -0.5])
        mini = make_choice_minibatch(
            pv, obs, np.array([0, 1]), adv, np.zeros(2)
        )
        cfg = PpoConfig(use_critic=False)
        objective, _ = ppo_loss(pv, mini, beta=0.5, cfg=cfg)
        assert objective == pytest.approx(adv.mean(), abs=1e-12)

    def test_clip_engages_for_large_ratio(self):
        # Stored log-prob ln(2) below current: ratio 2, advantage 1,
        # epsilon 0.3 -> clipped surrogate 1.3.
        pv = init_params("PPO-MLP", np.random.default_rng(11))
        obs = np.array([[10.0, 10.0]])
        mini = make_choice_minibatch(
            pv, obs, np.array([0]), np.array([1.0]), np.zeros(1),
            logp_shift=-math.log(2.0),
        )
        cfg = PpoConfig(use_critic=False)
        objective, _ = ppo_loss(pv, mini, beta=0.0, cfg=cfg)
        assert objective == pytest.approx(1.3, abs=1e-9)

    def test_negative_advantage_unclipped_branch(self):
        pv = init_params("PPO-MLP", np.random.default_rng(12))
        obs = np.array([[10.0, 10.0]])
        mini = make_choice_minibatch(
            pv, obs, np.array([0]), np.array([-1.0]), np.zeros(1),
            logp_shift=-math.log(2.0),
        )
        cfg = PpoConfig(use_critic=False)
        objective, _ = ppo_loss(pv, mini, beta=0.0, cfg=cfg)
        assert objective == pytest.approx(-2.0, abs=1e-9)

    def test_empty_minibatch(self):
        pv = init_params("PPO-MLP", np.random.default_rng(13))
        objective, grad = ppo_loss(pv, MiniBatch(), 0.2, PpoConfig())
        assert objective == 0.0
        assert np.all(grad == 0.0)


def random_mixed_minibatch(pv, rng, n_choice=7, n_invest=3):
    obs = rng.uniform(0, 15, size=(n_choice, 2))
    actions = rng.integers(0, 2, size=n_choice)
    logits, _ = net_forward(
        pv.network("choice_actor"), pv.segment("choice_actor"), obs
    )
    shifted = logits - logits.max(axis=1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    pair = lp + rng.normal(scale=0.2, size=lp.shape)
    choice = ChoiceStream(
        obs=obs,
        actions=actions,
        old_logp_pair=pair,
        values=rng.normal(size=n_choice),
        rewards=np.zeros(n_choice),
        terminals=np.ones(n_choice, dtype=bool),
    )
    w = pv.segment("invest_actor")
    old_mean = np.full(n_invest, float(w[0]) + rng.normal(scale=0.3))
    old_log_std = np.full(n_invest, float(w[1]) + rng.normal(scale=0.1))
    invest = InvestStream(
        # raw actions come from the old policy, as in real collection;
        # unrelated draws would make importance ratios astronomically large
        raw=old_mean + np.exp(old_log_std) * rng.standard_normal(n_invest),
        old_mean=old_mean,
        old_log_std=old_log_std,
        values=rng.normal(size=n_invest),
        episode_return=rng.uniform(0, 5, size=n_invest),
    )
    # modest target scale keeps the objective small enough that float
    # cancellation in the finite differences stays below the tolerance
    return MiniBatch(
        choice=choice,
        choice_adv=rng.normal(size=n_choice),
        choice_ret=rng.uniform(0, 5, size=n_choice),
        invest=invest,
        invest_adv=rng.normal(size=n_invest),
        invest_ret=rng.uniform(0, 5, size=n_invest),
    )


class TestLossGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(14)
        cfg = PpoConfig()
        h = 1e-5
        for trial in range(100):
            pv = init_params("PPO-MLP", rng)
            pv.values += rng.normal(scale=0.2, size=pv.values.shape)
            mini = random_mixed_minibatch(pv, rng)
            beta = float(rng.uniform(0.05, 0.5))
            _, grad = ppo_loss(pv, mini, beta, cfg)
            for j in range(pv.values.size):
                bump = pv.copy()
                bump.values[j] += h
                hi, _ = ppo_loss(bump, mini, beta, cfg)
                bump.values[j] -= 2 * h
                lo, _ = ppo_loss(bump, mini, beta, cfg)
                fd = (hi - lo) / (2 * h)
                err = abs(fd - grad[j]) / max(1e-4, abs(fd), abs(grad[j]))
                assert err < 1e-4, f"trial {trial} coord {j}: fd={fd} an={grad[j]}"


class TestPpoUpdate:
    def test_zero_advantage_no_critic_first_step_noop(self):
        # All-equal advantages standardize to zero; with the critic off
        # and old == new the whole first gradient vanishes.
        pv = init_params("PPO-MLP", np.random.default_rng(15))
        before = pv.values.copy()
        batch = collect_rollout(
            pv, EnvConfig(p=1.0), PpoConfig(), np.random.default_rng(16)
        )
        # force all episode rewards equal so every advantage standardizes to 0
        batch.choice.rewards[batch.choice.terminals] = 10.0
        batch.invest.episode_return[:] = 10.0
        cfg = PpoConfig(
            use_critic=False,
            n_epochs=1,
            minibatch_size=batch.env_steps + batch.episodes,
        )
        ppo_update(pv, batch, KlPenaltyState(0.2), cfg, np.random.default_rng(17))
        assert np.allclose(pv.values, before, atol=1e-12)

    def test_deterministic(self):
        results = []
        for _ in range(2):
            pv = init_params("PPO-MLP", np.random.default_rng(18))
            state = KlPenaltyState(0.2)
            rng = np.random.default_rng(19)
            for _ in range(2):
                batch = collect_rollout(pv, EnvConfig(p=1.0), PpoConfig(), rng)
                ppo_update(pv, batch, state, PpoConfig(), rng)
            results.append(pv.values.copy())
        assert np.array_equal(results[0], results[1])

    def test_beta_stays_on_schedule_lattice(self):
        # Every adapted beta is 0.2 * 1.5^a * 0.5^b for small a, b.
        pv = init_params("PPO-MLP", np.random.default_rng(20))
        state = KlPenaltyState(0.2)
        rng = np.random.default_rng(21)
        betas = []
        for _ in range(5):
            batch = collect_rollout(pv, EnvConfig(p=1.0), PpoConfig(), rng)
            diag = ppo_update(pv, batch, state, PpoConfig(), rng)
            betas.append(diag.beta)
        lattice = {
            0.2 * 1.5**a * 0.5**b for a in range(8) for b in range(8)
        }
        for beta in betas:
            assert any(beta == pytest.approx(v, rel=1e-9) for v in lattice)

    def test_repeated_positive_advantage_raises_accept_probability(self):
        pv = init_params("PPO-MLP", np.random.default_rng(22))
        obs = np.array([[10.0, 10.0]])
        cfg = PpoConfig(use_critic=False)
        probs = []
        for _ in range(60):
            mini = make_choice_minibatch(
                pv, obs, np.array([0]), np.array([2.0]), np.zeros(1)
            )
            _, grad = ppo_loss(pv, mini, beta=0.0, cfg=cfg)
            pv.values += 0.05 * grad
            logits, _ = net_forward(
                pv.network("choice_actor"), pv.segment("choice_actor"), obs
            )
            shifted = logits[0] - logits[0].max()
            probs.append(float(np.exp(shifted[0]) / np.exp(shifted).sum()))
        assert probs[-1] > 0.9
        assert all(b >= a - 1e-12 for a, b in zip(probs, probs[1:]))

    def test_nonfinite_parameters_abort(self):
        pv = init_params("PPO-MLP", np.random.default_rng(23))
        batch = collect_rollout(
            pv, EnvConfig(p=1.0), PpoConfig(), np.random.default_rng(24)
        )
        pv.values[5] = np.nan
        with pytest.raises(NonFiniteParameterError):
            ppo_update(pv, batch, KlPenaltyState(0.2), PpoConfig(), np.random.default_rng(25))

    def test_deep_preset_smoke(self):
        pv = init_params("PPO-DEEP", np.random.default_rng(26))
        cfg = PpoConfig(
            learning_rate=0.001, batch_env_steps=512, n_epochs=2, minibatch_size=128
        )
        rng = np.random.default_rng(27)
        batch = collect_rollout(pv, EnvConfig(p=1.0), cfg, rng)
        diag = ppo_update(pv, batch, KlPenaltyState(0.2), cfg, rng)
        assert np.all(np.isfinite(pv.values))
        assert math.isfinite(diag.observed_kl)


class TestLearningSmoke:
    def test_short_run_improves_return(self):
        pv = init_params("PPO-MLP", np.random.default_rng(28))
        state = KlPenaltyState(0.2)
        rng = np.random.default_rng(29)
        cfg = PpoConfig()
        env_cfg = EnvConfig(p=1.0)
        means = []
        for _ in range(15):
            batch = collect_rollout(pv, env_cfg, cfg, rng)
            means.append(batch.mean_return)
            ppo_update(pv, batch, state, cfg, rng)
        assert np.mean(means[-3:]) > np.mean(means[:3]) + 3.0
