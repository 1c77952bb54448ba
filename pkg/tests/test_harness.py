"""Harness tests: grid-aligned curve logging, budget accounting, seeded
reproducibility, run-directory persistence with resume, and the timing
probe's structural counters."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from partnerbench.harness import (
    ALGORITHMS,
    CurvePoint,
    RunConfig,
    config_from_dict,
    config_to_dict,
    default_ppo_config,
    derive_seed,
    load_record,
    reevaluate,
    run_grid,
    run_single,
    save_record,
    step_timing_probe,
)
from partnerbench.nets import ParamVector, init_params, param_count


def cmaes_cfg(**kw):
    kw.setdefault("algorithm", "CMAES")
    kw.setdefault("p", 1.0)
    kw.setdefault("episode_budget", 1500)
    kw.setdefault("seed", 11)
    kw.setdefault("reeval_episodes", 30)
    return RunConfig(**kw)


def ppo_cfg(**kw):
    kw.setdefault("algorithm", "PPO-MLP")
    kw.setdefault("p", 1.0)
    kw.setdefault("episode_budget", 2500)
    kw.setdefault("seed", 11)
    kw.setdefault("reeval_episodes", 30)
    return RunConfig(**kw)


class TestRunConfig:
    def test_unknown_algorithm_rejected(self):
        with pytest.raises(ValueError):
            RunConfig(algorithm="SARSA", p=1.0)

    def test_negative_budget_rejected(self):
        with pytest.raises(ValueError):
            RunConfig(algorithm="CMAES", p=1.0, episode_budget=-1)

    def test_env_p_mismatch_rejected(self):
        from partnerbench.env import EnvConfig

        with pytest.raises(ValueError):
            RunConfig(algorithm="CMAES", p=0.5, env=EnvConfig(p=1.0))

    def test_env_defaults_follow_p(self):
        cfg = RunConfig(algorithm="CMAES", p=0.2)
        assert cfg.env.p == 0.2
        assert cfg.env.max_steps == 500

    def test_deep_preset_gets_lower_learning_rate(self):
        assert RunConfig(algorithm="PPO-DEEP", p=1.0).ppo.learning_rate == 0.001
        assert RunConfig(algorithm="PPO-MLP", p=1.0).ppo.learning_rate == 0.005
        assert default_ppo_config("PPO-DEEP").learning_rate == 0.001


class TestSeedDerivation:
    def test_deterministic(self):
        assert derive_seed(5, "CMAES", 0.1, 3) == derive_seed(5, "CMAES", 0.1, 3)

    def test_distinct_across_axes(self):
        seeds = {
            derive_seed(5, alg, p, i)
            for alg in ALGORITHMS
            for p in (0.1, 0.2, 0.5, 1.0)
            for i in range(10)
        }
        assert len(seeds) == len(ALGORITHMS) * 4 * 10

    def test_base_seed_changes_everything(self):
        a = [derive_seed(1, "CMAES", 1.0, i) for i in range(8)]
        b = [derive_seed(2, "CMAES", 1.0, i) for i in range(8)]
        assert not set(a) & set(b)


class TestRunSingle:
    def test_curve_on_thousand_grid(self):
        rec = run_single(cmaes_cfg(episode_budget=3000))
        assert [pt.episode_index for pt in rec.curve] == [1000, 2000, 3000]
        assert all(isinstance(pt, CurvePoint) for pt in rec.curve)

    def test_budget_stops_at_first_boundary(self):
        rec = run_single(cmaes_cfg(episode_budget=3000))
        # lambda=14: the first generation boundary at or past 3000 is 215*14
        assert rec.episodes_run == 3010
        rec_ppo = run_single(ppo_cfg(episode_budget=2500))
        assert rec_ppo.episodes_run >= 2500
        # a 4000-step batch holds at most 4001 episodes (completion rule)
        assert rec_ppo.episodes_run - 2500 <= 4001

    def test_zero_budget_gives_empty_curve_and_initial_policy(self):
        rec = run_single(cmaes_cfg(episode_budget=0, reeval_episodes=5))
        assert rec.curve == []
        assert rec.episodes_run == 0
        assert np.array_equal(rec.final_policy.values, np.zeros(34))
        assert len(rec.reeval_scores) == 5

    def test_identical_seed_identical_record(self):
        a = run_single(cmaes_cfg())
        b = run_single(cmaes_cfg())
        assert a.curve == b.curve
        assert np.array_equal(a.final_policy.values, b.final_policy.values)
        assert a.reeval_scores == b.reeval_scores

    def test_different_seeds_differ(self):
        a = run_single(cmaes_cfg(seed=1))
        b = run_single(cmaes_cfg(seed=2))
        assert a.reeval_scores != b.reeval_scores

    def test_env_steps_monotone_along_curve(self):
        rec = run_single(ppo_cfg(episode_budget=3000))
        steps = [pt.env_steps for pt in rec.curve]
        assert steps == sorted(steps)
        assert steps[-1] <= rec.env_steps

    def test_ppo_batch_stamps_every_spanned_grid_point(self):
        # A PPO batch at p=1.0 covers thousands of episodes, so several
        # grid points share one batch's mean return and step counter.
        rec = run_single(ppo_cfg(episode_budget=4000))
        by_steps = {}
        for pt in rec.curve:
            by_steps.setdefault(pt.env_steps, set()).add(pt.mean_return)
        for returns in by_steps.values():
            assert len(returns) == 1

    def test_reeval_runs_at_p_eval(self):
        rec = run_single(cmaes_cfg(p=0.5, episode_budget=1000, reeval_episodes=40))
        assert len(rec.reeval_scores) == 40
        assert all(np.isfinite(rec.reeval_scores))


class TestReevaluate:
    def test_cmaes_scores_match_policy(self):
        rng = np.random.default_rng(0)
        g = np.zeros(34)
        g[0] = 10.0
        scores = reevaluate(ParamVector("CMAES", g), "CMAES", 200, 1.0, rng)
        assert len(scores) == 200
        # investment 10 with a coin-flip choice head still banks payoffs
        assert all(s in (0.0,) or 0.0 < s <= 50.0 for s in scores)

    def test_ppo_policy_preset_checked(self):
        rng = np.random.default_rng(0)
        pv = init_params("PPO-MLP", rng)
        with pytest.raises(ValueError):
            reevaluate(pv, "PPO-DEEP", 5, 1.0, rng)

    def test_ppo_reeval_deterministic_given_rng(self):
        pv = init_params("PPO-MLP", np.random.default_rng(1))
        a = reevaluate(pv, "PPO-MLP", 50, 1.0, np.random.default_rng(2))
        b = reevaluate(pv, "PPO-MLP", 50, 1.0, np.random.default_rng(2))
        assert a == b


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rec = run_single(cmaes_cfg())
        save_record(rec, tmp_path / "run")
        back = load_record(tmp_path / "run")
        assert back.curve == rec.curve
        assert back.reeval_scores == rec.reeval_scores
        assert np.array_equal(back.final_policy.values, rec.final_policy.values)
        assert back.episodes_run == rec.episodes_run
        assert back.env_steps == rec.env_steps
        assert back.failed == rec.failed
        assert back.config.seed == rec.config.seed
        assert back.config.algorithm == rec.config.algorithm

    def test_expected_artifacts_present(self, tmp_path):
        rec = run_single(ppo_cfg(episode_budget=1000))
        save_record(rec, tmp_path / "run")
        names = {p.name for p in (tmp_path / "run").iterdir()}
        assert names == {
            "config.json",
            "curve.csv",
            "policy.bin",
            "reeval.csv",
            "status.json",
        }
        status = json.loads((tmp_path / "run" / "status.json").read_text())
        assert status["status"] == "complete"

    def test_run_single_persists_when_output_dir_set(self, tmp_path):
        cfg = cmaes_cfg(output_dir=tmp_path / "auto")
        run_single(cfg)
        assert (tmp_path / "auto" / "status.json").exists()

    def test_config_dict_round_trip(self):
        for cfg in (cmaes_cfg(p=0.2), ppo_cfg(p=0.5, algorithm="PPO-DEEP")):
            doc = json.loads(json.dumps(config_to_dict(cfg)))
            back = config_from_dict(doc)
            assert back.algorithm == cfg.algorithm
            assert back.p == cfg.p
            assert back.ppo == cfg.ppo
            assert back.cmaes == cfg.cmaes
            assert back.env == cfg.env

    def test_schema_version_checked(self):
        doc = config_to_dict(cmaes_cfg())
        doc["schema_version"] = 99
        with pytest.raises(ValueError):
            config_from_dict(doc)

    def test_partial_ppo_section_keeps_architecture_defaults(self):
        doc = config_to_dict(RunConfig(algorithm="PPO-DEEP", p=1.0))
        doc["ppo"] = {"n_epochs": 3}
        cfg = config_from_dict(doc)
        assert cfg.ppo.n_epochs == 3
        assert cfg.ppo.learning_rate == 0.001


class TestRunGrid:
    def test_all_cells_executed_and_persisted(self, tmp_path):
        recs = run_grid(
            ["CMAES"],
            [1.0, 0.5],
            runs_per_cell=2,
            base_seed=3,
            episode_budget=800,
            out_root=tmp_path,
            reeval_episodes=10,
        )
        assert len(recs) == 4
        assert len(list(tmp_path.iterdir())) == 4
        seeds = {r.config.seed for r in recs}
        assert seeds == {
            derive_seed(3, "CMAES", p, i) for p in (1.0, 0.5) for i in range(2)
        }

    def test_resume_skips_completed_runs(self, tmp_path):
        kw = dict(
            algorithms=["CMAES"],
            p_values=[1.0],
            runs_per_cell=2,
            base_seed=3,
            episode_budget=800,
            out_root=tmp_path,
            reeval_episodes=10,
        )
        first = run_grid(**kw)
        stamps = {
            p.name: (p / "status.json").stat().st_mtime_ns for p in tmp_path.iterdir()
        }
        started = time.perf_counter()
        second = run_grid(**kw)
        assert time.perf_counter() - started < 1.0
        after = {
            p.name: (p / "status.json").stat().st_mtime_ns for p in tmp_path.iterdir()
        }
        assert stamps == after
        a = sorted(first, key=lambda r: r.config.seed)
        b = sorted(second, key=lambda r: r.config.seed)
        for r1, r2 in zip(a, b):
            assert r1.curve == r2.curve
            assert r1.reeval_scores == r2.reeval_scores

    def test_parallel_matches_serial(self, tmp_path):
        kw = dict(
            algorithms=["CMAES"],
            p_values=[1.0],
            runs_per_cell=2,
            base_seed=7,
            episode_budget=600,
            reeval_episodes=10,
        )
        serial = run_grid(out_root=tmp_path / "s", workers=1, **kw)
        parallel = run_grid(out_root=tmp_path / "p", workers=2, **kw)
        a = sorted(serial, key=lambda r: r.config.seed)
        b = sorted(parallel, key=lambda r: r.config.seed)
        for r1, r2 in zip(a, b):
            assert r1.curve == r2.curve
            assert r1.reeval_scores == r2.reeval_scores

    def test_empty_grid_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            run_grid([], [1.0], 1, 0, 100, tmp_path)


class TestTimingProbe:
    def test_counts_positive(self):
        probe = step_timing_probe("CMAES", 1.0, 0.2)
        assert probe.env_steps > 0
        assert probe.updates > 0
        assert probe.ms_per_step > 0

    def test_cmaes_tell_rate_tracks_rarity(self):
        # A never-accept genome pins every episode at exactly 100/p steps,
        # so tells per env step scale exactly with p.
        g = np.zeros(34)
        g[16] = -500.0
        g[17] = 500.0
        never = ParamVector("CMAES", g)
        fast = step_timing_probe("CMAES", 1.0, 0.5, policy=never)
        slow = step_timing_probe("CMAES", 0.1, 0.5, policy=never)
        ratio = (fast.updates / fast.env_steps) / (slow.updates / slow.env_steps)
        assert ratio == pytest.approx(10.0, rel=0.2)

    def test_ppo_update_rate_rarity_invariant(self):
        v = np.zeros(param_count("PPO-MLP"))
        v[0] = 1.0 / 3.0
        v[1] = -2.0
        v[18] = 50.0
        v[19] = -50.0
        fast = step_timing_probe("PPO-MLP", 1.0, 1.2, policy=ParamVector("PPO-MLP", v))
        slow = step_timing_probe("PPO-MLP", 0.1, 1.2, policy=ParamVector("PPO-MLP", v))
        ra = fast.updates / fast.env_steps
        rb = slow.updates / slow.env_steps
        assert abs(ra - rb) / ra < 0.05
