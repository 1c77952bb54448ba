"""Experiment orchestration: seeded runs, curve logging, and persistence.

A run trains one algorithm at one event probability and logs mean returns
on a shared 1000-episode grid, so curves from the episode-batched PPO
learners and the generation-batched evolutionary learner aggregate without
interpolation. Completed runs persist as a directory of plain artifacts
(config.json, curve.csv, policy.bin, reeval.csv, status.json) and are
skipped untouched when a grid is resumed.
"""

from __future__ import annotations

import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .cmaes import (
    CmaesConfig,
    ask,
    evaluate_genome,
    evaluate_genome_with_steps,
    generation_best_reeval,
    init_state,
    tell,
)
from .env import EnvConfig, EpisodeState, sample_partner, step
from .nets import (
    GaussianHead,
    ParamVector,
    init_params,
    log_softmax,
    net_forward,
    sample_investment,
)
from .ppo import KlPenaltyState, NonFiniteParameterError, PpoConfig, collect_rollout, ppo_update

__all__ = [
    "ALGORITHMS",
    "CurvePoint",
    "RunConfig",
    "RunRecord",
    "TimingProbe",
    "default_ppo_config",
    "derive_seed",
    "load_record",
    "reevaluate",
    "run_grid",
    "run_single",
    "save_record",
    "step_timing_probe",
]

ALGORITHMS = ("CMAES", "PPO-MLP", "PPO-DEEP")
_ALG_IDS = {name: i for i, name in enumerate(ALGORITHMS)}
CURVE_GRID = 1000
SCHEMA_VERSION = 1


class CurvePoint(NamedTuple):
    episode_index: int
    mean_return: float
    env_steps: int


def default_ppo_config(algorithm: str) -> PpoConfig:
    """Per-architecture defaults; only the learning rate differs."""
    if algorithm == "PPO-DEEP":
        return PpoConfig(learning_rate=0.001)
    return PpoConfig()


@dataclass(frozen=True)
class RunConfig:
    algorithm: str
    p: float
    episode_budget: int = 30000
    seed: int = 0
    reeval_episodes: int = 1000
    p_eval: float = 1.0
    output_dir: Path | None = None
    env: EnvConfig | None = None
    ppo: PpoConfig | None = None
    cmaes: CmaesConfig | None = None

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(
                f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}"
            )
        if self.episode_budget < 0:
            raise ValueError("episode_budget must be >= 0")
        if self.reeval_episodes < 0:
            raise ValueError("reeval_episodes must be >= 0")
        if self.env is None:
            object.__setattr__(self, "env", EnvConfig(p=self.p))
        elif self.env.p != self.p:
            raise ValueError(
                f"env.p {self.env.p} disagrees with run p {self.p}"
            )
        if self.ppo is None:
            object.__setattr__(self, "ppo", default_ppo_config(self.algorithm))
        if self.cmaes is None:
            object.__setattr__(self, "cmaes", CmaesConfig())
        if self.output_dir is not None:
            object.__setattr__(self, "output_dir", Path(self.output_dir))


@dataclass
class RunRecord:
    config: RunConfig
    curve: list[CurvePoint]
    final_policy: ParamVector
    reeval_scores: list[float]
    wall_time: float
    episodes_run: int
    env_steps: int
    failed: bool = False
    truncated_at: int | None = None


def derive_seed(base_seed: int, algorithm: str, p: float, run_index: int) -> int:
    """Counter-based seed derivation: independent of dispatch order."""
    ss = np.random.SeedSequence(
        (base_seed, _ALG_IDS[algorithm], round(p * 1000), run_index)
    )
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _grid_points(prev_episodes: int, cur_episodes: int, budget: int) -> list[int]:
    """Grid indices crossed by an update that spans (prev, cur]."""
    first = (prev_episodes // CURVE_GRID + 1) * CURVE_GRID
    last = min(cur_episodes, budget)
    return list(range(first, last + 1, CURVE_GRID))


def _choice_accept_probs(pv: ParamVector, x: float, cfg: EnvConfig) -> np.ndarray:
    """Accept probability for each partner grid value at fixed investment."""
    grid = np.asarray(cfg.partner_grid)
    obs = np.stack([np.full(grid.shape, x), grid], axis=1)
    logits, _ = net_forward(
        pv.network("choice_actor"), pv.segment("choice_actor"), obs
    )
    return np.exp(log_softmax(logits)[:, 0])


def _ppo_episode(
    pv: ParamVector, env_cfg: EnvConfig, rng: np.random.Generator
) -> tuple[float, int]:
    """One stochastic-policy episode without learning: (return, steps)."""
    w = pv.segment("invest_actor")
    head = GaussianHead(float(w[0]), float(w[1]))
    x = sample_investment(head, rng, env_cfg.invest_min, env_cfg.invest_max).value
    probs = _choice_accept_probs(pv, x, env_cfg)
    spacing = (env_cfg.invest_max - env_cfg.invest_min) / (env_cfg.n_partners - 1)
    state = EpisodeState(x, env_cfg)
    outcome = None
    while not state.done:
        partner = sample_partner(env_cfg, rng)
        idx = round((partner.investment - env_cfg.invest_min) / spacing)
        idx = min(max(idx, 0), env_cfg.n_partners - 1)
        outcome = step(state, env_cfg, rng.random() < probs[idx], partner)
    assert outcome is not None
    return outcome.reward, state.t


def reevaluate(
    policy: ParamVector,
    algorithm: str,
    episodes: int,
    p_eval: float,
    rng: np.random.Generator,
) -> list[float]:
    """Per-episode returns of a frozen policy; sampling heads stay stochastic."""
    env_cfg = EnvConfig(p=p_eval)
    if algorithm == "CMAES":
        return [
            evaluate_genome(policy.values, env_cfg, rng) for _ in range(episodes)
        ]
    if policy.preset != algorithm:
        raise ValueError(f"policy preset {policy.preset} != algorithm {algorithm}")
    return [_ppo_episode(policy, env_cfg, rng)[0] for _ in range(episodes)]


def _run_ppo(
    cfg: RunConfig, rng: np.random.Generator
) -> tuple[list[CurvePoint], ParamVector, int, int, bool, int | None]:
    pv = init_params(cfg.algorithm, rng)
    kl_state = KlPenaltyState(cfg.ppo.kl_beta_init)
    curve: list[CurvePoint] = []
    episodes = 0
    env_steps = 0
    while episodes < cfg.episode_budget:
        batch = collect_rollout(pv, cfg.env, cfg.ppo, rng)
        prev = episodes
        episodes += batch.episodes
        env_steps += batch.env_steps
        try:
            ppo_update(pv, batch, kl_state, cfg.ppo, rng)
        except NonFiniteParameterError:
            return curve, pv, episodes, env_steps, True, prev
        for g in _grid_points(prev, episodes, cfg.episode_budget):
            curve.append(CurvePoint(g, batch.mean_return, env_steps))
    return curve, pv, episodes, env_steps, False, None


def _run_cmaes(
    cfg: RunConfig, rng: np.random.Generator
) -> tuple[list[CurvePoint], ParamVector, int, int]:
    state = init_state(cfg.cmaes)
    curve: list[CurvePoint] = []
    episodes = 0
    env_steps = 0
    genomes = None
    fitnesses = None
    while episodes < cfg.episode_budget:
        genomes = ask(state, rng)
        fits = []
        for genome in genomes:
            fitness, steps = evaluate_genome_with_steps(genome, cfg.env, rng)
            fits.append(fitness)
            env_steps += steps
        fitnesses = np.asarray(fits)
        prev = episodes
        episodes += state.lam
        tell(state, genomes, fitnesses)
        crossed = _grid_points(prev, episodes, cfg.episode_budget)
        if crossed:
            # Re-evaluation episodes are diagnostics; they do not count
            # toward the training budget or the env-step tally.
            _, mean_return = generation_best_reeval(
                genomes, fitnesses, cfg.env, rng
            )
            for g in crossed:
                curve.append(CurvePoint(g, mean_return, env_steps))

    if genomes is None:
        final = ParamVector("CMAES", np.zeros(cfg.cmaes.dimension))
    else:
        # Final policy: the last generation's best by 10-episode re-evaluation.
        means = []
        for genome in genomes:
            means.append(
                np.mean([evaluate_genome(genome, cfg.env, rng) for _ in range(10)])
            )
        final = ParamVector("CMAES", genomes[int(np.argmax(means))].copy())
    return curve, final, episodes, env_steps


def run_single(cfg: RunConfig) -> RunRecord:
    """Train one seeded run to its episode budget, then re-evaluate.

    Runs that abort on non-finite parameters are kept, flagged, and not
    re-evaluated. The record is persisted when the config names an
    output directory.
    """
    rng = np.random.default_rng(cfg.seed)
    started = time.perf_counter()
    failed = False
    truncated_at = None
    if cfg.algorithm == "CMAES":
        curve, policy, episodes, env_steps = _run_cmaes(cfg, rng)
    else:
        curve, policy, episodes, env_steps, failed, truncated_at = _run_ppo(cfg, rng)

    scores: list[float] = []
    if not failed and cfg.reeval_episodes:
        scores = reevaluate(
            policy, cfg.algorithm, cfg.reeval_episodes, cfg.p_eval, rng
        )
    record = RunRecord(
        config=cfg,
        curve=curve,
        final_policy=policy,
        reeval_scores=scores,
        wall_time=time.perf_counter() - started,
        episodes_run=episodes,
        env_steps=env_steps,
        failed=failed,
        truncated_at=truncated_at,
    )
    if cfg.output_dir is not None:
        save_record(record, cfg.output_dir)
    return record


def config_to_dict(cfg: RunConfig) -> dict:
    env = cfg.env
    out = {
        "schema_version": SCHEMA_VERSION,
        "algorithm": cfg.algorithm,
        "p": cfg.p,
        "episode_budget": cfg.episode_budget,
        "seed": cfg.seed,
        "reeval_episodes": cfg.reeval_episodes,
        "p_eval": cfg.p_eval,
        "env": {
            "p": env.p,
            "a": env.a,
            "b": env.b,
            "invest_min": env.invest_min,
            "invest_max": env.invest_max,
            "n_partners": env.n_partners,
            "base_meetings": env.base_meetings,
        },
    }
    if cfg.algorithm == "CMAES":
        c = cfg.cmaes
        out["cmaes"] = {
            "dimension": c.dimension,
            "population_size": c.population_size,
            "sigma_init": c.sigma_init,
            "episodes_per_eval": c.episodes_per_eval,
        }
    else:
        p = cfg.ppo
        out["ppo"] = {
            "learning_rate": p.learning_rate,
            "n_epochs": p.n_epochs,
            "minibatch_size": p.minibatch_size,
            "batch_env_steps": p.batch_env_steps,
            "gamma": p.gamma,
            "gae_lambda": p.gae_lambda,
            "clip_epsilon": p.clip_epsilon,
            "kl_beta_init": p.kl_beta_init,
            "kl_target": p.kl_target,
            "value_loss_coeff": p.value_loss_coeff,
            "standardize_advantages": p.standardize_advantages,
            "use_critic": p.use_critic,
        }
    return out


def config_from_dict(data: dict, output_dir: Path | None = None) -> RunConfig:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {version!r}")
    env = EnvConfig(**data["env"]) if data.get("env") is not None else None
    # Partial algorithm sections override that algorithm's defaults, so a
    # sparse config keeps e.g. the architecture-specific learning rate.
    ppo = None
    if data.get("ppo") is not None:
        ppo = replace(default_ppo_config(data["algorithm"]), **data["ppo"])
    cmaes = None
    if data.get("cmaes") is not None:
        cmaes = replace(CmaesConfig(), **data["cmaes"])
    return RunConfig(
        algorithm=data["algorithm"],
        p=data["p"],
        episode_budget=data["episode_budget"],
        seed=data["seed"],
        reeval_episodes=data.get("reeval_episodes", 1000),
        p_eval=data.get("p_eval", 1.0),
        output_dir=output_dir,
        env=env,
        ppo=ppo,
        cmaes=cmaes,
    )


def save_record(record: RunRecord, out_dir: Path) -> None:
    """Write the run directory; status.json last so partial writes are
    distinguishable from completed runs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(record.config), fh, indent=2)
        fh.write("\n")
    with open(out_dir / "curve.csv", "w", encoding="utf-8") as fh:
        fh.write("episode_index,mean_return,env_steps\n")
        for point in record.curve:
            fh.write(
                f"{point.episode_index},{point.mean_return!r},{point.env_steps}\n"
            )
    record.final_policy.save(out_dir / "policy.bin")
    with open(out_dir / "reeval.csv", "w", encoding="utf-8") as fh:
        fh.write("episode,return\n")
        for i, score in enumerate(record.reeval_scores):
            fh.write(f"{i},{score!r}\n")
    status = {
        "status": "failed" if record.failed else "complete",
        "wall_time": record.wall_time,
        "episodes_run": record.episodes_run,
        "env_steps": record.env_steps,
        "truncated_at": record.truncated_at,
    }
    with open(out_dir / "status.json", "w", encoding="utf-8") as fh:
        json.dump(status, fh, indent=2)
        fh.write("\n")


def load_record(out_dir: Path) -> RunRecord:
    out_dir = Path(out_dir)
    with open(out_dir / "config.json", encoding="utf-8") as fh:
        cfg = config_from_dict(json.load(fh), output_dir=out_dir)
    curve = []
    with open(out_dir / "curve.csv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            idx, ret, steps = line.rstrip("\n").split(",")
            curve.append(CurvePoint(int(idx), float(ret), int(steps)))
    policy = ParamVector.load(out_dir / "policy.bin")
    scores = []
    with open(out_dir / "reeval.csv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            scores.append(float(line.rstrip("\n").split(",")[1]))
    with open(out_dir / "status.json", encoding="utf-8") as fh:
        status = json.load(fh)
    return RunRecord(
        config=cfg,
        curve=curve,
        final_policy=policy,
        reeval_scores=scores,
        wall_time=status["wall_time"],
        episodes_run=status["episodes_run"],
        env_steps=status["env_steps"],
        failed=status["status"] == "failed",
        truncated_at=status.get("truncated_at"),
    )


def run_complete(out_dir: Path) -> bool:
    status_path = Path(out_dir) / "status.json"
    if not status_path.exists():
        return False
    with open(status_path, encoding="utf-8") as fh:
        return json.load(fh)["status"] in ("complete", "failed")


def _cell_dir(out_root: Path, algorithm: str, p: float, run_index: int) -> Path:
    return Path(out_root) / f"{algorithm}_p{round(p * 1000):04d}_run{run_index:02d}"


def run_grid(
    algorithms: list[str],
    p_values: list[float],
    runs_per_cell: int,
    base_seed: int,
    episode_budget: int,
    out_root: Path,
    workers: int = 1,
    reeval_episodes: int = 1000,
) -> list[RunRecord]:
    """Dispatch the (algorithm x p x run) grid, resuming completed runs.

    Failed dispatches are reported on stderr and skipped; surviving
    records are returned.
    """
    if not algorithms or not p_values or runs_per_cell < 1:
        raise ValueError("grid must name algorithms, p values, and >= 1 run")
    pending: list[RunConfig] = []
    records: list[RunRecord] = []
    for algorithm in algorithms:
        for p in p_values:
            for run_index in range(runs_per_cell):
                out_dir = _cell_dir(out_root, algorithm, p, run_index)
                if run_complete(out_dir):
                    records.append(load_record(out_dir))
                    continue
                pending.append(
                    RunConfig(
                        algorithm=algorithm,
                        p=p,
                        episode_budget=episode_budget,
                        seed=derive_seed(base_seed, algorithm, p, run_index),
                        reeval_episodes=reeval_episodes,
                        output_dir=out_dir,
                    )
                )
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_single, cfg): cfg for cfg in pending}
            for future, cfg in futures.items():
                try:
                    records.append(future.result())
                except Exception as exc:  # noqa: BLE001 - cell isolation
                    print(
                        f"run failed: {cfg.algorithm} p={cfg.p} "
                        f"seed={cfg.seed}: {exc}",
                        file=sys.stderr,
                    )
    else:
        for cfg in pending:
            try:
                records.append(run_single(cfg))
            except Exception as exc:  # noqa: BLE001 - cell isolation
                print(
                    f"run failed: {cfg.algorithm} p={cfg.p} seed={cfg.seed}: {exc}",
                    file=sys.stderr,
                )
    return records


class TimingProbe(NamedTuple):
    ms_per_step: float
    env_steps: int
    updates: int


def step_timing_probe(
    algorithm: str,
    p: float,
    seconds: float,
    policy: ParamVector | None = None,
) -> TimingProbe:
    """Run the live training loop for a wall-clock budget and report the
    mean per-step cost plus the optimizer invocation count.

    For the evolutionary learner an update is one generation ranking
    (tell); for the gradient learners it is one batch update. A policy
    seeds the search mean / initial parameters, so probes can pin episode
    lengths with crafted policies.
    """
    rng = np.random.default_rng(0)
    env_cfg = EnvConfig(p=p)
    deadline = time.perf_counter() + seconds
    env_steps = 0
    updates = 0
    if algorithm == "CMAES":
        cfg = CmaesConfig()
        state = init_state(cfg)
        if policy is not None:
            state.mean = np.asarray(policy.values, dtype=np.float64).copy()
        started = time.perf_counter()
        while time.perf_counter() < deadline:
            genomes = ask(state, rng)
            fits = []
            for genome in genomes:
                fitness, steps = evaluate_genome_with_steps(genome, env_cfg, rng)
                fits.append(fitness)
                env_steps += steps
            tell(state, genomes, np.asarray(fits))
            updates += 1
        elapsed = time.perf_counter() - started
    else:
        pv = policy if policy is not None else init_params(algorithm, rng)
        ppo_cfg = default_ppo_config(algorithm)
        kl_state = KlPenaltyState(ppo_cfg.kl_beta_init)
        started = time.perf_counter()
        while time.perf_counter() < deadline:
            batch = collect_rollout(pv, env_cfg, ppo_cfg, rng)
            env_steps += batch.env_steps
            ppo_update(pv, batch, kl_state, ppo_cfg, rng)
            updates += 1
        elapsed = time.perf_counter() - started
    return TimingProbe(elapsed * 1000.0 / max(env_steps, 1), env_steps, updates)
