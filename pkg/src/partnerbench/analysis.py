"""Statistical post-processing and policy probes.

Summary tables (median / MAD / mean / std of re-evaluation scores), a
hand-written two-tailed Mann-Whitney U test, bootstrap confidence bands
for learning curves, and behavioural probes of frozen policies
(investment distribution, per-partner acceptance profile). Table and
curve emission writes plain CSV plus self-contained matplotlib scripts
that consume only the CSVs.
"""

from __future__ import annotations

import math
from collections import Counter
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .cmaes import choice_accept_probability, decode_investment
from .env import EnvConfig
from .harness import RunRecord
from .nets import (
    GaussianHead,
    ParamVector,
    log_softmax,
    net_forward,
    sample_investment,
)

__all__ = [
    "AcceptanceProfile",
    "CurveBand",
    "SummaryRow",
    "UTestResult",
    "aggregate_curves",
    "emit_curve_csvs",
    "emit_plot_scripts",
    "emit_probe_csvs",
    "emit_summary_tables",
    "emit_tables_and_plotdata",
    "mann_whitney_u",
    "median_mad",
    "probe_acceptance",
    "probe_investment",
]


class SummaryRow(NamedTuple):
    p: float
    algorithm: str
    median: float
    mad: float
    mean: float
    std: float
    n: int


class UTestResult(NamedTuple):
    u_statistic: float
    p_value: float
    n1: int
    n2: int
    comparison: str


class CurveBand(NamedTuple):
    episode_index: int
    median: float
    ci_low: float
    ci_high: float


class AcceptanceProfile(NamedTuple):
    partner_investment: tuple[float, ...]
    accept_probability: tuple[float, ...]
    mean_investment: float


def median_mad(samples) -> tuple[float, float, float, float]:
    """(median, MAD, mean, std). Median is the midpoint of the middle two
    for even n; MAD is unscaled median absolute deviation; std uses the
    n-1 denominator."""
    values = np.asarray(samples, dtype=np.float64)
    if values.size == 0:
        raise ValueError("median_mad needs a non-empty sample")
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    mean = float(values.mean())
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return med, mad, mean, std


def _midranks(pooled: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values sharing the mean of their rank block."""
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size, dtype=np.float64)
    at = 0
    while at < pooled.size:
        end = at
        while end + 1 < pooled.size and pooled[order[end + 1]] == pooled[order[at]]:
            end += 1
        ranks[order[at : end + 1]] = (at + end) / 2.0 + 1.0
        at = end + 1
    return ranks


def mann_whitney_u(sample_a, sample_b, comparison: str = "") -> UTestResult:
    """Two-tailed Mann-Whitney U with midrank ties.

    Reports min(U_a, U_b). The p-value always uses the normal
    approximation with tie and continuity corrections, even for small
    samples; at complete separation with n1 = n2 = 24 this gives
    ~3.1e-9 where exact enumeration would give ~5e-14.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u_a = float(ranks[:n1].sum()) - n1 * (n1 + 1) / 2.0
    u_b = n1 * n2 - u_a
    u = min(u_a, u_b)

    n = n1 + n2
    tie_term = sum(t**3 - t for t in Counter(pooled.tolist()).values())
    variance = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if variance <= 0.0:
        # Every pooled value identical: no evidence of separation.
        return UTestResult(u, 1.0, n1, n2, comparison)
    mu = n1 * n2 / 2.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(variance)
    p_value = min(math.erfc(z / math.sqrt(2.0)), 1.0)
    return UTestResult(u, p_value, n1, n2, comparison)


def aggregate_curves(
    records: list[RunRecord],
    n_boot: int = 2000,
    seed: int = 0,
) -> list[CurveBand]:
    """Per grid point: median across runs and a bootstrap 95% CI for the
    median (percentile method, seeded)."""
    if not records:
        return []
    grid = [pt.episode_index for pt in records[0].curve]
    matrix = np.empty((len(records), len(grid)))
    for i, rec in enumerate(records):
        if [pt.episode_index for pt in rec.curve] != grid:
            raise ValueError("records do not share the episode grid")
        matrix[i] = [pt.mean_return for pt in rec.curve]
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(records), size=(n_boot, len(records)))
    boot_medians = np.median(matrix[idx], axis=1)
    lo = np.percentile(boot_medians, 2.5, axis=0)
    hi = np.percentile(boot_medians, 97.5, axis=0)
    med = np.median(matrix, axis=0)
    return [
        CurveBand(g, float(med[j]), float(lo[j]), float(hi[j]))
        for j, g in enumerate(grid)
    ]


def _ppo_investment_draw(policy: ParamVector, rng: np.random.Generator) -> float:
    w = policy.segment("invest_actor")
    head = GaussianHead(float(w[0]), float(w[1]))
    return sample_investment(head, rng).value


def _ppo_accept_prob(policy: ParamVector, x: float, y: float) -> float:
    obs = np.array([[x, y]])
    logits, _ = net_forward(
        policy.network("choice_actor"), policy.segment("choice_actor"), obs
    )
    return float(np.exp(log_softmax(logits)[0, 0]))


def probe_investment(
    policy: ParamVector, algorithm: str, rng: np.random.Generator
) -> list[float]:
    """1000 episode-start investments. The evolutionary policy's
    investment module is deterministic, so its draws are 1000 copies."""
    if algorithm == "CMAES":
        return [decode_investment(policy.values)] * 1000
    return [_ppo_investment_draw(policy, rng) for _ in range(1000)]


def probe_acceptance(
    policy: ParamVector, algorithm: str, rng: np.random.Generator
) -> AcceptanceProfile:
    """Present each partner grid value 100 times; the focal investment is
    drawn fresh per presentation for stochastic investment modules."""
    grid = EnvConfig().partner_grid
    deterministic = algorithm == "CMAES"
    fixed_x = decode_investment(policy.values) if deterministic else 0.0
    freqs = []
    investments = []
    for y in grid:
        accepted = 0
        for _ in range(100):
            x = fixed_x if deterministic else _ppo_investment_draw(policy, rng)
            investments.append(x)
            if deterministic:
                prob = choice_accept_probability(policy.values, x, y)
            else:
                prob = _ppo_accept_prob(policy, x, y)
            accepted += rng.random() < prob
        freqs.append(accepted / 100.0)
    return AcceptanceProfile(grid, tuple(freqs), float(np.mean(investments)))


def _fmt(value: float) -> str:
    """Shortest decimal text that round-trips the float exactly."""
    return repr(float(value))


def _cells(records: list[RunRecord]) -> dict[tuple[float, str], list[RunRecord]]:
    cells: dict[tuple[float, str], list[RunRecord]] = {}
    for rec in records:
        cells.setdefault((rec.config.p, rec.config.algorithm), []).append(rec)
    return cells


def _cell_tag(algorithm: str, p: float) -> str:
    return f"{algorithm}_p{round(p * 1000):04d}"


def _cell_scores(cells, keys) -> dict[tuple[float, str], list[float]]:
    """One score per run: the mean of its re-evaluation returns."""
    return {
        key: [float(np.mean(r.reeval_scores)) for r in cells[key] if r.reeval_scores]
        for key in keys
    }


def emit_summary_tables(records: list[RunRecord], out_dir) -> list[Path]:
    """summary.csv (median/MAD/mean/std per cell) and utests.csv (pairwise
    two-tailed U tests per p). Rows ascend in p, algorithms alphabetical."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = _cells(records)
    keys = sorted(cells, key=lambda k: (k[0], k[1]))
    scores = _cell_scores(cells, keys)

    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("p,algorithm,median,mad,mean,std,n\n")
        for key in keys:
            if not scores[key]:
                continue
            med, mad, mean, std = median_mad(scores[key])
            row = SummaryRow(key[0], key[1], med, mad, mean, std, len(scores[key]))
            fh.write(
                f"{_fmt(row.p)},{row.algorithm},{_fmt(row.median)},{_fmt(row.mad)},"
                f"{_fmt(row.mean)},{_fmt(row.std)},{row.n}\n"
            )

    utest_path = out_dir / "utests.csv"
    with open(utest_path, "w", encoding="utf-8") as fh:
        fh.write("comparison,p,u_statistic,p_value,n1,n2\n")
        for p in sorted({key[0] for key in keys}):
            algs = sorted(key[1] for key in keys if key[0] == p)
            for i, alg_a in enumerate(algs):
                for alg_b in algs[i + 1 :]:
                    sa, sb = scores[(p, alg_a)], scores[(p, alg_b)]
                    if not sa or not sb:
                        continue
                    label = f"{alg_a} vs {alg_b}"
                    res = mann_whitney_u(sa, sb, comparison=label)
                    fh.write(
                        f"{label},{_fmt(p)},{_fmt(res.u_statistic)},"
                        f"{_fmt(res.p_value)},{res.n1},{res.n2}\n"
                    )
    return [summary_path, utest_path]


def emit_curve_csvs(records: list[RunRecord], out_dir) -> list[Path]:
    """One aggregated curve CSV per (algorithm, p) cell."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    cells = _cells(records)
    for key in sorted(cells, key=lambda k: (k[0], k[1])):
        p, algorithm = key
        path = out_dir / f"curve_{_cell_tag(algorithm, p)}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("episode_index,median,ci_low,ci_high\n")
            curved = [r for r in cells[key] if r.curve]
            for band in aggregate_curves(curved):
                fh.write(
                    f"{band.episode_index},{_fmt(band.median)},"
                    f"{_fmt(band.ci_low)},{_fmt(band.ci_high)}\n"
                )
        written.append(path)
    return written


def emit_probe_csvs(records: list[RunRecord], out_dir) -> list[Path]:
    """Investment and acceptance probe CSVs per cell, seeded per run so
    re-emission is bit-identical. Failed runs are skipped."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    cells = _cells(records)
    for key in sorted(cells, key=lambda k: (k[0], k[1])):
        p, algorithm = key
        tag = _cell_tag(algorithm, p)
        inv_path = out_dir / f"probe_investment_{tag}.csv"
        acc_path = out_dir / f"probe_acceptance_{tag}.csv"
        with open(inv_path, "w", encoding="utf-8") as inv_fh, open(
            acc_path, "w", encoding="utf-8"
        ) as acc_fh:
            inv_fh.write("run,investment\n")
            acc_fh.write("run,partner_investment,accept_probability,mean_investment\n")
            for run_i, rec in enumerate(cells[key]):
                if rec.failed:
                    continue
                rng = np.random.default_rng(
                    np.random.SeedSequence((9157, round(p * 1000), run_i))
                )
                for x in probe_investment(rec.final_policy, algorithm, rng):
                    inv_fh.write(f"{run_i},{_fmt(x)}\n")
                profile = probe_acceptance(rec.final_policy, algorithm, rng)
                for y, freq in zip(
                    profile.partner_investment, profile.accept_probability
                ):
                    acc_fh.write(
                        f"{run_i},{_fmt(y)},{_fmt(freq)},"
                        f"{_fmt(profile.mean_investment)}\n"
                    )
        written.extend([inv_path, acc_path])
    return written


def emit_plot_scripts(out_dir) -> list[Path]:
    """Self-contained matplotlib scripts that consume only the CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in _PLOT_SCRIPTS.items():
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written


def emit_tables_and_plotdata(records: list[RunRecord], out_dir) -> list[Path]:
    """Write summary / U-test / curve / probe CSVs and the plot scripts.
    Returns the written paths."""
    return (
        emit_summary_tables(records, out_dir)
        + emit_curve_csvs(records, out_dir)
        + emit_probe_csvs(records, out_dir)
        + emit_plot_scripts(out_dir)
    )


_PLOT_SCRIPTS = {
    "plot_curves.py": '''\
"""Render learning-curve bands from curve_*.csv in this directory."""
import csv
import glob
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
fig, ax = plt.subplots(figsize=(8, 5))
for path in sorted(glob.glob(os.path.join(here, "curve_*.csv"))):
    label = os.path.basename(path)[len("curve_"):-len(".csv")]
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        continue
    x = [int(r["episode_index"]) for r in rows]
    med = [float(r["median"]) for r in rows]
    lo = [float(r["ci_low"]) for r in rows]
    hi = [float(r["ci_high"]) for r in rows]
    line, = ax.plot(x, med, label=label)
    ax.fill_between(x, lo, hi, alpha=0.2, color=line.get_color())
ax.set_xlabel("episodes")
ax.set_ylabel("mean return")
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(os.path.join(here, "curves.png"), dpi=150)
print("wrote curves.png")
''',
    "plot_summary.py": '''\
"""Render final-performance medians per condition from summary.csv."""
import csv
import os
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(here, "summary.csv"), newline="") as fh:
    rows = list(csv.DictReader(fh))
series = defaultdict(list)
for r in rows:
    series[r["algorithm"]].append((float(r["p"]), float(r["median"]), float(r["mad"])))
fig, ax = plt.subplots(figsize=(6, 4))
for algorithm in sorted(series):
    pts = sorted(series[algorithm])
    ax.errorbar(
        [p for p, _, _ in pts],
        [m for _, m, _ in pts],
        yerr=[d for _, _, d in pts],
        marker="o",
        capsize=3,
        label=algorithm,
    )
ax.set_xscale("log")
ax.set_xlabel("cooperative partner probability p")
ax.set_ylabel("median re-evaluation return")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "summary.png"), dpi=150)
print("wrote summary.png")
''',
    "plot_probes.py": '''\
"""Render investment histograms and acceptance profiles from probe CSVs."""
import csv
import glob
import os
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
inv_paths = sorted(glob.glob(os.path.join(here, "probe_investment_*.csv")))
acc_paths = sorted(glob.glob(os.path.join(here, "probe_acceptance_*.csv")))
if inv_paths:
    fig, axes = plt.subplots(
        len(inv_paths), 1, figsize=(6, 2.2 * len(inv_paths)), squeeze=False
    )
    for ax, path in zip(axes[:, 0], inv_paths):
        with open(path, newline="") as fh:
            vals = [float(r["investment"]) for r in csv.DictReader(fh)]
        ax.hist(vals, bins=60, range=(0.0, 15.0))
        ax.set_title(os.path.basename(path)[len("probe_investment_"):-4], fontsize=8)
        ax.set_xlim(0.0, 15.0)
    fig.tight_layout()
    fig.savefig(os.path.join(here, "probe_investment.png"), dpi=150)
    print("wrote probe_investment.png")
if acc_paths:
    fig, axes = plt.subplots(
        len(acc_paths), 1, figsize=(6, 2.2 * len(acc_paths)), squeeze=False
    )
    for ax, path in zip(axes[:, 0], acc_paths):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        profiles = defaultdict(list)
        mean_inv = {}
        for r in rows:
            profiles[r["run"]].append(
                (float(r["partner_investment"]), float(r["accept_probability"]))
            )
            mean_inv[r["run"]] = float(r["mean_investment"])
        for run, pts in sorted(profiles.items()):
            pts.sort()
            ax.plot([y for y, _ in pts], [f for _, f in pts], alpha=0.6)
            ax.axvline(mean_inv[run], color="green", alpha=0.4, linewidth=1)
        ax.set_title(os.path.basename(path)[len("probe_acceptance_"):-4], fontsize=8)
        ax.set_xlim(0.0, 15.0)
        ax.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    fig.savefig(os.path.join(here, "probe_acceptance.png"), dpi=150)
    print("wrote probe_acceptance.png")
''',
}
