"""Monte Carlo campaigns over independent seeds."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
from scipy import stats

from .run import Setup, prepare, run_scenario
from .scenario import Scenario

THREADS_ENV = "FLEET_OBSERVER_THREADS"


def worker_count(trials: int) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
    else:
        n = min(4, os.cpu_count() or 1)
    return max(1, min(n, trials))


def trial_seeds(base_seed: int, trials: int) -> list[int]:
    return [base_seed + t for t in range(trials)]


def summarize(values: Sequence[float], level: float = 0.95) -> dict:
    """Mean with a Student-t confidence interval; ``None`` entries are dropped."""
    x = np.array([v for v in values if v is not None], dtype=float)
    if x.size == 0:
        return {"n": 0, "mean": None, "std": None, "ci_low": None, "ci_high": None}
    mean = float(x.mean())
    if x.size == 1:
        return {"n": 1, "mean": mean, "std": 0.0, "ci_low": mean, "ci_high": mean}
    std = float(x.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2.0, x.size - 1)) * std / np.sqrt(x.size)
    return {"n": int(x.size), "mean": mean, "std": std, "ci_low": mean - half, "ci_high": mean + half}


def trial_summary(metrics: dict, faulty: list[int]) -> dict:
    """Scalar per-trial figures that the campaign aggregates."""
    out = {"mse": metrics["mse"]["average"]}
    for label, d in metrics["detectors"].items():
        rates = d["alarm_rate_post"]
        clean = [r for i, r in enumerate(rates) if i not in faulty and r is not None]
        out[f"{label}.far"] = float(np.mean(clean)) if clean else None
        if faulty:
            out[f"{label}.detection_rate"] = float(np.mean([rates[i] for i in faulty]))
            delays = [d["detection_delay"][str(i)] for i in faulty]
            out[f"{label}.detection_delay"] = (float(np.mean(delays)) if all(v is not None for v in delays)
                                               else None)
    return out


def monte_carlo(s: Scenario, trials: int, seeds: Sequence[int] | None = None,
                setup: Setup | None = None) -> dict:
    """Run ``trials`` independent seeds and aggregate mean / 95% CI per metric.

    The network, gain and bounds are fixed by the scenario and shared; each
    trial draws its own truth and measurement noise.  Results are keyed by
    seed, so the aggregate does not depend on completion order.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    seeds = list(seeds) if seeds is not None else trial_seeds(s.seed, trials)
    if len(seeds) != trials or len(set(seeds)) != trials:
        raise ValueError("need one distinct seed per trial")
    setup = setup or prepare(s)
    faulty = s.faulty_cavs()

    def one(seed: int) -> tuple[int, dict]:
        return seed, run_scenario(s, setup, seed=seed).metrics

    with ThreadPoolExecutor(max_workers=worker_count(trials)) as pool:
        results = dict(pool.map(one, seeds))
    per_trial = {seed: trial_summary(results[seed], faulty) for seed in sorted(results)}
    keys = sorted({k for t in per_trial.values() for k in t})
    aggregate = {k: summarize([per_trial[seed].get(k) for seed in sorted(per_trial)]) for k in keys}
    return {"trials": trials, "seeds": sorted(per_trial), "aggregate": aggregate,
            "per_trial": {str(k): v for k, v in per_trial.items()},
            "metrics": {str(k): results[k] for k in sorted(results)}}
