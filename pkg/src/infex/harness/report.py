"""Aggregation of agent learning curves across seeds and exploration modes."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

FINAL_EPISODES = 10


class EmptyRun(Exception):
    pass


def seed_summary(curve, budget: int) -> dict:
    """Final return (mean of the last episodes) and steps to first reward, censored at ``budget``."""
    returns = [float(row[3]) for row in curve]
    firsts = [row[4] for row in curve if row[4] != ""]
    first = int(firsts[0]) if firsts else int(budget)
    final = float(np.mean(returns[-FINAL_EPISODES:])) if returns else 0.0
    return {"final_return": final, "steps_to_first_reward": first, "reached": bool(firsts),
            "episodes": len(returns)}


def read_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["seed"]), int(r["env_step"]), int(r["episode_index"]), float(r["episode_return"]),
             r["steps_to_first_reward"]) for r in rows]


def _budget(directory: Path):
    cfg = directory / "config.json"
    if cfg.exists():
        return int(json.loads(cfg.read_text())["agent.budget"])
    return None


def iqr(values):
    q1, q3 = np.percentile(values, [25, 75])
    return float(q3 - q1)


def sign_test(a, b) -> dict:
    """Paired two-sided sign test of ``a < b``; ties are dropped."""
    wins = sum(x < y for x, y in zip(a, b))
    losses = sum(x > y for x, y in zip(a, b))
    n = wins + losses
    if n == 0:
        return {"wins": 0, "losses": 0, "p_value": 1.0}
    k = min(wins, losses)
    p = min(1.0, 2 * sum(math.comb(n, i) for i in range(k + 1)) / 2 ** n)
    return {"wins": wins, "losses": losses, "p_value": p}


def collect(run: Path) -> dict:
    """``{mode: {seed: summary}}`` from ``run/<mode>/curve_seed*.csv``."""
    run = Path(run)
    modes = {}
    dirs = [d for d in sorted(run.iterdir()) if d.is_dir()] if run.is_dir() else []
    if run.is_dir() and list(run.glob("curve_seed*.csv")):
        dirs = [run]
    for d in dirs:
        curves = sorted(d.glob("curve_seed*.csv"))
        if not curves:
            continue
        budget = _budget(d)
        per_seed = {}
        for path in curves:
            rows = read_curve(path)
            seed = int(path.stem.removeprefix("curve_seed"))
            b = budget if budget is not None else (rows[-1][1] if rows else 0)
            per_seed[seed] = seed_summary(rows, b)
        mode = d.name
        cfg = d / "config.json"
        if cfg.exists():
            mode = json.loads(cfg.read_text()).get("policy.mode", mode)
        modes[mode] = per_seed
    return modes


def report(run) -> dict:
    modes = collect(run)
    if not modes:
        raise EmptyRun(f"no learning curves under {run}")
    out = {"modes": {}}
    for mode, per_seed in sorted(modes.items()):
        firsts = [s["steps_to_first_reward"] for s in per_seed.values()]
        finals = [s["final_return"] for s in per_seed.values()]
        out["modes"][mode] = {
            "seeds": len(per_seed),
            "median_steps_to_first_reward": float(np.median(firsts)),
            "iqr_steps_to_first_reward": iqr(firsts),
            "median_final_return": float(np.median(finals)),
            "iqr_final_return": iqr(finals),
            "reached": int(sum(s["reached"] for s in per_seed.values())),
        }
    if "informed-hash" in modes and "random" in modes:
        a, b = modes["informed-hash"], modes["random"]
        seeds = sorted(set(a) & set(b))
        out["sign_test_steps_to_first_reward"] = sign_test(
            [a[s]["steps_to_first_reward"] for s in seeds], [b[s]["steps_to_first_reward"] for s in seeds])
    return out
