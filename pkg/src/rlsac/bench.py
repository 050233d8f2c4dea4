"""Iteration-matched RANSAC, the exhaustive oracle, metrics and the evaluation harness."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .agent import SELECTORS, GraphNet, policy_forward, scene_graph
from .env import (
    BestTracker,
    ConsensusEnv,
    ContractError,
    EpisodeConfig,
    UsedSetRegistry,
    finalize_scene,
    score,
    solve_minimal,
    task_error,
)
from .geometry import DegenerateSampleError
from .scenes import LINE_TASK, SceneData, derive_seed

MAA_STEPS = 20
TOLERANCE = {LINE_TASK: 0.5, "fundamental": 10.0}


class OracleTooLargeError(ValueError):
    pass


@dataclass
class EvalConfig:
    episodes_per_scene: int = 10
    steps_per_episode: int = 14
    sampling_mode: str = "max"
    epsilon: float | None = None
    seed: int = 0
    timing: bool = False
    record_steps: bool = False

    @property
    def budget(self) -> int:
        return self.episodes_per_scene * (self.steps_per_episode + 1)


@dataclass
class RunResult:
    scene_id: int
    method: str
    outlier_rate: float
    error_deg: float
    best_inlier_ratio: float
    hypotheses_used: int
    wall_ms: float | None = None
    rotation_deg: float | None = None
    translation_deg: float | None = None
    step_log: list = field(default_factory=list, repr=False)


@dataclass
class Summary:
    method: str
    outlier_rate: float
    maa: float
    median_deg: float
    n_scenes: int
    extra: dict = field(default_factory=dict)


# -- metrics ------------------------------------------------------------------------

def maa(errors: Sequence[float], tolerance: float) -> float:
    """Average over ``K`` thresholds ``j * tol / K`` of the fraction of errors strictly below."""
    err = np.asarray(errors, dtype=np.float64)
    if err.size == 0:
        raise ContractError("mAA of an empty error list")
    if tolerance <= 0:
        raise ContractError("tolerance must be positive")
    thresholds = tolerance * np.arange(1, MAA_STEPS + 1) / MAA_STEPS
    return float((err[None, :] < thresholds[:, None]).mean(axis=1).mean())


def median(values: Sequence[float]) -> float:
    """Lower median."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ContractError("median of an empty list")
    return float(v[(v.size - 1) // 2])


# -- baselines -------------------------------------------------------------------------

def ransac_run(scene: SceneData, budget: int, rng: np.random.Generator | None = None,
               epsilon: float | None = None, forced_samples=None):
    """Classic RANSAC: ``budget`` uniform draws, duplicates allowed, degenerates still cost a draw.

    Returns ``(polished hypothesis or None, best inlier ratio, draws used)``.
    ``forced_samples`` replaces the random draws (used for exhaustive checks).
    """
    if budget < 1:
        raise ContractError("budget must be >= 1")
    tracker = BestTracker()
    n, m = scene.n, scene.m
    draws = forced_samples if forced_samples is not None else (
        rng.choice(n, m, replace=False) for _ in range(budget))
    used = 0
    for sample in draws:
        if used >= budget:
            break
        used += 1
        try:
            hyp = solve_minimal(scene, sample)
        except DegenerateSampleError:
            continue
        _, mask = score(scene, hyp, epsilon)
        tracker.update(hyp, mask.sum() / n, mask, sample)
    if tracker.empty:
        return None, 0.0, used
    return finalize_scene(tracker, scene, epsilon), tracker.inlier_ratio, used


def exhaustive_oracle(scene: SceneData, epsilon: float | None = None, limit: int = 1_000_000):
    """Best raw hypothesis over every minimal set; ties go to the earliest in enumeration order."""
    total = math.comb(scene.n, scene.m)
    if total > limit:
        raise OracleTooLargeError(f"{total} minimal sets exceeds the limit of {limit}")
    best, best_ratio = None, -1.0
    for sample in combinations(range(scene.n), scene.m):
        try:
            hyp = solve_minimal(scene, sample)
        except DegenerateSampleError:
            continue
        _, mask = score(scene, hyp, epsilon)
        ratio = mask.sum() / scene.n
        if ratio > best_ratio:
            best, best_ratio = hyp, ratio
    return best, max(best_ratio, 0.0)


# -- evaluation -------------------------------------------------------------------------

def rlsac_run(scene: SceneData, policy: GraphNet, config: EvalConfig, rng: np.random.Generator):
    """``nu`` test-mode episodes sharing one registry and tracker.

    Returns ``(polished hypothesis, best raw ratio, hypotheses solved, step log)``.
    """
    ep_cfg = EpisodeConfig(psi_max_steps=config.steps_per_episode, epsilon=config.epsilon, train_mode=False)
    env = ConsensusEnv(scene, ep_cfg, UsedSetRegistry(), BestTracker())
    nbrs = scene_graph(scene, policy.config.k_neighbors)
    select = SELECTORS[config.sampling_mode]
    for _ in range(config.episodes_per_scene):
        state, _ = env.reset(rng)
        while not env.done:
            probs, _ = policy_forward(policy, state, nbrs)
            env.step(select(probs, scene.m, env.registry, rng))
    hyp = finalize_scene(env.tracker, scene, config.epsilon)
    return hyp, env.tracker.inlier_ratio, env.hypotheses_solved, env.log


def _one_scene(args) -> RunResult:
    scene_id, scene, method, policy, config = args
    rng = np.random.default_rng(derive_seed(config.seed, scene_id))
    start = time.perf_counter()
    steps = []
    if method == "ransac":
        hyp, ratio, used = ransac_run(scene, config.budget, rng, config.epsilon)
    else:
        hyp, ratio, used, steps = rlsac_run(scene, policy, config, rng)
    wall = (time.perf_counter() - start) * 1000.0 if config.timing else None
    err = task_error(scene, hyp)
    return RunResult(scene_id, method, scene.outlier_rate, err["error"], float(ratio), int(used), wall,
                     err.get("rotation"), err.get("translation"),
                     steps if config.record_steps else [])


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("RLSAC_THREADS", "1")))
    except ValueError:
        return 1


def run_method(scenes: Sequence[SceneData], method: str, config: EvalConfig,
               policy: GraphNet | None = None, scene_ids: Sequence[int] | None = None) -> list[RunResult]:
    """Per-scene results in scene order. ``method`` is ``"ransac"`` or an RLSAC label (needs ``policy``)."""
    if method != "ransac" and policy is None:
        raise ContractError(f"method {method!r} needs a policy")
    ids = list(scene_ids) if scene_ids is not None else list(range(len(scenes)))
    jobs = [(i, s, method, policy, config) for i, s in zip(ids, scenes)]
    workers = min(eval_threads(), max(1, len(jobs)))
    if workers == 1:
        return [_one_scene(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_one_scene, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def summarize(results: Sequence[RunResult], task: str, method: str | None = None,
              outlier_rate: float | None = None) -> Summary:
    if not results:
        raise ContractError("no results to summarise")
    tol = TOLERANCE[task]
    errs = [r.error_deg for r in results]
    extra = {}
    if task != LINE_TASK:
        rot = [r.rotation_deg for r in results]
        tr = [r.translation_deg for r in results]
        extra = {"maa_rotation": maa(rot, tol), "maa_translation": maa(tr, tol),
                 "median_rotation_deg": median(rot), "median_translation_deg": median(tr)}
    return Summary(method or results[0].method,
                   results[0].outlier_rate if outlier_rate is None else outlier_rate,
                   maa(errs, tol), median(errs), len(results), extra)


def evaluate(scenes: Sequence[SceneData], config: EvalConfig, policy: GraphNet | None = None,
             rlsac_label: str = "rlsac", include_ransac: bool = True):
    """RLSAC (if a policy is given) and the budget-matched RANSAC baseline on the same scenes.

    Returns ``(results, summaries)``; results are grouped by method, scene order inside.
    """
    if not scenes:
        raise ContractError("empty scene set")
    task = scenes[0].task
    results: list[RunResult] = []
    summaries: list[Summary] = []
    methods = ([rlsac_label] if policy is not None else []) + (["ransac"] if include_ransac else [])
    for method in methods:
        rows = run_method(scenes, method, config, policy)
        results.extend(rows)
        summaries.append(summarize(rows, task, method))
    return results, summaries
