"""Sample-consensus environment: actions are minimal sets, rewards inlier ratios."""

from __future__ import annotations

import math
from itertools import combinations
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DegenerateSampleError,
    Line2D,
    PoseRecoveryError,
    fit_fundamental_8pt,
    fit_line_2pts,
    line_angular_error,
    pose_errors,
    pose_from_fundamental,
    refine_line_tls,
)
from .scenes import LINE_TASK, SceneData

RESIDUAL_CLIP = 5.0

RUNNING = "running"
INLIERS_UNCHANGED = "inliers_unchanged"
NO_IMPROVEMENT = "no_improvement"
MAX_STEPS = "max_steps"


class SceneDegenerateError(RuntimeError):
    pass


class ExhaustionError(RuntimeError):
    """Every minimal set of the scene has already been used."""


class ContractError(RuntimeError):
    pass


@dataclass
class EpisodeConfig:
    kappa: int = 2
    sigma_no_improve: int = 3
    psi_max_steps: int = 15
    epsilon: float | None = None  # None: use the scene's threshold
    train_mode: bool = True

    def __post_init__(self):
        for name in ("kappa", "sigma_no_improve", "psi_max_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class UsedSetRegistry:
    """Minimal sets already solved for the current scene (sorted index tuples)."""

    def __init__(self):
        self._used: set[tuple[int, ...]] = set()

    def __contains__(self, action) -> bool:
        return tuple(sorted(int(i) for i in action)) in self._used

    def __len__(self) -> int:
        return len(self._used)

    def add(self, action) -> None:
        self._used.add(tuple(sorted(int(i) for i in action)))

    def clear(self) -> None:
        self._used.clear()

    def __iter__(self):
        return iter(self._used)


@dataclass
class BestTracker:
    hypothesis: object = None
    inlier_ratio: float = -1.0
    inlier_mask: np.ndarray | None = None
    action: tuple[int, ...] | None = None

    def update(self, hypothesis, ratio: float, mask: np.ndarray, action) -> bool:
        if hypothesis is not None and ratio > self.inlier_ratio:
            self.hypothesis, self.inlier_ratio, self.inlier_mask = hypothesis, ratio, mask
            self.action = tuple(action)
            return True
        return False

    @property
    def empty(self) -> bool:
        return self.hypothesis is None


@dataclass
class State:
    """``N x (c + 3)`` matrix: data features | action (+-1) | residual/eps (clipped) | usage count."""

    matrix: np.ndarray

    @property
    def action_channel(self) -> np.ndarray:
        return self.matrix[:, -3]

    @property
    def residual_channel(self) -> np.ndarray:
        return self.matrix[:, -2]

    @property
    def history_channel(self) -> np.ndarray:
        return self.matrix[:, -1]


@dataclass
class StepOutcome:
    next_state: State
    reward: float
    hypothesis: object
    residuals: np.ndarray
    inlier_mask: np.ndarray
    inlier_count: int
    done: bool
    done_reason: str
    action: tuple[int, ...] = ()
    degenerate: bool = False


@dataclass
class EpisodeStats:
    """Per-episode trajectory of inlier counts/ratios (index 0 is the random start)."""

    counts: list[int] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    steps: int = 0


def state_features(scene: SceneData) -> np.ndarray:
    """Data channels of the state; line coordinates are mapped to [-1, 1]."""
    if scene.task == LINE_TASK:
        return scene.features / 5.0 - 1.0
    return scene.features


def solve_minimal(scene: SceneData, action) -> object:
    idx = np.asarray(action, dtype=np.int64)
    if scene.task == LINE_TASK:
        return fit_line_2pts(scene.points[idx[0]], scene.points[idx[1]])
    return fit_fundamental_8pt(scene.points[idx])


def score(scene: SceneData, hypothesis, epsilon: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    eps = scene.epsilon if epsilon is None else epsilon
    res = scene.residuals(hypothesis)
    return res, res <= eps


def encode_memory_channels(action, residuals, history, epsilon: float,
                           r_clip: float = RESIDUAL_CLIP) -> np.ndarray:
    """Action (+1 used / -1 not), clipped ``residual/epsilon``, incremented usage counts."""
    residuals = np.asarray(residuals, dtype=np.float64)
    n = len(residuals)
    idx = np.asarray(action, dtype=np.int64)
    out = np.empty((n, 3))
    out[:, 0] = -1.0
    out[idx, 0] = 1.0
    out[:, 1] = np.minimum(residuals / epsilon, r_clip)
    out[:, 2] = np.asarray(history, dtype=np.float64)
    out[idx, 2] += 1.0
    return out


def check_termination(stats: EpisodeStats, config: EpisodeConfig) -> str:
    """Termination reason after the latest step, or ``RUNNING``."""
    if config.train_mode:
        k = config.kappa
        c = stats.counts
        if len(c) > k and len(set(c[-(k + 1):])) == 1:
            return INLIERS_UNCHANGED
        s = config.sigma_no_improve
        r = stats.ratios
        if len(r) > s and max(r[-s:]) <= max(r[:-s]):
            return NO_IMPROVEMENT
    if stats.steps >= config.psi_max_steps:
        return MAX_STEPS
    return RUNNING


class ConsensusEnv:
    """One scene, possibly several episodes sharing the registry and tracker."""

    def __init__(self, scene: SceneData, config: EpisodeConfig | None = None,
                 registry: UsedSetRegistry | None = None, tracker: BestTracker | None = None):
        self.scene = scene
        self.config = config or EpisodeConfig()
        self.epsilon = scene.epsilon if self.config.epsilon is None else self.config.epsilon
        self.registry = registry if registry is not None else UsedSetRegistry()
        self.tracker = tracker if tracker is not None else BestTracker()
        self.data = state_features(scene)
        self.stats = EpisodeStats()
        self.state: State | None = None
        self.done = True
        self.hypotheses_solved = 0
        self.log: list[dict] = []
        self.episode = -1

    @property
    def m(self) -> int:
        return self.scene.m

    def _random_unused(self, rng: np.random.Generator) -> tuple[int, ...]:
        n, m = self.scene.n, self.m
        total = math.comb(n, m)
        if len(self.registry) >= total:
            raise ExhaustionError(f"all {total} minimal sets used")
        if total <= 100_000 and len(self.registry) > total // 2:
            free = [c for c in combinations(range(n), m) if c not in self.registry]
            return free[int(rng.integers(len(free)))]
        while True:
            cand = tuple(sorted(int(i) for i in rng.choice(n, m, replace=False)))
            if cand not in self.registry:
                return cand

    def _build_state(self, action, residuals, history) -> State:
        mem = encode_memory_channels(action, residuals, history, self.epsilon)
        return State(np.hstack([self.data, mem]))

    def _record(self, action, outcome: StepOutcome) -> None:
        self.log.append({"episode": self.episode, "step": self.stats.steps, "action": tuple(action),
                         "reward": outcome.reward, "inlier_count": outcome.inlier_count,
                         "done_reason": outcome.done_reason, "degenerate": outcome.degenerate,
                         "hypothesis": outcome.hypothesis})

    def reset(self, rng: np.random.Generator) -> tuple[State, StepOutcome]:
        """Start an episode from a random unused minimal set."""
        self.episode += 1
        self.stats = EpisodeStats()
        n = self.scene.n
        for _ in range(100):
            action = self._random_unused(rng)
            self.registry.add(action)
            self.hypotheses_solved += 1
            try:
                hyp = solve_minimal(self.scene, action)
            except DegenerateSampleError:
                continue
            break
        else:
            raise SceneDegenerateError("100 consecutive degenerate minimal sets")
        res, mask = score(self.scene, hyp, self.epsilon)
        count = int(mask.sum())
        self.state = self._build_state(action, res, np.zeros(n))
        self.stats.counts.append(count)
        self.stats.ratios.append(count / n)
        self.tracker.update(hyp, count / n, mask, action)
        self.done = False
        out = StepOutcome(self.state, count / n, hyp, res, mask, count, False, RUNNING, tuple(action))
        self._record(action, out)
        return self.state, out

    def step(self, action) -> StepOutcome:
        if self.done or self.state is None:
            raise ContractError("step() called on a finished episode; call reset()")
        action = tuple(sorted(int(i) for i in action))
        if len(action) != self.m or len(set(action)) != self.m:
            raise ContractError(f"action must hold {self.m} distinct indices, got {action}")
        if action in self.registry:
            raise ContractError(f"minimal set {action} was already used")
        self.registry.add(action)
        self.hypotheses_solved += 1
        n = self.scene.n
        prev = self.state
        self.stats.steps += 1
        try:
            hyp = solve_minimal(self.scene, action)
        except DegenerateSampleError:
            hyp = None
        if hyp is None:
            mem = encode_memory_channels(action, np.zeros(n), prev.history_channel, self.epsilon)
            mem[:, 1] = prev.residual_channel
            self.state = State(np.hstack([self.data, mem]))
            reason = MAX_STEPS if self.stats.steps >= self.config.psi_max_steps else RUNNING
            res = np.full(n, np.inf)
            mask = np.zeros(n, dtype=bool)
            count = 0
        else:
            res, mask = score(self.scene, hyp, self.epsilon)
            count = int(mask.sum())
            self.state = self._build_state(action, res, prev.history_channel)
            self.stats.counts.append(count)
            self.stats.ratios.append(count / n)
            self.tracker.update(hyp, count / n, mask, action)
            reason = check_termination(self.stats, self.config)
        self.done = reason != RUNNING
        out = StepOutcome(self.state, count / n, hyp, res, mask, count, self.done, reason, action,
                          degenerate=hyp is None)
        self._record(action, out)
        return out


def polish(scene: SceneData, hypothesis, mask: np.ndarray, epsilon: float | None = None):
    """Refit on the inliers of ``hypothesis``; keep the original if the refit loses inliers."""
    eps = scene.epsilon if epsilon is None else epsilon
    pts = scene.points[mask]
    try:
        if scene.task == LINE_TASK:
            refit = refine_line_tls(pts)
        else:
            if len(pts) < 8:
                return hypothesis
            refit = fit_fundamental_8pt(pts)
    except DegenerateSampleError:
        return hypothesis
    _, new_mask = score(scene, refit, eps)
    return refit if new_mask.sum() >= mask.sum() else hypothesis


def finalize_scene(tracker: BestTracker, scene: SceneData, epsilon: float | None = None):
    if tracker.empty:
        raise ContractError("no hypothesis was tracked for this scene")
    return polish(scene, tracker.hypothesis, tracker.inlier_mask, epsilon)


def task_error(scene: SceneData, hypothesis) -> dict:
    """Angular error(s) against ground truth, in degrees.

    Keys: ``error`` (the value mAA is computed on), and for the F task also
    ``rotation`` and ``translation``.
    """
    if scene.task == LINE_TASK:
        if hypothesis is None:
            return {"error": 90.0}
        return {"error": line_angular_error(hypothesis, scene.gt_line)}
    if hypothesis is None:
        return {"error": 180.0, "rotation": 180.0, "translation": 180.0}
    _, mask = score(scene, hypothesis)
    try:
        pose = pose_from_fundamental(hypothesis, scene.intrinsics, scene.intrinsics, scene.points[mask])
    except PoseRecoveryError:
        return {"error": 180.0, "rotation": 180.0, "translation": 180.0}
    rot, tr = pose_errors(pose, scene.gt_pose)
    return {"error": max(rot, tr), "rotation": rot, "translation": tr}


__all__ = [
    "BestTracker", "ConsensusEnv", "EpisodeConfig", "EpisodeStats", "ExhaustionError", "Line2D",
    "State", "StepOutcome", "UsedSetRegistry", "check_termination", "encode_memory_channels",
    "finalize_scene", "polish", "score", "solve_minimal", "state_features", "task_error",
]
