"""Graph policy/critic networks, minimal-set selection and discrete soft actor-critic."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .env import ConsensusEnv, EpisodeConfig, ExhaustionError, State, UsedSetRegistry, state_features
from .scenes import SceneData

log = logging.getLogger(__name__)


class TrainingDivergenceError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class PolicyConfig:
    k_neighbors: int = 15
    edgeconv_layers: int = 2
    hidden_width: int = 64
    head_width: int = 64
    leaky_slope: float = 0.2


@dataclass
class TrainConfig:
    gamma: float = 0.95
    polyak: float = 0.005
    learning_rate: float = 3e-4
    batch_size: int = 64
    alpha: float = 0.2
    updates_per_step: float = 1.0
    warmup: int = 500
    epochs: int = 100
    scenes_per_epoch: int = 1000
    buffer_capacity: int = 100_000
    sampling_mode: str = "probabilistic"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.polyak <= 1.0:
            raise ValueError("polyak must lie in (0, 1]")
        if self.sampling_mode not in ("probabilistic", "max"):
            raise ValueError(f"unknown sampling mode {self.sampling_mode!r}")


# -- networks --------------------------------------------------------------------------

class GraphNet:
    """EdgeConv stack plus a per-point head; emits one scalar per point.

    Each EdgeConv layer computes ``act(max_j [theta (x_j - x_i) + phi x_i + b])``
    over the k neighbours ``j`` of ``i``; because the activation is monotone
    the max can be taken before it, which is how the forward pass is built.
    The head sees the raw input, every layer's output and a global max-pool of
    the last layer.
    """

    def __init__(self, in_channels: int, config: PolicyConfig, rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.config = config
        rng = rng or np.random.default_rng(0)
        h = config.hidden_width
        self.params: dict[str, dm.Tensor] = {}
        width = in_channels
        for layer in range(config.edgeconv_layers):
            bound = math.sqrt(1.0 / (2 * width))
            for part in ("theta", "phi"):
                self._add(f"edge{layer}.{part}", rng.uniform(-bound, bound, (width, h)))
            self._add(f"edge{layer}.b", rng.uniform(-bound, bound, (h,)))
            width = h
        head_in = in_channels + config.edgeconv_layers * h
        for name, fan_in, fan_out in (("head0", head_in, config.head_width),
                                      ("glob", h, config.head_width),
                                      ("head1", config.head_width, 1)):
            w, b = dm.init_linear(rng, fan_in, fan_out, name)
            self.params[w.name], self.params[b.name] = w, b
        del self.params["glob.b"]

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = dm.Tensor(value, requires_grad=True, name=name)

    def forward(self, x: np.ndarray, neighbors: np.ndarray) -> dm.Tensor:
        """``x``: ``[B, N, C]`` states, ``neighbors``: ``[B, N, k]`` -> ``[B, N]`` outputs."""
        p = self.params
        slope = self.config.leaky_slope
        inp = dm.Tensor(x)
        feats = [inp]
        h = inp
        for layer in range(self.config.edgeconv_layers):
            proj = dm.matmul(h, p[f"edge{layer}.theta"])
            own = dm.matmul(h, p[f"edge{layer}.phi"])
            pooled = dm.neighbor_max_gather(proj, neighbors)
            h = dm.leaky_relu(pooled - proj + own + p[f"edge{layer}.b"], slope)
            feats.append(h)
        glob = dm.matmul(dm.max_over_points(h), p["glob.w"])
        z = dm.matmul(dm.concat(feats, axis=-1), p["head0.w"]) + glob + p["head0.b"]
        z = dm.leaky_relu(z, slope)
        out = dm.matmul(z, p["head1.w"]) + p["head1.b"]
        return dm.reshape(out, out.shape[:-1])

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(values)
        if missing:
            raise ModelFormatError(f"parameter mismatch: {sorted(missing)}")
        for k, v in values.items():
            if self.params[k].shape != v.shape:
                raise ModelFormatError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].value = np.array(v, dtype=np.float64)

    def copy(self) -> "GraphNet":
        twin = GraphNet.__new__(GraphNet)
        twin.in_channels, twin.config = self.in_channels, self.config
        twin.params = {k: dm.Tensor(v.value.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return twin


def policy_forward(policy: GraphNet, state: State | np.ndarray, graph) -> tuple[np.ndarray, np.ndarray]:
    """Per-point selection probabilities and log-probabilities for one state."""
    x = state.matrix if isinstance(state, State) else np.asarray(state)
    idx = graph.neighbor_indices if isinstance(graph, dm.NeighborGraph) else np.asarray(graph)
    if x.shape[-1] != policy.in_channels or idx.shape[0] != x.shape[0]:
        raise dm.DimensionError(f"state {x.shape} / graph {idx.shape} do not fit the policy")
    logp = dm.log_softmax(policy.forward(x[None], idx[None])).value[0]
    return np.exp(logp), logp


# -- selection -------------------------------------------------------------------------

def _check_not_exhausted(n: int, m: int, registry: UsedSetRegistry) -> None:
    if len(registry) >= math.comb(n, m):
        raise ExhaustionError(f"all {math.comb(n, m)} minimal sets of size {m} used")


def sample_without_replacement(probs: np.ndarray, m: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Sequential draws, each proportional to the remaining (renormalised) mass."""
    p = np.array(probs, dtype=np.float64)
    chosen = []
    for _ in range(m):
        cum = np.cumsum(p)
        total = cum[-1]
        if total <= 0:
            free = np.flatnonzero(np.isin(np.arange(len(p)), chosen, invert=True))
            i = int(free[rng.integers(len(free))])
        else:
            i = int(np.searchsorted(cum, rng.random() * total, side="right"))
            i = min(i, len(p) - 1)
            while p[i] <= 0:  # guard against landing on a zeroed slot at a float edge
                i -= 1
        chosen.append(i)
        p[i] = 0.0
    return tuple(sorted(chosen))


def _uniform_unused(n: int, m: int, registry: UsedSetRegistry, rng: np.random.Generator) -> tuple[int, ...]:
    if math.comb(n, m) <= 100_000:
        free = [c for c in combinations(range(n), m) if c not in registry]
        return free[int(rng.integers(len(free)))]
    while True:
        cand = tuple(sorted(int(i) for i in rng.choice(n, m, replace=False)))
        if cand not in registry:
            return cand


def select_probabilistic(probs, m: int, registry: UsedSetRegistry, rng: np.random.Generator,
                         max_retries: int = 1000) -> tuple[int, ...]:
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    _check_not_exhausted(n, m, registry)
    for _ in range(max_retries):
        cand = sample_without_replacement(probs, m, rng)
        if cand not in registry:
            return cand
    return _uniform_unused(n, m, registry, rng)


def select_max(probs, m: int, registry: UsedSetRegistry, rng: np.random.Generator) -> tuple[int, ...]:
    """Top-m points (ties to lower index); falls back to probability-driven draws if used."""
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    _check_not_exhausted(n, m, registry)
    top = tuple(sorted(int(i) for i in np.argsort(-probs, kind="stable")[:m]))
    if top not in registry:
        return top
    return select_probabilistic(probs, m, registry, rng)


SELECTORS: dict[str, Callable] = {"max": select_max, "probabilistic": select_probabilistic}


# -- replay ------------------------------------------------------------------------------

@dataclass
class Transition:
    state: State
    action: tuple[int, ...]
    reward: float
    next_state: State
    done: bool
    neighbors: np.ndarray


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._cursor] = tr
        self._cursor = (self._cursor + 1) % self.capacity

    def __getitem__(self, i: int) -> Transition:
        return self._items[i]

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(0, len(self._items), batch_size)
        return [self._items[i] for i in idx]


@dataclass
class Batch:
    states: np.ndarray
    next_states: np.ndarray
    neighbors: np.ndarray
    action_weights: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    @classmethod
    def from_transitions(cls, items: Sequence[Transition]) -> "Batch":
        b, (n, _) = len(items), items[0].state.matrix.shape
        weights = np.zeros((b, n))
        for row, tr in enumerate(items):
            weights[row, list(tr.action)] = 1.0 / len(tr.action)
        return cls(np.stack([t.state.matrix for t in items]),
                   np.stack([t.next_state.matrix for t in items]),
                   np.stack([t.neighbors for t in items]),
                   weights,
                   np.array([t.reward for t in items], dtype=np.float64),
                   np.array([float(t.done) for t in items]))


# -- soft actor-critic ---------------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[dm.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SACAgent:
    """Policy, twin critics and their target copies."""

    def __init__(self, in_channels: int, policy_config: PolicyConfig | None = None,
                 train_config: TrainConfig | None = None, seed: int = 0):
        self.policy_config = policy_config or PolicyConfig()
        self.train_config = train_config or TrainConfig()
        rng = np.random.default_rng(seed)
        self.policy = GraphNet(in_channels, self.policy_config, rng)
        self.critic1 = GraphNet(in_channels, self.policy_config, rng)
        self.critic2 = GraphNet(in_channels, self.policy_config, rng)
        self.target1 = self.critic1.copy()
        self.target2 = self.critic2.copy()
        lr = self.train_config.learning_rate
        self.policy_opt = Adam(self.policy.params.values(), lr)
        self.critic_opt = Adam([*self.critic1.params.values(), *self.critic2.params.values()], lr)

    @property
    def in_channels(self) -> int:
        return self.policy.in_channels


@dataclass
class Losses:
    critic: float
    actor: float


def soft_value(agent: SACAgent, next_states: np.ndarray, neighbors: np.ndarray, alpha: float) -> np.ndarray:
    logp = dm.log_softmax(agent.policy.forward(next_states, neighbors)).value
    qt = np.minimum(agent.target1.forward(next_states, neighbors).value,
                    agent.target2.forward(next_states, neighbors).value)
    return (np.exp(logp) * (qt - alpha * logp)).sum(axis=-1)


def bellman_target(rewards, dones, v_next, gamma: float) -> np.ndarray:
    return np.asarray(rewards) + gamma * (1.0 - np.asarray(dones)) * np.asarray(v_next)


def critic_loss_tensor(agent: SACAgent, batch: Batch, targets: np.ndarray) -> tuple[dm.Tensor, dm.Tensor, dm.Tensor]:
    """Sum of both critics' mean squared errors; set value = mean of member values."""
    q1 = agent.critic1.forward(batch.states, batch.neighbors)
    q2 = agent.critic2.forward(batch.states, batch.neighbors)
    loss = None
    for q in (q1, q2):
        set_q = dm.sum(q * batch.action_weights, axis=-1)
        term = dm.mean(dm.square(set_q - targets))
        loss = term if loss is None else loss + term
    return loss, q1, q2


def actor_loss_tensor(agent: SACAgent, batch: Batch, q_min: np.ndarray, alpha: float) -> dm.Tensor:
    logp = dm.log_softmax(agent.policy.forward(batch.states, batch.neighbors))
    p = dm.exp(logp)
    return dm.mean(dm.sum(p * (alpha * logp - q_min), axis=-1))


def compute_losses(batch: Batch, agent: SACAgent, config: TrainConfig | None = None) -> Losses:
    """Evaluate both losses and leave their gradients in the parameters' ``.grad``."""
    cfg = config or agent.train_config
    v_next = soft_value(agent, batch.next_states, batch.neighbors, cfg.alpha)
    y = bellman_target(batch.rewards, batch.dones, v_next, cfg.gamma)
    with dm.Tape() as tape:
        c_loss, q1, q2 = critic_loss_tensor(agent, batch, y)
    tape.backward(c_loss)
    q_min = np.minimum(q1.value, q2.value)
    with dm.Tape() as tape:
        a_loss = actor_loss_tensor(agent, batch, q_min, cfg.alpha)
    tape.backward(a_loss)
    out = Losses(float(c_loss.value), float(a_loss.value))
    if not (np.isfinite(out.critic) and np.isfinite(out.actor)):
        raise TrainingDivergenceError(f"non-finite loss: critic={out.critic}, actor={out.actor}, "
                                      f"reward range=({batch.rewards.min()}, {batch.rewards.max()})")
    return out


def soft_update(online: GraphNet, target: GraphNet, polyak: float) -> None:
    for name, p in online.params.items():
        t = target.params[name]
        t.value = polyak * p.value + (1.0 - polyak) * t.value


def update(agent: SACAgent, batch: Batch) -> Losses:
    losses = compute_losses(batch, agent)
    agent.critic_opt.step()
    agent.policy_opt.step()
    tau = agent.train_config.polyak
    soft_update(agent.critic1, agent.target1, tau)
    soft_update(agent.critic2, agent.target2, tau)
    return losses


# -- training loop ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    mean_reward: float
    critic_loss: float
    actor_loss: float
    buffer_size: int


LOG_COLUMNS = ("epoch", "mean_reward", "critic_loss", "actor_loss", "buffer_size")


def scene_graph(scene: SceneData, k: int) -> np.ndarray:
    """Neighbour matrix on the scene's data-feature columns."""
    return dm.knn_graph(state_features(scene), k).neighbor_indices


def train(scenes: Sequence[SceneData], agent: SACAgent, episode_config: EpisodeConfig | None = None,
          seed: int = 0, on_epoch: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
    """One training episode per scene per epoch; one update per environment step after warmup.

    ``mean_reward`` in the log is the mean over the epoch's episodes of the
    best inlier ratio reached within the episode.
    """
    cfg = agent.train_config
    ep_cfg = episode_config or EpisodeConfig(train_mode=True)
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    select = SELECTORS[cfg.sampling_mode]
    graphs = [scene_graph(s, agent.policy_config.k_neighbors) for s in scenes]
    logs: list[EpochLog] = []
    credit = 0.0
    for epoch in range(cfg.epochs):
        best_rewards, c_losses, a_losses = [], [], []
        for scene, nbrs in zip(scenes, graphs):
            env = ConsensusEnv(scene, ep_cfg)
            state, first = env.reset(rng)
            best = first.reward
            while not env.done:
                probs, _ = policy_forward(agent.policy, state, nbrs)
                action = select(probs, scene.m, env.registry, rng)
                out = env.step(action)
                buffer.push(Transition(state, action, out.reward, out.next_state, out.done, nbrs))
                best = max(best, out.reward)
                state = out.next_state
                if len(buffer) >= max(cfg.warmup, 1):
                    credit += cfg.updates_per_step
                    while credit >= 1.0:
                        credit -= 1.0
                        losses = update(agent, Batch.from_transitions(buffer.sample(cfg.batch_size, rng)))
                        c_losses.append(losses.critic)
                        a_losses.append(losses.actor)
            best_rewards.append(best)
        row = EpochLog(epoch, float(np.mean(best_rewards)) if best_rewards else float("nan"),
                       float(np.mean(c_losses)) if c_losses else float("nan"),
                       float(np.mean(a_losses)) if a_losses else float("nan"), len(buffer))
        logs.append(row)
        log.info("epoch %d reward %.4f critic %.4g actor %.4g buffer %d", row.epoch, row.mean_reward,
                 row.critic_loss, row.actor_loss, row.buffer_size)
        if on_epoch:
            on_epoch(row)
    return logs


# -- model files -----------------------------------------------------------------------------

MODEL_HEADER = "RLSAC-MODEL v1"


def format_model(agent: SACAgent, task: str) -> str:
    lines = [MODEL_HEADER, f"task = {task}", f"in_channels = {agent.in_channels}"]
    for prefix, cfg in (("policy", agent.policy_config), ("train", agent.train_config)):
        for key, val in asdict(cfg).items():
            lines.append(f"{prefix}.{key} = {val!r}" if isinstance(val, float) else f"{prefix}.{key} = {val}")
    return "\n".join(lines) + "\n" + dm.format_params(agent.policy.values())


def save_model(agent: SACAgent, task: str, path) -> None:
    Path(path).write_text(format_model(agent, task))


@dataclass
class LoadedModel:
    task: str
    policy: GraphNet
    policy_config: PolicyConfig
    train_config: TrainConfig


def _coerce(cls, raw: dict[str, str]):
    kwargs = {}
    for f in fields(cls):
        if f.name in raw:
            text = raw[f.name]
            kind = type(f.default)
            kwargs[f.name] = text if kind is str else kind(float(text)) if kind is int else kind(text)
    return cls(**kwargs)


def load_model(path) -> LoadedModel:
    lines = Path(path).read_text().split("\n")
    if not lines or lines[0] != MODEL_HEADER:
        raise ModelFormatError(f"{path}: line 1: expected {MODEL_HEADER!r}")
    raw: dict[str, str] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("DIFFMATH-PARAMS"):
        if "=" not in lines[i]:
            raise ModelFormatError(f"{path}: line {i + 1}: expected 'key = value'")
        key, val = (s.strip() for s in lines[i].split("=", 1))
        raw[key] = val
        i += 1
    body = [ln for ln in lines[i:] if ln != ""]
    try:
        values = dm.parse_params(body, first_lineno=i + 1)
    except dm.ParseError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    pcfg = _coerce(PolicyConfig, {k[7:]: v for k, v in raw.items() if k.startswith("policy.")})
    tcfg = _coerce(TrainConfig, {k[6:]: v for k, v in raw.items() if k.startswith("train.")})
    policy = GraphNet(int(raw["in_channels"]), pcfg)
    policy.load_values(values)
    return LoadedModel(raw.get("task", ""), policy, pcfg, tcfg)
