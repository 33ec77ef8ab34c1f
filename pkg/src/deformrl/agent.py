"""DQN over the keypoint graph network: pick a current keypoint, place it
at a goal keypoint.

The action space is the K x K index grid of the value matrix; actions are
executed by handing the env the picked keypoint's coordinates and the
goal keypoint's coordinates. Training is vanilla DQN: epsilon-greedy
exploration with a linear schedule, a uniform ring replay buffer, one
optimization step per environment step after warmup, squared temporal-
difference error against a hard-synced target network. Terminal
transitions bootstrap nothing (the episode budget truncates the horizon).

The training loop is single-threaded and fully deterministic for a fixed
seed: identical runs yield identical metrics and checkpoints byte for
byte on one platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .autodiff import Adam, Tensor, no_grad
from .graphnet import GNNConfig, QNetwork
from .keypoints import KeypointSet

__all__ = [
    "Transition",
    "ReplayBuffer",
    "select_action",
    "td_target",
    "td_loss",
    "epsilon_at",
    "RearrangeAgent",
    "evaluate_policy",
    "random_policy_success_rate",
    "format_metrics_csv",
]

METRICS_HEADER = "episode,return,steps,success,epsilon"


@dataclass(frozen=True)
class Transition:
    """One replay record: (s_{t-1}, a_t, r_t, s_t) plus the episode goal."""

    current: KeypointSet
    goal: KeypointSet
    action: tuple[int, int]
    reward: float
    next: KeypointSet
    terminal: bool

    def __post_init__(self):
        k = len(self.current)
        pick, place = self.action
        if not (0 <= pick < k and 0 <= place < k):
            raise ValueError(f"action {self.action} out of range for K={k}")
        if self.reward > 1.0 + 1e-12:
            raise ValueError(f"reward {self.reward} exceeds 1")


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform batch sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._cursor] = transition
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, rng: np.random.Generator, batch_size: int) -> list[Transition]:
        """Uniform sample without replacement within the batch."""
        if batch_size > len(self._items):
            raise ValueError(
                f"cannot sample {batch_size} from buffer of {len(self._items)}")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]

    def __len__(self) -> int:
        return len(self._items)


def select_action(q_matrix: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> tuple[int, int]:
    """Epsilon-greedy pick/place indices over the value matrix.

    Greedy ties break to the lowest row-major index, so selection is
    reproducible and invariant under positive affine rescaling of Q.
    """
    q = np.asarray(q_matrix)
    k = q.shape[0]
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        flat = int(rng.integers(0, k * k))
    else:
        flat = int(q.argmax())
    return flat // k, flat % k


def td_target(transition: Transition, target_net: QNetwork, gamma: float) -> float:
    """Bootstrapped target: r + gamma * max Q_target(next), r if terminal."""
    if transition.terminal:
        return float(transition.reward)
    q_next = target_net.q_matrix(transition.next.coords, transition.goal.coords)
    return float(transition.reward + gamma * q_next.max())


def _stack(batch: list[Transition]):
    cur = np.stack([t.current.coords for t in batch])
    goal = np.stack([t.goal.coords for t in batch])
    nxt = np.stack([t.next.coords for t in batch])
    rewards = np.array([t.reward for t in batch])
    terminal = np.array([t.terminal for t in batch])
    picks = np.array([t.action[0] for t in batch])
    places = np.array([t.action[1] for t in batch])
    return cur, goal, nxt, rewards, terminal, picks, places


def td_loss(batch: list[Transition], online: QNetwork, target_net: QNetwork,
            gamma: float) -> Tensor:
    """Mean squared TD error over a batch.

    Targets are computed with the target network outside the graph, so
    gradients flow only through the online network's predictions.
    """
    if not batch:
        raise ValueError("cannot compute a loss on an empty batch")
    cur, goal, nxt, rewards, terminal, picks, places = _stack(batch)
    with no_grad():
        q_next = target_net.forward(nxt, goal).data      # (B, K, K)
    bootstrap = q_next.reshape(len(batch), -1).max(axis=1)
    targets = rewards + gamma * np.where(terminal, 0.0, bootstrap)
    q_online = online.forward(cur, goal)                  # (B, K, K)
    picked = q_online[np.arange(len(batch)), picks, places]
    return ad.tmean((picked - Tensor(targets)) ** 2)


def epsilon_at(episode: int, episodes: int, start: float, end: float,
               decay_fraction: float) -> float:
    """Linear schedule: `start` at episode 0, `end` after the decay span."""
    decay_span = max(1, int(round(decay_fraction * episodes)))
    frac = min(1.0, episode / decay_span)
    return start + (end - start) * frac


class RearrangeAgent(BaseEstimator):
    """sklearn-style DQN agent: ``fit(env)`` trains, ``predict`` acts.

    The environment must follow the simulator contract: ``reset()``
    returning an observation with ``current``/``goal`` keypoint sets, and
    ``step(pick_xy, place_xy)`` returning a result with ``keypoints``,
    ``reward``, ``terminal`` and an ``info`` dict with ``success``.
    """

    def __init__(self, n_keypoints=8, embed_dim=64, self_layers=2,
                 cross_layers=2, num_heads=1, embed_hidden=32,
                 update_hidden=None, mode="local", gamma=0.9,
                 epsilon_start=1.0, epsilon_end=0.05,
                 epsilon_decay_fraction=0.6, batch_size=64,
                 learning_rate=1e-3, target_sync_interval=200,
                 replay_capacity=20000, warmup=500, episodes=2000,
                 max_episode_steps=30, seed=0):
        self.n_keypoints = n_keypoints
        self.embed_dim = embed_dim
        self.self_layers = self_layers
        self.cross_layers = cross_layers
        self.num_heads = num_heads
        self.embed_hidden = embed_hidden
        self.update_hidden = update_hidden
        self.mode = mode
        self.gamma = gamma
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.epsilon_decay_fraction = epsilon_decay_fraction
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.target_sync_interval = target_sync_interval
        self.replay_capacity = replay_capacity
        self.warmup = warmup
        self.episodes = episodes
        self.max_episode_steps = max_episode_steps
        self.seed = seed

    @property
    def gnn_config(self) -> GNNConfig:
        return GNNConfig(
            n_keypoints=self.n_keypoints, embed_dim=self.embed_dim,
            self_layers=self.self_layers, cross_layers=self.cross_layers,
            num_heads=self.num_heads, embed_hidden=self.embed_hidden,
            update_hidden=self.update_hidden)

    def _fresh_network(self) -> QNetwork:
        return QNetwork(self.gnn_config, seed=self.seed, mode=self.mode)

    # -- training -------------------------------------------------------

    def fit(self, env):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        rng = np.random.default_rng([int(self.seed), 0xA6E2])
        online = self._fresh_network()
        target = self._fresh_network()
        target.copy_parameters_from(online)
        optimizer = Adam(online.parameters(), lr=self.learning_rate)
        buffer = ReplayBuffer(self.replay_capacity)
        optimizer_steps = 0
        metrics: list[dict] = []
        for episode in range(self.episodes):
            obs = env.reset()
            current = obs.current
            goal = obs.goal
            eps = epsilon_at(episode, self.episodes, self.epsilon_start,
                             self.epsilon_end, self.epsilon_decay_fraction)
            episode_return = 0.0
            steps = 0
            reached = False
            for _ in range(self.max_episode_steps):
                q = online.q_matrix(current.coords, goal.coords)
                pick, place = select_action(q, eps, rng)
                result = env.step(current.coords[pick], goal.coords[place])
                buffer.push(Transition(current, goal, (pick, place),
                                       result.reward, result.keypoints,
                                       result.terminal))
                episode_return += result.reward
                steps += 1
                current = result.keypoints
                if len(buffer) >= self.warmup:
                    batch = buffer.sample(rng, self.batch_size)
                    loss = td_loss(batch, online, target, self.gamma)
                    loss.backward()
                    optimizer.step()
                    optimizer_steps += 1
                    if optimizer_steps % self.target_sync_interval == 0:
                        target.copy_parameters_from(online)
                if result.terminal:
                    reached = bool(result.info.get("success", False))
                    break
            metrics.append({"episode": episode, "return": episode_return,
                            "steps": steps, "success": reached,
                            "epsilon": eps})
        self.q_network_ = online
        self.metrics_ = metrics
        self.optimizer_steps_ = optimizer_steps
        self.replay_size_ = len(buffer)
        return self

    # -- acting ------------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "q_network_"):
            raise NotFittedError(
                "this RearrangeAgent is not fitted; call fit or load_params")

    def q_matrix(self, current, goal) -> np.ndarray:
        self._check_fitted()
        current = current.coords if isinstance(current, KeypointSet) else current
        goal = goal.coords if isinstance(goal, KeypointSet) else goal
        return self.q_network_.q_matrix(current, goal)

    def predict(self, observation) -> tuple[int, int]:
        """Greedy pick/place indices for an (current, goal) observation."""
        current, goal = ((observation.current, observation.goal)
                         if hasattr(observation, "current") else observation)
        q = self.q_matrix(current, goal)
        flat = int(q.argmax())
        k = q.shape[0]
        return flat // k, flat % k

    # -- persistence ----------------------------------------------------------

    def parameter_dict(self) -> dict[str, np.ndarray]:
        self._check_fitted()
        entries = dict(self.q_network_.parameter_dict())
        entries["agent/optimizer_steps"] = np.array(
            float(getattr(self, "optimizer_steps_", 0)))
        entries["agent/episodes_trained"] = np.array(
            float(len(getattr(self, "metrics_", []))))
        return entries

    def save_params(self, path) -> None:
        ad.save_archive(path, self.parameter_dict())

    def load_params(self, path) -> "RearrangeAgent":
        stored = ad.load_archive(path)
        network = self._fresh_network()
        network.load_parameter_dict(stored)
        self.q_network_ = network
        self.optimizer_steps_ = int(stored.get(
            "agent/optimizer_steps", np.array(0.0)).item())
        return self


def format_metrics_csv(metrics: list[dict]) -> str:
    """One line per episode: episode,return,steps,success,epsilon."""
    lines = [METRICS_HEADER]
    for row in metrics:
        lines.append(f"{row['episode']},{row['return']:.6f},{row['steps']},"
                     f"{int(row['success'])},{row['epsilon']:.6f}")
    return "\n".join(lines) + "\n"


# -- evaluation -------------------------------------------------------------------


def evaluate_policy(env, policy, n_tasks: int, eval_seed_base: int = 10 ** 9):
    """Greedy rollouts on `n_tasks` fresh tasks; returns rate and records.

    ``policy(current_kps, goal_kps) -> (pick, place)``. Episode seeds are
    offset by ``eval_seed_base`` so evaluation tasks never collide with
    training episodes of the same environment seed.
    """
    if n_tasks <= 0:
        raise ValueError("evaluation needs a positive number of tasks")
    records = []
    for task_index in range(n_tasks):
        obs = env.reset(episode_seed=eval_seed_base + task_index)
        current, goal = obs.current, obs.goal
        reached = False
        steps = 0
        episode_return = 0.0
        while steps < env.max_steps:
            pick, place = policy(current, goal)
            result = env.step(current.coords[pick], goal.coords[place])
            episode_return += result.reward
            current = result.keypoints
            steps += 1
            if result.terminal:
                reached = bool(result.info.get("success", False))
                break
        records.append({"task": task_index, "success": reached,
                        "steps": steps, "return": episode_return})
    rate = float(np.mean([r["success"] for r in records]))
    return rate, records


def agent_policy(agent: RearrangeAgent):
    def policy(current: KeypointSet, goal: KeypointSet):
        q = agent.q_matrix(current, goal)
        flat = int(q.argmax())
        k = q.shape[0]
        return flat // k, flat % k
    return policy


def random_policy_success_rate(env, n_tasks: int, seed: int = 0,
                               eval_seed_base: int = 10 ** 9) -> float:
    """Uniform-random pick/place baseline measured by the same harness."""
    rng = np.random.default_rng([int(seed), 0xBA5E])
    k = env.n_keypoints

    def policy(current, goal):
        flat = int(rng.integers(0, k * k))
        return flat // k, flat % k

    rate, _ = evaluate_policy(env, policy, n_tasks, eval_seed_base)
    return rate
