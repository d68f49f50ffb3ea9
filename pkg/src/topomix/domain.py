"""Domain types for the networked multi-agent decision process.

Communication actions, round graphs, observation/global-state encoding,
episodes and the run configuration all live here.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for malformed configuration or dimension mismatches."""


class CommAction(IntEnum):
    SOLO_PROCESS = 0
    BROADCAST_ALL = 1
    SELECTIVE_QUERY = 2
    AGGREGATE_REFINE = 3
    EXECUTE_VERIFY = 4
    DEBATE_CHECK = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "CommAction":
        return cls[label.upper()]


N_ACTIONS = len(CommAction)

JointAction = tuple  # tuple[CommAction, ...], one entry per agent


def joint_action(actions: Sequence[int], n: int | None = None) -> tuple:
    """Validate and normalise a sequence of action codes into a JointAction."""
    out = tuple(CommAction(int(a)) for a in actions)
    if n is not None and len(out) != n:
        raise ConfigError(f"joint action has {len(out)} entries, expected {n}")
    return out


@dataclass(frozen=True, eq=False)
class CommGraph:
    """Directed communication graph; ``adj[i, j]`` means an edge i -> j.

    Self-loops are always set and never counted as edges.
    """

    adj: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adj, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ConfigError(f"adjacency must be square, got {adj.shape}")
        adj = adj.copy()
        np.fill_diagonal(adj, True)
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)

    @classmethod
    def identity(cls, n: int) -> "CommGraph":
        return cls(np.eye(n, dtype=bool))

    @classmethod
    def from_edges(cls, n: int, edges) -> "CommGraph":
        adj = np.eye(n, dtype=bool)
        for u, v in edges:
            adj[u, v] = True
        return cls(adj)

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    def edges(self) -> set:
        """Non-self edges as a set of (sender, receiver) pairs."""
        us, vs = np.nonzero(self.adj)
        return {(int(u), int(v)) for u, v in zip(us, vs) if u != v}

    @property
    def edge_count(self) -> int:
        return int(self.adj.sum()) - self.n

    @property
    def density(self) -> float:
        n = self.n
        return self.edge_count / (n * (n - 1))

    def in_degree(self, v: int) -> int:
        return int(self.adj[:, v].sum()) - 1

    def out_degree(self, u: int) -> int:
        return int(self.adj[u, :].sum()) - 1

    def __eq__(self, other):
        return isinstance(other, CommGraph) and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash(self.adj.tobytes())

    def __repr__(self):
        return f"CommGraph(n={self.n}, edges={sorted(self.edges())})"


def observation_dim(n_agents: int, n_task_features: int) -> int:
    return n_agents + 1 + N_ACTIONS + 2 + 1 + n_task_features


def state_dim(n_agents: int, obs_dim: int) -> int:
    return n_agents * obs_dim + 3


def encode_observation(agent_id: int, round_idx: int, prev_action, graph: CommGraph,
                       tokens_so_far: float, task_features, *, n_rounds: int,
                       max_tokens: float, n_task_features: int | None = None) -> np.ndarray:
    """Build one agent's feature vector for a round.

    Layout: ``[agent one-hot (N), t/T, previous own action one-hot (6),
    in-degree/(N-1), out-degree/(N-1), token ratio, task features (F)]``.
    ``round_idx`` is 1-based; ``prev_action`` is ignored (zeros) on round 1.
    """
    n = graph.n
    task_features = np.asarray(task_features, dtype=np.float64)
    if n_task_features is not None and task_features.shape != (n_task_features,):
        raise ConfigError(
            f"task features have shape {task_features.shape}, expected ({n_task_features},)")
    if not 0 <= agent_id < n:
        raise ConfigError(f"agent id {agent_id} out of range for N={n}")
    if not 1 <= round_idx <= n_rounds:
        raise ConfigError(f"round {round_idx} outside [1, {n_rounds}]")

    x = np.zeros(observation_dim(n, task_features.size))
    x[agent_id] = 1.0
    x[n] = round_idx / n_rounds
    if round_idx > 1 and prev_action is not None:
        x[n + 1 + int(prev_action)] = 1.0
    o = n + 1 + N_ACTIONS
    x[o] = graph.in_degree(agent_id) / (n - 1)
    x[o + 1] = graph.out_degree(agent_id) / (n - 1)
    x[o + 2] = min(tokens_so_far / max_tokens, 1.0)
    x[o + 3:] = task_features
    return x


def decode_observation(x: np.ndarray, n_agents: int) -> tuple[int, CommAction | None]:
    """Recover (agent_id, previous action) from the one-hot blocks."""
    agent_id = int(np.argmax(x[:n_agents]))
    block = x[n_agents + 1:n_agents + 1 + N_ACTIONS]
    prev = CommAction(int(np.argmax(block))) if block.sum() > 0 else None
    return agent_id, prev


def encode_global_state(observations, graph: CommGraph, active_agents: int) -> np.ndarray:
    """Concatenate all observations with (edge ratio, density, active fraction)."""
    obs = np.asarray(observations, dtype=np.float64)
    n = graph.n
    if obs.ndim != 2 or obs.shape[0] != n:
        raise ConfigError(f"expected {n} observations, got array of shape {obs.shape}")
    edge_ratio = graph.edge_count / (n * (n - 1))
    tail = np.array([edge_ratio, graph.density, active_agents / n])
    return np.concatenate([obs.ravel(), tail])


def count_active(prev_joint) -> int:
    """Agents whose previous-round action was not solo_process."""
    return sum(1 for a in prev_joint if int(a) != CommAction.SOLO_PROCESS)


@dataclass
class Episode:
    """One stored rollout: per-round arrays plus a single terminal reward."""

    observations: np.ndarray  # (T, N, D)
    actions: np.ndarray       # (T, N) int
    graphs: np.ndarray        # (T, N, N) bool, graph each round was encoded on
    states: np.ndarray        # (T, S)
    reward: float
    accuracy: float = 0.0
    tokens: float = 0.0
    executed: np.ndarray | None = None  # (T, N, N) bool, graph induced by each round's actions

    def __post_init__(self):
        t = self.observations.shape[0]
        if not (self.actions.shape[0] == self.graphs.shape[0] == self.states.shape[0] == t):
            raise ConfigError("episode arrays disagree on the round count")

    @property
    def n_rounds(self) -> int:
        return self.observations.shape[0]


@dataclass
class RunConfig:
    """All knobs for a training/evaluation run. Defaults follow the
    standard QMIX-style hyperparameters where one exists."""

    n_agents: int = 3
    n_rounds: int = 2
    hidden_dim: int = 128
    gnn_layers: int = 2
    mixing_dim: int = 64
    hyper_hidden: int = 64
    mixer_init_scale: float = 0.1
    lr: float = 5e-4
    adam_eps: float = 1e-8
    gamma: float = 0.99
    buffer_capacity: int = 5000
    batch_size: int = 8
    clip_norm: float = 10.0
    target_interval: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    w_acc: float = 1.25
    w_tok: float = 0.10
    max_tokens: float = 10_000.0
    episodes: int = 2000
    checkpoint_interval: int = 500
    base_tokens: float = 200.0
    edge_tokens: float = 400.0
    reliability: float = 0.9
    adversary_prob: float = 0.25
    poison_weight: float = 0.5
    suite: str = "hard"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_agents < 2:
            raise ConfigError("n_agents must be >= 2")
        if self.n_rounds < 1:
            raise ConfigError("n_rounds must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        for name in ("hidden_dim", "gnn_layers", "mixing_dim", "hyper_hidden",
                     "buffer_capacity", "batch_size", "target_interval", "episodes",
                     "checkpoint_interval", "max_tokens", "lr", "clip_norm", "mixer_init_scale", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("base_tokens", "edge_tokens", "poison_weight", "w_acc", "w_tok"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.5 <= self.reliability <= 1.0:
            raise ConfigError("reliability must lie in [0.5, 1]")
        if not 0.0 <= self.adversary_prob <= 1.0:
            raise ConfigError("adversary_prob must lie in [0, 1]")

    @property
    def n_task_features(self) -> int:
        return 3 + self.n_agents

    @property
    def obs_dim(self) -> int:
        return observation_dim(self.n_agents, self.n_task_features)

    @property
    def state_dim(self) -> int:
        return state_dim(self.n_agents, self.obs_dim)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- flat ``key = value`` text format -------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}".replace("'", '"'))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse_value(types[key], val, lineno)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def _parse_value(typ: str, val: str, lineno: int):
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "str":
            if len(val) >= 2 and val[0] == val[-1] and val[0] in "\"'":
                return val[1:-1]
            return val
    except ValueError:
        pass
    raise ConfigError(f"line {lineno}: cannot parse {val!r} as {typ}")
