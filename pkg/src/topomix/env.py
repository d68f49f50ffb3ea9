"""ClueRelay: a deterministic synthetic team task.

Each agent starts with a subset of K clues. Clues flow along the round's
communication graph in execution order; a task is solved to the degree that
some (honest) agent assembles kappa clues. Every round costs tokens for the
agents that run and for every edge used. An optional adversary sends no clues
and poisons every agent that listens to it.

Clue sets are stored as integer bitmasks.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .domain import N_ACTIONS, CommGraph, ConfigError
from .topology import ExecutionOrder, action_to_adjacency, execution_order


@dataclass(frozen=True)
class TaskSpec:
    n_clues: int
    kappa: int
    clues: tuple          # per-agent tuple of clue ids
    adversary: int = -1   # -1: no adversary
    poison_weight: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "clues", tuple(tuple(sorted(set(c))) for c in self.clues))
        if self.n_clues < 1:
            raise ConfigError("a task needs at least one clue")
        if not 1 <= self.kappa <= self.n_clues:
            raise ConfigError(f"kappa={self.kappa} outside [1, {self.n_clues}]")
        for c in self.clues:
            for k in c:
                if not 0 <= k < self.n_clues:
                    raise ConfigError(f"clue id {k} outside [0, {self.n_clues})")
        if not -1 <= self.adversary < self.n_agents:
            raise ConfigError(f"adversary id {self.adversary} out of range")
        if self.poison_weight < 0:
            raise ConfigError("poison weight must be nonnegative")

    @property
    def n_agents(self) -> int:
        return len(self.clues)

    @property
    def easy(self) -> bool:
        return any(len(c) >= self.kappa for c in self.clues)

    @property
    def masks(self) -> tuple:
        return tuple(sum(1 << k for k in c) for c in self.clues)

    def with_adversary(self, slot: int, poison_weight: float | None = None) -> "TaskSpec":
        lam = self.poison_weight if poison_weight is None else poison_weight
        return replace(self, adversary=slot, poison_weight=lam)

    def without_adversary(self) -> "TaskSpec":
        return replace(self, adversary=-1)


@dataclass(frozen=True)
class EnvConfig:
    base_tokens: float = 200.0
    edge_tokens: float = 400.0
    reliability: float = 0.9
    adversary_prob: float = 0.25

    def __post_init__(self):
        if self.base_tokens < 0 or self.edge_tokens < 0:
            raise ConfigError("token costs must be nonnegative")
        if not 0.5 <= self.reliability <= 1.0:
            raise ConfigError("reliability must lie in [0.5, 1]")

    @classmethod
    def from_run(cls, cfg) -> "EnvConfig":
        return cls(cfg.base_tokens, cfg.edge_tokens, cfg.reliability, cfg.adversary_prob)


@dataclass(frozen=True)
class EnvState:
    clues: tuple        # bitmask per agent
    poison: tuple       # poisoned deliveries received per agent
    tokens: float = 0.0
    round: int = 0
    flags: tuple = ()   # flags[i][j]: agent i believes agent j is unreliable


def popcount(x: int) -> int:
    return bin(x).count("1")


def reset(task: TaskSpec, config: EnvConfig, rng) -> tuple:
    """Fresh episode state and per-agent task features.

    Reliability flags are drawn here (correct with probability
    ``config.reliability`` per observer/target pair) and stay fixed.
    """
    n = task.n_agents
    draws = rng.random((n, n))
    truth = np.arange(n) == task.adversary
    flags = np.where(draws < config.reliability, truth[None, :], ~truth[None, :])
    state = EnvState(task.masks, (0,) * n, 0.0, 0, tuple(map(tuple, flags.tolist())))
    return state, task_features(state, task)


def n_task_features(n_agents: int) -> int:
    return 3 + n_agents


def task_features(state: EnvState, task: TaskSpec) -> np.ndarray:
    """Rows ``[own clues/K, kappa/K, reliability flags (N), easy bit]`` per agent."""
    n, K = task.n_agents, task.n_clues
    feats = np.zeros((n, n_task_features(n)))
    for i in range(n):
        feats[i, 0] = popcount(state.clues[i]) / K
        feats[i, 1] = task.kappa / K
        feats[i, 2:2 + n] = state.flags[i] if state.flags else 0.0
        feats[i, 2 + n] = 1.0 if task.easy else 0.0
    return feats


def propagate(state: EnvState, graph: CommGraph, order: ExecutionOrder,
              task: TaskSpec) -> EnvState:
    """Run one round of clue exchange along ``graph`` in ``order``."""
    n = graph.n
    if sorted(order.order) != list(range(n)) or n != len(state.clues):
        raise ValueError("execution order does not match the graph")
    start = state.clues
    cur = list(start)
    poison = list(state.poison)
    adj = graph.adj
    for v in order.order:
        got = cur[v]
        for u in range(n):
            if u == v or not adj[u, v]:
                continue
            if u == task.adversary:
                poison[v] += 1
                continue
            got |= start[u] if (u, v) in order.deferred_edges else cur[u]
        cur[v] = got
    return replace(state, clues=tuple(cur), poison=tuple(poison), round=state.round + 1)


def round_tokens(graph: CommGraph, config: EnvConfig) -> float:
    # every agent runs each round; edges add message cost on top
    return config.base_tokens * graph.n + config.edge_tokens * graph.edge_count


def step(state: EnvState, graph: CommGraph, task: TaskSpec, config: EnvConfig,
         order: ExecutionOrder | None = None) -> EnvState:
    """Charge the round's tokens and propagate clues."""
    if order is None:
        order = execution_order(graph)
    state = propagate(state, graph, order, task)
    return replace(state, tokens=state.tokens + round_tokens(graph, config))


def agent_scores(state: EnvState, task: TaskSpec) -> list:
    return [min(max((popcount(state.clues[i]) - task.poison_weight * state.poison[i])
                    / task.kappa, 0.0), 1.0)
            for i in range(task.n_agents)]


def finish(state: EnvState, task: TaskSpec) -> tuple:
    """(accuracy, tokens_used): accuracy is the best honest agent's score."""
    scores = agent_scores(state, task)
    honest = [s for i, s in enumerate(scores) if i != task.adversary]
    return max(honest), state.tokens


def reward(accuracy, tokens_used, w_acc, w_tok, max_tokens=10_000.0) -> float:
    return w_acc * accuracy - w_tok * min(tokens_used / max_tokens, 1.0)


def evaluate_sequence(task: TaskSpec, config: EnvConfig, sequence, w_acc, w_tok,
                      max_tokens=10_000.0) -> tuple:
    """Play a fixed list of joint actions; return (accuracy, tokens, reward)."""
    n = task.n_agents
    state = EnvState(task.masks, (0,) * n)
    for joint in sequence:
        state = step(state, action_to_adjacency(joint, n), task, config)
    acc, tokens = finish(state, task)
    return acc, tokens, reward(acc, tokens, w_acc, w_tok, max_tokens)


ORACLE_LIMIT = 2_000_000


def oracle_optimal(task: TaskSpec, config: EnvConfig, n_rounds: int, w_acc, w_tok,
                   max_tokens=10_000.0) -> tuple:
    """Best open-loop joint-action sequence by exhaustive search.

    Returns ``(sequence, best_return)``; ties go to the lexicographically
    smallest sequence. Refuses when 6^(N*T) exceeds ``ORACLE_LIMIT``.
    """
    n = task.n_agents
    count = N_ACTIONS ** (n * n_rounds)
    if count > ORACLE_LIMIT:
        raise ValueError(f"open-loop oracle would enumerate {count} sequences "
                         f"(6^({n}*{n_rounds})); limit is {ORACLE_LIMIT}")
    joints = list(itertools.product(range(N_ACTIONS), repeat=n))
    compiled = []
    for j in joints:
        g = action_to_adjacency(j, n)
        compiled.append((j, g, execution_order(g)))

    memo = {}

    def best_from(state, depth):
        if depth == n_rounds:
            acc, tokens = finish(state, task)
            return reward(acc, tokens, w_acc, w_tok, max_tokens), ()
        key = (state.clues, state.poison, state.tokens, depth)
        if key in memo:
            return memo[key]
        best = (-np.inf, ())
        for j, g, order in compiled:
            nxt = step(state, g, task, config, order)
            val, tail = best_from(nxt, depth + 1)
            if val > best[0]:
                best = (val, (j,) + tail)
        memo[key] = best
        return best

    value, seq = best_from(EnvState(task.masks, (0,) * n), 0)
    return seq, value


# -- suite text format -------------------------------------------------------
#
# One task per line, whitespace-separated key=value fields:
#   K=<clues> kappa=<k> clues=<a,b;c;...> adversary=<id or -1> lambda=<poison weight>
# ``clues`` lists each agent's clue ids; agents are separated by ';' and an
# agent with no clues is an empty entry. '#' starts a comment.

def format_task(task: TaskSpec) -> str:
    clues = ";".join(",".join(str(k) for k in c) for c in task.clues)
    return (f"K={task.n_clues} kappa={task.kappa} clues={clues} "
            f"adversary={task.adversary} lambda={task.poison_weight!r}")


def parse_task(line: str) -> TaskSpec:
    fields = {}
    for tok in line.split():
        if "=" not in tok:
            raise ConfigError(f"malformed field {tok!r} in task line {line!r}")
        k, v = tok.split("=", 1)
        fields[k] = v
    missing = {"K", "kappa", "clues"} - fields.keys()
    if missing:
        raise ConfigError(f"task line {line!r} lacks {sorted(missing)}")
    unknown = fields.keys() - {"K", "kappa", "clues", "adversary", "lambda"}
    if unknown:
        raise ConfigError(f"task line {line!r} has unknown fields {sorted(unknown)}")
    try:
        clues = tuple(tuple(int(x) for x in part.split(",") if x)
                      for part in fields["clues"].split(";"))
        return TaskSpec(int(fields["K"]), int(fields["kappa"]), clues,
                        int(fields.get("adversary", -1)),
                        float(fields.get("lambda", 0.5)))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad number in task line {line!r}: {exc}") from exc


def parse_suite(text: str) -> list:
    tasks = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            tasks.append(parse_task(line))
    return tasks


def format_suite(tasks) -> str:
    return "".join(format_task(t) + "\n" for t in tasks)


BUILTIN_SUITES = ("hard", "easy")


def load_suite(name_or_path) -> list:
    """Load a built-in suite by name or a suite file by path."""
    if str(name_or_path) in BUILTIN_SUITES:
        text = resources.files("topomix.suites").joinpath(f"{name_or_path}.txt").read_text()
    else:
        try:
            text = Path(name_or_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read task suite {name_or_path}: {exc}") from exc
    return parse_suite(text)


def save_suite(tasks, path):
    Path(path).write_text(format_suite(tasks))
