"""Episode rollout, replay, batched TD updates, target sync and checkpoints."""
from __future__ import annotations

import io
import logging
import math
import struct
from pathlib import Path

import numpy as np

from . import env as E
from .domain import (N_ACTIONS, CommGraph, ConfigError, Episode, RunConfig,
                     count_active, encode_global_state, encode_observation)
from .metrics import MetricsRecord
from .mixer import Mixer, td_loss
from .numerics import Adam, TrainingFault, clip_global_norm, global_norm, make_rng
from .qnet import AgentNet, select_actions
from .topology import action_to_adjacency

log = logging.getLogger(__name__)


def epsilon(episode_index, total_episodes, start=1.0, end=0.05) -> float:
    """Linear anneal from ``start`` at index 0 to ``end`` at ``total_episodes``."""
    if total_episodes <= 0:
        return end
    frac = min(max(episode_index / total_episodes, 0.0), 1.0)
    return start + (end - start) * frac


class ReplayBuffer:
    """FIFO ring of whole episodes."""

    def __init__(self, capacity=5000):
        if capacity <= 0:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self._items: list = []
        self.inserted = 0

    def __len__(self):
        return len(self._items)

    def add(self, episode: Episode):
        if len(self._items) < self.capacity:
            self._items.append(episode)
        else:
            self._items[self.inserted % self.capacity] = episode
        self.inserted += 1

    def episodes(self) -> list:
        """Stored episodes, oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        k = self.inserted % self.capacity
        return self._items[k:] + self._items[:k]

    def sample(self, batch_size, rng) -> list:
        if len(self._items) < batch_size:
            raise ValueError(f"buffer holds {len(self._items)} episodes, need {batch_size}")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


def rollout(agent: AgentNet, task: E.TaskSpec, cfg: RunConfig, env_cfg: E.EnvConfig,
            eps: float, rng) -> Episode:
    """Play one episode: observe on the current graph, act, re-wire, execute."""
    n, T = cfg.n_agents, cfg.n_rounds
    if task.n_agents != n:
        raise ConfigError(f"task has {task.n_agents} agents, config expects {n}")
    state, _ = E.reset(task, env_cfg, rng)
    graph = CommGraph.identity(n)
    prev = None
    z = agent.initial_state(1, n)
    obs_l, act_l, graph_l, state_l, exec_l = [], [], [], [], []
    for t in range(1, T + 1):
        feats = E.task_features(state, task)
        obs = np.stack([
            encode_observation(i, t, prev[i] if prev else None, graph, state.tokens, feats[i],
                               n_rounds=T, max_tokens=cfg.max_tokens)
            for i in range(n)])
        active = n if prev is None else count_active(prev)
        s = encode_global_state(obs, graph, active)
        q, z, _ = agent.forward_round(obs[None], graph.adj[None], z, keep_cache=False)
        joint = select_actions(q[0], eps, rng)
        new_graph = action_to_adjacency(joint, n)
        state = E.step(state, new_graph, task, env_cfg)
        obs_l.append(obs)
        act_l.append(np.array(joint, dtype=np.int64))
        graph_l.append(graph.adj)
        state_l.append(s)
        exec_l.append(new_graph.adj)
        graph, prev = new_graph, joint
    acc, tokens = E.finish(state, task)
    R = E.reward(acc, tokens, cfg.w_acc, cfg.w_tok, cfg.max_tokens)
    return Episode(np.stack(obs_l), np.stack(act_l), np.stack(graph_l), np.stack(state_l),
                   R, acc, tokens, np.stack(exec_l))


class Trainer:
    """Online/target networks, optimiser state, replay and the RNG stream."""

    def __init__(self, cfg: RunConfig, tasks=None, seed=None):
        self.cfg = cfg
        self.env_cfg = E.EnvConfig.from_run(cfg)
        self.tasks = list(tasks) if tasks is not None else E.load_suite(cfg.suite)
        self.seed = cfg.seed if seed is None else seed
        init_rng = make_rng(self.seed)
        self.agent = AgentNet(cfg.obs_dim, cfg.hidden_dim, cfg.gnn_layers, rng=init_rng)
        self.mixer = Mixer(cfg.n_agents, cfg.state_dim, cfg.mixing_dim, cfg.hyper_hidden,
                           rng=init_rng, weight_init_scale=cfg.mixer_init_scale)
        self.target_agent = self.agent.copy()
        self.target_mixer = self.mixer.copy()
        self.adam_agent = Adam(self.agent.params, lr=cfg.lr, eps=cfg.adam_eps)
        self.adam_mixer = Adam(self.mixer.params, lr=cfg.lr, eps=cfg.adam_eps)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.rng = make_rng(self.seed + 1)
        self.grad_steps = 0
        self.episodes_done = 0
        self.last_grad_norm = 0.0

    # -- loop pieces ----------------------------------------------------------

    def epsilon_for(self, episode_index) -> float:
        return epsilon(episode_index, max(self.cfg.episodes - 1, 1),
                       self.cfg.eps_start, self.cfg.eps_end)

    def sample_task(self) -> E.TaskSpec:
        task = self.tasks[int(self.rng.integers(len(self.tasks)))]
        if task.adversary < 0 and self.rng.random() < self.env_cfg.adversary_prob:
            slot = int(self.rng.integers(self.cfg.n_agents))
            task = task.with_adversary(slot, self.cfg.poison_weight)
        return task

    def run_episode(self, task, eps, rng=None) -> Episode:
        return rollout(self.agent, task, self.cfg, self.env_cfg, eps,
                       self.rng if rng is None else rng)

    def train_step(self, batch) -> float:
        loss, ag, mg = td_loss(batch, self.agent, self.mixer, self.target_agent,
                               self.target_mixer, self.cfg.gamma)
        if not math.isfinite(loss):
            raise TrainingFault(_batch_dump(batch, loss))
        grads = {**ag, **mg}
        self.last_grad_norm = clip_global_norm(grads, self.cfg.clip_norm)
        self.adam_agent.step(self.agent.params, ag)
        self.adam_mixer.step(self.mixer.params, mg)
        self.grad_steps += 1
        if self.grad_steps % self.cfg.target_interval == 0:
            self.sync_targets()
        return loss

    def sync_targets(self):
        self.target_agent.params.assign(self.agent.params)
        self.target_mixer.params.assign(self.mixer.params)

    def train_episode(self) -> MetricsRecord:
        i = self.episodes_done
        eps = self.epsilon_for(i)
        ep = self.run_episode(self.sample_task(), eps)
        self.buffer.add(ep)
        loss = float("nan")
        if len(self.buffer) >= self.cfg.batch_size:
            loss = self.train_step(self.buffer.sample(self.cfg.batch_size, self.rng))
        self.episodes_done += 1
        counts = np.bincount(ep.actions.ravel(), minlength=N_ACTIONS)
        n = self.cfg.n_agents
        density = float(np.mean([(g.sum() - n) / (n * (n - 1)) for g in ep.executed]))
        return MetricsRecord(i, eps, ep.reward, ep.accuracy, ep.tokens, loss,
                             tuple(int(c) for c in counts), density)

    def train(self, until=None, on_record=None, on_checkpoint=None) -> list:
        """Train until ``until`` episodes have been played in total (default: config)."""
        until = self.cfg.episodes if until is None else until
        records = []
        while self.episodes_done < until:
            rec = self.train_episode()
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            if on_checkpoint is not None and self.episodes_done % self.cfg.checkpoint_interval == 0:
                on_checkpoint(self)
        return records

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        Path(path).write_bytes(checkpoint_bytes(self))

    @classmethod
    def load(cls, path, cfg: RunConfig | None = None, tasks=None) -> "Trainer":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
        return trainer_from_bytes(data, cfg, tasks)


def _batch_dump(batch, loss) -> str:
    lines = [f"non-finite TD loss {loss!r} on a batch of {len(batch)} episodes:"]
    for k, ep in enumerate(batch):
        lines.append(f"  [{k}] reward={ep.reward!r} actions={ep.actions.tolist()} "
                     f"obs_finite={bool(np.all(np.isfinite(ep.observations)))}")
    return "\n".join(lines)


def greedy_return(agent, tasks, cfg, env_cfg=None, seed=0) -> float:
    """Mean episode reward of the epsilon=0 policy over ``tasks``."""
    env_cfg = env_cfg or E.EnvConfig.from_run(cfg)
    rng = make_rng(seed)
    return float(np.mean([rollout(agent, t, cfg, env_cfg, 0.0, rng).reward for t in tasks]))


# -- checkpoint format ------------------------------------------------------
#
# little-endian throughout
#   b"AQMX"  u32 version
#   header   u32 x 9: N, T, D, F, hidden, gnn_layers, mixing_dim, hyper_hidden, n_actions
#            u64 x 3: grad_steps, episodes_done, adam_steps
#            u64 seed
#   config   u32 length + UTF-8 ``key = value`` text
#   params   f64 arrays, in order: online agent, online mixer, target agent,
#            target mixer, adam agent m, adam agent v, adam mixer m, adam mixer v;
#            inside each block segments follow ParameterStore insertion order
#   rng      PCG64 state: u128 state, u128 inc, u32 has_uint32, u32 uinteger
#   replay   u64 inserted, u32 count, then per episode (oldest first):
#            f64 reward, accuracy, tokens; f64 obs[T,N,D]; i64 actions[T,N];
#            u8 graphs[T,N,N]; f64 states[T,S]; u8 executed[T,N,N]

MAGIC = b"AQMX"
VERSION = 1
_HEADER = struct.Struct("<9I3QQ")


def _blocks(tr: Trainer):
    return [
        (tr.agent.params.values, "online agent"),
        (tr.mixer.params.values, "online mixer"),
        (tr.target_agent.params.values, "target agent"),
        (tr.target_mixer.params.values, "target mixer"),
        (tr.adam_agent.m, "adam agent m"), (tr.adam_agent.v, "adam agent v"),
        (tr.adam_mixer.m, "adam mixer m"), (tr.adam_mixer.v, "adam mixer v"),
    ]


def checkpoint_bytes(tr: Trainer) -> bytes:
    cfg = tr.cfg
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(_HEADER.pack(cfg.n_agents, cfg.n_rounds, cfg.obs_dim, cfg.n_task_features,
                           cfg.hidden_dim, cfg.gnn_layers, cfg.mixing_dim, cfg.hyper_hidden,
                           N_ACTIONS, tr.grad_steps, tr.episodes_done, tr.adam_agent.t,
                           tr.seed))
    text = cfg.to_text().encode()
    out.write(struct.pack("<I", len(text)))
    out.write(text)
    for block, _ in _blocks(tr):
        for arr in block.values():
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    st = tr.rng.bit_generator.state["state"]
    out.write(st["state"].to_bytes(16, "little"))
    out.write(st["inc"].to_bytes(16, "little"))
    bg = tr.rng.bit_generator.state
    out.write(struct.pack("<II", bg["has_uint32"], bg["uinteger"]))
    eps = tr.buffer.episodes()
    out.write(struct.pack("<QI", tr.buffer.inserted, len(eps)))
    for ep in eps:
        out.write(struct.pack("<3d", ep.reward, ep.accuracy, ep.tokens))
        out.write(np.ascontiguousarray(ep.observations, dtype="<f8").tobytes())
        out.write(np.ascontiguousarray(ep.actions, dtype="<i8").tobytes())
        out.write(np.ascontiguousarray(ep.graphs, dtype="u1").tobytes())
        out.write(np.ascontiguousarray(ep.states, dtype="<f8").tobytes())
        out.write(np.ascontiguousarray(ep.executed, dtype="u1").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ConfigError(f"checkpoint truncated while reading {what}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def array(self, dtype, shape, what):
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) * dt.itemsize
        return np.frombuffer(self.take(n, what), dtype=dt).reshape(shape).copy()


def trainer_from_bytes(data: bytes, cfg: RunConfig | None = None, tasks=None) -> Trainer:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ConfigError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (N, T, D, F, H, L, M, HH, A, grad_steps, episodes_done, adam_t, seed) = \
        r.unpack(_HEADER.format, "header")
    (tlen,) = r.unpack("<I", "config length")
    stored = RunConfig.from_text(r.take(tlen, "config").decode())
    cfg = cfg or stored
    expected = {"N": (N, cfg.n_agents), "T": (T, cfg.n_rounds), "D": (D, cfg.obs_dim),
                "F": (F, cfg.n_task_features), "hidden": (H, cfg.hidden_dim),
                "gnn_layers": (L, cfg.gnn_layers), "mixing_dim": (M, cfg.mixing_dim),
                "hyper_hidden": (HH, cfg.hyper_hidden), "n_actions": (A, N_ACTIONS)}
    for name, (got, want) in expected.items():
        if got != want:
            raise ConfigError(f"checkpoint header {name}={got} does not match expected {want}")

    tr = Trainer(cfg, tasks=tasks if tasks is not None else [], seed=seed)
    if tasks is None:
        try:
            tr.tasks = E.load_suite(cfg.suite)
        except ConfigError:
            tr.tasks = []
    for block, what in _blocks(tr):
        for name, arr in block.items():
            arr[...] = r.array("<f8", arr.shape, f"{what} {name}")
    tr.grad_steps, tr.episodes_done = grad_steps, episodes_done
    tr.adam_agent.t = tr.adam_mixer.t = adam_t

    s = int.from_bytes(r.take(16, "rng state"), "little")
    inc = int.from_bytes(r.take(16, "rng inc"), "little")
    has32, u32 = r.unpack("<II", "rng cache")
    tr.rng.bit_generator.state = {"bit_generator": "PCG64", "state": {"state": s, "inc": inc},
                                  "has_uint32": has32, "uinteger": u32}

    inserted, count = r.unpack("<QI", "replay header")
    S = cfg.state_dim
    eps = []
    for k in range(count):
        rew, acc, tok = r.unpack("<3d", f"episode {k}")
        obs = r.array("<f8", (T, N, D), f"episode {k} observations")
        acts = r.array("<i8", (T, N), f"episode {k} actions").astype(np.int64)
        graphs = r.array("u1", (T, N, N), f"episode {k} graphs").astype(bool)
        states = r.array("<f8", (T, S), f"episode {k} states")
        executed = r.array("u1", (T, N, N), f"episode {k} executed").astype(bool)
        eps.append(Episode(obs, acts, graphs, states, rew, acc, tok, executed))
    if r.pos != len(data):
        raise ConfigError(f"checkpoint has {len(data) - r.pos} trailing bytes")
    # rebuild ring so that slot order matches the saved buffer
    buf = ReplayBuffer(cfg.buffer_capacity)
    if count < cfg.buffer_capacity:
        buf._items = eps
    else:
        k = inserted % cfg.buffer_capacity
        buf._items = eps[len(eps) - k:] + eps[:len(eps) - k] if k else eps
    buf.inserted = inserted
    tr.buffer = buf
    return tr
