"""Diagnostics over trained policies: greedy evaluation (with optional
adversary injection), per-round topology statistics, the oracle table and
the property checks behind ``verify``."""
from __future__ import annotations

import io
import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import env as E
from .domain import N_ACTIONS, CommAction, ConfigError, Episode, RunConfig, state_dim
from .mixer import Mixer, decentralized_argmax, joint_bruteforce_argmax, td_loss
from .numerics import make_rng
from .qnet import AgentNet
from .topology import action_to_adjacency
from .trainer import Trainer, checkpoint_bytes, rollout


def _check_suite(tasks, cfg: RunConfig):
    if not tasks:
        raise ConfigError("task suite is empty")
    for k, t in enumerate(tasks):
        if t.n_agents != cfg.n_agents:
            raise ConfigError(f"task {k} has {t.n_agents} agents, checkpoint expects {cfg.n_agents}")


def greedy_episodes(agent, tasks, cfg: RunConfig, env_cfg=None, seed=0) -> list:
    """epsilon=0 rollouts, one per task, in suite order."""
    _check_suite(tasks, cfg)
    env_cfg = env_cfg or E.EnvConfig.from_run(cfg)
    rng = make_rng(seed)
    return [rollout(agent, t, cfg, env_cfg, 0.0, rng) for t in tasks]


def fixed_policy_episodes(joint, tasks, cfg: RunConfig, env_cfg=None) -> list:
    """Episodes of a policy that plays the same joint action every round."""
    _check_suite(tasks, cfg)
    env_cfg = env_cfg or E.EnvConfig.from_run(cfg)
    g = action_to_adjacency(joint, cfg.n_agents)
    out = []
    for t in tasks:
        acc, tokens, R = E.evaluate_sequence(t, env_cfg, [joint] * cfg.n_rounds,
                                             cfg.w_acc, cfg.w_tok, cfg.max_tokens)
        T, n = cfg.n_rounds, cfg.n_agents
        out.append(Episode(np.zeros((T, n, cfg.obs_dim)),
                           np.tile(np.array(joint, dtype=np.int64), (T, 1)),
                           np.zeros((T, n, n), dtype=bool), np.zeros((T, cfg.state_dim)),
                           R, acc, tokens, np.stack([g.adj] * T)))
    return out


def out_edges(ep: Episode, slot: int) -> float:
    """Mean per-round count of non-self edges leaving ``slot``."""
    ex = ep.executed
    return float(np.mean(ex[:, slot, :].sum(axis=-1) - ex[:, slot, slot]))


@dataclass
class EvalReport:
    accuracy: float
    tokens: float
    reward: float
    n_tasks: int
    adversarial_accuracy: float | None = None
    delta: float | None = None
    adversary_out_edges: float | None = None
    clean_out_edges: float | None = None
    baseline_delta: float | None = None

    def lines(self) -> list:
        rows = [("accuracy", self.accuracy), ("tokens", self.tokens), ("reward", self.reward),
                ("tasks", self.n_tasks)]
        for name in ("adversarial_accuracy", "delta", "adversary_out_edges",
                     "clean_out_edges", "baseline_delta"):
            v = getattr(self, name)
            if v is not None:
                rows.append((name, v))
        return [f"{k},{v!r}" for k, v in rows]


def injected(tasks, slot, poison_weight):
    return [t.with_adversary(slot, poison_weight) for t in tasks]


def evaluate(agent, tasks, cfg: RunConfig, adversary=False, seed=0) -> EvalReport:
    """Greedy evaluation; with ``adversary`` every task is replayed once per
    agent slot with that slot turned adversarial.

    Clean tasks that already name an adversary are stripped of it first, so
    "clean" always means no adversary at all.
    """
    tasks = [t.without_adversary() for t in tasks]
    clean = greedy_episodes(agent, tasks, cfg, seed=seed)
    rep = EvalReport(float(np.mean([e.accuracy for e in clean])),
                     float(np.mean([e.tokens for e in clean])),
                     float(np.mean([e.reward for e in clean])), len(tasks))
    if not adversary:
        return rep
    n = cfg.n_agents
    adv_acc, adv_edges, clean_edges = [], [], []
    bcast = (CommAction.BROADCAST_ALL,) * n
    b_clean = np.mean([e.accuracy for e in fixed_policy_episodes(bcast, tasks, cfg)])
    b_adv = []
    for slot in range(n):
        eps = greedy_episodes(agent, injected(tasks, slot, cfg.poison_weight), cfg, seed=seed)
        adv_acc += [e.accuracy for e in eps]
        adv_edges += [out_edges(e, slot) for e in eps]
        clean_edges += [out_edges(e, slot) for e in clean]
        b_adv += [e.accuracy for e in fixed_policy_episodes(
            bcast, injected(tasks, slot, cfg.poison_weight), cfg)]
    rep.adversarial_accuracy = float(np.mean(adv_acc))
    rep.delta = rep.accuracy - rep.adversarial_accuracy
    rep.adversary_out_edges = float(np.mean(adv_edges))
    rep.clean_out_edges = float(np.mean(clean_edges))
    rep.baseline_delta = float(b_clean - np.mean(b_adv))
    return rep


# -- topology diagnostics ---------------------------------------------------

@dataclass
class TopologyStats:
    histogram: np.ndarray      # (T, 6) action counts per round
    density: np.ndarray        # (T,) mean density of the executed graph
    adjacency: np.ndarray      # (T, N, N) mean executed adjacency per round

    @property
    def mean_adjacency(self) -> np.ndarray:
        return self.adjacency.mean(axis=0)


def topology_stats(episodes) -> TopologyStats:
    acts = np.stack([e.actions for e in episodes])           # (E, T, N)
    ex = np.stack([e.executed for e in episodes]).astype(float)
    T, n = acts.shape[1], acts.shape[2]
    hist = np.stack([np.bincount(acts[:, t].ravel(), minlength=N_ACTIONS) for t in range(T)])
    off = ex.sum(axis=(-1, -2)) - n
    density = (off / (n * (n - 1))).mean(axis=0)
    return TopologyStats(hist, density, ex.mean(axis=0))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def topology_tables(stats: TopologyStats) -> dict:
    """The three diagnostics as CSV text, keyed by table name."""
    T, n = stats.adjacency.shape[0], stats.adjacency.shape[1]
    hist = _csv(["round"] + [a.label for a in CommAction],
                [[t + 1] + stats.histogram[t].tolist() for t in range(T)])
    dens = _csv(["round", "mean_density"], [[t + 1, repr(float(d))] for t, d in
                                            enumerate(stats.density)])
    adj = _csv(["sender"] + [f"to_{j}" for j in range(n)],
               [[i] + [repr(float(v)) for v in stats.mean_adjacency[i]] for i in range(n)])
    return {"action_histogram": hist, "round_density": dens, "mean_adjacency": adj}


# -- oracle table -----------------------------------------------------------

def oracle_rows(tasks, cfg: RunConfig) -> list:
    """Per task: (index, optimum, accuracy, tokens, sequence as action codes)."""
    env_cfg = E.EnvConfig.from_run(cfg)
    rows = []
    for k, t in enumerate(tasks):
        seq, value = E.oracle_optimal(t, env_cfg, cfg.n_rounds, cfg.w_acc, cfg.w_tok,
                                      cfg.max_tokens)
        acc, tokens, _ = E.evaluate_sequence(t, env_cfg, seq, cfg.w_acc, cfg.w_tok,
                                             cfg.max_tokens)
        rows.append((k, value, acc, tokens, seq))
    return rows


def oracle_table(rows) -> str:
    body = [[k, repr(v), repr(a), repr(tok), "|".join("".join(str(int(x)) for x in j) for j in seq)]
            for k, v, a, tok, seq in rows]
    mean = float(np.mean([r[1] for r in rows])) if rows else float("nan")
    return _csv(["task", "optimal_return", "accuracy", "tokens", "sequence"], body) \
        + f"# mean,{mean!r}\n"


# -- property checks --------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: worst={self.worst:.3e}{extra} [{self.seconds:.1f}s]"


def _random_mixer(rng, n=3, s_dim=None, monotone=True, mixing_dim=64, hyper_hidden=64):
    s_dim = s_dim or state_dim(n, RunConfig(n_agents=n).obs_dim)
    return Mixer(n, s_dim, mixing_dim, hyper_hidden, rng=rng, monotone=monotone)


def check_monotonicity(draws=1000, seed=0, monotone=True, delta=0.1, tol=1e-12) -> CheckResult:
    """Raise each agent value by ``delta`` in turn; Q_tot may not fall."""
    rng = make_rng(seed)
    worst = 0.0
    n = 3
    for _ in range(draws):
        mixer = _random_mixer(rng, n, monotone=monotone)
        q = rng.normal(size=n)
        s = rng.normal(size=mixer.state_dim)
        bumped = np.tile(q, (n + 1, 1))
        bumped[np.arange(1, n + 1), np.arange(n)] += delta
        vals, _ = mixer.forward(bumped, np.tile(s, (n + 1, 1)), keep_cache=False)
        worst = max(worst, float(np.max(vals[0] - vals[1:])))
    return CheckResult("monotonicity", worst <= tol, worst, f"{draws} draws, max Q_tot decrease")


def check_igm(draws=1000, seed=1, monotone=True) -> CheckResult:
    """Per-agent argmax must equal the brute-force joint argmax."""
    rng = make_rng(seed)
    n = 3
    misses = 0
    worst = 0.0
    witness = ""
    for k in range(draws):
        mixer = _random_mixer(rng, n, monotone=monotone)
        q = rng.normal(size=(n, N_ACTIONS))
        s = rng.normal(size=mixer.state_dim)
        dec = decentralized_argmax(q)
        joint = joint_bruteforce_argmax(q, s, mixer)
        if dec != joint:
            misses += 1
            qs = q[np.arange(n), [list(dec), list(joint)]]
            vals, _ = mixer.forward(qs, np.tile(s, (2, 1)), keep_cache=False)
            gap = float(vals[1] - vals[0])
            if gap > worst:
                worst = gap
                witness = (f"draw {k}: decentralized {[int(a) for a in dec]} vs "
                           f"joint {[int(a) for a in joint]}")
    detail = f"{draws - misses}/{draws} exact matches"
    if witness:
        detail += f"; counterexample {witness}"
    return CheckResult("igm", misses == 0, worst, detail)


def random_batch(rng, n=2, T=2, obs_dim=12, batch=3) -> list:
    eps = []
    s_dim = state_dim(n, obs_dim)
    for _ in range(batch):
        adj = rng.random((T, n, n)) < 0.5
        for t in range(T):
            np.fill_diagonal(adj[t], True)
        eps.append(Episode(rng.normal(size=(T, n, obs_dim)),
                           rng.integers(0, N_ACTIONS, size=(T, n)), adj,
                           rng.normal(size=(T, s_dim)), float(rng.normal())))
    return eps


def gradient_check(seed=0, n=2, T=2, obs_dim=12, hidden=6, mixing_dim=5, hyper_hidden=5,
                   h=1e-5, tol=1e-4, floor=1e-6, monotone=True) -> CheckResult:
    """Full-stack central differences on every online parameter.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    rng = make_rng(seed)
    agent = AgentNet(obs_dim, hidden, 2, rng=rng)
    mixer = Mixer(n, state_dim(n, obs_dim), mixing_dim, hyper_hidden, rng=rng, monotone=monotone)
    # randomise everything, including the zero-initialised output layer
    for store in (agent.params, mixer.params):
        store.set_flat(rng.normal(scale=0.4, size=store.size))
    t_agent, t_mixer = agent.copy(), mixer.copy()
    for store in (t_agent.params, t_mixer.params):
        store.set_flat(store.flat() + rng.normal(scale=0.1, size=store.size))
    batch = random_batch(rng, n, T, obs_dim)
    gamma = 0.9

    def loss():
        return td_loss(batch, agent, mixer, t_agent, t_mixer, gamma)[0]

    _, ag, mg = td_loss(batch, agent, mixer, t_agent, t_mixer, gamma)
    worst = 0.0
    where = ""
    for store, grads in ((agent.params, ag), (mixer.params, mg)):
        for name in store.names():
            arr = store[name]
            g = grads[name]
            flat = arr.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                lp = loss()
                flat[i] = old - h
                lm = loss()
                flat[i] = old
                num = (lp - lm) / (2 * h)
                ana = g.reshape(-1)[i]
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                if rel > worst:
                    worst, where = rel, f"{name}[{i}]"
    return CheckResult("gradient", worst <= tol, worst, f"max rel. error at {where}")


def check_determinism(seed=0, episodes=12) -> CheckResult:
    """Two identical short runs must give identical metrics and checkpoints."""
    cfg = RunConfig(hidden_dim=8, mixing_dim=4, hyper_hidden=4, episodes=episodes,
                    batch_size=4, target_interval=3, seed=seed)
    runs = []
    for _ in range(2):
        tr = Trainer(cfg)
        recs = tr.train()
        runs.append((recs, checkpoint_bytes(tr)))
    same = runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    return CheckResult("determinism", same, 0.0 if same else 1.0,
                       f"{episodes} episodes, {len(runs[0][1])} checkpoint bytes")


def run_checks(monotone=True) -> list:
    out = []
    for fn in (lambda: check_monotonicity(monotone=monotone),
               lambda: check_igm(monotone=monotone),
               lambda: gradient_check(monotone=monotone),
               check_determinism):
        t0 = time.perf_counter()
        res = fn()
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
