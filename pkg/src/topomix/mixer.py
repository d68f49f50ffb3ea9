"""Monotonic value mixing with state-conditioned hypernetworks, the TD loss,
and the exhaustive joint-argmax oracle."""
from __future__ import annotations

import itertools

import numpy as np

from .domain import N_ACTIONS, CommAction
from .numerics import (ParameterStore, affine, affine_backward, elu, elu_grad,
                       xavier_init)

HYPERNETS = ("w1", "b1", "w2", "b2")


class Mixer:
    """Q_tot = |W2(s)| . ELU(|W1(s)| q + b1(s)) + b2(s).

    Each of W1, b1, W2, b2 is produced by its own one-hidden-layer
    hypernetwork (ELU hidden units). ``monotone=False`` drops the abs() and
    exists only to demonstrate what breaks without it.
    """

    def __init__(self, n_agents, state_dim, mixing_dim=64, hyper_hidden=64, rng=None,
                 params: ParameterStore | None = None, monotone=True, weight_init_scale=1.0):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.mixing_dim = mixing_dim
        self.hyper_hidden = hyper_hidden
        self.monotone = monotone
        self.weight_init_scale = weight_init_scale
        if params is None:
            params = self._init_params(rng)
        self.params = params

    def _out_dims(self):
        M, N = self.mixing_dim, self.n_agents
        return {"w1": M * N, "b1": M, "w2": M, "b2": 1}

    def _init_params(self, rng):
        p = ParameterStore()
        for name, out in self._out_dims().items():
            p.add(f"hyper_{name}_W1", xavier_init((self.hyper_hidden, self.state_dim), rng))
            p.add(f"hyper_{name}_b1", np.zeros(self.hyper_hidden))
            W2 = xavier_init((out, self.hyper_hidden), rng)
            if name in ("w1", "w2"):
                W2 *= self.weight_init_scale
            p.add(f"hyper_{name}_W2", W2)
            p.add(f"hyper_{name}_b2", np.zeros(out))
        return p

    def copy(self) -> "Mixer":
        return Mixer(self.n_agents, self.state_dim, self.mixing_dim, self.hyper_hidden,
                     params=self.params.copy(), monotone=self.monotone)

    def _hyper(self, name, s):
        p = self.params
        a = affine(s, p[f"hyper_{name}_W1"], p[f"hyper_{name}_b1"])
        out = affine(elu(a), p[f"hyper_{name}_W2"], p[f"hyper_{name}_b2"])
        return out, a

    def _hyper_backward(self, name, s, a, dout, grads):
        p = self.params
        e = elu(a)
        de, dW2, db2 = affine_backward(dout, e, p[f"hyper_{name}_W2"])
        grads[f"hyper_{name}_W2"] += dW2
        grads[f"hyper_{name}_b2"] += db2
        da = de * elu_grad(a)
        ds, dW1, db1 = affine_backward(da, s, p[f"hyper_{name}_W1"])
        grads[f"hyper_{name}_W1"] += dW1
        grads[f"hyper_{name}_b1"] += db1
        return ds

    def weights(self, s):
        """Mixing weights for state rows ``s`` (R, S): W1 (R,M,N), b1, W2 (R,M), b2 (R,)."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        w1_raw, _ = self._hyper("w1", s)
        b1, _ = self._hyper("b1", s)
        w2_raw, _ = self._hyper("w2", s)
        b2, _ = self._hyper("b2", s)
        w1 = w1_raw.reshape(-1, self.mixing_dim, self.n_agents)
        if self.monotone:
            return np.abs(w1), b1, np.abs(w2_raw), b2[:, 0]
        return w1, b1, w2_raw, b2[:, 0]

    def forward(self, q, s, keep_cache=True):
        """Mix rows of agent values ``q`` (R, N) under states ``s`` (R, S)."""
        q = np.asarray(q, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        lead = q.shape[:-1]
        if q.shape[-1] != self.n_agents:
            raise ValueError(f"expected {self.n_agents} agent values, got {q.shape[-1]}")
        q2 = q.reshape(-1, self.n_agents)
        s2 = s.reshape(-1, self.state_dim)
        raw = {}
        pre_h = {}
        for name in HYPERNETS:
            raw[name], pre_h[name] = self._hyper(name, s2)
        w1_raw = raw["w1"].reshape(-1, self.mixing_dim, self.n_agents)
        w1 = np.abs(w1_raw) if self.monotone else w1_raw
        w2 = np.abs(raw["w2"]) if self.monotone else raw["w2"]
        pre = np.einsum("rmn,rn->rm", w1, q2) + raw["b1"]
        hid = elu(pre)
        qtot = np.sum(w2 * hid, axis=-1) + raw["b2"][:, 0]
        cache = (q2, s2, raw, pre_h, w1, w2, pre, hid, lead) if keep_cache else None
        return qtot.reshape(lead), cache

    def backward(self, cache, dqtot, grads):
        """Accumulate parameter grads; return (dq, ds)."""
        q2, s2, raw, pre_h, w1, w2, pre, hid, lead = cache
        d = np.asarray(dqtot, dtype=np.float64).reshape(-1)
        dw2 = d[:, None] * hid
        dpre = d[:, None] * w2 * elu_grad(pre)
        dw1 = dpre[:, :, None] * q2[:, None, :]
        dq = np.einsum("rmn,rm->rn", w1, dpre)
        if self.monotone:
            dw1 = dw1 * np.sign(raw["w1"].reshape(dw1.shape))
            dw2 = dw2 * np.sign(raw["w2"])
        douts = {"w1": dw1.reshape(dw1.shape[0], -1), "b1": dpre, "w2": dw2, "b2": d[:, None]}
        ds = np.zeros_like(s2)
        for name in HYPERNETS:
            ds += self._hyper_backward(name, s2, pre_h[name], douts[name], grads)
        return dq.reshape(lead + (self.n_agents,)), ds.reshape(lead + (self.state_dim,))


def mix(q, s, mixer: Mixer) -> float:
    qtot, _ = mixer.forward(np.asarray(q, dtype=np.float64)[None], np.asarray(s)[None],
                            keep_cache=False)
    return float(qtot[0])


def decentralized_argmax(q_tables) -> tuple:
    """Each agent takes its own argmax (lowest index wins ties)."""
    return tuple(CommAction(int(a)) for a in np.argmax(np.asarray(q_tables), axis=-1))


MAX_BRUTEFORCE_AGENTS = 6


def joint_bruteforce_argmax(q_tables, s, mixer: Mixer) -> tuple:
    """Evaluate Q_tot for every joint action and return the best one.

    Ties resolve to the lexicographically smallest joint action.
    """
    q_tables = np.asarray(q_tables, dtype=np.float64)
    n = q_tables.shape[0]
    if n > MAX_BRUTEFORCE_AGENTS:
        raise ValueError(f"refusing to enumerate {N_ACTIONS ** n} joint actions (N={n})")
    joints = np.array(list(itertools.product(range(N_ACTIONS), repeat=n)))
    qs = q_tables[np.arange(n)[None, :], joints]
    states = np.broadcast_to(np.asarray(s, dtype=np.float64), (len(joints), mixer.state_dim))
    values, _ = mixer.forward(qs, states, keep_cache=False)
    best = int(np.argmax(values))
    return tuple(CommAction(int(a)) for a in joints[best])


# -- temporal-difference loss -----------------------------------------------

def stack_episodes(episodes):
    if len(episodes) == 0:
        raise ValueError("td_loss needs a non-empty batch")
    obs = np.stack([e.observations for e in episodes])
    acts = np.stack([e.actions for e in episodes]).astype(np.int64)
    graphs = np.stack([e.graphs for e in episodes])
    states = np.stack([e.states for e in episodes])
    rewards = np.array([e.reward for e in episodes], dtype=np.float64)
    return obs, acts, graphs, states, rewards


def td_targets(episodes, target_agent, target_mixer, gamma):
    """y_t = gamma * max_u Q_tot^-(t+1) for t < T, y_T = R (zero intermediate reward)."""
    obs, _, graphs, states, rewards = stack_episodes(episodes)
    B, T, N, _ = obs.shape
    z = target_agent.initial_state(B, N)
    qtot_next = np.zeros((B, T))
    for t in range(T):
        q, z, _ = target_agent.forward_round(obs[:, t], graphs[:, t], z, keep_cache=False)
        # monotone mixer: joint max == mix of per-agent maxima
        qtot_next[:, t], _ = target_mixer.forward(q.max(axis=-1), states[:, t], keep_cache=False)
    y = np.empty((B, T))
    y[:, :-1] = gamma * qtot_next[:, 1:]
    y[:, -1] = rewards
    return y


def td_loss(episodes, agent, mixer, target_agent, target_mixer, gamma):
    """Mean squared TD error over all rounds of all episodes.

    Returns ``(loss, agent_grads, mixer_grads)``; gradients reach every
    online parameter through the recurrent unroll.
    """
    obs, acts, graphs, states, _ = stack_episodes(episodes)
    B, T, N, _ = obs.shape
    y = td_targets(episodes, target_agent, target_mixer, gamma)

    z = agent.initial_state(B, N)
    caches, qs, mcaches = [], [], []
    qtot = np.empty((B, T))
    for t in range(T):
        q, z, cache = agent.forward_round(obs[:, t], graphs[:, t], z)
        caches.append(cache)
        qs.append(q)
        chosen = np.take_along_axis(q, acts[:, t, :, None], axis=-1)[..., 0]
        qtot[:, t], mc = mixer.forward(chosen, states[:, t])
        mcaches.append(mc)

    err = qtot - y
    loss = float(np.mean(err ** 2))
    dqtot = 2.0 * err / err.size

    agrads = agent.params.zeros_like()
    mgrads = mixer.params.zeros_like()
    dz = None
    for t in reversed(range(T)):
        dchosen, _ = mixer.backward(mcaches[t], dqtot[:, t], mgrads)
        dq = np.zeros_like(qs[t])
        np.put_along_axis(dq, acts[:, t, :, None], dchosen[..., None], axis=-1)
        dz, _ = agent.backward_round(caches[t], dq, dz, agrads)
    return loss, agrads, mgrads
