"""Topology-aware agent Q-network: GNN encoder -> temporal GRU -> Q-head.

One parameter set serves every agent; arrays are batched as (B, N, ...)
where B indexes episodes and N agents.
"""
from __future__ import annotations

import numpy as np

from .domain import N_ACTIONS, CommAction
from .numerics import (ParameterStore, affine, affine_backward, elu, elu_grad,
                       gru_cell, gru_cell_backward, gru_init, xavier_init)


def aggregation_matrix(adj):
    """Row-normalised in-neighbour matrix: ``P[b, v, u] = adj[b, u, v] / indeg(v)``.

    Self-loops are part of the neighbourhood, so every row is a proper mean.
    """
    adj = np.asarray(adj, dtype=bool)
    a = np.swapaxes(adj | np.eye(adj.shape[-1], dtype=bool), -1, -2).astype(np.float64)
    return a / a.sum(axis=-1, keepdims=True)


class AgentNet:
    def __init__(self, obs_dim, hidden=128, gnn_layers=2, n_actions=N_ACTIONS,
                 rng=None, params: ParameterStore | None = None):
        self.obs_dim = obs_dim
        self.hidden = hidden
        self.gnn_layers = gnn_layers
        self.n_actions = n_actions
        if params is None:
            params = self._init_params(rng)
        self.params = params

    def _init_params(self, rng):
        H, D = self.hidden, self.obs_dim
        p = ParameterStore()
        p.add("in_W", xavier_init((H, D), rng))
        p.add("in_b", np.zeros(H))
        for l in range(self.gnn_layers):
            p.add(f"gnn{l}_msg_W", xavier_init((H, H), rng))
            p.add(f"gnn{l}_msg_b", np.zeros(H))
            gru_init(p, f"gnn{l}_gru_", H, H, rng)
        gru_init(p, "rnn_", H, H, rng)
        p.add("head1_W", xavier_init((H, H), rng))
        p.add("head1_b", np.zeros(H))
        # zero output layer: an untrained net has all-equal Q-values
        p.add("head2_W", np.zeros((self.n_actions, H)))
        p.add("head2_b", np.zeros(self.n_actions))
        return p

    def copy(self) -> "AgentNet":
        return AgentNet(self.obs_dim, self.hidden, self.gnn_layers, self.n_actions,
                        params=self.params.copy())

    def initial_state(self, batch, n_agents):
        return np.zeros((batch, n_agents, self.hidden))

    # -- forward pieces -----------------------------------------------------

    def gnn_encode(self, x, adj, keep_cache=True):
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dim {x.shape[-1]} != {self.obs_dim}")
        P = aggregation_matrix(adj)
        h = affine(x, p["in_W"], p["in_b"])
        layers = []
        for l in range(self.gnn_layers):
            m = affine(h, p[f"gnn{l}_msg_W"], p[f"gnn{l}_msg_b"])
            agg = P @ m
            h_next, gcache = gru_cell(p, f"gnn{l}_gru_", agg, h, keep_cache)
            if keep_cache:
                layers.append((h, gcache))
            h = h_next
        return h, ((x, P, layers) if keep_cache else None)

    def temporal_step(self, z_prev, h, keep_cache=True):
        return gru_cell(self.params, "rnn_", h, z_prev, keep_cache)

    def q_values(self, z, keep_cache=True):
        p = self.params
        a = affine(z, p["head1_W"], p["head1_b"])
        q = affine(elu(a), p["head2_W"], p["head2_b"])
        return q, ((z, a) if keep_cache else None)

    def forward_round(self, x, adj, z_prev, keep_cache=True):
        """One communication round for a batch. Returns (q, z, cache)."""
        h, gcache = self.gnn_encode(x, adj, keep_cache)
        z, tcache = self.temporal_step(z_prev, h, keep_cache)
        q, qcache = self.q_values(z, keep_cache)
        return q, z, ((gcache, tcache, qcache) if keep_cache else None)

    # -- backward pieces ----------------------------------------------------

    def q_values_backward(self, cache, dq, grads):
        p = self.params
        z, a = cache
        e = elu(a)
        de, dW2, db2 = affine_backward(dq, e, p["head2_W"])
        grads["head2_W"] += dW2
        grads["head2_b"] += db2
        da = de * elu_grad(a)
        dz, dW1, db1 = affine_backward(da, z, p["head1_W"])
        grads["head1_W"] += dW1
        grads["head1_b"] += db1
        return dz

    def gnn_backward(self, cache, dh, grads):
        """Backprop through the GNN stack; returns d(observations)."""
        p = self.params
        x, P, layers = cache
        for l in reversed(range(self.gnn_layers)):
            h_prev, gcache = layers[l]
            dagg, dh_prev = gru_cell_backward(p, f"gnn{l}_gru_", gcache, dh, grads)
            dm = np.swapaxes(P, -1, -2) @ dagg
            dh_msg, dW, db = affine_backward(dm, h_prev, p[f"gnn{l}_msg_W"])
            grads[f"gnn{l}_msg_W"] += dW
            grads[f"gnn{l}_msg_b"] += db
            dh = dh_prev + dh_msg
        dx, dW, db = affine_backward(dh, x, p["in_W"])
        grads["in_W"] += dW
        grads["in_b"] += db
        return dx

    def backward_round(self, cache, dq, dz_next, grads):
        """Given dL/dq and dL/dz (from later rounds), return dL/dz_prev and dL/dx."""
        gcache, tcache, qcache = cache
        dz = self.q_values_backward(qcache, dq, grads)
        if dz_next is not None:
            dz = dz + dz_next
        dh, dz_prev = gru_cell_backward(self.params, "rnn_", tcache, dz, grads)
        dx = self.gnn_backward(gcache, dh, grads)
        return dz_prev, dx


def greedy(q):
    """Per-agent argmax with lowest-index tie-break (numpy argmax semantics)."""
    return np.argmax(np.asarray(q), axis=-1)


def select_actions(q, epsilon, rng) -> tuple:
    """Independent epsilon-greedy choice for each row of ``q`` (N, 6)."""
    q = np.asarray(q)
    out = []
    for row in q:
        if epsilon > 0 and rng.random() < epsilon:
            out.append(CommAction(int(rng.integers(N_ACTIONS))))
        else:
            out.append(CommAction(int(np.argmax(row))))
    return tuple(out)
