"""Joint action -> adjacency mapping and per-round execution order."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import CommAction, CommGraph, ConfigError


def partner(i: int, n: int) -> int:
    """Fixed neighbour used by selective_query, execute_verify and debate_check."""
    return (i + 1) % n


def action_edges(i: int, action, n: int) -> list:
    """Non-self edges contributed by agent ``i`` choosing ``action``."""
    a = CommAction(int(action))
    p = partner(i, n)
    if a == CommAction.SOLO_PROCESS:
        return []
    if a == CommAction.BROADCAST_ALL:
        return [(i, j) for j in range(n) if j != i]
    if a == CommAction.AGGREGATE_REFINE:
        return [(j, i) for j in range(n) if j != i]
    if a in (CommAction.SELECTIVE_QUERY, CommAction.EXECUTE_VERIFY):
        return [(i, p)]
    return [(i, p), (p, i)]  # debate_check


def action_to_adjacency(joint, n: int | None = None) -> CommGraph:
    """Union of every agent's edge pattern on top of the identity."""
    if n is None:
        n = len(joint)
    if n < 2:
        raise ConfigError("communication graphs need at least two agents")
    if len(joint) != n:
        raise ConfigError(f"joint action has {len(joint)} entries, expected {n}")
    adj = np.eye(n, dtype=bool)
    for i, a in enumerate(joint):
        for u, v in action_edges(i, a, n):
            adj[u, v] = True
    return CommGraph(adj)


@dataclass(frozen=True)
class ExecutionOrder:
    order: tuple
    deferred_edges: frozenset

    def position(self) -> dict:
        return {agent: k for k, agent in enumerate(self.order)}


def execution_order(graph: CommGraph) -> ExecutionOrder:
    """Kahn's algorithm with lowest-id tie-breaking.

    When every remaining agent still has an unsatisfied predecessor, the
    lowest-id remaining agent is emitted and its unsatisfied incoming edges
    are marked deferred (they carry the sender's round-start state).
    """
    n = graph.n
    edges = graph.edges()
    preds = {v: {u for (u, w) in edges if w == v} for v in range(n)}
    remaining = set(range(n))
    done: set = set()
    order = []
    deferred = set()
    while remaining:
        ready = [v for v in sorted(remaining) if preds[v] <= done]
        v = ready[0] if ready else min(remaining)
        for u in preds[v] - done:
            deferred.add((u, v))
        order.append(v)
        done.add(v)
        remaining.discard(v)
    return ExecutionOrder(tuple(order), frozenset(deferred))
