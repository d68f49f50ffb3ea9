"""Walk through one ClueRelay task by hand: actions -> graph -> clue flow -> reward."""
import numpy as np

from topomix import env as E
from topomix.domain import CommAction
from topomix.topology import action_to_adjacency, execution_order

cfg = E.EnvConfig()
task = E.load_suite("hard")[0]
print("task:", E.format_task(task))

# every agent broadcasts in round 1, then works alone
joint = (CommAction.BROADCAST_ALL,) * 3
graph = action_to_adjacency(joint)
print("adjacency\n", graph.adj.astype(int))
print("execution order", execution_order(graph).order)

state = E.EnvState(task.masks, (0,) * 3)
state = E.step(state, graph, task, cfg)
state = E.step(state, action_to_adjacency((0, 0, 0)), task, cfg)
acc, tokens = E.finish(state, task)
print(f"accuracy {acc:.3f}  tokens {tokens:.0f}  reward {E.reward(acc, tokens, 1.25, 0.1, 1e4):.4f}")

# compare against the best open-loop sequence
seq, value = E.oracle_optimal(task, cfg, 2, 1.25, 0.1)
print("oracle", [[int(a) for a in j] for j in seq], round(value, 4))
for j in [(0, 0, 0), (1, 1, 1), (4, 4, 4)]:
    print(j, np.round(E.evaluate_sequence(task, cfg, [j] * 2, 1.25, 0.1), 4))
