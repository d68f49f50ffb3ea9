"""Train on the hard suite and score the greedy policy against the oracle.

Takes about half a minute on one core.
"""
import numpy as np

from topomix.analysis import oracle_rows, topology_stats, greedy_episodes
from topomix.domain import RunConfig
from topomix.trainer import Trainer, greedy_return

cfg = RunConfig(suite="hard", seed=0, adversary_prob=0.0)
tr = Trainer(cfg)
print("untrained greedy return", round(greedy_return(tr.agent, tr.tasks, cfg), 4))

recs = tr.train()
window = 200
for k in range(0, len(recs), 400):
    chunk = recs[k:k + window]
    print(f"episode {k:5d}  eps {chunk[0].epsilon:.2f}  "
          f"reward {np.mean([r.reward for r in chunk]):.4f}")

ret = greedy_return(tr.agent, tr.tasks, cfg)
opt = np.mean([r[1] for r in oracle_rows(tr.tasks, cfg)])
print(f"trained {ret:.4f}  oracle {opt:.4f}  ratio {ret / opt:.3f}")

stats = topology_stats(greedy_episodes(tr.agent, tr.tasks, cfg))
print("action histogram per round (solo, broadcast, ...)\n", stats.histogram)
print("graph density per round", np.round(stats.density, 3))
