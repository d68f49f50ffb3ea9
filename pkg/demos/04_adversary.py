"""Train with adversarial episodes and check that the bad agent gets cut off.

About a minute on one core.
"""
from topomix.analysis import evaluate
from topomix.domain import RunConfig
from topomix.trainer import Trainer

cfg = RunConfig(suite="hard", seed=0)     # 25% of episodes carry an adversary
tr = Trainer(cfg)
tr.train()

rep = evaluate(tr.agent, tr.tasks, cfg, adversary=True)
for line in rep.lines():
    print(line)
print("isolated:", rep.adversary_out_edges < rep.clean_out_edges)
print("more robust than broadcasting:", rep.delta < rep.baseline_delta)
