"""Short GRPO run with a per-step log of rewards and held-out detectability.

Trains the default policy from random initialization against the combined
test-passing and detectability rewards, printing each evaluation snapshot.
Use --steps to make it shorter or longer; 200 steps take roughly a minute
on one core. Note that at this scale held-out z tends to fall rather than
rise with the default reward mix (see the README).

    python demos/training_dynamics.py --steps 60
"""

import argparse

from policymark.codec import WatermarkConfig
from policymark.corpus import make_corpus
from policymark.minilang import VOCAB
from policymark.ngram import fit_on_tasks
from policymark.nn import PolicyConfig
from policymark.policy import Policy
from policymark.rl import TrainConfig, train

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--steps", type=int, default=60)
ap.add_argument("--eval-every", type=int, default=20)
args = ap.parse_args()

train_tasks = make_corpus(2000, seed=1)
held_out = make_corpus(100, seed=2, prefix="eval")
lm = fit_on_tasks(train_tasks)
policy = Policy.init(PolicyConfig(VOCAB.size), seed=0)
tcfg = TrainConfig(steps=args.steps, eval_every=args.eval_every, eval_tasks=100)


def show(row: dict) -> None:
    r1 = "  -  " if row["mean_r1"] is None else f"{row['mean_r1']:.2f}"
    print(f"step {row['step']:4d}  train R1 {r1}  held-out mean z {row['mean_z_eval']:+.2f}  "
          f"pass rate {row['pass_rate_eval']:.2f}  AUROC {row['auroc_eval']:.3f}")


res = train(policy, lm, train_tasks, held_out, WatermarkConfig(), tcfg, log=show)
if res.history:
    print(f"gate rate: {res.history[0]['gate_rate']:.2f} at the first step, "
          f"{res.history[-1]['gate_rate']:.2f} at the last")
