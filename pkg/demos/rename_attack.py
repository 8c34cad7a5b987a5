"""How much signal survives consistent identifier renaming?

Renaming permutes the eight identifiers throughout a program. The program
still passes its tests, but every green list is keyed on the preceding four
tokens, and most of those windows contain an identifier. So the attack
re-randomizes most green lists, not only the renamed tokens. The script
prints the per-document z before and after the attack.

    python demos/rename_attack.py
"""

import numpy as np
from scipy import stats

from policymark.codec import WatermarkConfig, detect_many, generate_document
from policymark.corpus import make_corpus
from policymark.evaluation import rename_attack
from policymark.minilang import IDENTIFIERS, VOCAB
from policymark.ngram import fit_on_tasks
from policymark.nn import PolicyConfig
from policymark.policy import Policy

lm = fit_on_tasks(make_corpus(2000, seed=1))
tasks = make_corpus(200, seed=2, prefix="eval")
policy = Policy.init(PolicyConfig(VOCAB.size), seed=0)
cfg = WatermarkConfig(force_gate=1)

docs = []
for i in range(40):
    rng = np.random.default_rng(5000 + i)
    docs.append(generate_document(lm, policy, [tasks[j].prompt for j in rng.permutation(200)], cfg, rng, 120)[0])
attacked = [rename_attack(d, seed=i) for i, d in enumerate(docs)]

before = np.array([r.score for r in detect_many(policy, docs, cfg)])
after = np.array([r.score for r in detect_many(policy, attacked, cfg)])
print(f"mean z before {before.mean():.2f}, after {after.mean():.2f}")
print(f"paired Wilcoxon (before > after): p = {stats.wilcoxon(before, after, alternative='greater').pvalue:.1e}")

ids = {VOCAB.id(v) for v in IDENTIFIERS}
windows_hit = np.mean([any(t in ids for t in d[max(0, k - 4):k]) for d in docs for k in range(len(d))])
print(f"positions whose 4-token window contains an identifier: {windows_hit:.0%}")
