"""Document-level detection with the gate forced on.

Short MiniLang completions carry only a handful of code tokens. Here we
concatenate completions into documents of at least 120 code tokens, switch
the gate on at every position (w = 1), and compare detector scores for
watermarked documents against clean ones: half base-model generations,
half reference solutions. Takes about half a minute.

    python demos/forced_gate_documents.py
"""

import numpy as np

from policymark.codec import WatermarkConfig, detect_many, generate_document
from policymark.corpus import make_corpus
from policymark.evaluation import auroc, tpr_at_fpr
from policymark.minilang import VOCAB
from policymark.ngram import fit_on_tasks
from policymark.nn import PolicyConfig
from policymark.policy import Policy

lm = fit_on_tasks(make_corpus(2000, seed=1))
tasks = make_corpus(200, seed=2, prefix="eval")
policy = Policy.init(PolicyConfig(VOCAB.size), seed=0)
cfg = WatermarkConfig(delta=2.0, gamma=0.5, force_gate=1)

marked, clean = [], []
for i in range(60):
    rng = np.random.default_rng(1000 + i)
    prompts = [tasks[j].prompt for j in rng.permutation(len(tasks))]
    marked.append(generate_document(lm, policy, prompts, cfg, rng, 120)[0])
    clean.append(generate_document(lm, None, prompts, cfg, rng, 120)[0])

zw = np.array([r.score for r in detect_many(policy, marked, cfg)])
zc = np.array([r.score for r in detect_many(policy, clean, cfg)])
print(f"watermarked documents: mean z {zw.mean():.2f} (sd {zw.std():.2f})")
print(f"clean documents:       mean z {zc.mean():.2f} (sd {zc.std():.2f})")

scores = np.r_[zw, zc]
labels = np.r_[np.ones(len(zw)), np.zeros(len(zc))]
print(f"AUROC {auroc(scores, labels):.3f}, TPR at 5% FPR {tpr_at_fpr(scores, labels, 0.05):.3f}")
print(f"flagged at tau={cfg.tau}: {np.mean(zw >= cfg.tau):.0%} of watermarked, {np.mean(zc >= cfg.tau):.0%} of clean")
