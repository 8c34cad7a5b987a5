"""Watch the watermark act on a single MiniLang completion.

We fit the n-gram base model on a small corpus, build an untrained policy,
generate one watermarked completion, and then run the detector over the
text alone. The detector never sees the generation trace: it rebuilds every
gate and green-list decision from the tokens and the secret key.

    python demos/watermark_one_program.py
"""

import numpy as np

from policymark.codec import WatermarkConfig, detect, generate_watermarked, generate_base
from policymark.corpus import make_corpus
from policymark.minilang import VOCAB, detokenize, run_tests
from policymark.ngram import fit_on_tasks
from policymark.nn import PolicyConfig
from policymark.policy import Policy

tasks = make_corpus(2000, seed=1)
lm = fit_on_tasks(tasks)
policy = Policy.init(PolicyConfig(VOCAB.size), seed=0)
cfg = WatermarkConfig()


def fmt(z):
    return "n/a" if z is None else f"{z:.2f}"


task = make_corpus(5, seed=2, prefix="eval")[0]
print("prompt:\n" + detokenize(task.prompt))

rec = generate_watermarked(lm, policy, task.prompt, cfg, np.random.default_rng(0))
print("watermarked completion:\n" + detokenize(rec.completion))
print("tests pass:", run_tests(task.prompt + rec.completion, task.tests).passed)

# Per-token view: which positions the gate switched on, and whether the token was green.
for tok, w, g in zip(rec.completion, rec.gate, rec.in_green):
    mark = "green" if (w and g) else "red" if w else "-"
    print(f"  {VOCAB.spelling(tok)!r:>12}  {mark}")

rep = detect(policy, rec.completion, cfg)
print(f"\ndetector on the watermarked text: T={rep.T} N_G={rep.N_G} z={fmt(rep.z)} -> {rep.verdict}")
print("trace agrees with reconstruction:", bool(np.array_equal(rep.w, rec.gate)))

plain = generate_base(lm, task.prompt, cfg, np.random.default_rng(0))
rep = detect(policy, plain, cfg)
print(f"detector on an unwatermarked completion: T={rep.T} N_G={rep.N_G} z={fmt(rep.z)} -> {rep.verdict}")
# A single short completion rarely carries enough gated tokens for a verdict;
# see forced_gate_documents.py for the document-level picture.
