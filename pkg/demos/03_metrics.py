#!/usr/bin/env python3
# The evaluation suite on a handful of sentences, plus the paired t-test that
# decides the significance marks.

# %%
import numpy as np

from condgen.metrics import EvalReport, bleu_n, compare, evaluate, gate_table, significance

refs = [s.split() for s in ["i am going hiking today", "the cat sat on the mat",
                            "see you at the station", "that sounds like fun"]]
good = [s.split() for s in ["i am going hiking", "the cat sat on a mat",
                            "see you at the station", "sounds like fun"]]
weak = [s.split() for s in ["i do not know", "the the the", "ok", "that is fun"]]

# %%
# Corpus BLEU pools clipped n-gram counts over all pairs before taking the
# geometric mean; the brevity penalty uses total lengths.
for n in (1, 2, 3):
    print(f"BLEU-{n}: {bleu_n(good, refs, n):.2f}")

# %%
ours = evaluate(good, refs)
base = evaluate(weak, refs)
compare(ours, base)
print(ours.render("ours"))
print(base.render("weak").splitlines()[1])

# %%
# The marks come from a paired two-sided t-test on sentence-level scores:
# (**) p < .01, (*) p < .05, (/) otherwise.
t, p = significance(ours.per_sample["BLEU-1"], base.per_sample["BLEU-1"])
print(f"BLEU-1 t = {t:.3f}, p = {p:.4f}")

# %%
# The gate comparison table uses the same machinery with routing as reference.
rng = np.random.default_rng(0)
vec = lambda shift: {m: list(rng.normal(size=30) + shift) for m in ("BLEU-1", "BLEU-2", "Dist-2")}  # noqa: E731
reports = {name: EvalReport({m: float(np.mean(v)) for m, v in d.items()}, d)
           for name, d in (("attention_routing", vec(1.0)), ("single_gate", vec(0.0)), ("double_gates", vec(0.8)))}
print(gate_table(reports)[0])
