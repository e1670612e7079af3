#!/usr/bin/env python3
# Train a desk-scale model on the synthetic corpus and check that it picks
# the right vocabulary for the requested condition. Histories say nothing
# about the condition, so only the condition table can make the choice.
# A reduced corpus keeps this to a minute or two; the acceptance suite runs
# the full-size version through the CLI.

# %%
import time

import numpy as np

from condgen.data import LabelMap, build_vocab, corpus_tokens, encode_dialogues, encode_texts, tokenize
from condgen.decoding import DecodeConfig, beam_search
from condgen.model import ConditionedTransformer, ModelConfig
from condgen.synthetic import SyntheticSpec, condition_accuracy, make_corpora
from condgen.training import Ablations, TrainConfig, train

spec = SyntheticSpec(vocab_per_condition=10, num_dialogues=400, num_texts=100, num_test=30)
corpora = make_corpora(spec)
for rec in corpora["dialogue_train"][:3]:
    print(rec)

# %%
labels = LabelMap()
vocab = build_vocab(corpus_tokens(corpora["dialogue_train"], corpora["text"]))
dialogues = encode_dialogues(corpora["dialogue_train"], vocab, labels)
texts = encode_texts(corpora["text"], vocab, labels)
print(len(vocab), "tokens,", len(labels), "conditions:", labels.labels)


def fit(ablations):
    cfg = ModelConfig(vocab_size=len(vocab), hidden_size=32, num_layers=2, num_heads=4, max_length=40,
                      num_conditions=len(labels), dropout_p=0.0)
    model = ConditionedTransformer(cfg, seed=0)
    t0 = time.perf_counter()
    _, log = train(model, dialogues, texts, TrainConfig(learning_rate=3e-3, epochs=40, batch_size=32,
                                                        ablations=ablations))
    print(f"{log.metadata['mode']}: {len(log.steps)} steps, last-epoch loss "
          f"{log.epochs[-1]['mean_loss']:.3f}, {time.perf_counter() - t0:.0f}s")
    return model


def decode(model, use_condition=True):
    hyps, conds = [], []
    for rec in corpora["dialogue_test"]:
        history = [vocab.encode(tokenize(t)) for t in rec["history"]]
        cid = labels.get(rec["condition"]) if use_condition else None
        best = beam_search(model, history, cid, DecodeConfig(beam_size=10, max_new_tokens=8))[0]
        hyps.append(vocab.decode(best.response))
        conds.append(rec["condition"])
    return hyps, conds


# %%
full = fit(Ablations())
hyps, conds = decode(full)
for h, c, rec in list(zip(hyps, conds, corpora["dialogue_test"]))[:5]:
    print(f"{c}: {rec['history'][-1]!r} -> {' '.join(h)!r}")
print("condition accuracy, full model:", condition_accuracy(hyps, conds, spec)[0])

# %%
# Without conditions the model still learns the template but has to guess
# which vocabulary to use, so accuracy hovers around one half.
blind = fit(Ablations(no_condition=True))
hyps, conds = decode(blind, use_condition=False)
acc, per = condition_accuracy(hyps, conds, spec)
print("condition accuracy, no condition:", acc, "per-sample mean", np.mean(per))
