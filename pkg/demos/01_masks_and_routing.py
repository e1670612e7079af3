#!/usr/bin/env python3
# A walk through one packed dialogue: the attention masks that let a single
# transformer act as encoder and decoder, and the per-position condition bias.

# %%
import numpy as np

from condgen.cli import render_masks
from condgen.data import DialogueSample, TextSample, build_vocab, pack_dialogue, pack_text, tokenize
from condgen.model import (ConditionTable, ConditionedTransformer, ModelConfig, collate, condition_bias_mask,
                           embed, routing_weights)

np.set_printoptions(precision=3, suppress=True)

# %%
# Two history turns, a condition and a response. The source side is
# [CLS] turn [SEP] turn [SEP]; the target side is [BOS] response [EOS].
history = ["how was the weekend ?", "any plans for today ?"]
response = "going hiking with friends"
vocab = build_vocab([tokenize(t) for t in history + [response, "hiking with friends is fun"]])
sample = DialogueSample([vocab.encode(tokenize(t)) for t in history], 0, vocab.encode(tokenize(response)))
enc = pack_dialogue(sample, max_length=40)
tokens = vocab.decode(enc.token_ids.tolist())
print(" ".join(tokens))

# %%
# Source rows see the whole source and nothing of the target. Target rows see
# the source plus the target prefix up to themselves. The two columns on the
# right are the route mask: the condition route is closed on the source side.
print(render_masks(enc, tokens, has_condition=True))

# %%
# A conditioned text is all target side. Half of the text samples in a batch
# get full bidirectional attention, the other half a left-to-right mask.
text = TextSample(0, vocab.encode(tokenize("hiking with friends is fun")))
for choice in ("bidirectional", "left_to_right"):
    t_enc = pack_text(text, choice, 40)
    print(choice)
    print(render_masks(t_enc, vocab.decode(t_enc.token_ids.tolist()), has_condition=True))

# %%
# Attention routing: each target position splits attention between the
# condition key and a shared generic key whose value is zero. The weight on
# the condition route scales v^c; source positions get exactly nothing.
cfg = ModelConfig(vocab_size=len(vocab), hidden_size=16, num_layers=2, num_heads=2, max_length=40,
                  num_condition_layers=1, num_conditions=2, dropout_p=0.0, init_std=0.3)
model = ConditionedTransformer(cfg, seed=0)
batch = collate([enc])
H = embed(batch, model.params)
mb = condition_bias_mask(batch.target_side, np.array([True]))
w = routing_weights(H, np.array([0]), ConditionTable.from_params(model.params), mb, cfg)[0]
for tok, side, weight in zip(tokens, enc.target_side, w):
    print(f"{tok:>10} {'T' if side else 'S'} {weight:.3f}")

# %%
# The whole condition table costs (2C + 1) * d_h parameters.
print("condition parameters:", model.condition_parameter_count(), "=", (2 * 2 + 1) * 16)
