"""Small builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from condgen.data import DialogueSample, TextSample, pack_dialogue, pack_text
from condgen.model import ConditionedTransformer, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=23, hidden_size=16, num_layers=2, num_heads=2, max_length=24,
                num_condition_layers=1, num_conditions=3, dropout_p=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, **kw) -> ConditionedTransformer:
    return ConditionedTransformer(tiny_config(**kw), seed=seed)


def random_dialogue(rng: np.random.Generator, vocab_size: int, num_conditions: int,
                    max_turns=3, max_len=4, allow_none=True) -> DialogueSample:
    turns = int(rng.integers(1, max_turns + 1))
    history = [list(rng.integers(7, vocab_size, size=int(rng.integers(1, max_len + 1)))) for _ in range(turns)]
    response = list(rng.integers(7, vocab_size, size=int(rng.integers(1, max_len + 1))))
    cond = int(rng.integers(num_conditions)) if num_conditions else None
    if allow_none and rng.random() < 0.2:
        cond = None
    return DialogueSample(history, cond, response)


def random_dialogue_encoding(rng, vocab_size=23, num_conditions=3, max_length=24, **kw):
    return pack_dialogue(random_dialogue(rng, vocab_size, num_conditions, **kw), max_length)


def random_text_encoding(rng, vocab_size=23, num_conditions=3, max_length=24, choice=None):
    text = list(rng.integers(7, vocab_size, size=int(rng.integers(1, 10))))
    cond = int(rng.integers(num_conditions)) if num_conditions else None
    choice = choice or ("bidirectional" if rng.random() < 0.5 else "left_to_right")
    return pack_text(TextSample(cond, text), choice, max_length)


def fixed_masked_batch(rng, config, size=4):
    """A reproducible batch of randomly masked dialogue and text samples."""
    from condgen.data import MaskedBatch, apply_random_masking

    samples = []
    for i in range(size):
        if i % 2 == 0:
            enc = random_dialogue_encoding(rng, config.vocab_size, config.num_conditions, config.max_length)
        else:
            enc = random_text_encoding(rng, config.vocab_size, config.num_conditions, config.max_length)
        samples.append(apply_random_masking(enc, rng, 0.4, kind="dialogue" if i % 2 == 0 else "text"))
    return MaskedBatch(samples)


def model_gradient_errors(model, masked, names_and_indices, h=1e-5):
    """Relative errors between analytic and central-difference gradients of the MLM loss."""
    from condgen import tensor as T
    from condgen.training import batch_loss
    from oracles import central_difference, relative_error

    for p in model.params.values():
        p.zero_grad()
    T.backward(batch_loss(model, masked))

    def f():
        with T.no_grad():
            return batch_loss(model, masked).item()

    errors = []
    for name, idx in names_and_indices:
        num = central_difference(f, model.params[name].data, idx, h)
        errors.append((name, idx, relative_error(num, model.params[name].grad[idx]), num))
    return errors


def sample_parameter_entries(model, rng, count, skip=("attn.bk",)):
    """Random (name, index) pairs, skipping parameters whose gradient is identically zero."""
    names = [k for k in sorted(model.params) if not k.endswith(skip)]
    out = []
    for _ in range(count):
        name = names[int(rng.integers(len(names)))]
        shape = model.params[name].shape
        out.append((name, tuple(int(rng.integers(s)) for s in shape)))
    return out


# PASS/FAIL lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
