"""Masked-LM training: token masking, warmup/decay schedule, Adam loop.

Config field names mirror the usual hyperparameter tables
(max_seq_length, train_batch_size, num_train_epochs, line_by_line, ...)
so flat key=value config files map one-to-one onto TrainConfig.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import tokenizer as tok
from .autodiff import cross_entropy
from .tokenizer import IGNORE_LABEL_ID


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_seq_length: int = 512
    learning_rate: float = 2e-5
    train_batch_size: int = 64
    eval_batch_size: int = 64
    num_train_epochs: int = 2
    gradient_accumulation_steps: int = 1
    warmup_steps: int = -1  # -1: 6% of total update steps
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    mask_rate: float = 0.15
    mask_token_prob: float = 0.8
    random_token_prob: float = 0.1
    weight_decay: float = 0.0
    max_grad_norm: float = 0.0
    seed: int = 42
    line_by_line: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError("mask_rate must lie in [0, 1]")
        if self.gradient_accumulation_steps < 1:
            raise ConfigError("gradient_accumulation_steps must be >= 1")
        if self.mask_token_prob + self.random_token_prob > 1.0 + 1e-12:
            raise ConfigError("mask_token_prob + random_token_prob must not exceed 1")

    @classmethod
    def finetuning_defaults(cls, **overrides):
        """Sequence/token classification defaults: batch 32, accumulation 4,
        eval batch 128, adam epsilon 1e-6."""
        base = dict(
            train_batch_size=32,
            gradient_accumulation_steps=4,
            eval_batch_size=128,
            adam_epsilon=1e-6,
        )
        base.update(overrides)
        return cls(**base)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key, text):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if kind in ("bool", bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean value {text!r} for {key}")
    if kind in ("int", int):
        return int(text)
    return float(text)


def parse_config_file(path, base=None):
    """Flat key=value UTF-8 config; unknown keys are errors, not warnings."""
    values = dataclasses.asdict(base) if base is not None else {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, text)
    return TrainConfig(**values)


def apply_overrides(config, overrides):
    """Apply ``key=value`` strings on top of an existing config."""
    values = dataclasses.asdict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, text = (part.strip() for part in item.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, text)
    return TrainConfig(**values)


# -- masking ------------------------------------------------------------

#: positions holding these ids are never selected for masking
_UNMASKABLE_IDS = (tok.PAD_ID, tok.CLS_ID, tok.SEP_ID, tok.MASK_ID)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray


def mask_tokens(batch, vocab_size, mask_rate=0.15, seed=0,
                mask_token_prob=0.8, random_token_prob=0.1, min_selected=0):
    """Select positions for MLM prediction and corrupt the inputs.

    Each eligible (non-special, attended) position is independently
    selected with probability ``mask_rate``. Of the selected positions,
    ``mask_token_prob`` become [MASK], ``random_token_prob`` a uniform
    non-special token, the rest stay unchanged. Labels hold the original
    id at selected positions and the ignore id elsewhere.

    ``min_selected`` guards tiny batches whose independent draws select
    nothing: if fewer positions were selected, the first eligible
    positions are force-selected so the loss stays defined.
    """
    ids = np.array([e.ids for e in batch], dtype=np.int64)
    attention = np.array([e.attention_mask for e in batch], dtype=np.int64)
    segments = np.array([e.segment_ids for e in batch], dtype=np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    eligible = attention.astype(bool) & ~np.isin(ids, _UNMASKABLE_IDS)
    selected = (rng.random(ids.shape) < mask_rate) & eligible
    shortfall = min_selected - int(selected.sum())
    if shortfall > 0:
        candidates = np.argwhere(eligible & ~selected)
        for row, col in candidates[:shortfall]:
            selected[row, col] = True

    labels = np.where(selected, ids, IGNORE_LABEL_ID)
    input_ids = ids.copy()
    roll = rng.random(ids.shape)
    use_mask = selected & (roll < mask_token_prob)
    use_random = selected & ~use_mask & (roll < mask_token_prob + random_token_prob)
    input_ids[use_mask] = tok.MASK_ID
    n_special = len(tok.SPECIAL_TOKENS)
    if vocab_size > n_special:
        randoms = rng.integers(n_special, vocab_size, size=ids.shape)
        input_ids[use_random] = randoms[use_random]
    return MaskedBatch(input_ids=input_ids, labels=labels, attention_mask=attention, segment_ids=segments)


# -- learning-rate schedule --------------------------------------------


def lr_at_step(config, step, total_steps):
    """Linear warmup from 0 to the peak, then linear decay back to 0."""
    warmup = config.warmup_steps
    if warmup < 0 or warmup >= total_steps:
        raise ConfigError(f"warmup_steps {warmup} must lie in [0, total_steps)")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup:
        if warmup == 0:
            return config.learning_rate
        return config.learning_rate * step / warmup
    return config.learning_rate * (total_steps - step) / (total_steps - warmup)


# -- Adam with gradient accumulation -----------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    total_steps: int
    updates: int = 0
    micro_batches: int = 0

    @classmethod
    def for_parameters(cls, tensors, total_steps):
        return cls(
            m={name: np.zeros_like(t.data) for name, t in tensors.items()},
            v={name: np.zeros_like(t.data) for name, t in tensors.items()},
            total_steps=total_steps,
        )


def _apply_adam_update(tensors, state, config):
    lr = lr_at_step(config, state.updates + 1, state.total_steps) if state.updates + 1 <= state.total_steps else 0.0
    accum = config.gradient_accumulation_steps
    grads = {}
    for name, t in tensors.items():
        grads[name] = (t.grad / accum) if t.grad is not None else np.zeros_like(t.data)
    if config.max_grad_norm > 0:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > config.max_grad_norm:
            factor = config.max_grad_norm / norm
            grads = {name: g * factor for name, g in grads.items()}
    t_step = state.updates + 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    for name, tensor in tensors.items():
        g = grads[name]
        if config.weight_decay > 0 and not name.endswith(("bias", "gain")):
            g = g + config.weight_decay * tensor.data
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t_step)
        v_hat = state.v[name] / (1 - b2**t_step)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        tensor.zero_grad()
    state.updates += 1
    return lr


def train_step(tensors, encoder_config, batch, state, config):
    """One MLM micro-batch: forward, loss, backward, maybe an Adam update.

    Gradients accumulate until ``gradient_accumulation_steps`` micro
    batches have been seen, then one bias-corrected Adam update runs and
    gradients are cleared. Returns (micro-batch loss, lr applied or None).
    """
    hidden = enc.forward(tensors, encoder_config, batch.input_ids, batch.attention_mask, batch.segment_ids)
    logits = enc.mlm_logits(tensors, encoder_config, hidden)
    loss = cross_entropy(logits, batch.labels, IGNORE_LABEL_ID)
    loss_value = float(loss.data)
    if not np.isfinite(loss_value):
        raise TrainingDivergedError(
            f"non-finite loss {loss_value} at update {state.updates}, micro-batch {state.micro_batches}"
        )
    loss.backward()
    state.micro_batches += 1
    applied_lr = None
    if state.micro_batches % config.gradient_accumulation_steps == 0:
        applied_lr = _apply_adam_update(tensors, state, config)
    return loss_value, applied_lr


def _pad_batch(encoded, min_len=3):
    longest = max(min_len, max(sum(e.attention_mask) for e in encoded))
    trimmed = []
    for e in encoded:
        trimmed.append(
            tok.EncodedSequence(
                ids=e.ids[:longest],
                attention_mask=e.attention_mask[:longest],
                segment_ids=e.segment_ids[:longest],
                word_alignment=e.word_alignment[:longest],
            )
        )
    return trimmed


def pretrain(corpus, start, config, vocab, source=""):
    """Continued MLM pre-training over one-line-per-example text.

    Iterates ``num_train_epochs`` over the corpus with a seeded per-epoch
    shuffle, returning the final checkpoint (with lineage back to
    ``start``) and the per-step loss curve as a list of
    ``{step, epoch, lr, loss}`` rows.
    """
    lines = [line for line in corpus if line.strip()]
    if not lines:
        raise ValueError("pretrain requires a non-empty corpus")

    seq_len = min(config.max_seq_length, start.config.max_positions)
    encoded = [tok.encode(vocab, line, max_len=seq_len) for line in lines]

    n = len(encoded)
    bs = config.train_batch_size
    batches_per_epoch = (n + bs - 1) // bs
    total_micro = batches_per_epoch * config.num_train_epochs
    total_updates = max(1, total_micro // config.gradient_accumulation_steps)
    run_config = config
    if config.warmup_steps < 0:
        run_config = dataclasses.replace(config, warmup_steps=min(int(0.06 * total_updates), total_updates - 1))

    tensors = enc.parameters_to_tensors(start.parameters)
    state = AdamState.for_parameters(tensors, total_updates)
    shuffle_rng = np.random.default_rng(run_config.seed)
    curve = []
    step = 0
    for epoch in range(run_config.num_train_epochs):
        order = shuffle_rng.permutation(n)
        for b in range(batches_per_epoch):
            chunk = [encoded[i] for i in order[b * bs : (b + 1) * bs]]
            batch = mask_tokens(
                _pad_batch(chunk),
                vocab_size=start.config.vocab_size,
                mask_rate=run_config.mask_rate,
                seed=np.random.default_rng((run_config.seed, epoch, b)),
                mask_token_prob=run_config.mask_token_prob,
                random_token_prob=run_config.random_token_prob,
                min_selected=1,
            )
            loss, _ = train_step(tensors, start.config, batch, state, run_config)
            step += 1
            lr_now = lr_at_step(run_config, min(state.updates, total_updates), total_updates)
            curve.append({"step": step, "epoch": epoch, "lr": lr_now, "loss": loss})

    final = enc.Checkpoint(
        config=start.config,
        parameters=enc.tensors_to_arrays(tensors),
        meta={
            "step": int(start.meta.get("step", 0)) + state.updates,
            "epoch": int(start.meta.get("epoch", 0)) + run_config.num_train_epochs,
            "source": source or start.meta.get("source", ""),
        },
        extra=dict(start.extra),
    )
    return final, curve


def write_loss_curve(curve, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,epoch,lr,loss\n")
        for row in curve:
            f.write(f"{row['step']},{row['epoch']},{row['lr']:.12g},{row['loss']:.12g}\n")
