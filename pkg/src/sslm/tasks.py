"""The three validation tasks and their data plumbing.

Covers balanced dataset assembly for discipline classification,
sentence-level structure labeling (five-way B/P/M/R/C records),
software-entity tagging with the BMES alphabet, span<->tag conversion,
the token/tag file format, and fine-tuning heads for sequence and token
classification on top of a pre-trained encoder.
"""
from __future__ import annotations

import random
import re
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import evaluation as ev
from . import tokenizer as tok
from . import training as tr
from . import autodiff as ad
from .tokenizer import IGNORE_LABEL_ID


class TaskError(ValueError):
    pass


class TagSequenceError(TaskError):
    def __init__(self, message, position):
        super().__init__(f"{message} (position {position})")
        self.position = position


# -- label sets ---------------------------------------------------------

BPMRC_CLASSES = ["Background", "Purpose", "Methods", "Results", "Conclusions"]

JCR46_CLASSES = [
    "Anthropology",
    "Area Studies",
    "Business",
    "Business, Finance",
    "Cultural Studies",
    "Communication",
    "Criminology & Penology",
    "Demography",
    "Development Studies",
    "Economics",
    "Education & Educational Research",
    "Education, Special",
    "Environmental Studies",
    "Ethics",
    "Ethnic Studies",
    "Family Studies",
    "Geography",
    "Gerontology",
    "Health Policy & Services",
    "History",
    "History & Philosophy of Science",
    "History Of Social Sciences",
    "Hospitality, Leisure, Sport & Tourism",
    "Industrial Relations & Labor",
    "Information Science & Library Science",
    "International Relations",
    "Law",
    "Linguistics",
    "Management",
    "Nursing",
    "Political Science",
    "Psychology, Multidisciplinary",
    "Public Administration",
    "Public, Environmental & Occupational Health",
    "Regional & Urban Planning",
    "Rehabilitation",
    "Social Issues",
    "Social Sciences, Biomedical",
    "Social Sciences, Interdisciplinary",
    "Social Sciences, Mathematical Methods",
    "Social Work",
    "Sociology",
    "Substance Abuse",
    "Transportation",
    "Urban Studies",
    "Women's Studies",
]


@dataclass
class LabelSet:
    name: str
    classes: list[str]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise TaskError(f"label set {self.name} has duplicate classes")

    def __contains__(self, label):
        return label in self.classes

    @classmethod
    def preset(cls, name):
        if name == "JCR46":
            return cls("JCR46", list(JCR46_CLASSES))
        if name == "BPMRC":
            return cls("BPMRC", list(BPMRC_CLASSES))
        raise TaskError(f"unknown label set preset {name!r}")


@dataclass
class LabeledText:
    text: str
    label: str


# -- BMES tagging -------------------------------------------------------

DEFAULT_ENTITY = "software"
OUTSIDE_TAG = "O"


def tag_alphabet(entity_type=DEFAULT_ENTITY):
    return [f"B-{entity_type}", f"M-{entity_type}", f"E-{entity_type}", f"S-{entity_type}", OUTSIDE_TAG]


_TAG_RE = re.compile(r"^(?:O|[BMES]-\w[\w-]*)$")


@dataclass(frozen=True)
class Span:
    start: int
    end: int  # exclusive
    entity_type: str = DEFAULT_ENTITY

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise TaskError(f"invalid span boundaries ({self.start}, {self.end})")


@dataclass
class TaggedSentence:
    tokens: list[str]
    tags: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise TaskError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")
        for t in self.tags:
            if not _TAG_RE.match(t):
                raise TaskError(f"invalid tag {t!r}")


def _split_tag(tag):
    if tag == OUTSIDE_TAG:
        return OUTSIDE_TAG, None
    prefix, entity = tag.split("-", 1)
    return prefix, entity


def tags_to_spans(tags, strict=True, repairs=None):
    """Extract entity spans from a BMES tag sequence.

    S-x is a single-word span, B-x (M-x)* E-x a multi-word span. In
    strict mode any other pattern raises TagSequenceError naming the
    offending position; in lenient mode incomplete spans and orphan M/E
    tags are dropped, each noted in the optional ``repairs`` list.
    """
    if repairs is None:
        repairs = []
    spans = []
    open_start = None
    open_type = None

    def fail_or_repair(message, position):
        if strict:
            raise TagSequenceError(message, position)
        repairs.append(f"{message} (position {position})")

    for i, tag in enumerate(tags):
        prefix, entity = _split_tag(tag)
        if prefix in ("O", "S", "B") and open_start is not None:
            fail_or_repair(f"unterminated {open_type} span starting at {open_start}", i)
            open_start = open_type = None
        if prefix == "O":
            continue
        if prefix == "S":
            spans.append(Span(i, i + 1, entity))
        elif prefix == "B":
            open_start, open_type = i, entity
        elif prefix == "M":
            if open_start is None or entity != open_type:
                fail_or_repair(f"orphan M-{entity} tag", i)
                open_start = open_type = None
        elif prefix == "E":
            if open_start is None or entity != open_type:
                fail_or_repair(f"orphan E-{entity} tag", i)
                open_start = open_type = None
            else:
                spans.append(Span(open_start, i + 1, entity))
                open_start = open_type = None
    if open_start is not None:
        fail_or_repair(f"unterminated {open_type} span starting at {open_start}", len(tags) - 1)
    return spans


def spans_to_tags(tokens, spans, entity_type=None):
    """Inverse of tags_to_spans: width-1 spans become S, wider ones B M* E."""
    tags = [OUTSIDE_TAG] * len(tokens)
    occupied = [False] * len(tokens)
    for span in sorted(spans, key=lambda s: s.start):
        if span.end > len(tokens):
            raise TaskError(f"span {span} exceeds sentence length {len(tokens)}")
        if any(occupied[span.start : span.end]):
            raise TaskError(f"overlapping span {span}")
        for i in range(span.start, span.end):
            occupied[i] = True
        etype = entity_type or span.entity_type
        if span.end - span.start == 1:
            tags[span.start] = f"S-{etype}"
        else:
            tags[span.start] = f"B-{etype}"
            tags[span.end - 1] = f"E-{etype}"
            for i in range(span.start + 1, span.end - 1):
                tags[i] = f"M-{etype}"
    return TaggedSentence(tokens=list(tokens), tags=tags)


def parse_tagged_file(path):
    """Read token<TAB>tag lines; a blank line separates sentences."""
    sentences = []
    tokens, tags = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                if tokens:
                    sentences.append(TaggedSentence(tokens=tokens, tags=tags))
                    tokens, tags = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TaskError(f"{path}:{lineno}: expected token<TAB>tag, got {len(parts)} fields")
            token, tag = parts
            if not _TAG_RE.match(tag):
                raise TaskError(f"{path}:{lineno}: unknown tag {tag!r}")
            tokens.append(token)
            tags.append(tag)
    if tokens:
        sentences.append(TaggedSentence(tokens=tokens, tags=tags))
    return sentences


def write_tagged_file(sentences, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, sentence in enumerate(sentences):
            if i:
                f.write("\n")
            for token, tag in zip(sentence.tokens, sentence.tags):
                f.write(f"{token}\t{tag}\n")


def read_labeled_tsv(path):
    """Classification dataset: label<TAB>text, one record per line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2:
                raise TaskError(f"{path}:{lineno}: expected label<TAB>text")
            out.append(LabeledText(text=parts[1], label=parts[0]))
    return out


def write_labeled_tsv(items, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for item in items:
            f.write(f"{item.label}\t{item.text}\n")


def read_issn_mapping(path):
    mapping = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TaskError(f"{path}:{lineno}: expected issn<TAB>category")
            mapping[parts[0].strip()] = parts[1].strip()
    return mapping


# -- dataset assembly ---------------------------------------------------


def build_balanced_dataset(records, label_field, per_class, seed, text_field="abstract",
                           strict=True, skipped=None, one_record_per_category=False):
    """Sample exactly ``per_class`` records per label, seeded.

    ``label_field`` is a record attribute name (a list-valued field
    contributes its first element, or one record per listed value with
    ``one_record_per_category``) or a callable record -> label. Classes
    with too few records raise (strict) or are skipped and reported via
    the ``skipped`` list.
    """
    if skipped is None:
        skipped = []
    by_class = {}
    for rec in records:
        label = label_field(rec) if callable(label_field) else getattr(rec, label_field)
        if isinstance(label, (list, tuple)):
            labels = list(label) if one_record_per_category else list(label[:1])
        else:
            labels = [label] if label is not None else []
        text = getattr(rec, text_field)
        for lab in labels:
            by_class.setdefault(lab, []).append(LabeledText(text=text, label=lab))

    rng = random.Random(seed)
    out = []
    for label in sorted(by_class):
        pool = by_class[label]
        if len(pool) < per_class:
            if strict:
                raise TaskError(f"class {label!r} has only {len(pool)} records, need {per_class}")
            skipped.append(label)
            continue
        out.extend(rng.sample(pool, per_class))
    return out


# -- sentence splitting -------------------------------------------------

_ABBREVIATIONS = {
    "al.", "cf.", "dr.", "e.g.", "etc.", "fig.", "figs.", "i.e.", "mr.",
    "mrs.", "ms.", "no.", "pp.", "prof.", "st.", "vol.", "vs.",
}

_BOUNDARY_RE = re.compile(r"[.!?]\s+(?=[A-Z])")


def _hard_wrap(sentence, max_chars):
    chunks = []
    rest = sentence
    while len(rest) > max_chars:
        cut = rest.rfind(" ", 0, max_chars + 1)
        if cut <= 0:
            cut = max_chars
        chunks.append(rest[:cut].rstrip())
        rest = rest[cut:].lstrip()
    if rest:
        chunks.append(rest)
    return chunks


def sentence_split(text, max_chars=512):
    """Rule-based sentence splitting with a hard character cap.

    Splits after . ! ? followed by whitespace and an uppercase letter,
    unless the terminator ends a known abbreviation. Sentences longer
    than ``max_chars`` are wrapped at the last whitespace before the cap.
    """
    sentences = []
    start = 0
    for match in _BOUNDARY_RE.finditer(text):
        candidate = text[start : match.start() + 1]
        last_word = candidate.rsplit(None, 1)[-1].lower() if candidate.split() else ""
        if last_word in _ABBREVIATIONS:
            continue
        stripped = candidate.strip()
        if stripped:
            sentences.append(stripped)
        start = match.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)

    wrapped = []
    for sentence in sentences:
        wrapped.extend(_hard_wrap(sentence, max_chars) if len(sentence) > max_chars else [sentence])
    return wrapped


# -- fine-tuning --------------------------------------------------------


@dataclass
class FinetunedModel:
    """Encoder plus a task head; ``labels`` orders the output classes."""
    config: enc.EncoderConfig
    parameters: dict[str, np.ndarray]
    labels: list[str]
    task: str  # "classifier" | "tagger"

    def to_checkpoint(self, meta=None):
        return enc.Checkpoint(
            config=self.config,
            parameters=dict(self.parameters),
            meta=meta or {"step": 0, "epoch": 0, "source": ""},
            extra={"task": self.task, "labels": list(self.labels)},
        )

    @classmethod
    def from_checkpoint(cls, ckpt):
        task = ckpt.extra.get("task")
        if task not in ("classifier", "tagger"):
            raise TaskError(f"checkpoint has no fine-tuned head (task={task!r})")
        return cls(config=ckpt.config, parameters=dict(ckpt.parameters), labels=list(ckpt.extra["labels"]), task=task)


def _head_shapes(hidden, n_out):
    return {"head.weight": (hidden, n_out), "head.bias": (n_out,)}


def _finetune(start, examples, targets_fn, labels, task, config, vocab, per_position):
    """Shared fine-tuning loop for both heads.

    ``examples`` are EncodedSequences; ``targets_fn(indices)`` yields the
    target array for a batch (class ids for the classifier, per-position
    ids with ignores for the tagger).
    """
    if not examples:
        raise TaskError("empty training set")
    tensors = enc.parameters_to_tensors(start.parameters)
    head_rng = np.random.default_rng(config.seed)
    for name, shape in _head_shapes(start.config.hidden_size, len(labels)).items():
        init = np.zeros(shape) if name.endswith("bias") else enc.truncated_normal(head_rng, shape)
        tensors[name] = ad.Tensor(init, requires_grad=True)

    n = len(examples)
    bs = config.train_batch_size
    batches_per_epoch = (n + bs - 1) // bs
    total_micro = batches_per_epoch * config.num_train_epochs
    total_updates = max(1, total_micro // config.gradient_accumulation_steps)
    run_config = config
    if config.warmup_steps < 0:
        run_config = tr.apply_overrides(config, [f"warmup_steps={min(int(0.06 * total_updates), total_updates - 1)}"])

    state = tr.AdamState.for_parameters(tensors, total_updates)
    rng = np.random.default_rng(run_config.seed)
    log = []
    step = 0
    for epoch in range(run_config.num_train_epochs):
        order = rng.permutation(n)
        for b in range(batches_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            chunk = tr._pad_batch([examples[i] for i in idx])
            ids = np.array([e.ids for e in chunk], dtype=np.int64)
            attention = np.array([e.attention_mask for e in chunk], dtype=np.int64)
            segments = np.array([e.segment_ids for e in chunk], dtype=np.int64)
            targets = targets_fn(idx, ids.shape[1])

            hidden = enc.forward(tensors, start.config, ids, attention, segments)
            if per_position:
                logits = ad.add(ad.matmul(hidden, tensors["head.weight"]), tensors["head.bias"])
            else:
                pooled = enc.pooled_output(tensors, hidden)
                logits = ad.add(ad.matmul(pooled, tensors["head.weight"]), tensors["head.bias"])
            loss = ad.cross_entropy(logits, targets, IGNORE_LABEL_ID)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise tr.TrainingDivergedError(f"non-finite loss at step {step}")
            loss.backward()
            state.micro_batches += 1
            if state.micro_batches % run_config.gradient_accumulation_steps == 0:
                tr._apply_adam_update(tensors, state, run_config)
            step += 1
            lr_now = tr.lr_at_step(run_config, min(state.updates, total_updates), total_updates)
            log.append({"step": step, "epoch": epoch, "lr": lr_now, "loss": loss_value})

    model = FinetunedModel(
        config=start.config,
        parameters=enc.tensors_to_arrays(tensors),
        labels=list(labels),
        task=task,
    )
    return model, log


def finetune_classifier(start, train, config, label_set, vocab):
    """Train a dense softmax head on the pooled representation."""
    for item in train:
        if item.label not in label_set:
            raise TaskError(f"label {item.label!r} not in label set {label_set.name}")
    seq_len = min(config.max_seq_length, start.config.max_positions)
    examples = [tok.encode(vocab, item.text, max_len=seq_len) for item in train]
    label_index = {c: i for i, c in enumerate(label_set.classes)}
    target_ids = np.array([label_index[item.label] for item in train], dtype=np.int64)

    def targets_fn(idx, _width):
        return target_ids[idx]

    return _finetune(start, examples, targets_fn, label_set.classes, "classifier", config, vocab, per_position=False)


def predict_classifier(model, texts, vocab, batch_size=32):
    tensors = enc.parameters_to_tensors(model.parameters, requires_grad=False)
    seq_len = model.config.max_positions
    out = []
    for lo in range(0, len(texts), batch_size):
        chunk = tr._pad_batch([tok.encode(vocab, t, max_len=seq_len) for t in texts[lo : lo + batch_size]])
        ids = np.array([e.ids for e in chunk], dtype=np.int64)
        attention = np.array([e.attention_mask for e in chunk], dtype=np.int64)
        segments = np.array([e.segment_ids for e in chunk], dtype=np.int64)
        hidden = enc.forward(tensors, model.config, ids, attention, segments)
        pooled = enc.pooled_output(tensors, hidden)
        logits = np.matmul(pooled.data, model.parameters["head.weight"]) + model.parameters["head.bias"]
        out.extend(model.labels[i] for i in logits.argmax(axis=1))
    return out


def finetune_tagger(start, train, config, vocab, entity_type=DEFAULT_ENTITY):
    """Train a per-subword softmax over the 5-tag alphabet.

    Word labels ride on the first subword of each word; continuation
    subwords and specials are excluded from the loss.
    """
    tags = tag_alphabet(entity_type)
    tag_index = {t: i for i, t in enumerate(tags)}
    seq_len = min(config.max_seq_length, start.config.max_positions)
    examples = []
    aligned = []
    for sentence in train:
        for t in sentence.tags:
            if t not in tag_index:
                raise TaskError(f"tag {t!r} not in alphabet {tags}")
        encoded = tok.encode(vocab, " ".join(sentence.tokens), max_len=seq_len)
        examples.append(encoded)
        word_ids = [tag_index[t] for t in sentence.tags]
        aligned.append(tok.align_word_labels(encoded, word_ids))

    def targets_fn(idx, width):
        return np.array([aligned[i][:width] for i in idx], dtype=np.int64)

    return _finetune(start, examples, targets_fn, tags, "tagger", config, vocab, per_position=True)


def predict_tagger(model, token_lists, vocab, batch_size=32):
    """Per-word tags via first-subword argmax; truncated words fall back to O."""
    tensors = enc.parameters_to_tensors(model.parameters, requires_grad=False)
    seq_len = model.config.max_positions
    out = []
    for lo in range(0, len(token_lists), batch_size):
        batch_tokens = token_lists[lo : lo + batch_size]
        chunk = tr._pad_batch([tok.encode(vocab, " ".join(ts), max_len=seq_len) for ts in batch_tokens])
        ids = np.array([e.ids for e in chunk], dtype=np.int64)
        attention = np.array([e.attention_mask for e in chunk], dtype=np.int64)
        segments = np.array([e.segment_ids for e in chunk], dtype=np.int64)
        hidden = enc.forward(tensors, model.config, ids, attention, segments)
        logits = np.matmul(hidden.data, model.parameters["head.weight"]) + model.parameters["head.bias"]
        best = logits.argmax(axis=2)
        for row, (encoded, words) in enumerate(zip(chunk, batch_tokens)):
            tags = [OUTSIDE_TAG] * len(words)
            prev = None
            for pos, w in enumerate(encoded.word_alignment):
                if w is not None and w != prev and w < len(words):
                    tags[w] = model.labels[best[row, pos]]
                prev = w
            out.append(tags)
    return out
