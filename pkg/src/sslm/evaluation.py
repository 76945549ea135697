"""Perplexity, the confusion-matrix metric suite, entity F1 and kappa.

Perplexity of a bidirectional MLM is computed as pseudo-perplexity:
mask one token at a time, take the model's probability of the true
token, and exponentiate the mean negative log probability.

Macro and weighted F1 follow the harmonic-mean-of-averages convention
(macro-F1 = harmonic mean of macro-precision and macro-recall); the
per-class-mean variants are reported alongside under distinct fields.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import tokenizer as tok


class DegenerateMarginalsError(ValueError):
    """Chance agreement is 1; kappa is undefined."""


@dataclass
class PerplexityResult:
    n_tokens: int
    total_log_prob: float
    perplexity: float

    def to_dict(self):
        return {"n_tokens": self.n_tokens, "total_log_prob": self.total_log_prob, "perplexity": self.perplexity}


def mlm_predictor(checkpoint):
    """Wrap a checkpoint as ``f(ids, attention_mask, segment_ids) -> logits``."""
    tensors = enc.parameters_to_tensors(checkpoint.parameters, requires_grad=False)

    def predict(ids, attention_mask, segment_ids):
        hidden = enc.forward(tensors, checkpoint.config, ids, attention_mask, segment_ids)
        return enc.mlm_logits(tensors, checkpoint.config, hidden).data

    return predict


def pseudo_perplexity(predict, sentences, vocab, max_len=512, batch_size=32):
    """PP = exp(-(1/N) * sum ln p_i) with one forward pass per real token.

    For every real (non-special) token position the sentence is re-encoded
    with that position replaced by [MASK] and ``predict`` scores the true
    token. Sentences that encode to zero real tokens are skipped; if all
    are skipped the aggregate is undefined and an error is raised.
    """
    if isinstance(predict, enc.Checkpoint):
        predict = mlm_predictor(predict)

    jobs = []  # (masked ids, attention, segments, position, true id)
    for sentence in sentences:
        encoded = tok.encode(vocab, sentence, max_len=max_len)
        real = [i for i, w in enumerate(encoded.word_alignment) if w is not None]
        for pos in real:
            ids = list(encoded.ids)
            true_id = ids[pos]
            ids[pos] = tok.MASK_ID
            jobs.append((ids, encoded.attention_mask, encoded.segment_ids, pos, true_id))
    if not jobs:
        raise ValueError("no sentence produced any scorable token")

    total_log_prob = 0.0
    for lo in range(0, len(jobs), batch_size):
        chunk = jobs[lo : lo + batch_size]
        width = max(sum(a) for _, a, _, _, _ in chunk)
        ids = np.array([j[0][:width] for j in chunk], dtype=np.int64)
        attention = np.array([j[1][:width] for j in chunk], dtype=np.int64)
        segments = np.array([j[2][:width] for j in chunk], dtype=np.int64)
        logits = np.asarray(predict(ids, attention, segments), dtype=np.float64)
        for row, (_, _, _, pos, true_id) in enumerate(chunk):
            scores = logits[row, pos]
            scores = scores - scores.max()
            log_prob = scores[true_id] - math.log(np.exp(scores).sum())
            total_log_prob += float(log_prob)
    n = len(jobs)
    return PerplexityResult(n_tokens=n, total_log_prob=total_log_prob, perplexity=math.exp(-total_log_prob / n))


# -- confusion-matrix metrics ------------------------------------------


@dataclass
class ConfusionMatrix:
    classes: list[str]
    counts: np.ndarray  # counts[gold][pred]

    @classmethod
    def from_labels(cls, gold, pred, classes=None):
        if len(gold) != len(pred):
            raise ValueError(f"gold has {len(gold)} labels, pred has {len(pred)}")
        if not gold:
            raise ValueError("cannot evaluate an empty label list")
        if classes is None:
            classes = sorted(set(gold) | set(pred))
        index = {c: i for i, c in enumerate(classes)}
        unknown = (set(gold) | set(pred)) - set(classes)
        if unknown:
            raise ValueError(f"labels outside the class list: {sorted(unknown)}")
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for g, p in zip(gold, pred):
            counts[index[g], index[p]] += 1
        return cls(classes=list(classes), counts=counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def tp(self, i):
        return int(self.counts[i, i])

    def fp(self, i):
        return int(self.counts[:, i].sum() - self.counts[i, i])

    def fn(self, i):
        return int(self.counts[i, :].sum() - self.counts[i, i])

    def tn(self, i):
        return self.total - self.tp(i) - self.fp(i) - self.fn(i)

    def support(self, i):
        return int(self.counts[i, :].sum())


def _prf(tp, fp, fn, flags, cls_name):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if tp + fp == 0:
        flags.append(f"precision({cls_name}): 0/0 reported as 0")
    if tp + fn == 0:
        flags.append(f"recall({cls_name}): 0/0 reported as 0")
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _harmonic_f1(p, r):
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class ClassificationReport:
    classes: list[str]
    per_class: dict[str, dict]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    #: per-class-mean alternatives to the harmonic-of-averages F1 fields
    macro_f1_class_mean: float
    weighted_f1_class_mean: float
    class_weights: dict[str, float]
    n_classes: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "macro_avg": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
                "f1_class_mean": self.macro_f1_class_mean,
            },
            "weighted_avg": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1": self.weighted_f1,
                "f1_class_mean": self.weighted_f1_class_mean,
            },
            "flags": self.flags,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def classification_report(gold, pred, classes=None):
    """Full single-label multi-class report from a confusion matrix.

    Per-class precision/recall/F1 with the 0/0 -> 0 convention (flagged),
    overall accuracy, macro averages (arithmetic mean of per-class
    precision and recall; macro-F1 as their harmonic mean) and
    support-weighted averages built the same way.
    """
    cm = ConfusionMatrix.from_labels(gold, pred, classes)
    flags = []
    per_class = {}
    precisions, recalls, f1s, weights = [], [], [], []
    total = cm.total
    for i, cls_name in enumerate(cm.classes):
        p, r, f1 = _prf(cm.tp(i), cm.fp(i), cm.fn(i), flags, cls_name)
        support = cm.support(i)
        per_class[cls_name] = {"precision": p, "recall": r, "f1": f1, "support": support}
        precisions.append(p)
        recalls.append(r)
        f1s.append(f1)
        weights.append(support / total)

    n = len(cm.classes)
    accuracy = float(np.trace(cm.counts)) / total
    macro_p = sum(precisions) / n
    macro_r = sum(recalls) / n
    weighted_p = sum(w * p for w, p in zip(weights, precisions))
    weighted_r = sum(w * r for w, r in zip(weights, recalls))
    return ClassificationReport(
        classes=list(cm.classes),
        per_class=per_class,
        accuracy=accuracy,
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=_harmonic_f1(macro_p, macro_r),
        weighted_precision=weighted_p,
        weighted_recall=weighted_r,
        weighted_f1=_harmonic_f1(weighted_p, weighted_r),
        macro_f1_class_mean=sum(f1s) / n,
        weighted_f1_class_mean=sum(w * f for w, f in zip(weights, f1s)),
        class_weights={c: w for c, w in zip(cm.classes, weights)},
        n_classes=n,
        flags=flags,
    )


def entity_prf(gold_spans, pred_spans):
    """Strict entity-level scores over per-sentence span sets.

    A prediction is a true positive iff an identical (start, end, type)
    span exists in the gold annotation of the same sentence.
    """
    if len(gold_spans) != len(pred_spans):
        raise ValueError("gold and pred must cover the same sentences")
    tp = fp = fn = 0
    for gold, pred in zip(gold_spans, pred_spans):
        gold_set, pred_set = set(gold), set(pred)
        tp += len(gold_set & pred_set)
        fp += len(pred_set - gold_set)
        fn += len(gold_set - pred_set)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, _harmonic_f1(precision, recall)


def cohen_kappa(ann_a, ann_b):
    """Chance-corrected agreement: (p_o - p_e) / (1 - p_e).

    ``p_e`` is the expected agreement under independence of the two
    annotators' label marginals.
    """
    if len(ann_a) != len(ann_b):
        raise ValueError(f"annotation lengths differ: {len(ann_a)} vs {len(ann_b)}")
    if not ann_a:
        raise ValueError("cannot compute kappa on empty annotations")
    n = len(ann_a)
    p_o = sum(a == b for a, b in zip(ann_a, ann_b)) / n
    labels = set(ann_a) | set(ann_b)
    p_e = sum((list(ann_a).count(c) / n) * (list(ann_b).count(c) / n) for c in labels)
    if p_e >= 1.0:
        raise DegenerateMarginalsError("both annotators use a single identical label; kappa undefined")
    return (p_o - p_e) / (1.0 - p_e)
