"""Case-sensitive subword vocabulary and greedy longest-match encoding.

The vocabulary reserves ids 0-4 for [PAD], [UNK], [CLS], [SEP], [MASK]
and uses the "##" prefix for word-internal continuation pieces. Text is
never lowercased. Encoding produces fixed-capacity sequences with an
attention mask, segment ids and word alignment for token labeling.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

#: label used for positions that must not receive a word label
IGNORE_LABEL_ID = -100


class VocabularyError(ValueError):
    pass


@dataclass
class SubwordVocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str] = field(init=False)

    def __post_init__(self):
        for tok in SPECIAL_TOKENS:
            if tok not in self.token_to_id:
                raise VocabularyError(f"missing special token {tok}")
        if self.token_to_id[PAD] != PAD_ID or self.token_to_id[MASK] != MASK_ID:
            raise VocabularyError("special tokens must occupy reserved ids 0-4")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise VocabularyError("token ids must be a contiguous bijection")
        for tok in self.token_to_id:
            if any(ch.isspace() for ch in tok):
                raise VocabularyError(f"token contains whitespace: {tok!r}")
        self.id_to_token = [None] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            self.id_to_token[i] = tok

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    @property
    def special_ids(self):
        return frozenset(range(5))

    def save(self, path):
        # one token per line, line number = id
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls({tok: i for i, tok in enumerate(tokens)})


@dataclass
class EncodedSequence:
    ids: list[int]
    attention_mask: list[int]
    segment_ids: list[int]
    #: per position: index of the source word, or None for special/pad slots
    word_alignment: list[int | None]

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.attention_mask) == len(self.segment_ids) == len(self.word_alignment) == n):
            raise ValueError("parallel sequence fields must share one length")


def build_vocab(corpus, target_size, min_frequency=1):
    """Build a vocabulary from whitespace-split words of ``corpus`` lines.

    Layout: the 5 special tokens, every single character seen (word-initial
    and "##" continuation form), then whole words by frequency (desc) with
    lexicographic tie-break, until ``target_size`` entries exist.
    """
    word_counts = Counter()
    for line in corpus:
        word_counts.update(line.split())

    chars = sorted({ch for word in word_counts for ch in word})
    floor = len(SPECIAL_TOKENS) + 2 * len(chars)
    if target_size < floor:
        raise VocabularyError(
            f"target_size {target_size} cannot hold specials plus both forms of {len(chars)} characters (need >= {floor})"
        )

    tokens = list(SPECIAL_TOKENS)
    for ch in chars:
        tokens.append(ch)
        tokens.append("##" + ch)
    present = set(tokens)
    ranked = sorted(word_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    for word, count in ranked:
        if len(tokens) >= target_size:
            break
        if count < min_frequency or word in present:
            continue
        tokens.append(word)
        present.add(word)
    return SubwordVocabulary({tok: i for i, tok in enumerate(tokens)})


def _segment_word(vocab, word):
    """Greedy longest-match split of one word; None if no path exists."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return None
        pieces.append(match)
        start = end
    return pieces


def encode(vocab, text_a, text_b=None, max_len=512):
    """Encode one text (or a pair) as ``[CLS] A [SEP] (B [SEP])``.

    A word with no in-vocabulary segmentation becomes a single [UNK].
    Overlong inputs are truncated by dropping tail tokens before the final
    [SEP]; the result is padded with [PAD] up to ``max_len``.
    """
    if max_len < 3:
        raise ValueError(f"max_len must be at least 3, got {max_len}")

    def pieces_of(text, word_offset):
        ids, align = [], []
        for w_idx, word in enumerate(text.split(), start=word_offset):
            segmented = _segment_word(vocab, word)
            if segmented is None:
                ids.append(UNK_ID)
                align.append(w_idx)
            else:
                for piece in segmented:
                    ids.append(vocab.token_to_id[piece])
                    align.append(w_idx)
        return ids, align

    ids_a, align_a = pieces_of(text_a, 0)
    n_words_a = len(text_a.split())
    ids = [CLS_ID] + ids_a + [SEP_ID]
    align = [None] + align_a + [None]
    segments = [0] * len(ids)
    if text_b is not None:
        ids_b, align_b = pieces_of(text_b, n_words_a)
        ids += ids_b + [SEP_ID]
        align += align_b + [None]
        segments += [1] * (len(ids_b) + 1)

    if len(ids) > max_len:
        # keep CLS and the final SEP, drop the tail tokens before it
        ids = ids[: max_len - 1] + [SEP_ID]
        align = align[: max_len - 1] + [None]
        segments = segments[: max_len - 1] + [segments[-1] if len(segments) >= max_len else 0]
        segments = segments[:max_len]
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    return EncodedSequence(
        ids=ids + [PAD_ID] * pad,
        attention_mask=mask + [0] * pad,
        segment_ids=segments + [0] * pad,
        word_alignment=align + [None] * pad,
    )


def decode(vocab, ids):
    """Inverse of encode on in-vocabulary text: drop specials, glue "##"."""
    words = []
    for i in ids:
        if i < 0 or i >= len(vocab):
            raise VocabularyError(f"unknown id {i}")
        tok = vocab.id_to_token[i]
        if tok in SPECIAL_TOKENS:
            continue
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok[2:] if tok.startswith("##") else tok)
    return " ".join(words)


def align_word_labels(encoded, word_labels, ignore=IGNORE_LABEL_ID):
    """Spread word-level labels over subword positions.

    The first subword of each word carries the word's label; continuation
    subwords, specials and padding carry ``ignore``.
    """
    n_words = max((w for w in encoded.word_alignment if w is not None), default=-1) + 1
    if len(word_labels) < n_words:
        raise ValueError(f"got {len(word_labels)} labels for {n_words} encoded words")
    out = []
    prev = None
    for w in encoded.word_alignment:
        if w is None or w == prev:
            out.append(ignore)
        else:
            out.append(word_labels[w])
        prev = w
    return out
