"""Byte-pair-encoding subword segmentation.

Merges are learned over the joint source+target token stream. Symbols are
plain substrings of the original words, so concatenating the subwords of a
word reproduces it exactly. Frequency ties break toward the
lexicographically smallest pair, which makes learning deterministic.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from .corpus import DIV, EQ, RESERVED_TOKENS

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

# factor label ids; 0 doubles as padding and the reserved BEGIN label
FACTOR_PAD_ID = 0
FACTOR_BEGIN_ID = 0
FACTOR_IDS = {EQ: 1, DIV: 2}
FACTOR_VOCAB_SIZE = 3


class BpeError(ValueError):
    pass


@dataclass
class BpeModel:
    merges: list  # ordered [(left, right), ...]
    vocab: dict   # symbol -> id; includes specials
    _ranks: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(set(map(tuple, self.merges))) != len(self.merges):
            raise BpeError("duplicate merge rules")
        self._ranks = {tuple(m): r for r, m in enumerate(self.merges)}

    @property
    def vocab_size(self):
        return len(self.vocab)

    def segment_word(self, word):
        """Split one word into subword symbols by applying learned merges."""
        if word in RESERVED_TOKENS:
            return [word]
        symbols = list(word)
        if not symbols:
            return []
        while len(symbols) > 1:
            best = None
            best_rank = None
            for i in range(len(symbols) - 1):
                rank = self._ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best, best_rank = i, rank
            if best is None:
                break
            merged = symbols[best] + symbols[best + 1]
            symbols = symbols[:best] + [merged] + symbols[best + 2:]
        return symbols

    def encode_symbols(self, symbols):
        return [self.vocab.get(s, UNK_ID) for s in symbols]

    def id_to_symbol(self):
        return {i: s for s, i in self.vocab.items()}

    def to_json(self):
        return {"merges": [list(m) for m in self.merges],
                "vocab": dict(self.vocab)}

    @classmethod
    def from_json(cls, obj):
        return cls(merges=[tuple(m) for m in obj["merges"]],
                   vocab=dict(obj["vocab"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, ensure_ascii=False, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _pair_counts(word_freqs):
    counts = Counter()
    for symbols, freq in word_freqs.items():
        for i in range(len(symbols) - 1):
            counts[(symbols[i], symbols[i + 1])] += freq
    return counts


def learn_bpe(corpus, num_merges) -> BpeModel:
    """Learn BPE merges over all source and target tokens of a corpus."""
    if num_merges < 0:
        raise BpeError("num_merges must be >= 0")
    if len(corpus) == 0:
        raise BpeError("cannot learn BPE from an empty corpus")
    word_counter = Counter()
    for pair in corpus:
        for tok in pair.src:
            word_counter[tok.surface] += 1
        for tok in pair.tgt:
            word_counter[tok.surface] += 1
    for res in RESERVED_TOKENS:
        word_counter.pop(res, None)

    word_freqs = {tuple(w): c for w, c in word_counter.items()}
    merges = []
    for _ in range(num_merges):
        counts = _pair_counts(word_freqs)
        if not counts:
            break
        # highest frequency, lexicographically smallest pair on ties
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged = best[0] + best[1]
        new_freqs = {}
        for symbols, freq in word_freqs.items():
            out = []
            i = 0
            while i < len(symbols):
                if (i + 1 < len(symbols)
                        and (symbols[i], symbols[i + 1]) == best):
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            new_freqs[tuple(out)] = new_freqs.get(tuple(out), 0) + freq
        word_freqs = new_freqs

    symbols = set()
    for word in word_counter:
        symbols.update(word)
    for left, right in merges:
        symbols.add(left + right)
    vocab = {s: i for i, s in enumerate(SPECIALS)}
    for res in RESERVED_TOKENS:
        vocab[res] = len(vocab)
    for s in sorted(symbols):
        vocab[s] = len(vocab)
    return BpeModel(merges=merges, vocab=vocab)


def apply_bpe(pair, model):
    """Segment both sides of a pair.

    Returns (src_subwords, tgt_subwords, src_map, tgt_map) where each map
    gives the number of subwords per original word.
    """
    src_subwords, src_map = [], []
    for tok in pair.src:
        pieces = model.segment_word(tok.surface)
        src_subwords.extend(pieces)
        src_map.append(len(pieces))
    tgt_subwords, tgt_map = [], []
    for tok in pair.tgt:
        pieces = model.segment_word(tok.surface)
        tgt_subwords.extend(pieces)
        tgt_map.append(len(pieces))
    return src_subwords, tgt_subwords, src_map, tgt_map


def project_factors_to_subwords(word_factors, word_to_subword_map):
    """Copy each word's EQ/DIV tag onto all of its subwords."""
    if len(word_factors) != len(word_to_subword_map):
        raise BpeError("factor sequence and subword map length mismatch")
    out = []
    for factor, n in zip(word_factors, word_to_subword_map):
        out.extend([factor] * n)
    return out


def encode_corpus(corpus, model):
    """Encode a corpus into id sequences ready for batching.

    Returns a list of dicts with keys src_ids, src_factor_ids, tgt_ids,
    tgt_factor_ids (all plain int lists, no BOS/EOS added).
    """
    encoded = []
    for pair in corpus:
        src_sub, tgt_sub, src_map, tgt_map = apply_bpe(pair, model)
        src_fac = project_factors_to_subwords(pair.src_factors, src_map)
        tgt_fac = project_factors_to_subwords(pair.tgt_factors, tgt_map)
        encoded.append({
            "src_ids": model.encode_symbols(src_sub),
            "src_factor_ids": [FACTOR_IDS[f] for f in src_fac],
            "tgt_ids": model.encode_symbols(tgt_sub),
            "tgt_factor_ids": [FACTOR_IDS[f] for f in tgt_fac],
        })
    return encoded
